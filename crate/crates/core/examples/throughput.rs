//! Single-thread encoding throughput of a half-MLP model against the full
//! desk model.
use effirlab::encoder::{EncoderConfig, EncoderModel, Group};
use effirlab::evalbench::{throughput_bench, Workload};

fn main() -> effirlab::Result<()> {
    let full = EncoderModel::<f32>::new(EncoderConfig::default(), 0)?;
    let mut half = full.clone();
    for l in (1..full.n_layers()).step_by(2) {
        half.remove_sublayer(Group::Mlp, l);
    }
    let report = throughput_bench(&half, "half-mlp", Some(("full", &full)), &Workload::default())?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
