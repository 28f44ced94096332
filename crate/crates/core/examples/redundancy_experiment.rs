//! Drop-kA / Drop-kM grid on a freshly trained desk model.
//!
//! `cargo run --release --example redundancy_experiment -- [seed] [--refinetune]`
use effirlab::encoder::{EncoderConfig, EncoderModel};
use effirlab::evalbench::{redundancy_experiment, HeatMap, RedundancyConfig};
use effirlab::redundancy::{CalibrationSet, DropMode};
use effirlab::retrieval::{train, SyntheticTask, TrainConfig};

fn main() -> effirlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed = args.first().and_then(|s| s.parse().ok()).unwrap_or(0);
    let refinetune = args.iter().any(|a| a == "--refinetune");

    let task = SyntheticTask { seed, ..Default::default() };
    let data = task.generate()?;
    let mut model = EncoderModel::<f32>::new(EncoderConfig::default(), seed)?;
    train(&mut model, &data.train, &TrainConfig { seed, ..TrainConfig::desk_base() })?;

    let calib = CalibrationSet::from_task(&task, 256, 64, seed)?;
    let cfg = RedundancyConfig {
        modes: vec![DropMode::AttnOnly, DropMode::MlpOnly, DropMode::Block],
        refinetune: refinetune.then(|| TrainConfig { seed, ..TrainConfig::desk_retrain() }),
        ..Default::default()
    };
    let rep = redundancy_experiment(&model, &data.train, &data.eval, &calib, &cfg)?;
    print!("{}", rep.to_table());
    print!("{}", HeatMap::from_report(&rep.importance).to_csv());
    Ok(())
}
