//! Score sublayer importance on a calibration set and drop the least
//! important MLPs.
use effirlab::encoder::{EncoderConfig, EncoderModel, Group};
use effirlab::redundancy::{apply_drop, plan_for_mode, score_sublayers, CalibrationSet, DropMode, DropOrder};
use effirlab::retrieval::SyntheticTask;

fn main() -> effirlab::Result<()> {
    let model = EncoderModel::<f32>::new(EncoderConfig::default(), 3)?;
    let calib = CalibrationSet::from_task(&SyntheticTask::default(), 64, 32, 0)?;
    let report = score_sublayers(&model, &calib)?;
    for l in 0..report.n_layers() {
        println!("layer {l}  attn {:.5}  mlp {:.5}", report.attn[l], report.mlp[l]);
    }
    print!("{}", DropOrder::from_report(&report).to_csv());

    // keep 6 of 8 MLPs
    let plan = plan_for_mode(&report, DropMode::MlpOnly, model.n_layers(), 6)?;
    let dropped = apply_drop(&model, &plan)?;
    let c = &model.config;
    println!(
        "dropped MLPs {:?}: {} -> {} params (each costs 3dn + d = {})",
        plan.dropped(Group::Mlp, &report.present_mlp),
        model.count_params(),
        dropped.count_params(),
        3 * c.d_model * c.d_ff + c.d_model
    );
    Ok(())
}
