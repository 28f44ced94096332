//! Learn neuron gates on a small task, prune 30% globally and shrink.
use effirlab::encoder::{EncoderConfig, EncoderModel};
use effirlab::retrieval::SyntheticTask;
use effirlab::slimming::{apply_mask, global_prune, predicted_params, shrink, slim_train, SlimConfig, SlimState};

fn main() -> effirlab::Result<()> {
    let task = SyntheticTask { corpus_size: 300, train_queries: 200, eval_queries: 20, ..Default::default() };
    let data = task.generate()?;
    let cfg = EncoderConfig { n_layers: 4, ..Default::default() };
    let mut model = EncoderModel::<f32>::new(cfg, 0)?;
    let before = model.count_params();

    let sc = SlimConfig { steps: 60, lambda: 1e-2, lr: 1e-2, ..Default::default() };
    let log = slim_train(&mut model, &data.train, &sc)?;
    for s in log.steps.iter().step_by(15) {
        println!("step {:>3}  infonce {:.4}  surrogate {:.2}", s.step, s.infonce, s.surrogate);
    }
    let mask = global_prune(&SlimState::of(&model), sc.prune_ratio)?;
    println!("pruning {} of {} neurons", mask.zeros(), mask.total());
    for l in 0..mask.layers.len() {
        println!("  layer {l}: {} removed", mask.zeros_in(l));
    }
    apply_mask(&mut model, &mask)?;
    let small = shrink(&model, &mask)?;
    println!("params {before} -> {} (predicted {})", small.count_params(), predicted_params(&model, &mask));
    Ok(())
}
