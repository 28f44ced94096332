//! Finite-difference check of every tape primitive and of the full
//! encoder + InfoNCE objective.
use effirlab::encoder::{EncoderConfig, EncoderModel, TrainScope};
use effirlab::retrieval::{batch_objective, SyntheticTask, TripletBatch};
use effirlab::verify::{check_ops, param_grad_check};

fn main() -> effirlab::Result<()> {
    for c in check_ops(20, 0, 1e-5)? {
        println!("{:<18} {:>3} points  max rel err {:.2e}", c.op, c.points, c.max_rel_err);
    }

    let cfg = EncoderConfig { vocab_size: 64, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_seq_len: 16, ..Default::default() };
    let model = EncoderModel::<f64>::new(cfg, 1)?;
    let task = SyntheticTask { vocab_size: 64, n_keywords: 10, corpus_size: 40, doc_len: 6, query_len: 3, train_queries: 4, eval_queries: 2, negatives: 2, ..Default::default() };
    let data = task.generate()?;
    let batch = TripletBatch::from_triplets(&data.train[..2])?;
    let r = param_grad_check(
        &model,
        TrainScope::Dense,
        |m, t, s| Ok(batch_objective(m, t, s, &batch, 0.5, true, 1.0)?.total),
        1e-5,
        10,
    )?;
    println!("encoder+infonce: {} coords, max rel err {:.2e} at {}", r.coords, r.max_rel_err, r.worst);
    Ok(())
}
