//! Contrastive training with in-batch negatives and score distillation on
//! the synthetic keyword task.
use effirlab::encoder::{EncoderConfig, EncoderModel};
use effirlab::evalbench::{brute_force_search, ndcg_at_k};
use effirlab::retrieval::{train, SyntheticTask, TrainConfig};

fn main() -> effirlab::Result<()> {
    let task = SyntheticTask { corpus_size: 1000, train_queries: 1000, eval_queries: 100, ..Default::default() };
    let data = task.generate()?;
    let cfg = EncoderConfig { n_layers: 4, ..Default::default() };
    let mut model = EncoderModel::<f32>::new(cfg, 0)?;

    let ndcg = |m: &EncoderModel<f32>| -> effirlab::Result<f64> {
        let run = brute_force_search(m, &data.eval, 10)?;
        ndcg_at_k(&run, &data.eval.qrels, 10)
    };
    println!("untrained nDCG@10 {:.4}", ndcg(&model)?);

    let tc = TrainConfig { epochs: 3, ..TrainConfig::desk_base() };
    let log = train(&mut model, &data.train, &tc)?;
    if let Some((head, tail)) = log.head_tail_means(10) {
        println!("loss {head:.3} -> {tail:.3} over {} steps", log.steps.len());
    }
    println!("trained nDCG@10 {:.4}", ndcg(&model)?);
    Ok(())
}
