//! Query/document cosine similarity at every sublayer boundary, plus the
//! isotropy of the encoded corpus.
use effirlab::encoder::{EncoderConfig, EncoderModel};
use effirlab::evalbench::{encode_many, isotropy, layerwise_similarity};
use effirlab::retrieval::SyntheticTask;

fn main() -> effirlab::Result<()> {
    let task = SyntheticTask { corpus_size: 100, train_queries: 5, eval_queries: 5, ..Default::default() };
    let data = task.generate()?;
    let model = EncoderModel::<f32>::new(EncoderConfig::default(), 0)?;
    let t = &data.train[0];
    let docs = vec![t.positive.clone(), t.negatives[0].clone()];
    let sims = layerwise_similarity(&model, &t.query, &docs)?;
    println!("layer  positive  negative");
    for (l, _) in sims[0].iter().enumerate() {
        println!("{l:>5}  {:>8.4}  {:>8.4}", sims[0][l], sims[1][l]);
    }
    let seqs: Vec<&[u32]> = data.eval.docs.iter().map(|(_, d)| d.as_slice()).collect();
    println!("corpus isotropy {:.4}", isotropy(&encode_many(&model, &seqs)?)?);
    Ok(())
}
