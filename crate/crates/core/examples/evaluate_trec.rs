//! Brute-force search, TREC run files and nDCG@10, with the keyword-overlap
//! scorer as a perfect reference.
use effirlab::encoder::{EncoderConfig, EncoderModel};
use effirlab::evalbench::{brute_force_search, ndcg_at_k, ndcg_per_query, search_with_scorer};
use effirlab::retrieval::SyntheticTask;

fn main() -> effirlab::Result<()> {
    let task = SyntheticTask { corpus_size: 200, train_queries: 10, eval_queries: 20, ..Default::default() };
    let data = task.generate()?;
    let corpus = &data.eval;

    let oracle = search_with_scorer(&task.scorer(), corpus, 10)?;
    println!("keyword overlap nDCG@10 {:.4}", ndcg_at_k(&oracle, &corpus.qrels, 10)?);

    let model = EncoderModel::<f32>::new(EncoderConfig::default(), 0)?;
    let run = brute_force_search(&model, corpus, 10)?;
    println!("random encoder nDCG@10 {:.4}", ndcg_at_k(&run, &corpus.qrels, 10)?);
    for (q, v) in ndcg_per_query(&run, &corpus.qrels, 10)?.iter().take(3) {
        println!("  {q}: {v:.4}");
    }
    for line in run.to_trec("dense").lines().take(5) {
        println!("{line}");
    }

    let dir = std::env::temp_dir().join("effirlab-eval-example");
    corpus.save(&dir)?;
    run.write_trec(&dir.join("run.trec"), "dense")?;
    println!("corpus and run written to {}", dir.display());
    Ok(())
}
