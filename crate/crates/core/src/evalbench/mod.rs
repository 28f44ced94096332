//! Retrieval evaluation, throughput measurement and diagnostics.

mod bench;
mod corpus;
mod experiment;
mod heatmap;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, TrainScope};
use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tape};

pub use bench::{throughput_bench, time_median, BenchReport, SideReport, Workload};
pub use corpus::{EvalCorpus, Qrels, CORPUS_FILE, QRELS_FILE, QUERIES_FILE};
pub use experiment::{redundancy_experiment, RedundancyConfig, ExperimentReport, VariantRow};
pub use heatmap::{heatmap_svg, HeatMap};

/// Relevance scorer over raw token sequences.
pub trait Scorer: Sync {
    fn score(&self, query: &[u32], doc: &[u32]) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub k: usize,
    /// `(query id, ranked hits)` in corpus query order.
    pub queries: Vec<(String, Vec<Hit>)>,
}

impl RunResult {
    pub fn hits(&self, qid: &str) -> Option<&[Hit]> {
        self.queries.iter().find(|(q, _)| q == qid).map(|(_, h)| h.as_slice())
    }

    /// TREC run layout: `qid Q0 docid rank score tag`, ranks from 1.
    pub fn to_trec(&self, tag: &str) -> String {
        let mut s = String::new();
        for (q, hits) in &self.queries {
            for (i, h) in hits.iter().enumerate() {
                s.push_str(&format!("{q} Q0 {} {} {:.9} {tag}\n", h.doc, i + 1, h.score));
            }
        }
        s
    }

    pub fn write_trec(&self, path: &Path, tag: &str) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_trec(tag).as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Sort by score descending, doc id ascending, and keep `k`.
fn rank(mut scored: Vec<(&str, f64)>, k: usize) -> Vec<Hit> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    scored.truncate(k);
    scored.into_iter().map(|(d, s)| Hit { doc: d.to_string(), score: s }).collect()
}

/// Dot product of two embeddings, accumulated left to right in f64.
pub fn similarity(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Embed every sequence, in parallel over sequences.
pub fn encode_many<T: Real>(model: &EncoderModel<T>, seqs: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
    seqs.par_iter()
        .map(|s| Ok(model.encode(s)?.into_iter().map(|x| x.as_f64() as f32).collect()))
        .collect()
}

/// Exact top-`k` by embedding similarity; ties go to the smaller doc id.
pub fn brute_force_search<T: Real>(model: &EncoderModel<T>, corpus: &EvalCorpus, k: usize) -> Result<RunResult> {
    ensure!(k >= 1, "k must be ≥ 1");
    ensure!(!corpus.docs.is_empty(), "cannot search an empty corpus");
    let docs = encode_many(model, &corpus.docs.iter().map(|(_, d)| d.as_slice()).collect::<Vec<_>>())?;
    let queries = encode_many(model, &corpus.queries.iter().map(|(_, q)| q.as_slice()).collect::<Vec<_>>())?;
    let out = corpus
        .queries
        .par_iter()
        .zip(&queries)
        .map(|((qid, _), qe)| {
            let scored = corpus.docs.iter().zip(&docs).map(|((id, _), de)| (id.as_str(), similarity(qe, de))).collect();
            (qid.clone(), rank(scored, k))
        })
        .collect();
    Ok(RunResult { k, queries: out })
}

/// Top-`k` under an arbitrary scorer, same tie rule as [`brute_force_search`].
pub fn search_with_scorer<S: Scorer>(scorer: &S, corpus: &EvalCorpus, k: usize) -> Result<RunResult> {
    ensure!(k >= 1, "k must be ≥ 1");
    ensure!(!corpus.docs.is_empty(), "cannot search an empty corpus");
    let out = corpus
        .queries
        .par_iter()
        .map(|(qid, q)| {
            let scored = corpus.docs.iter().map(|(id, d)| (id.as_str(), scorer.score(q, d))).collect();
            (qid.clone(), rank(scored, k))
        })
        .collect();
    Ok(RunResult { k, queries: out })
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// Mean nDCG@k with `2^rel − 1` gains. Queries without any positive grade
/// are left out of the mean.
pub fn ndcg_at_k(run: &RunResult, qrels: &Qrels, k: usize) -> Result<f64> {
    let per = ndcg_per_query(run, qrels, k)?;
    ensure!(!per.is_empty(), "no query in the run has relevance judgments");
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

pub fn ndcg_per_query(run: &RunResult, qrels: &Qrels, k: usize) -> Result<BTreeMap<String, f64>> {
    ensure!(k >= 1, "k must be ≥ 1");
    let mut out = BTreeMap::new();
    for (qid, hits) in &run.queries {
        let Some(rels) = qrels.get(qid) else { continue };
        let mut ideal: Vec<u32> = rels.values().copied().filter(|&g| g > 0).collect();
        if ideal.is_empty() {
            continue;
        }
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg = dcg(ideal.into_iter().take(k));
        let got = dcg(hits.iter().take(k).map(|h| rels.get(&h.doc).copied().unwrap_or(0)));
        out.insert(qid.clone(), got / idcg);
    }
    Ok(out)
}

/// Mean pairwise cosine between the (unit-norm) embeddings.
pub fn isotropy(embeddings: &[Vec<f32>]) -> Result<f64> {
    let n = embeddings.len();
    ensure!(n >= 2, "isotropy needs at least two embeddings");
    let d = embeddings[0].len();
    let mut sum = vec![0f64; d];
    let mut self_dots = 0.0;
    for e in embeddings {
        ensure!(e.len() == d, "embedding dimensions differ");
        for (s, &x) in sum.iter_mut().zip(e) {
            *s += x as f64;
        }
        self_dots += e.iter().map(|&x| x as f64 * x as f64).sum::<f64>();
    }
    let total: f64 = sum.iter().map(|s| s * s).sum();
    Ok((total - self_dots) / (n * (n - 1)) as f64)
}

/// Cosine between the pooled query and each pooled doc at every block
/// boundary: `n_layers + 1` values per doc, embedding layer first.
pub fn layerwise_similarity<T: Real>(model: &EncoderModel<T>, query: &[u32], docs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    ensure!(!docs.is_empty(), "layerwise similarity needs at least one document");
    let trace = |ids: &[u32]| -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let states = model.hidden_states(&mut tape, TrainScope::Frozen, ids)?;
        states
            .iter()
            .step_by(2)
            .map(|&s| {
                let p = model.pool(&mut tape, s)?;
                Ok(tape.value(p).data().iter().map(|x| x.as_f64()).collect())
            })
            .collect()
    };
    let q = trace(query)?;
    docs.par_iter()
        .map(|d| {
            let t = trace(d)?;
            Ok(q.iter().zip(&t).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        })
        .collect()
}
