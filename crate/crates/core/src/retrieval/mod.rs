//! Contrastive retrieval training and the synthetic keyword task.

mod dataset;
mod loss;
mod train;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::evalbench::{EvalCorpus, Scorer};

pub use dataset::{read_triplets, write_triplets, TRAIN_FILE};
pub use loss::{distill_kl, infonce_from_logits, infonce_loss, softmax_t};
pub use train::{batch_objective, train, BatchObjective, LoraSettings, StepLoss, TrainConfig, TrainLog};

pub const DEFAULT_NEGATIVES: usize = 7;

/// One training example: a query, its positive and explicit negatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub query: Vec<u32>,
    pub positive: Vec<u32>,
    pub negatives: Vec<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_scores: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub queries: Vec<Vec<u32>>,
    pub positives: Vec<Vec<u32>>,
    /// `B × K` sequences, grouped per query.
    pub negatives: Vec<Vec<u32>>,
    pub k: usize,
    /// `B × (1 + K)` scores for `[positive, negatives…]`.
    pub teacher_scores: Option<Vec<Vec<f32>>>,
}

impl TripletBatch {
    pub fn from_triplets(items: &[Triplet]) -> Result<Self> {
        ensure!(!items.is_empty(), "empty batch");
        let k = items[0].negatives.len();
        ensure!(
            items.iter().all(|t| t.negatives.len() == k),
            "all triplets in a batch need the same number of negatives"
        );
        let teacher = if items.iter().all(|t| t.teacher_scores.is_some()) {
            let rows: Vec<Vec<f32>> = items.iter().map(|t| t.teacher_scores.clone().unwrap()).collect();
            ensure!(
                rows.iter().all(|r| r.len() == 1 + k),
                "teacher scores must cover the positive and {k} negatives"
            );
            Some(rows)
        } else {
            None
        };
        Ok(Self {
            queries: items.iter().map(|t| t.query.clone()).collect(),
            positives: items.iter().map(|t| t.positive.clone()).collect(),
            negatives: items.iter().flat_map(|t| t.negatives.iter().cloned()).collect(),
            k,
            teacher_scores: teacher,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceRule {
    /// A document is relevant to a query iff it contains the query's keyword.
    SharedKeyword,
}

/// Token ids `1..=n_keywords` are keywords; the rest of the vocabulary is
/// filler that carries no relevance signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub vocab_size: usize,
    pub n_keywords: usize,
    pub corpus_size: usize,
    pub keywords_per_doc: usize,
    pub query_len: usize,
    pub doc_len: usize,
    pub train_queries: usize,
    pub eval_queries: usize,
    pub negatives: usize,
    pub teacher: bool,
    pub relevance: RelevanceRule,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            n_keywords: 200,
            corpus_size: 2000,
            keywords_per_doc: 2,
            query_len: 4,
            doc_len: 16,
            train_queries: 2000,
            eval_queries: 200,
            negatives: DEFAULT_NEGATIVES,
            teacher: true,
            relevance: RelevanceRule::SharedKeyword,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<Triplet>,
    pub eval: EvalCorpus,
}

/// Counts distinct keyword tokens shared by query and document.
#[derive(Clone, Copy, Debug)]
pub struct KeywordOverlap {
    pub n_keywords: usize,
}

impl KeywordOverlap {
    fn keywords(&self, ids: &[u32]) -> BTreeSet<u32> {
        ids.iter().copied().filter(|&t| t >= 1 && t as usize <= self.n_keywords).collect()
    }
}

impl Scorer for KeywordOverlap {
    fn score(&self, query: &[u32], doc: &[u32]) -> f64 {
        let q = self.keywords(query);
        self.keywords(doc).intersection(&q).count() as f64
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.corpus_size >= 2, "synthetic corpus needs at least 2 documents");
        ensure!(self.n_keywords >= 2, "need at least 2 keywords");
        ensure!(
            self.vocab_size > self.n_keywords + 1,
            "vocab {} leaves no filler tokens after {} keywords",
            self.vocab_size,
            self.n_keywords
        );
        ensure!(
            self.keywords_per_doc >= 1 && self.keywords_per_doc <= self.n_keywords,
            "keywords_per_doc must be in 1..={}",
            self.n_keywords
        );
        ensure!(self.doc_len >= self.keywords_per_doc, "doc_len shorter than keywords_per_doc");
        ensure!(self.query_len >= 1, "query_len must be ≥ 1");
        Ok(())
    }

    pub fn scorer(&self) -> KeywordOverlap {
        KeywordOverlap { n_keywords: self.n_keywords }
    }

    pub fn generate(&self) -> Result<SyntheticDataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let kw_hi = self.n_keywords as u32;
        let filler = |rng: &mut ChaCha8Rng| rng.random_range(kw_hi + 1..self.vocab_size as u32);

        let mut docs = Vec::with_capacity(self.corpus_size);
        let mut doc_keywords = Vec::with_capacity(self.corpus_size);
        let mut by_keyword: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let all_kw: Vec<u32> = (1..=kw_hi).collect();
        for d in 0..self.corpus_size {
            let kws: Vec<u32> = all_kw.choose_multiple(&mut rng, self.keywords_per_doc).copied().collect();
            let mut toks: Vec<u32> = kws.clone();
            toks.extend((kws.len()..self.doc_len).map(|_| filler(&mut rng)));
            toks.shuffle(&mut rng);
            for &k in &kws {
                by_keyword.entry(k).or_default().push(d);
            }
            docs.push(toks);
            doc_keywords.push(kws);
        }
        let worst = by_keyword.values().map(Vec::len).max().unwrap_or(0);
        ensure!(
            self.corpus_size - worst >= self.negatives,
            "corpus of {} docs cannot supply {} keyword-free negatives (a keyword occurs in {worst} docs)",
            self.corpus_size,
            self.negatives
        );

        let make_query = |rng: &mut ChaCha8Rng, kw: u32| {
            let mut q = vec![kw];
            q.extend((1..self.query_len).map(|_| filler(rng)));
            q.shuffle(rng);
            q
        };
        let scorer = self.scorer();
        let mut train = Vec::with_capacity(self.train_queries);
        for _ in 0..self.train_queries {
            let p = rng.random_range(0..self.corpus_size);
            let kw = *doc_keywords[p].choose(&mut rng).expect("doc has keywords");
            let query = make_query(&mut rng, kw);
            let mut negatives = Vec::with_capacity(self.negatives);
            while negatives.len() < self.negatives {
                let n = rng.random_range(0..self.corpus_size);
                if !doc_keywords[n].contains(&kw) {
                    negatives.push(docs[n].clone());
                }
            }
            let positive = docs[p].clone();
            let teacher_scores = self.teacher.then(|| {
                std::iter::once(&positive)
                    .chain(&negatives)
                    .map(|d| scorer.score(&query, d) as f32)
                    .collect()
            });
            train.push(Triplet { query, positive, negatives, teacher_scores });
        }

        let mut eval = EvalCorpus {
            docs: docs.iter().enumerate().map(|(i, d)| (doc_id(i), d.clone())).collect(),
            ..Default::default()
        };
        for qi in 0..self.eval_queries {
            let p = rng.random_range(0..self.corpus_size);
            let kw = *doc_keywords[p].choose(&mut rng).expect("doc has keywords");
            let id = format!("q{qi:04}");
            eval.queries.push((id.clone(), make_query(&mut rng, kw)));
            eval.qrels.insert(id, by_keyword[&kw].iter().map(|&d| (doc_id(d), 1)).collect());
        }
        Ok(SyntheticDataset { train, eval })
    }
}

fn doc_id(i: usize) -> String {
    format!("d{i:05}")
}

impl SyntheticTask {
    /// Corpus-like sequences of `len` tokens for importance calibration,
    /// keeping the task's keyword density.
    pub fn calibration_sequences(&self, samples: usize, len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
        self.validate()?;
        ensure!(len >= 1, "calibration length must be ≥ 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kw = ((len * self.keywords_per_doc) as f64 / self.doc_len as f64).round().clamp(1.0, len as f64) as usize;
        let all_kw: Vec<u32> = (1..=self.n_keywords as u32).collect();
        Ok((0..samples)
            .map(|_| {
                let mut toks: Vec<u32> = all_kw.choose_multiple(&mut rng, kw.min(self.n_keywords)).copied().collect();
                while toks.len() < len {
                    toks.push(rng.random_range(self.n_keywords as u32 + 1..self.vocab_size as u32));
                }
                toks.shuffle(&mut rng);
                toks
            })
            .collect())
    }
}

pub fn generate_synthetic(task: &SyntheticTask) -> Result<SyntheticDataset> {
    task.generate()
}
