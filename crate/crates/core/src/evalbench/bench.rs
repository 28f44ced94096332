use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{ensure, Result};
use crate::tensor::Real;

/// Fixed-shape encoding workload: a short query-side batch and a long
/// doc-side batch of random tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    pub query_len: usize,
    pub doc_len: usize,
    pub batch_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for Workload {
    fn default() -> Self {
        Self { query_len: 8, doc_len: 48, batch_size: 16, repetitions: 20, warmup: 3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideReport {
    pub seq_len: usize,
    pub median_secs: f64,
    pub tokens_per_sec: f64,
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub params: usize,
    pub baseline: Option<String>,
    pub baseline_params: Option<usize>,
    pub query: SideReport,
    pub doc: SideReport,
    pub batch_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub threads: usize,
}

/// Median wall-clock seconds of `f` over `reps` timed calls after `warmup`
/// untimed ones.
pub fn time_median(reps: usize, warmup: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let mut t: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed().as_secs_f64()
        })
        .collect();
    median(&mut t)
}

fn median(t: &mut [f64]) -> f64 {
    t.sort_by(f64::total_cmp);
    let n = t.len();
    if n % 2 == 1 {
        t[n / 2]
    } else {
        0.5 * (t[n / 2 - 1] + t[n / 2])
    }
}

fn encode_batch<T: Real>(model: &EncoderModel<T>, batch: &[Vec<u32>]) {
    for s in batch {
        std::hint::black_box(model.encode(s).expect("workload fits the model"));
    }
}

/// Time query-side and doc-side encoding on the calling thread. With a
/// baseline the two models alternate within every repetition so drift in
/// machine load hits both equally.
pub fn throughput_bench<T: Real>(
    model: &EncoderModel<T>,
    name: &str,
    baseline: Option<(&str, &EncoderModel<T>)>,
    workload: &Workload,
) -> Result<BenchReport> {
    ensure!(workload.warmup >= 1, "benchmark needs at least one warm-up repetition");
    ensure!(workload.repetitions >= 1 && workload.batch_size >= 1, "empty benchmark workload");
    let max = model.config.max_seq_len.min(baseline.map_or(usize::MAX, |(_, b)| b.config.max_seq_len));
    ensure!(
        workload.query_len.max(workload.doc_len) <= max,
        "workload sequence length exceeds max_seq_len {max}"
    );
    let vocab = model.config.vocab_size.min(baseline.map_or(usize::MAX, |(_, b)| b.config.vocab_size)) as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(workload.seed);
    let mut make = |len: usize| -> Vec<Vec<u32>> {
        (0..workload.batch_size).map(|_| (0..len).map(|_| rng.random_range(1..vocab)).collect()).collect()
    };
    let (qs, ds) = (make(workload.query_len), make(workload.doc_len));

    let side = |len: usize, batch: &[Vec<u32>]| -> SideReport {
        for _ in 0..workload.warmup {
            encode_batch(model, batch);
            if let Some((_, b)) = baseline {
                encode_batch(b, batch);
            }
        }
        let mut mine = Vec::with_capacity(workload.repetitions);
        let mut base = Vec::with_capacity(workload.repetitions);
        for rep in 0..workload.repetitions {
            let time = |m: &EncoderModel<T>| {
                let s = Instant::now();
                encode_batch(m, batch);
                s.elapsed().as_secs_f64()
            };
            match baseline {
                Some((_, b)) if rep % 2 == 1 => {
                    base.push(time(b));
                    mine.push(time(model));
                }
                Some((_, b)) => {
                    mine.push(time(model));
                    base.push(time(b));
                }
                None => mine.push(time(model)),
            }
        }
        let m = median(&mut mine);
        SideReport {
            seq_len: len,
            median_secs: m,
            tokens_per_sec: (len * batch.len()) as f64 / m,
            speedup: baseline.map(|_| median(&mut base) / m),
        }
    };
    Ok(BenchReport {
        model: name.to_string(),
        params: model.count_params(),
        baseline: baseline.map(|(n, _)| n.to_string()),
        baseline_params: baseline.map(|(_, b)| b.count_params()),
        query: side(workload.query_len, &qs),
        doc: side(workload.doc_len, &ds),
        batch_size: workload.batch_size,
        repetitions: workload.repetitions,
        warmup: workload.warmup,
        threads: 1,
    })
}
