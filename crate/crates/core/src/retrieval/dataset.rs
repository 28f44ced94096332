use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::Triplet;
use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.jsonl";

/// One JSON object per line: `query`, `positive`, `negatives` and optional
/// `teacher_scores`.
pub fn write_triplets(path: &Path, items: &[Triplet]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for t in items {
        let line = serde_json::to_string(t).map_err(|e| Error::parse("triplet", e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::SyntheticTask;

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let mut data = SyntheticTask { corpus_size: 100, train_queries: 10, eval_queries: 2, ..Default::default() }
            .generate()
            .unwrap()
            .train;
        data[0].teacher_scores = Some(vec![0.1, f32::MIN_POSITIVE, 1.0 / 3.0, -0.0, 7.0, 1e-30, 3.4e38, 0.2]);
        data[1].teacher_scores = None;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(TRAIN_FILE);
        write_triplets(&p, &data).unwrap();
        let back = read_triplets(&p).unwrap();
        let bits = |v: &[Triplet]| -> Vec<Vec<u32>> {
            v.iter().map(|t| t.teacher_scores.iter().flatten().map(|x| x.to_bits()).collect()).collect()
        };
        assert_eq!(back, data);
        assert_eq!(bits(&back), bits(&data));
        let p2 = dir.path().join("again.jsonl");
        write_triplets(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }
}
