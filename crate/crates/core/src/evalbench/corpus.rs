use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::tokenizer::{format_tokens, parse_tokens};
use crate::error::{ensure, Error, Result};

/// Queries, documents and graded relevance judgments.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCorpus {
    pub queries: Vec<(String, Vec<u32>)>,
    pub docs: Vec<(String, Vec<u32>)>,
    /// query id → (doc id → relevance grade)
    pub qrels: Qrels,
}

pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

pub const QUERIES_FILE: &str = "queries.tsv";
pub const CORPUS_FILE: &str = "corpus.tsv";
pub const QRELS_FILE: &str = "qrels.tsv";

impl EvalCorpus {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.queries.is_empty(), "eval corpus has no queries");
        let docs: std::collections::HashSet<&str> = self.docs.iter().map(|(id, _)| id.as_str()).collect();
        let queries: std::collections::HashSet<&str> = self.queries.iter().map(|(id, _)| id.as_str()).collect();
        ensure!(docs.len() == self.docs.len(), "duplicate document id");
        ensure!(queries.len() == self.queries.len(), "duplicate query id");
        for (q, rels) in &self.qrels {
            ensure!(queries.contains(q.as_str()), "qrels reference unknown query `{q}`");
            for d in rels.keys() {
                ensure!(docs.contains(d.as_str()), "qrels reference unknown document `{d}`");
            }
        }
        Ok(())
    }

    /// Write `queries.tsv`, `corpus.tsv` (`id<TAB>tokens`) and `qrels.tsv`
    /// (`qid<TAB>docid<TAB>grade`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tsv = |rows: &[(String, Vec<u32>)]| {
            rows.iter()
                .map(|(id, toks)| format!("{id}\t{}\n", format_tokens(toks)))
                .collect::<String>()
        };
        let mut qrels = String::new();
        for (q, rels) in &self.qrels {
            for (d, g) in rels {
                qrels.push_str(&format!("{q}\t{d}\t{g}\n"));
            }
        }
        for (name, body) in [(QUERIES_FILE, tsv(&self.queries)), (CORPUS_FILE, tsv(&self.docs)), (QRELS_FILE, qrels)] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let records = |name: &str, body: String| -> Result<Vec<(String, Vec<u32>)>> {
            body.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    let (id, toks) = l
                        .split_once('\t')
                        .ok_or_else(|| Error::parse(format!("{name}:{}", i + 1), "expected id<TAB>tokens"))?;
                    Ok((id.to_string(), parse_tokens(toks)?))
                })
                .collect()
        };
        let queries = records(QUERIES_FILE, read(QUERIES_FILE)?)?;
        let docs = records(CORPUS_FILE, read(CORPUS_FILE)?)?;
        let mut qrels = Qrels::new();
        for (i, l) in read(QRELS_FILE)?.lines().enumerate() {
            if l.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::parse(format!("{QRELS_FILE}:{}", i + 1), "expected qid<TAB>docid<TAB>grade"));
            }
            let g: u32 = f[2]
                .trim()
                .parse()
                .map_err(|e| Error::parse(format!("{QRELS_FILE}:{}", i + 1), e))?;
            qrels.entry(f[0].to_string()).or_default().insert(f[1].to_string(), g);
        }
        let c = Self { queries, docs, qrels };
        c.validate()?;
        Ok(c)
    }
}
