//! On-disk formats.
//!
//! * `records.jsonl`: one `{"person", "pii_type", "pii_value"}` object per
//!   line; `pii_type` is one of `email`, `phone`, `address`, `dob`.
//! * `forget.jsonl`, `retain.jsonl`: one [`QaPair`] per line with fields
//!   `id`, `person`, `attribute`, `question` and `answer` (byte-token
//!   arrays), `pii_span` (`[start, end)` into `answer`, or null) and
//!   `origin` (`forget` | `retain`).
//! * `graph.tsv`: tab-separated lines `n <index> <name>` for nodes followed
//!   by `e <a> <b> <weight>` for undirected edges.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::write_atomic;

use super::{Corpus, PiiRecord, QaPair, RelationalGraph};

fn record_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Record { path: path.to_path_buf(), line, message: message.into() }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| record_err(path, i + 1, e.to_string()))?;
        out.push((i + 1, v));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

/// Validated PII records; blank lines are ignored.
pub fn load_records(path: &Path) -> Result<Vec<PiiRecord>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, r) in read_jsonl::<PiiRecord>(path)? {
        if r.person.trim().is_empty() {
            return Err(record_err(path, line, "empty person"));
        }
        if r.pii_value.trim().is_empty() {
            return Err(record_err(path, line, "empty pii_value"));
        }
        if !seen.insert(r.pii_value.clone()) {
            return Err(record_err(path, line, format!("duplicate pii_value {:?}", r.pii_value)));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_qa(path: &Path) -> Result<Vec<QaPair>> {
    let mut out = Vec::new();
    for (line, q) in read_jsonl::<QaPair>(path)? {
        if let Some((a, b)) = q.pii_span {
            if a >= b || b > q.answer.len() {
                return Err(record_err(path, line, format!("pii_span ({a},{b}) invalid for answer of {}", q.answer.len())));
            }
        }
        out.push(q);
    }
    Ok(out)
}

pub fn write_edges(path: &Path, g: &RelationalGraph) -> Result<()> {
    let mut s = String::new();
    for (i, n) in g.nodes.iter().enumerate() {
        writeln!(s, "n\t{i}\t{n}").unwrap();
    }
    for (a, b, w) in &g.edges {
        writeln!(s, "e\t{a}\t{b}\t{w}").unwrap();
    }
    write_atomic(path, s.as_bytes())
}

pub fn load_edges(path: &Path) -> Result<RelationalGraph> {
    let text = fs::read_to_string(path)?;
    let (mut nodes, mut edges) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || record_err(path, i + 1, format!("malformed line {line:?}"));
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        match f.as_slice() {
            ["n", idx, name] => {
                if num(idx)? != nodes.len() {
                    return Err(bad());
                }
                nodes.push(name.to_string());
            }
            ["e", a, b, w] => edges.push((num(a)?, num(b)?, w.parse::<f64>().map_err(|_| bad())?)),
            [""] => {}
            _ => return Err(bad()),
        }
    }
    RelationalGraph::new(nodes, edges)
}

pub fn save_corpus(dir: &Path, c: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("records.jsonl"), &c.records)?;
    write_jsonl(&dir.join("forget.jsonl"), &c.forget)?;
    write_jsonl(&dir.join("retain.jsonl"), &c.retain)?;
    write_edges(&dir.join("graph.tsv"), &c.graph)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    Ok(Corpus {
        records: load_records(&dir.join("records.jsonl"))?,
        forget: load_qa(&dir.join("forget.jsonl"))?,
        retain: load_qa(&dir.join("retain.jsonl"))?,
        graph: load_edges(&dir.join("graph.tsv"))?,
    })
}
