//! Synthetic PII corpus, known/unknown forget splits, relational graph,
//! and record-file ingestion.

mod io;
mod synth;

pub use io::{load_corpus, load_edges, load_qa, load_records, save_corpus, write_edges, write_jsonl};
pub use synth::{gen_pii_value, synth_corpus, CorpusParams, RESERVED};

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Example;
use crate::tokenizer::{encode, BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PiiType {
    Email,
    Phone,
    Address,
    Dob,
}

impl PiiType {
    pub const ALL: [PiiType; 4] = [PiiType::Email, PiiType::Phone, PiiType::Address, PiiType::Dob];

    /// Phrase used inside the question template.
    pub fn label(self) -> &'static str {
        match self {
            PiiType::Email => "email",
            PiiType::Phone => "phone number",
            PiiType::Address => "address",
            PiiType::Dob => "birth date",
        }
    }
}

impl fmt::Display for PiiType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiiRecord {
    pub person: String,
    pub pii_type: PiiType,
    pub pii_value: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Forget,
    Retain,
}

/// A templated question and its answer, as byte tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: usize,
    pub person: String,
    /// PII type label or retain attribute name.
    pub attribute: String,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    /// Byte range of the PII inside `answer`; `None` for retain pairs.
    pub pii_span: Option<(usize, usize)>,
    pub origin: Origin,
}

/// The fixed question template.
pub fn question_text(attribute: &str, person: &str) -> String {
    format!("Q: Tell me the {attribute} of {person}, A: ")
}

impl QaPair {
    pub fn new(id: usize, person: &str, attribute: &str, answer: &str, origin: Origin) -> Self {
        let answer = encode(answer);
        let pii_span = (origin == Origin::Forget).then_some((0, answer.len()));
        QaPair {
            id,
            person: person.to_string(),
            attribute: attribute.to_string(),
            question: encode(&question_text(attribute, person)),
            answer,
            pii_span,
            origin,
        }
    }

    /// Model prompt: BOS followed by the question.
    pub fn prompt(&self) -> Vec<u32> {
        let mut p = Vec::with_capacity(self.question.len() + 1);
        p.push(BOS);
        p.extend_from_slice(&self.question);
        p
    }

    pub fn answer_text(&self) -> String {
        crate::tokenizer::decode(&self.answer)
    }

    /// The PII string, or the whole answer for retain pairs.
    pub fn pii_text(&self) -> String {
        let (a, b) = self.pii_span.unwrap_or((0, self.answer.len()));
        crate::tokenizer::decode(&self.answer[a..b])
    }

    /// PII token span (whole answer for retain pairs).
    pub fn pii_tokens(&self) -> &[u32] {
        let (a, b) = self.pii_span.unwrap_or((0, self.answer.len()));
        &self.answer[a..b]
    }

    /// Training example `BOS question answer EOS`, scored on answer + EOS.
    pub fn example(&self) -> Example {
        let mut target = self.answer.clone();
        target.push(EOS);
        Example::new(&self.prompt(), &target)
    }

    /// Same question with a different answer (relabeling).
    pub fn with_answer(&self, answer: &[u32]) -> Self {
        QaPair { answer: answer.to_vec(), pii_span: (!answer.is_empty()).then_some((0, answer.len())), ..self.clone() }
    }

    /// Demonstration text `question answer\n` used for in-context prompts.
    pub fn demo_tokens(&self) -> Vec<u32> {
        let mut t = self.question.clone();
        t.extend_from_slice(&self.answer);
        t.extend(encode("\n"));
        t
    }
}

pub fn examples(qa: &[QaPair]) -> Vec<Example> {
    qa.iter().map(QaPair::example).collect()
}

/// Undirected weighted person graph.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationalGraph {
    pub nodes: Vec<String>,
    /// `(a, b, weight)` with `a < b`.
    pub edges: Vec<(usize, usize, f64)>,
}

impl RelationalGraph {
    pub fn new(nodes: Vec<String>, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for &(a, b, w) in &edges {
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop on node {a}")));
            }
            if a.max(b) >= nodes.len() {
                return Err(Error::InvalidArgument(format!("edge ({a},{b}) references a missing node")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("edge ({a},{b}) has weight {w}")));
            }
            if seen.insert((a.min(b), a.max(b)), ()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate edge ({a},{b})")));
            }
        }
        let mut edges: Vec<_> = edges.into_iter().map(|(a, b, w)| (a.min(b), a.max(b), w)).collect();
        edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        Ok(RelationalGraph { nodes, edges })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_index(&self, person: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == person)
    }

    /// Symmetric adjacency lists.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b, w) in &self.edges {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency().iter().map(Vec::len).collect()
    }
}

/// Forget set split into the part given to the unlearner (known) and the
/// held-out part (unknown), plus the retain set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub known: Vec<QaPair>,
    pub unknown: Vec<QaPair>,
    pub retain: Vec<QaPair>,
    pub known_fraction: f64,
}

impl CorpusSplit {
    /// `known ∪ unknown`, ordered by id.
    pub fn forget(&self) -> Vec<QaPair> {
        let mut all: Vec<QaPair> = self.known.iter().chain(&self.unknown).cloned().collect();
        all.sort_by_key(|q| q.id);
        all
    }
}

/// Uniform split of `forget` into `round(fraction·|D_F|)` known pairs and
/// the rest.
pub fn split_forget(forget: &[QaPair], retain: &[QaPair], known_fraction: f64, seed: u64) -> Result<CorpusSplit> {
    if !(known_fraction > 0.0 && known_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("known_fraction {known_fraction} outside (0, 1]")));
    }
    let n_known = (known_fraction * forget.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..forget.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = vec![false; forget.len()];
    for &i in &idx[..n_known] {
        chosen[i] = true;
    }
    let (mut known, mut unknown) = (Vec::new(), Vec::new());
    for (q, c) in forget.iter().zip(chosen) {
        if c {
            known.push(q.clone());
        } else {
            unknown.push(q.clone());
        }
    }
    Ok(CorpusSplit { known, unknown, retain: retain.to_vec(), known_fraction })
}

/// A generated or loaded corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<PiiRecord>,
    pub forget: Vec<QaPair>,
    pub retain: Vec<QaPair>,
    pub graph: RelationalGraph,
}

impl Corpus {
    /// Every forget PII value absent from every retain pair's text.
    pub fn check_no_leakage(&self) -> Result<()> {
        let retain_text: Vec<String> = self
            .retain
            .iter()
            .map(|q| format!("{}{}", crate::tokenizer::decode(&q.question), q.answer_text()))
            .collect();
        for q in &self.forget {
            let pii = q.pii_text();
            if let Some(r) = retain_text.iter().position(|t| t.contains(&pii)) {
                return Err(Error::InvalidArgument(format!("PII {pii:?} occurs in retain pair {r}")));
            }
        }
        Ok(())
    }
}
