//! Forgetting scores, association scores (gradient, representation, graph),
//! layer-wise CKA, correlations and association-aware core-set selection.

mod graph;
mod stats;

pub use graph::{as_graph, ppr};
pub use stats::{average_ranks, cka, correlate, pearson, spearman, CorrelationResult};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::attack::RecoveryReport;
use crate::corpus::{CorpusSplit, QaPair, RelationalGraph};
use crate::error::{Error, Result};
use crate::lm::{example_nll_on_tape, seq_logprob, Example, LmModel};
use crate::unlearn::UnlearnOutput;
use crate::tensor::{flat_dot, GradAccumulator, GradVector, ParamMask, Tape, Tensor};

/// `(x, y)` with `y` the PII token span of the answer.
pub fn pii_example(q: &QaPair) -> Result<Example> {
    let (a, b) = q.pii_span.unwrap_or((0, q.answer.len()));
    if a >= b {
        return Err(Error::InvalidArgument(format!("pair {} has an empty PII span", q.id)));
    }
    let mut prefix = q.prompt();
    prefix.extend_from_slice(&q.answer[..a]);
    Ok(Example::new(&prefix, &q.answer[a..b]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingScore {
    pub id: usize,
    pub fs: f64,
}

/// `log f_target(y|x) − log f_unlearn(y|x)` on the PII span.
pub fn forgetting_score(target: &LmModel, unlearned: &LmModel, q: &QaPair) -> Result<f64> {
    let ex = pii_example(q)?;
    Ok(seq_logprob(target, ex.prefix(), ex.target())? - seq_logprob(unlearned, ex.prefix(), ex.target())?)
}

pub fn forgetting_scores(target: &LmModel, unlearned: &LmModel, qa: &[QaPair]) -> Result<Vec<ForgettingScore>> {
    qa.iter().map(|q| Ok(ForgettingScore { id: q.id, fs: forgetting_score(target, unlearned, q)? })).collect()
}

/// Gradient of the summed PII-token NLL, optionally restricted to `mask`.
pub fn pii_gradient(model: &LmModel, q: &QaPair, mask: Option<&ParamMask>) -> Result<GradVector<f32>> {
    let ex = pii_example(q)?;
    let mut tape = Tape::with_params(model.params(), true);
    let (nll, _) = example_nll_on_tape(&mut tape, model.config(), model.layout(), &ex)?;
    let g = tape.param_grads(&tape.backward(nll)?);
    match mask {
        Some(m) => g.masked(model.params(), m),
        None => Ok(g),
    }
}

/// Gradient dot product of two samples (not normalized).
pub fn as_grad(model: &LmModel, a: &QaPair, b: &QaPair, mask: Option<&ParamMask>) -> Result<f64> {
    flat_dot(&pii_gradient(model, a, mask)?, &pii_gradient(model, b, mask)?)
}

/// Mean PII gradient over `set`, accumulated in order in 64-bit.
pub fn mean_gradient(model: &LmModel, set: &[QaPair], mask: Option<&ParamMask>) -> Result<GradVector<f32>> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("mean gradient of an empty set".into()));
    }
    let mut acc = GradAccumulator::new(model.params().numel());
    for q in set {
        acc.add(&pii_gradient(model, q, None)?, 1.0 / set.len() as f64);
    }
    let mean = acc.finish::<f32>();
    match mask {
        Some(m) => mean.masked(model.params(), m),
        None => Ok(mean),
    }
}

/// Per-sample gradient association with a set: dot with the set's mean
/// gradient.
pub fn as_grad_scores(model: &LmModel, known: &[QaPair], samples: &[QaPair], mask: Option<&ParamMask>) -> Result<Vec<f64>> {
    let mean = mean_gradient(model, known, mask)?;
    samples.iter().map(|q| flat_dot(&pii_gradient(model, q, mask)?, &mean)).collect()
}

/// Hidden states averaged over the PII token positions, one vector per
/// layer `0..=L`.
pub fn pii_repr(model: &LmModel, q: &QaPair) -> Result<Vec<Vec<f64>>> {
    let ex = pii_example(q)?;
    let out = model.forward(&ex.tokens)?;
    let d = model.config().d_model;
    let rows = ex.target_start..ex.tokens.len();
    Ok(out
        .hidden
        .iter()
        .map(|h| {
            let mut m = vec![0.0; d];
            for r in rows.clone() {
                for (j, v) in h.row(r).iter().enumerate() {
                    m[j] += *v as f64;
                }
            }
            m.iter().map(|x| x / rows.len() as f64).collect()
        })
        .collect())
}

/// Cosine similarity; a zero vector scores 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        warn!("cosine of a zero vector; scoring 0");
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
}

pub fn as_repr(model: &LmModel, a: &QaPair, b: &QaPair, layer: usize) -> Result<f64> {
    if layer > model.num_layers() {
        return Err(Error::InvalidArgument(format!("layer {layer} outside [0, {}]", model.num_layers())));
    }
    Ok(cosine(&pii_repr(model, a)?[layer], &pii_repr(model, b)?[layer]))
}

/// Per-sample, per-layer mean pairwise cosine similarity to `known`.
pub fn as_repr_scores(model: &LmModel, known: &[QaPair], samples: &[QaPair]) -> Result<Vec<Vec<f64>>> {
    if known.is_empty() {
        return Err(Error::InvalidArgument("representation association needs a known set".into()));
    }
    let kr: Vec<Vec<Vec<f64>>> = known.iter().map(|q| pii_repr(model, q)).collect::<Result<_>>()?;
    samples
        .iter()
        .map(|q| {
            let r = pii_repr(model, q)?;
            Ok((0..r.len())
                .map(|l| kr.iter().map(|k| cosine(&r[l], &k[l])).sum::<f64>() / kr.len() as f64)
                .collect())
        })
        .collect()
}

/// Per-layer CKA between the hidden states of two models over `probe`;
/// rows are every token position of every probe sequence.
pub fn cka_profile(a: &LmModel, b: &LmModel, probe: &[Vec<u32>]) -> Result<Vec<f64>> {
    if probe.is_empty() {
        return Err(Error::InvalidArgument("empty CKA probe".into()));
    }
    if !a.params().same_layout(b.params()) {
        return Err(Error::Config("CKA profile needs models of the same architecture".into()));
    }
    let layers = a.num_layers() + 1;
    let d = a.config().d_model;
    let mut xa: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut xb: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut n = 0;
    for seq in probe {
        let (ha, hb) = (a.forward(seq)?.hidden, b.forward(seq)?.hidden);
        for l in 0..layers {
            xa[l].extend(ha[l].values().iter().map(|v| *v as f64));
            xb[l].extend(hb[l].values().iter().map(|v| *v as f64));
        }
        n += seq.len();
    }
    (0..layers)
        .map(|l| {
            let x = Tensor::new(vec![n, d], std::mem::take(&mut xa[l]))?;
            let y = Tensor::new(vec![n, d], std::mem::take(&mut xb[l]))?;
            cka(&x, &y)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreSet {
    /// Selected ids, highest score first.
    pub ids: Vec<usize>,
    pub k_percent: f64,
    /// `(id, score)` for every candidate, in input order.
    pub scores: Vec<(usize, f64)>,
}

/// Top `⌈k%·|D_F|⌉` samples by `∇L(x)·ḡ`, ties broken by lower id.
pub fn coreset_select(model: &LmModel, forget: &[QaPair], k_percent: f64, mask: Option<&ParamMask>) -> Result<CoreSet> {
    if forget.is_empty() {
        return Err(Error::InvalidArgument("empty forget set".into()));
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!("k_percent {k_percent} outside (0, 100]")));
    }
    let s = as_grad_scores(model, forget, forget, mask)?;
    Ok(select_top(forget.iter().map(|q| q.id).zip(s).collect(), k_percent))
}

/// Selection step of [`coreset_select`] on precomputed scores.
pub fn select_top(scores: Vec<(usize, f64)>, k_percent: f64) -> CoreSet {
    let k = ((k_percent / 100.0 * scores.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order = scores.clone();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    CoreSet { ids: order[..k.min(order.len())].iter().map(|x| x.0).collect(), k_percent, scores }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthGap {
    pub known: f64,
    pub unknown: f64,
    pub pooled: f64,
}

/// `p3 − p1` per split and averaged.
pub fn depth_gap(r: &RecoveryReport) -> DepthGap {
    let known = r.p3_known - r.p1_known;
    let unknown = r.p3_unknown - r.p1_unknown;
    DepthGap { known, unknown, pooled: (known + unknown) / 2.0 }
}

/// Association scores of one unknown-set sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationProfile {
    pub id: usize,
    pub as_grad: f64,
    /// One value per layer `0..=L`.
    pub as_repr: Vec<f64>,
    pub as_graph: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisBundle {
    pub label: String,
    /// Forgetting scores on the unknown forget set.
    pub fs: Vec<ForgettingScore>,
    pub profiles: Vec<AssociationProfile>,
    pub grad_vs_fs: CorrelationResult,
    pub repr_last_vs_fs: CorrelationResult,
    /// `None` when the graph scores are constant (e.g. an edgeless graph).
    pub graph_vs_fs: Option<CorrelationResult>,
    /// Layer-wise CKA against the target model, when computed.
    pub cka: Option<Vec<f64>>,
    /// Whether gradient scores used a parameter subset.
    pub grad_masked: bool,
    /// Number of models the associations were averaged over.
    pub path_len: usize,
}

impl AnalysisBundle {
    /// `id,fs,as_grad,as_repr_last,as_graph` rows.
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("id,fs,as_grad,as_repr_last,as_graph\n");
        for (f, p) in self.fs.iter().zip(&self.profiles) {
            let last = p.as_repr.last().copied().unwrap_or(f64::NAN);
            s.push_str(&format!("{},{},{},{},{}\n", f.id, f.fs, p.as_grad, last, p.as_graph));
        }
        s
    }

    /// `layer,value` rows.
    pub fn cka_csv(&self) -> Option<String> {
        self.cka.as_ref().map(|c| {
            let mut s = String::from("layer,value\n");
            for (l, v) in c.iter().enumerate() {
                s.push_str(&format!("{l},{v}\n"));
            }
            s
        })
    }
}

/// Unlearning trajectory `[f_target, after epoch 1, ..., f_unlearn]`.
/// Pure edits yield `[f_target, f_unlearn]`.
pub fn trajectory<'a>(target: &'a LmModel, out: &'a UnlearnOutput) -> Vec<&'a LmModel> {
    let mut t = vec![target];
    if out.checkpoints.is_empty() {
        t.push(&out.model);
    } else {
        t.extend(out.checkpoints.iter());
    }
    t
}

/// Gradient and representation association scores of `samples` against
/// `known`, each averaged over the models of `path`.
pub fn path_associations(
    path: &[&LmModel],
    known: &[QaPair],
    samples: &[QaPair],
    mask: Option<&ParamMask>,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if path.is_empty() {
        return Err(Error::InvalidArgument("empty model path".into()));
    }
    let n = path.len() as f64;
    let mut ag = vec![0.0; samples.len()];
    let mut ar = vec![vec![0.0; path[0].num_layers() + 1]; samples.len()];
    for m in path {
        if !m.params().same_layout(path[0].params()) {
            return Err(Error::Config("model path mixes architectures".into()));
        }
        for (a, g) in ag.iter_mut().zip(as_grad_scores(m, known, samples, mask)?) {
            *a += g / n;
        }
        for (a, r) in ar.iter_mut().zip(as_repr_scores(m, known, samples)?) {
            for (x, y) in a.iter_mut().zip(r) {
                *x += y / n;
            }
        }
    }
    Ok((ag, ar))
}

/// Ripple analysis: forgetting on the unknown set against each association
/// score with the known set. Gradient and representation associations are
/// averaged over `path` (see [`trajectory`]); `&[target]` gives the
/// static target-only variant.
pub fn analyze(
    label: &str,
    target: &LmModel,
    unlearned: &LmModel,
    path: &[&LmModel],
    split: &CorpusSplit,
    graph: &RelationalGraph,
    mask: Option<&ParamMask>,
) -> Result<AnalysisBundle> {
    let fs = forgetting_scores(target, unlearned, &split.unknown)?;
    let (ag, ar) = path_associations(path, &split.known, &split.unknown, mask)?;
    let node = |q: &QaPair| graph.node_index(&q.person);
    let known_nodes: Vec<usize> = split.known.iter().filter_map(node).collect();
    let agr = as_graph(graph, &known_nodes, &split.unknown.iter().map(node).collect::<Vec<_>>())?;
    let profiles: Vec<AssociationProfile> = split
        .unknown
        .iter()
        .enumerate()
        .map(|(i, q)| AssociationProfile { id: q.id, as_grad: ag[i], as_repr: ar[i].clone(), as_graph: agr[i] })
        .collect();
    let f: Vec<f64> = fs.iter().map(|x| x.fs).collect();
    let last: Vec<f64> = ar.iter().map(|r| *r.last().expect("layers")).collect();
    Ok(AnalysisBundle {
        label: label.to_string(),
        grad_vs_fs: correlate(&ag, &f)?,
        repr_last_vs_fs: correlate(&last, &f)?,
        graph_vs_fs: match correlate(&agr, &f) {
            Ok(c) => Some(c),
            Err(Error::Undefined(e)) => {
                warn!("graph correlation undefined: {e}");
                None
            }
            Err(e) => return Err(e),
        },
        fs,
        profiles,
        cka: None,
        grad_masked: mask.is_some(),
        path_len: path.len(),
    })
}
