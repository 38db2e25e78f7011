//! Per-example loss terms recorded on a tape, plus gradient-free scalar
//! versions for evaluation and identity checks.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::lm::{forward_on_tape, target_logprob_on_tape, Example, ForwardVars, LmModel};
use crate::tensor::{log_sum_exp, Tape, Tensor, Var};

/// Forward-input rows whose outputs predict the example's targets.
pub fn answer_rows(ex: &Example) -> Range<usize> {
    ex.target_start - 1..ex.tokens.len() - 1
}

fn check(ex: &Example) -> Result<()> {
    if ex.target_start == 0 || ex.target_start >= ex.tokens.len() {
        return Err(Error::InvalidArgument("example has no scorable targets".into()));
    }
    Ok(())
}

/// Forward pass of an example on `tape` and its summed target log-prob.
pub fn logprob_on_tape(tape: &mut Tape<'_, f32>, model: &LmModel, ex: &Example) -> Result<(Var, ForwardVars)> {
    check(ex)?;
    let fv = forward_on_tape(tape, model.config(), model.layout(), &ex.tokens[..ex.tokens.len() - 1])?;
    let lp = target_logprob_on_tape(tape, fv.logits, &ex.tokens, ex.target_start);
    Ok((lp, fv))
}

/// `log f(y|x)` of an example without recording gradients.
pub fn example_logprob(model: &LmModel, ex: &Example) -> Result<f64> {
    let mut tape = Tape::with_params(model.params(), false);
    let (lp, _) = logprob_on_tape(&mut tape, model, ex)?;
    Ok(tape.scalar(lp) as f64)
}

/// Hidden states of `model` at the answer rows: one `[rows, d]` tensor per
/// layer `0..=L`.
pub fn answer_hidden(model: &LmModel, ex: &Example) -> Result<Vec<Tensor<f32>>> {
    check(ex)?;
    let out = model.forward(&ex.tokens[..ex.tokens.len() - 1])?;
    let rows = answer_rows(ex);
    let d = model.config().d_model;
    Ok(out
        .hidden
        .iter()
        .map(|h| Tensor::new(vec![rows.len(), d], h.values()[rows.start * d..rows.end * d].to_vec()).unwrap())
        .collect())
}

/// Next-token log-distributions of `model` at the answer rows, `[rows, V]`.
pub fn answer_logprobs(model: &LmModel, ex: &Example) -> Result<Vec<f32>> {
    check(ex)?;
    let out = model.forward(&ex.tokens[..ex.tokens.len() - 1])?;
    let v = model.config().vocab_size;
    let mut lp = Vec::with_capacity(answer_rows(ex).len() * v);
    for r in answer_rows(ex) {
        let row = &out.logits.values()[r * v..(r + 1) * v];
        let lse = log_sum_exp(row);
        lp.extend(row.iter().map(|z| *z - lse));
    }
    Ok(lp)
}

/// `−(2/β)·log σ(−β·(lp − lp_ref))`.
pub fn npo_term(tape: &mut Tape<'_, f32>, lp: Var, lp_ref: f64, beta: f64) -> Var {
    let z = tape.scale(lp, -beta);
    let z = tape.shift(z, beta * lp_ref);
    let ls = tape.log_sigmoid(z);
    tape.scale(ls, -2.0 / beta)
}

/// `−log σ(β·[(lp⁺ − ref⁺) − (lp⁻ − ref⁻)])`.
pub fn dpo_term(tape: &mut Tape<'_, f32>, lp_pos: Var, lp_neg: Var, ref_pos: f64, ref_neg: f64, beta: f64) -> Var {
    let d = tape.sub(lp_pos, lp_neg);
    let z = tape.scale(d, beta);
    let z = tape.shift(z, -beta * (ref_pos - ref_neg));
    let ls = tape.log_sigmoid(z);
    tape.scale(ls, -1.0)
}

/// `‖mean_rows h − target‖²`.
pub fn mean_hidden_sq_dist(tape: &mut Tape<'_, f32>, h: Var, rows: Range<usize>, target: &[f32]) -> Var {
    let t = tape.value(h).shape()[0];
    let k = rows.len() as f32;
    let w: Vec<f32> = (0..t).map(|r| if rows.contains(&r) { 1.0 / k } else { 0.0 }).collect();
    let m = tape.weighted_row_sum(h, w);
    tape.sq_dist_const(m, target.to_vec())
}

/// `(1/rows)·Σ_rows ‖h_r − target_r‖²` with `target` shaped `[rows, d]`.
pub fn rows_sq_dist(tape: &mut Tape<'_, f32>, h: Var, rows: Range<usize>, target: &[f32]) -> Var {
    let k = rows.len() as f64;
    let g = tape.gather(h, &rows.collect::<Vec<_>>());
    let s = tape.sq_dist_const(g, target.to_vec());
    tape.scale(s, 1.0 / k)
}

/// Mean token-level `KL(p_ref ‖ p_θ)` over the answer rows, from reference
/// log-probabilities shaped `[rows, V]`. The self term is summed exactly
/// like the cross term, so identical distributions give exactly zero.
pub fn kl_term(tape: &mut Tape<'_, f32>, logits: Var, rows: Range<usize>, logp_ref: &[f32]) -> Var {
    let k = rows.len() as f64;
    let p: Vec<f32> = logp_ref.iter().map(|l| l.exp()).collect();
    let self_term: f32 = logp_ref.iter().zip(&p).map(|(a, b)| *a * *b).sum();
    let g = tape.gather(logits, &rows.collect::<Vec<_>>());
    let lsm = tape.log_softmax(g);
    let cross = tape.dot_const(lsm, p);
    let neg = tape.scale(cross, -1.0);
    let kl = tape.shift(neg, self_term as f64);
    tape.scale(kl, 1.0 / k)
}

/// Deterministic fixed-seed unit vector in `d` dimensions.
pub fn control_vector(d: usize, seed: u64) -> Vec<f32> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / n) as f32).collect()
}

// ---- gradient-free scalar losses ----------------------------------------

fn mean<I: Iterator<Item = Result<f64>>>(it: I) -> Result<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for v in it {
        s += v?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(s / n as f64)
}

/// `E[log f(y|x)]` over the batch; minimizing it ascends the NLL.
pub fn ga_loss(model: &LmModel, batch: &[Example]) -> Result<f64> {
    mean(batch.iter().map(|ex| example_logprob(model, ex)))
}

/// `−(2/β)·E[log σ(−β·(log f_θ(y|x) − log f_target(y|x)))]`.
pub fn npo_loss(model: &LmModel, target: &LmModel, batch: &[Example], beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta {beta} must be positive")));
    }
    mean(batch.iter().map(|ex| {
        let r = example_logprob(model, ex)? - example_logprob(target, ex)?;
        Ok(-2.0 / beta * crate::tensor::log_sigmoid(-beta * r))
    }))
}

/// Preference loss with `pairs = (preferred, rejected)` completions of the
/// same question.
pub fn dpo_unlearn_loss(model: &LmModel, target: &LmModel, pairs: &[(Example, Example)], beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta {beta} must be positive")));
    }
    mean(pairs.iter().map(|(pos, neg)| {
        let m = (example_logprob(model, pos)? - example_logprob(target, pos)?)
            - (example_logprob(model, neg)? - example_logprob(target, neg)?);
        Ok(-crate::tensor::log_sigmoid(beta * m))
    }))
}

/// Per-token retain NLL over a batch: `Σ NLL / Σ targets`.
pub fn retain_nll(model: &LmModel, batch: &[Example]) -> Result<f64> {
    let n: usize = batch.iter().map(Example::num_targets).sum();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let s: f64 = batch.iter().map(|ex| example_logprob(model, ex)).sum::<Result<f64>>()?;
    Ok(-s / n as f64)
}

/// Mean over the batch of the mean token-level `KL(p_target ‖ p_θ)`.
pub fn klr_value(model: &LmModel, target: &LmModel, batch: &[Example]) -> Result<f64> {
    mean(batch.iter().map(|ex| {
        let p = answer_logprobs(target, ex)?;
        let mut tape = Tape::with_params(model.params(), false);
        let fv = forward_on_tape(&mut tape, model.config(), model.layout(), &ex.tokens[..ex.tokens.len() - 1])?;
        let kl = kl_term(&mut tape, fv.logits, answer_rows(ex), &p);
        Ok(tape.scalar(kl) as f64)
    }))
}

/// RMU objective: `E_F‖h̄_l − c·u‖² + α·E_R‖h̄_l − h̄_l^frozen‖²` with
/// hidden states averaged over answer rows.
pub fn rmu_loss(
    model: &LmModel,
    frozen: &LmModel,
    batch_f: &[Example],
    batch_r: &[Example],
    u: &[f32],
    c: f64,
    alpha: f64,
    layer: usize,
) -> Result<f64> {
    if layer == 0 || layer > model.num_layers() {
        return Err(Error::InvalidArgument(format!("layer {layer} outside [1, {}]", model.num_layers())));
    }
    let cu: Vec<f32> = u.iter().map(|x| x * c as f32).collect();
    let f = mean(batch_f.iter().map(|ex| rmu_term_value(model, ex, layer, &cu)))?;
    if alpha == 0.0 || batch_r.is_empty() {
        return Ok(f);
    }
    let r = mean(batch_r.iter().map(|ex| {
        let target = mean_rows(&answer_hidden(frozen, ex)?[layer]);
        rmu_term_value(model, ex, layer, &target)
    }))?;
    Ok(f + alpha * r)
}

fn rmu_term_value(model: &LmModel, ex: &Example, layer: usize, target: &[f32]) -> Result<f64> {
    let mut tape = Tape::with_params(model.params(), false);
    let fv = forward_on_tape(&mut tape, model.config(), model.layout(), &ex.tokens[..ex.tokens.len() - 1])?;
    let v = mean_hidden_sq_dist(&mut tape, fv.hidden[layer], answer_rows(ex), target);
    Ok(tape.scalar(v) as f64)
}

/// Column means of a `[rows, d]` tensor.
pub fn mean_rows(h: &Tensor<f32>) -> Vec<f32> {
    let (r, d) = h.dims2();
    let mut m = vec![0.0f64; d];
    for i in 0..r {
        for (j, x) in h.values()[i * d..(i + 1) * d].iter().enumerate() {
            m[j] += *x as f64;
        }
    }
    m.into_iter().map(|x| (x / r as f64) as f32).collect()
}

/// RAU anchor term `Σ_{l=l0..L} α_l·mean_rows‖h_l − h_l^base‖²` averaged
/// over the batch.
pub fn rau_anchor(model: &LmModel, base: &LmModel, batch_f: &[Example], l0: usize, weights: &[f64]) -> Result<f64> {
    let l_max = model.num_layers();
    if l0 == 0 || l0 > l_max {
        return Err(Error::InvalidArgument(format!("l0 {l0} outside [1, {l_max}]")));
    }
    mean(batch_f.iter().map(|ex| {
        let hb = answer_hidden(base, ex)?;
        let hm = answer_hidden(model, ex)?;
        Ok((l0..=l_max)
            .zip(weights)
            .map(|(l, w)| {
                let s: f64 = hm[l].values().iter().zip(hb[l].values()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                w * s / hm[l].dims2().0 as f64
            })
            .sum())
    }))
}

/// Full RAU objective `λ_u·anchor + λ_r·retain NLL`.
pub fn rau_loss(
    model: &LmModel,
    base: &LmModel,
    batch_f: &[Example],
    batch_r: &[Example],
    l0: usize,
    weights: &[f64],
    lambda_unlearn: f64,
    lambda_retain: f64,
) -> Result<f64> {
    let mut v = 0.0;
    if lambda_unlearn != 0.0 {
        v += lambda_unlearn * rau_anchor(model, base, batch_f, l0, weights)?;
    }
    if lambda_retain != 0.0 && !batch_r.is_empty() {
        v += lambda_retain * retain_nll(model, batch_r)?;
    }
    Ok(v)
}
