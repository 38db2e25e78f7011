use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LastGood, Result};
use crate::tensor::{
    adamw_step, scheduled_lr, AdamState, AdamWConfig, GradAccumulator, GradVector, ParamMask, Tape, Var,
};

use super::{forward_on_tape, ForwardVars, LmModel};

/// One training sequence. Tokens at `target_start..` are scored, each from
/// the prefix before it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub target_start: usize,
}

impl Example {
    pub fn new(prefix: &[u32], target: &[u32]) -> Self {
        let mut tokens = prefix.to_vec();
        tokens.extend_from_slice(target);
        Example { tokens, target_start: prefix.len() }
    }

    pub fn num_targets(&self) -> usize {
        self.tokens.len() - self.target_start
    }

    pub fn target(&self) -> &[u32] {
        &self.tokens[self.target_start..]
    }

    pub fn prefix(&self) -> &[u32] {
        &self.tokens[..self.target_start]
    }
}

/// Optimizer schedule shared by training, fine-tuning and unlearning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub cosine: bool,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            lr: 1e-3,
            epochs: 1,
            batch_size: 16,
            cosine: true,
            warmup_steps: 0,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be a non-negative number", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Per-step losses of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// `(step, epoch, lr, loss)`
    pub steps: Vec<(usize, usize, f64, f64)>,
}

impl TrainLog {
    /// Mean loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for &(_, e, _, l) in &self.steps {
            if out.len() <= e {
                out.resize(e + 1, (0.0, 0));
            }
            out[e].0 += l;
            out[e].1 += 1;
        }
        out.into_iter().map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 }).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,loss\n");
        for (step, e, lr, l) in &self.steps {
            s.push_str(&format!("{step},{e},{lr:.6e},{l:.8}\n"));
        }
        s
    }
}

/// Observer called after every epoch with the epoch index and the model.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &LmModel);

/// `Σ_t log p(tokens[t] | tokens[..t])` over `t ≥ target_start`, as a
/// scalar node. Rows before the targets contribute exactly zero gradient.
pub fn target_logprob_on_tape<T: crate::tensor::Real>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    tokens: &[u32],
    target_start: usize,
) -> Var {
    let n = tokens.len();
    let lsm = tape.log_softmax(logits);
    let idx: Vec<usize> = tokens[1..].iter().map(|t| *t as usize).collect();
    let picked = tape.pick(lsm, &idx);
    let w: Vec<T> = (1..n).map(|t| if t >= target_start { T::one() } else { T::zero() }).collect();
    tape.dot_const(picked, w)
}

/// Records the forward pass of an example (without its last token, which
/// predicts nothing) and returns its summed target NLL.
pub fn example_nll_on_tape<T: crate::tensor::Real>(
    tape: &mut Tape<'_, T>,
    model_cfg: &super::ModelConfig,
    layout: &super::Layout,
    ex: &Example,
) -> Result<(Var, ForwardVars)> {
    if ex.target_start == 0 || ex.target_start >= ex.tokens.len() {
        return Err(Error::InvalidArgument("example has no scorable targets".into()));
    }
    let fv = forward_on_tape(tape, model_cfg, layout, &ex.tokens[..ex.tokens.len() - 1])?;
    let lp = target_logprob_on_tape(tape, fv.logits, &ex.tokens, ex.target_start);
    let nll = tape.scale(lp, -1.0);
    Ok((nll, fv))
}

/// Generic optimizer loop. `batch_grad` gets the current model and the
/// example indices of one batch and returns `(loss, gradient)`.
///
/// With `epochs == 0` the input model is returned unchanged.
pub fn train_with<F>(
    model: &LmModel,
    n_items: usize,
    sched: &TrainSchedule,
    mask: Option<&ParamMask>,
    hook: Option<EpochHook<'_>>,
    mut batch_grad: F,
) -> Result<(LmModel, TrainLog)>
where
    F: FnMut(&LmModel, &[usize]) -> Result<(f64, GradVector<f32>)>,
{
    sched.validate()?;
    let mut log = TrainLog::default();
    let mut cur = model.clone();
    if sched.epochs == 0 || n_items == 0 {
        return Ok((cur, log));
    }
    let mut hook = hook;
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut state = AdamState::new(cur.params().numel());
    let per_epoch = sched.steps_per_epoch(n_items);
    let total = per_epoch * sched.epochs;
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut step = 0;
    for epoch in 0..sched.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(sched.batch_size) {
            let (loss, mut grad) = batch_grad(&cur, batch)?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged { step, loss, last_good: LastGood(Box::new(cur.params().clone())) });
            }
            if let Some(c) = sched.grad_clip {
                let n = grad.norm();
                if n > c {
                    grad.scale((c / n) as f32);
                }
            }
            let lr = scheduled_lr(sched.lr, step, total, sched.warmup_steps, sched.cosine);
            let hyper = AdamWConfig { lr, weight_decay: sched.weight_decay, ..Default::default() };
            adamw_step(cur.params_mut(), &grad, &mut state, &hyper, mask)?;
            log.steps.push((step, epoch, lr, loss));
            step += 1;
        }
        if let Some(h) = hook.as_mut() {
            h(epoch, &cur);
        }
        if let Some(m) = log.epoch_means().last() {
            debug!("epoch {epoch}: mean loss {m:.5}");
        }
    }
    if !cur.params().all_finite() {
        return Err(Error::NonFinite("parameters after training".into()));
    }
    Ok((cur, log))
}

/// Mean-per-target-token NLL gradient of `examples[batch]`.
pub(crate) fn nll_batch_grad(model: &LmModel, examples: &[Example], batch: &[usize]) -> Result<(f64, GradVector<f32>)> {
    let n_tok: usize = batch.iter().map(|i| examples[*i].num_targets()).sum();
    let mut acc = GradAccumulator::new(model.params().numel());
    let mut total = 0.0;
    for &i in batch {
        let mut tape = Tape::with_params(model.params(), true);
        let (nll, _) = example_nll_on_tape(&mut tape, model.config(), model.layout(), &examples[i])?;
        total += tape.scalar(nll) as f64;
        let g = tape.param_grads(&tape.backward(nll)?);
        acc.add(&g, 1.0 / n_tok as f64);
    }
    Ok((total / n_tok as f64, acc.finish()))
}

/// Next-token NLL training on `examples`, starting from `model`.
pub fn train_lm(model: &LmModel, examples: &[Example], sched: &TrainSchedule) -> Result<(LmModel, TrainLog)> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    info!(
        "training {} examples for {} epochs (lr {}, batch {})",
        examples.len(),
        sched.epochs,
        sched.lr,
        sched.batch_size
    );
    train_with(model, examples.len(), sched, None, None, |m, b| nll_batch_grad(m, examples, b))
}

/// Fine-tunes a copy of `model`; the original is untouched. Returns the
/// tuned model and the `(|D|, epochs)` cost pair.
pub fn fine_tune(
    model: &LmModel,
    examples: &[Example],
    sched: &TrainSchedule,
) -> Result<(LmModel, (usize, usize))> {
    let (m, _) = train_lm(model, examples, sched)?;
    Ok((m, (examples.len(), sched.epochs)))
}
