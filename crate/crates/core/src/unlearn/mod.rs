//! Unlearning methods behind one runner `U(f_target, D_Fk, D_R)`.
//!
//! The runner takes only the known forget set; the unknown part of the
//! forget split is never passed in.

mod losses;
mod relabel;
mod spec;

pub use losses::{
    answer_hidden, answer_logprobs, answer_rows, control_vector, dpo_term, dpo_unlearn_loss, example_logprob,
    ga_loss, kl_term, klr_value, logprob_on_tape, mean_hidden_sq_dist, mean_rows, npo_loss, npo_term, rau_anchor,
    rau_loss, retain_nll, rmu_loss, rows_sq_dist,
};
pub use relabel::{idk_phrase, relabel, whp_distribution, whp_labels, RelabelStrategy, IDK_PHRASES};
pub use spec::{Hyper, Method, MethodSpec, Regularizer};

use log::info;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{examples, QaPair};
use crate::error::{Error, Result};
use crate::lm::{block_layer_of, train_lm, train_with, Example, LmModel, TrainLog, TrainSchedule};
use crate::tensor::{GradAccumulator, GradVector, ParamMask, ParamStore, Tape, Var};
use crate::tokenizer::encode;

/// Held-out retain slice used by regularizers, and the remainder used for
/// utility evaluation. Deterministic and independent of the method.
pub fn retain_split(retain: &[QaPair], fraction: f64) -> (Vec<QaPair>, Vec<QaPair>) {
    let n = ((fraction * retain.len() as f64).round() as usize).clamp(usize::from(!retain.is_empty()), retain.len());
    let mut idx: Vec<usize> = (0..retain.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(0x0e7a_1400));
    let mut held = vec![false; retain.len()];
    for &i in &idx[..n] {
        held[i] = true;
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (q, h) in retain.iter().zip(held) {
        if h {
            a.push(q.clone());
        } else {
            b.push(q.clone());
        }
    }
    (a, b)
}

/// `base_loss` plus the weighted regularizer on a retain batch: retain NLL
/// for GDR, target-to-model KL for KLR.
pub fn regularize(
    base_loss: f64,
    spec: &MethodSpec,
    model: &LmModel,
    target: &LmModel,
    batch_r: &[Example],
) -> Result<f64> {
    if spec.regularizer == Regularizer::Klr && !spec.method.is_training_pipeline() {
        return Err(Error::Config(format!("KLR cannot pair with {}", spec.method.name())));
    }
    Ok(match spec.regularizer {
        Regularizer::None => base_loss,
        Regularizer::Gdr => base_loss + spec.hyper.reg_weight * retain_nll(model, batch_r)?,
        Regularizer::Klr => base_loss + spec.hyper.reg_weight * klr_value(model, target, batch_r)?,
    })
}

/// Result of an unlearning run.
#[derive(Clone, Debug)]
pub struct UnlearnOutput {
    pub model: LmModel,
    /// Per-step loss log of the main optimization (empty for pure edits).
    pub log: TrainLog,
    /// Log of the reinforcement fine-tune for task-vector / WHP.
    pub reinforce_log: Option<TrainLog>,
    /// WHP positions that fell back to the target distribution.
    pub whp_fallbacks: usize,
    /// Model after each epoch of the main optimization; the last equals
    /// `model`. Empty for pure edits.
    pub checkpoints: Vec<LmModel>,
}

/// Parameters of blocks producing hidden layers `>= layer`.
pub fn layers_from_mask(store: &ParamStore<f32>, layer: usize) -> ParamMask {
    ParamMask::from_fn(store, |name| block_layer_of(name).is_some_and(|l| l >= layer))
}

/// `θ_target − λ·(θ_reinforce − θ_target)` in flat parameter space.
pub fn task_vector_edit(target: &LmModel, reinforce: &LmModel, lambda: f64) -> Result<LmModel> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be >= 0")));
    }
    if !target.params().same_layout(reinforce.params()) {
        return Err(Error::Shape("task vector needs matching parameter layouts".into()));
    }
    let t = target.params().flatten();
    let r = reinforce.params().flatten();
    let edited: Vec<f32> =
        t.iter().zip(&r).map(|(a, b)| (*a as f64 - lambda * (*b as f64 - *a as f64)) as f32).collect();
    target.with_params(target.params().unflatten(&edited)?)
}

fn reinforce_schedule(h: &Hyper) -> TrainSchedule {
    TrainSchedule {
        lr: h.lr,
        epochs: h.reinforce_epochs,
        batch_size: h.batch_size,
        cosine: false,
        grad_clip: Some(1.0),
        seed: h.seed ^ 0x4e1f,
        ..Default::default()
    }
}

/// `f_target` fine-tuned on the forget set (over-fitting reference).
pub fn reinforce_model(target: &LmModel, known: &[QaPair], h: &Hyper) -> Result<(LmModel, TrainLog)> {
    train_lm(target, &examples(known), &reinforce_schedule(h))
}

/// Runs one unlearning method. `base` is the pre-finetuning model and is
/// required by RAU only.
pub fn run_unlearn(
    target: &LmModel,
    spec: &MethodSpec,
    known: &[QaPair],
    retain: &[QaPair],
    base: Option<&LmModel>,
) -> Result<UnlearnOutput> {
    spec.validate(target.num_layers())?;
    if known.is_empty() {
        return Err(Error::InvalidArgument("empty known forget set".into()));
    }
    let h = &spec.hyper;
    info!("unlearning with {} on {} known samples", spec.label(), known.len());
    match spec.method {
        Method::TaskVector => {
            if h.lambda == 0.0 {
                return Ok(UnlearnOutput { model: target.clone(), log: TrainLog::default(), reinforce_log: None, whp_fallbacks: 0, checkpoints: Vec::new() });
            }
            let (reinf, rlog) = reinforce_model(target, known, h)?;
            let model = task_vector_edit(target, &reinf, h.lambda)?;
            return Ok(UnlearnOutput { model, log: TrainLog::default(), reinforce_log: Some(rlog), whp_fallbacks: 0, checkpoints: Vec::new() });
        }
        _ if h.epochs == 0 => {
            return Ok(UnlearnOutput { model: target.clone(), log: TrainLog::default(), reinforce_log: None, whp_fallbacks: 0, checkpoints: Vec::new() })
        }
        _ => {}
    }

    let (reg_slice, _) = retain_split(retain, h.retain_fraction);
    let reg_ex = examples(&reg_slice);
    let mut reinforce_log = None;
    let mut whp_fallbacks = 0;
    let forget_ex: Vec<Example> = match spec.method {
        Method::RL => examples(&relabel(RelabelStrategy::RL, known, h.seed)?),
        Method::RM => examples(&relabel(RelabelStrategy::RM, known, h.seed)?),
        Method::IDK => examples(&relabel(RelabelStrategy::IDK, known, h.seed)?),
        Method::WHP => {
            let (reinf, rlog) = reinforce_model(target, known, h)?;
            reinforce_log = Some(rlog);
            let (lab, fb) = whp_labels(target, &reinf, known, h.alpha, h.seed)?;
            whp_fallbacks = fb;
            examples(&lab)
        }
        _ => examples(known),
    };

    let job = Job::prepare(target, spec, &forget_ex, &reg_ex, base)?;
    let sched = TrainSchedule {
        lr: h.lr,
        epochs: h.epochs,
        batch_size: h.batch_size,
        cosine: false,
        warmup_steps: 0,
        weight_decay: 0.0,
        grad_clip: Some(1.0),
        seed: h.seed,
    };
    let mask = match spec.method {
        Method::RMU => Some(layers_from_mask(target.params(), h.rmu_layer)),
        Method::RAU => Some(layers_from_mask(target.params(), h.rau_start_layer)),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(h.seed ^ 0x00e7_a1e5);
    let mut checkpoints = Vec::new();
    let mut keep = |_: usize, m: &LmModel| checkpoints.push(m.clone());
    let (model, log) = train_with(target, forget_ex.len(), &sched, mask.as_ref(), Some(&mut keep), |cur, batch| {
        job.batch_grad(cur, batch, &mut rng)
    })?;
    Ok(UnlearnOutput { model, log, reinforce_log, whp_fallbacks, checkpoints })
}

/// Frozen references precomputed once per run.
struct Job<'a> {
    spec: &'a MethodSpec,
    forget: &'a [Example],
    retain: &'a [Example],
    /// `log f_target(y|x)` per forget example.
    ref_lp: Vec<f64>,
    /// DPO preferred completions and their target log-probs.
    idk: Vec<(Example, f64)>,
    /// `c·u` for RMU.
    cu: Vec<f32>,
    /// Frozen mean hidden state at the RMU layer per retain example.
    frozen_mean: Vec<Vec<f32>>,
    /// Base-model answer-row hidden states per forget example, layers l0..=L.
    base_hidden: Vec<Vec<Vec<f32>>>,
    rau_weights: Vec<f64>,
    /// Target next-token log-distributions per retain example (KLR).
    klr_ref: Vec<Vec<f32>>,
}

impl<'a> Job<'a> {
    fn prepare(
        target: &LmModel,
        spec: &'a MethodSpec,
        forget: &'a [Example],
        retain: &'a [Example],
        base: Option<&LmModel>,
    ) -> Result<Self> {
        let h = &spec.hyper;
        let needs_retain = spec.regularizer != Regularizer::None
            || (spec.method == Method::RMU && h.alpha > 0.0)
            || (spec.method == Method::RAU && h.lambda_retain != 0.0);
        if needs_retain && retain.is_empty() {
            return Err(Error::InvalidArgument(format!("{} needs retain data", spec.label())));
        }
        let mut job = Job {
            spec,
            forget,
            retain,
            ref_lp: Vec::new(),
            idk: Vec::new(),
            cu: Vec::new(),
            frozen_mean: Vec::new(),
            base_hidden: Vec::new(),
            rau_weights: Vec::new(),
            klr_ref: Vec::new(),
        };
        match spec.method {
            Method::NPO => {
                job.ref_lp = forget.iter().map(|ex| example_logprob(target, ex)).collect::<Result<_>>()?;
            }
            Method::DPO => {
                job.ref_lp = forget.iter().map(|ex| example_logprob(target, ex)).collect::<Result<_>>()?;
                let mut rng = ChaCha8Rng::seed_from_u64(h.seed ^ 0xd90);
                job.idk = forget
                    .iter()
                    .map(|ex| {
                        let mut y = encode(idk_phrase(&mut rng));
                        y.push(crate::tokenizer::EOS);
                        let pos = Example::new(ex.prefix(), &y);
                        let r = example_logprob(target, &pos)?;
                        Ok((pos, r))
                    })
                    .collect::<Result<_>>()?;
            }
            Method::RMU => {
                job.cu = control_vector(target.config().d_model, h.seed).iter().map(|x| x * h.c as f32).collect();
                if h.alpha > 0.0 {
                    job.frozen_mean = retain
                        .iter()
                        .map(|ex| Ok(mean_rows(&answer_hidden(target, ex)?[h.rmu_layer])))
                        .collect::<Result<_>>()?;
                }
            }
            Method::RAU => {
                let base = base.ok_or_else(|| Error::InvalidArgument("RAU needs the base model".into()))?;
                if !base.params().same_layout(target.params()) {
                    return Err(Error::Config("base and target architectures differ".into()));
                }
                let l0 = h.rau_start_layer;
                let n = target.num_layers() + 1 - l0;
                job.rau_weights = h.rau_weights.clone().unwrap_or_else(|| vec![1.0; n]);
                job.base_hidden = forget
                    .iter()
                    .map(|ex| Ok(answer_hidden(base, ex)?[l0..].iter().map(|t| t.values().to_vec()).collect()))
                    .collect::<Result<_>>()?;
            }
            _ => {}
        }
        if spec.regularizer == Regularizer::Klr {
            job.klr_ref = retain.iter().map(|ex| answer_logprobs(target, ex)).collect::<Result<_>>()?;
        }
        Ok(job)
    }

    fn forget_term(&self, tape: &mut Tape<'_, f32>, cur: &LmModel, i: usize, scale: f64) -> Result<Var> {
        let h = &self.spec.hyper;
        let ex = &self.forget[i];
        let v = match self.spec.method {
            Method::GA => logprob_on_tape(tape, cur, ex)?.0,
            Method::NPO => {
                let lp = logprob_on_tape(tape, cur, ex)?.0;
                npo_term(tape, lp, self.ref_lp[i], h.beta)
            }
            Method::DPO => {
                let neg = logprob_on_tape(tape, cur, ex)?.0;
                let (pex, pref) = &self.idk[i];
                let pos = logprob_on_tape(tape, cur, pex)?.0;
                dpo_term(tape, pos, neg, *pref, self.ref_lp[i], h.beta)
            }
            Method::RMU => {
                let (_, fv) = logprob_on_tape(tape, cur, ex)?;
                mean_hidden_sq_dist(tape, fv.hidden[h.rmu_layer], answer_rows(ex), &self.cu)
            }
            Method::RAU => {
                let (_, fv) = logprob_on_tape(tape, cur, ex)?;
                let mut acc: Option<Var> = None;
                for (k, l) in (h.rau_start_layer..=cur.num_layers()).enumerate() {
                    let d = rows_sq_dist(tape, fv.hidden[l], answer_rows(ex), &self.base_hidden[i][k]);
                    let d = tape.scale(d, self.rau_weights[k] * h.lambda_unlearn);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, d),
                        None => d,
                    });
                }
                acc.expect("at least one anchored layer")
            }
            // relabeled data: NLL of the new labels
            Method::RL | Method::RM | Method::IDK | Method::WHP => {
                let lp = logprob_on_tape(tape, cur, ex)?.0;
                tape.scale(lp, -1.0)
            }
            Method::TaskVector => unreachable!("task vector is an edit"),
        };
        Ok(tape.scale(v, scale))
    }

    fn batch_grad(&self, cur: &LmModel, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<(f64, GradVector<f32>)> {
        let h = &self.spec.hyper;
        let mut acc = GradAccumulator::new(cur.params().numel());
        let mut loss = 0.0;
        let relabeled = !self.spec.method.is_training_pipeline();
        let ntok: usize = batch.iter().map(|i| self.forget[*i].num_targets()).sum();
        for &i in batch {
            let scale = if relabeled { 1.0 / ntok.max(1) as f64 } else { 1.0 / batch.len() as f64 };
            let mut tape = Tape::with_params(cur.params(), true);
            let v = self.forget_term(&mut tape, cur, i, scale)?;
            loss += tape.scalar(v) as f64;
            acc.add(&tape.param_grads(&tape.backward(v)?), 1.0);
        }

        let rmu_retain = self.spec.method == Method::RMU && h.alpha > 0.0;
        let rau_retain = self.spec.method == Method::RAU && h.lambda_retain != 0.0;
        if self.spec.regularizer != Regularizer::None || rmu_retain || rau_retain {
            let k = h.batch_size.min(self.retain.len());
            let picks: Vec<usize> = index::sample(rng, self.retain.len(), k).into_vec();
            let rtok: usize = picks.iter().map(|j| self.retain[*j].num_targets()).sum();
            for &j in &picks {
                let ex = &self.retain[j];
                let mut tape = Tape::with_params(cur.params(), true);
                let (lp, fv) = logprob_on_tape(&mut tape, cur, ex)?;
                let mut terms: Vec<Var> = Vec::new();
                let nll_w = match self.spec.regularizer {
                    Regularizer::Gdr => h.reg_weight,
                    _ => 0.0,
                } + if rau_retain { h.lambda_retain } else { 0.0 };
                if nll_w != 0.0 {
                    terms.push(tape.scale(lp, -nll_w / rtok as f64));
                }
                if self.spec.regularizer == Regularizer::Klr {
                    let kl = kl_term(&mut tape, fv.logits, answer_rows(ex), &self.klr_ref[j]);
                    terms.push(tape.scale(kl, h.reg_weight / k as f64));
                }
                if rmu_retain {
                    let d = mean_hidden_sq_dist(&mut tape, fv.hidden[h.rmu_layer], answer_rows(ex), &self.frozen_mean[j]);
                    terms.push(tape.scale(d, h.alpha / k as f64));
                }
                let mut total = terms[0];
                for t in &terms[1..] {
                    total = tape.add(total, *t);
                }
                loss += tape.scalar(total) as f64;
                acc.add(&tape.param_grads(&tape.backward(total)?), 1.0);
            }
        }
        Ok((loss, acc.finish()))
    }
}

#[cfg(test)]
mod tests;
