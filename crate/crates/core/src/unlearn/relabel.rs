use log::warn;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{gen_pii_value, PiiType, QaPair};
use crate::error::{Error, Result};
use crate::lm::LmModel;
use crate::tensor::log_sum_exp;
use crate::tokenizer::{encode, is_stop};

/// Uncertainty answers used by IDK relabeling and as DPO's preferred
/// completion.
pub const IDK_PHRASES: [&str; 6] = [
    "I don't know.",
    "I have no idea.",
    "I cannot tell you that.",
    "That is not something I know.",
    "I am not sure.",
    "Sorry, I can't help with that.",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelabelStrategy {
    /// Random plausible PII of the same type.
    RL,
    /// Answers permuted among questions with no fixed point.
    RM,
    /// An uncertainty phrase.
    IDK,
}

pub fn idk_phrase(rng: &mut ChaCha8Rng) -> &'static str {
    IDK_PHRASES[rng.gen_range(0..IDK_PHRASES.len())]
}

fn pii_type_of(attribute: &str) -> Option<PiiType> {
    PiiType::ALL.into_iter().find(|t| t.label() == attribute)
}

/// Replaces forget-set answers according to `strategy`; deterministic per
/// seed.
pub fn relabel(strategy: RelabelStrategy, set: &[QaPair], seed: u64) -> Result<Vec<QaPair>> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("relabel needs a nonempty set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e1a_be11);
    match strategy {
        RelabelStrategy::IDK => Ok(set.iter().map(|q| q.with_answer(&encode(idk_phrase(&mut rng)))).collect()),
        RelabelStrategy::RL => set
            .iter()
            .map(|q| {
                let ty = pii_type_of(&q.attribute).unwrap_or(PiiType::Email);
                let orig = q.pii_text();
                let v = loop {
                    let v = gen_pii_value(&mut rng, ty);
                    if v != orig {
                        break v;
                    }
                };
                Ok(q.with_answer(&encode(&v)))
            })
            .collect(),
        RelabelStrategy::RM => {
            if set.len() < 2 {
                return Err(Error::InvalidArgument("random mapping needs at least two samples".into()));
            }
            // Sattolo's algorithm: a uniformly random single cycle, hence a derangement
            let mut perm: Vec<usize> = (0..set.len()).collect();
            for i in (1..perm.len()).rev() {
                let j = rng.gen_range(0..i);
                perm.swap(i, j);
            }
            Ok(set.iter().enumerate().map(|(i, q)| q.with_answer(&set[perm[i]].answer)).collect())
        }
    }
}

/// `p_target − α(p_reinforce − p_target)`, negatives clamped to zero and
/// renormalized. Returns `p_target` and `true` when all mass is clamped.
pub fn whp_distribution(p_target: &[f64], p_reinforce: &[f64], alpha: f64) -> (Vec<f64>, bool) {
    let raw: Vec<f64> =
        p_target.iter().zip(p_reinforce).map(|(t, r)| (t - alpha * (r - t)).max(0.0)).collect();
    let z: f64 = raw.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        let zt: f64 = p_target.iter().sum();
        return (p_target.iter().map(|p| p / zt).collect(), true);
    }
    (raw.into_iter().map(|p| p / z).collect(), false)
}

fn next_probs(model: &LmModel, ctx: &[u32]) -> Result<Vec<f64>> {
    let out = model.forward(ctx)?;
    let v = model.config().vocab_size;
    let row = &out.logits.values()[(ctx.len() - 1) * v..ctx.len() * v];
    let lse = log_sum_exp(row) as f64;
    Ok(row.iter().map(|z| (*z as f64 - lse).exp()).collect())
}

/// Alternative labels sampled token by token from the interpolated WHP
/// distribution, up to the original answer length. Returns the relabeled
/// pairs and the number of positions that fell back to `p_target`.
pub fn whp_labels(
    target: &LmModel,
    reinforce: &LmModel,
    set: &[QaPair],
    alpha: f64,
    seed: u64,
) -> Result<(Vec<QaPair>, usize)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0057_4850);
    let mut fallbacks = 0;
    let mut out = Vec::with_capacity(set.len());
    for q in set {
        let mut ctx = q.prompt();
        let mut answer = Vec::new();
        for _ in 0..q.answer.len() {
            if ctx.len() >= target.config().max_seq_len {
                break;
            }
            let (p, fell_back) = whp_distribution(&next_probs(target, &ctx)?, &next_probs(reinforce, &ctx)?, alpha);
            if fell_back {
                fallbacks += 1;
                warn!("whp: all probability mass clamped for pair {}; using target distribution", q.id);
            }
            let tok = WeightedIndex::new(&p)
                .map_err(|e| Error::NonFinite(format!("whp distribution: {e}")))?
                .sample(&mut rng) as u32;
            if is_stop(tok) {
                break;
            }
            answer.push(tok);
            ctx.push(tok);
        }
        out.push(q.with_answer(&answer));
    }
    Ok((out, fallbacks))
}
