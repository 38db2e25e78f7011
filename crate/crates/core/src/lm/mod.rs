//! Tiny decoder-only transformer: forward pass with hidden-state capture,
//! sequence scoring, greedy decoding, and training.

mod config;
mod generate;
mod model;
mod train;

pub use config::ModelConfig;
pub use generate::{argmax, generate_greedy, generate_greedy_with_hint};
pub use model::{block_layer_of, block_prefix, config_sidecar, forward_on_tape, ForwardOutput, ForwardVars, Layout, LmModel};
pub use train::{
    example_nll_on_tape, fine_tune, target_logprob_on_tape, train_lm, train_with, Example, EpochHook, TrainLog,
    TrainSchedule,
};

use crate::error::{Error, Result};
use crate::tensor::log_sum_exp;

/// `log P(y | x)`: sum of next-token log-probabilities of `y` after `x`.
///
/// `x` is fed verbatim, so callers that want a BOS prefix include it.
pub fn seq_logprob(model: &LmModel, x: &[u32], y: &[u32]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("empty target sequence".into()));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty prefix".into()));
    }
    let mut tokens = x.to_vec();
    tokens.extend_from_slice(y);
    Ok(token_logprobs(model, &tokens, x.len())?.iter().sum())
}

/// Per-position `log P(tokens[t] | tokens[..t])` for `t in start..len`.
pub fn token_logprobs(model: &LmModel, tokens: &[u32], start: usize) -> Result<Vec<f64>> {
    if start == 0 || start > tokens.len() {
        return Err(Error::InvalidArgument(format!("target start {start} outside 1..={}", tokens.len())));
    }
    // the last position predicts nothing we score
    let out = model.forward(&tokens[..tokens.len() - 1])?;
    let v = model.config().vocab_size;
    let logits = out.logits.values();
    Ok((start..tokens.len())
        .map(|t| {
            let row = &logits[(t - 1) * v..t * v];
            let lse = log_sum_exp(row);
            (row[tokens[t] as usize] - lse) as f64
        })
        .collect())
}
