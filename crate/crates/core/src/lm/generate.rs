use crate::error::{Error, Result};
use crate::tokenizer::is_stop;

use super::LmModel;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy argmax decoding. The stop token, if produced, is included in the
/// output. Generation also ends when the context window is full.
pub fn generate_greedy(model: &LmModel, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    generate_greedy_with_hint(model, prompt, &[], max_new)
}

/// Greedy decoding that first checks a guessed continuation `hint` with a
/// single forward pass. Because the model is causal, the accepted prefix is
/// exactly what token-by-token decoding would produce, so the output equals
/// [`generate_greedy`] for any hint; a good hint only saves forward passes.
pub fn generate_greedy_with_hint(model: &LmModel, prompt: &[u32], hint: &[u32], max_new: usize) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let max_len = model.config().max_seq_len;
    if prompt.len() > max_len {
        return Err(Error::Overlong { len: prompt.len(), max: max_len });
    }
    let v = model.config().vocab_size;
    let mut out: Vec<u32> = Vec::new();
    let budget = max_new.min(max_len - prompt.len() + 1);

    let hint = &hint[..hint.len().min(budget.saturating_sub(1))];
    if !hint.is_empty() {
        let mut seq = prompt.to_vec();
        seq.extend_from_slice(hint);
        let logits = model.forward(&seq)?.logits;
        for i in 0..=hint.len() {
            let row = &logits.values()[(prompt.len() - 1 + i) * v..(prompt.len() + i) * v];
            let tok = argmax(row) as u32;
            out.push(tok);
            if is_stop(tok) || out.len() == budget || i == hint.len() || tok != hint[i] {
                break;
            }
        }
        if out.last().is_some_and(|t| is_stop(*t)) || out.len() >= budget {
            return Ok(out);
        }
    }

    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&out);
    while out.len() < budget && seq.len() <= max_len {
        let logits = model.forward(&seq)?.logits;
        let t = seq.len() - 1;
        let tok = argmax(&logits.values()[t * v..(t + 1) * v]) as u32;
        out.push(tok);
        seq.push(tok);
        if is_stop(tok) {
            break;
        }
    }
    Ok(out)
}
