use super::TinyModel;
use crate::error::{Error, Result};

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: appends the arg-max token until `max_new` tokens have
/// been produced or `eos` is emitted (the end token is kept).
pub fn generate_greedy(
    model: &TinyModel,
    prompt: &[usize],
    max_new: usize,
    eos: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Input("prompt must not be empty".into()));
    }
    if prompt.len() + max_new > model.config().context_len {
        return Err(Error::Input(format!(
            "prompt of {} plus {max_new} new tokens exceeds context length {}",
            prompt.len(),
            model.config().context_len
        )));
    }
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        let logits = model.forward_logits(&seq)?;
        let next = argmax(logits.row(seq.len() - 1));
        seq.push(next);
        if Some(next) == eos {
            break;
        }
    }
    Ok(seq)
}
