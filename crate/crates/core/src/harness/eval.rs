use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::keytoken::EOS;
use crate::model::{generate_greedy, TinyModel};
use crate::toy::QaTask;

/// Fraction of tasks whose greedy continuation equals the reference answer
/// (including its end token).
pub fn eval_accuracy(model: &TinyModel, tasks: &[QaTask]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Input("no evaluation tasks".into()));
    }
    let mut correct = 0usize;
    for t in tasks {
        let out = generate_greedy(model, &t.prompt_ids, t.answer_ids.len(), Some(EOS))?;
        if out[t.prompt_ids.len()..] == t.answer_ids[..] {
            correct += 1;
        }
    }
    Ok(correct as f64 / tasks.len() as f64)
}

/// `exp` of the mean next-token NLL over `corpus` under teacher forcing.
///
/// The corpus is cut into windows of `context_len + 1` tokens that overlap
/// by one, so every token after the first is predicted exactly once.
pub fn eval_perplexity(model: &TinyModel, corpus: &[usize]) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::Input("perplexity corpus needs at least two tokens".into()));
    }
    let ctx = model.config().context_len;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < corpus.len() {
        let end = (start + ctx + 1).min(corpus.len());
        let window = &corpus[start..end];
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let logits = model.forward_on_tape(&mut tape, &b, &window[..window.len() - 1])?;
        let nll = tape.cross_entropy(logits, &window[1..])?;
        let n = window.len() - 1;
        total += tape.scalar(nll)? * n as f64;
        count += n;
        start += ctx;
    }
    Ok((total / count as f64).exp())
}
