//! Composite attack objective.
//!
//! For one sample with prompt `x`, clean response `y_1..y_N` and key-token
//! set `K`, with `p_i` the softmax of the logits that predict `y_i` under
//! teacher forcing:
//!
//! ```text
//! key_tokens = (sum_i sum_{t in K} p_i[t])^2
//! ppl        = exp(-(1/N) sum_i ln p_i[y_i])      (ln clamped at -30)
//! attack     = key_tokens + ppl
//! ```
//!
//! Over a batch the reported terms are per-sample means.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::TinyModel;

/// Floor applied to log-probabilities inside the perplexity term.
pub const LOG_FLOOR: f64 = -30.0;

/// One attack prompt with its clean teacher-forcing targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSample {
    pub prompt_ids: Vec<usize>,
    pub response_ids: Vec<usize>,
    pub key_tokens: BTreeSet<usize>,
}

impl AttackSample {
    pub fn new(
        prompt_ids: Vec<usize>,
        response_ids: Vec<usize>,
        key_tokens: BTreeSet<usize>,
    ) -> Result<Self> {
        if prompt_ids.is_empty() {
            return Err(Error::Input("attack sample needs a non-empty prompt".into()));
        }
        if response_ids.is_empty() {
            return Err(Error::Input("attack sample needs a non-empty response".into()));
        }
        Ok(Self {
            prompt_ids,
            response_ids,
            key_tokens,
        })
    }

    /// Response length `N`.
    pub fn n(&self) -> usize {
        self.response_ids.len()
    }

    /// Model input under teacher forcing: prompt followed by all but the
    /// last response token.
    pub fn teacher_input(&self) -> Vec<usize> {
        let mut ids = self.prompt_ids.clone();
        ids.extend_from_slice(&self.response_ids[..self.response_ids.len() - 1]);
        ids
    }

    /// Logit rows that predict each response token.
    pub fn response_positions(&self) -> Vec<usize> {
        let start = self.prompt_ids.len() - 1;
        (start..start + self.response_ids.len()).collect()
    }
}

/// Which terms make up the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// key-tokens + perplexity.
    #[default]
    Full,
    /// key-tokens only.
    NoPpl,
    /// perplexity only.
    NoKey,
    /// key-tokens - perplexity: rewards gibberish.
    InvertedPpl,
}

impl LossMode {
    fn weights(self) -> (f64, f64) {
        match self {
            LossMode::Full => (1.0, 1.0),
            LossMode::NoPpl => (1.0, 0.0),
            LossMode::NoKey => (0.0, 1.0),
            LossMode::InvertedPpl => (1.0, -1.0),
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossMode::Full),
            "no-ppl" => Ok(LossMode::NoPpl),
            "no-key" => Ok(LossMode::NoKey),
            "inverted-ppl" => Ok(LossMode::InvertedPpl),
            _ => Err(Error::Input(format!(
                "unknown loss mode `{s}` (full|no-ppl|no-key|inverted-ppl)"
            ))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Full => "full",
            LossMode::NoPpl => "no-ppl",
            LossMode::NoKey => "no-key",
            LossMode::InvertedPpl => "inverted-ppl",
        })
    }
}

/// Terms of one objective evaluation.
///
/// `key_tokens_loss` and `ppl_loss` are the signed contributions under the
/// active [`LossMode`], so `attack_loss == key_tokens_loss + ppl_loss`
/// always holds bit-for-bit. The unweighted measurements are kept in
/// `key_token_mass` and `perplexity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub key_tokens_loss: f64,
    pub ppl_loss: f64,
    pub attack_loss: f64,
    pub key_token_mass: f64,
    pub perplexity: f64,
}

impl LossBreakdown {
    fn from_raw(mode: LossMode, key_token_mass: f64, perplexity: f64) -> Self {
        let (wk, wp) = mode.weights();
        let key_tokens_loss = wk * key_token_mass;
        let ppl_loss = wp * perplexity;
        Self {
            key_tokens_loss,
            ppl_loss,
            attack_loss: key_tokens_loss + ppl_loss,
            key_token_mass,
            perplexity,
        }
    }
}

fn check_distributions(tape: &Tape, probs: Var) -> Result<(usize, usize)> {
    let shape = tape.shape(probs);
    let [n, v] = *shape else {
        return Err(Error::Dimension(format!("probabilities must be [N, V], got {shape:?}")));
    };
    if n == 0 || v == 0 {
        return Err(Error::Input("empty probability matrix".into()));
    }
    for (r, row) in tape.value(probs).chunks(v).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
            return Err(Error::Input(format!("row {r} is not a distribution (sum {s})")));
        }
    }
    Ok((n, v))
}

/// `(sum_i sum_{t in K} probs[i, t])^2` as a scalar node.
pub fn key_tokens_loss(tape: &mut Tape, probs: Var, key_tokens: &BTreeSet<usize>) -> Result<Var> {
    check_distributions(tape, probs)?;
    let cols: Vec<usize> = key_tokens.iter().copied().collect();
    let mass = tape.sum_columns(probs, &cols)?;
    tape.mul(mass, mass)
}

/// `exp(-(1/N) sum_i ln probs[i, y_i])` as a scalar node, with each log
/// clamped below at [`LOG_FLOOR`].
pub fn ppl_loss(tape: &mut Tape, probs: Var, targets: &[usize]) -> Result<Var> {
    let (n, _) = check_distributions(tape, probs)?;
    if targets.len() != n {
        return Err(Error::Input(format!(
            "{} targets for {n} probability rows",
            targets.len()
        )));
    }
    let picked = tape.pick_per_row(probs, targets)?;
    let logs = tape.ln_clamped(picked, LOG_FLOOR);
    let mean = tape.mean(logs);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.exp(neg))
}

struct SampleTerms {
    key_tokens: Var,
    ppl: Var,
}

fn sample_terms(
    model: &TinyModel,
    tape: &mut Tape,
    bindings: &crate::model::Bindings,
    sample: &AttackSample,
) -> Result<SampleTerms> {
    let logits = model.forward_on_tape(tape, bindings, &sample.teacher_input())?;
    let rows = tape.select_rows(logits, &sample.response_positions())?;
    let probs = tape.softmax(rows);
    Ok(SampleTerms {
        key_tokens: key_tokens_loss(tape, probs, &sample.key_tokens)?,
        ppl: ppl_loss(tape, probs, &sample.response_ids)?,
    })
}

/// Records the batch objective on `tape`. Returns the scalar root (mean of
/// per-sample objectives) and the breakdown.
pub fn record_attack_loss(
    model: &TinyModel,
    tape: &mut Tape,
    bindings: &crate::model::Bindings,
    samples: &[AttackSample],
    mode: LossMode,
) -> Result<(Var, LossBreakdown)> {
    if samples.is_empty() {
        return Err(Error::Input("no attack samples".into()));
    }
    let (wk, wp) = mode.weights();
    let inv_n = 1.0 / samples.len() as f64;
    let mut root: Option<Var> = None;
    let (mut kt_sum, mut ppl_sum) = (0.0, 0.0);
    for s in samples {
        let t = sample_terms(model, tape, bindings, s)?;
        kt_sum += tape.scalar(t.key_tokens)?;
        ppl_sum += tape.scalar(t.ppl)?;
        let a = tape.scale(t.key_tokens, wk);
        let b = tape.scale(t.ppl, wp);
        let obj = tape.add(a, b)?;
        root = Some(match root {
            None => obj,
            Some(r) => tape.add(r, obj)?,
        });
    }
    let root = tape.scale(root.expect("non-empty batch"), inv_n);
    Ok((root, LossBreakdown::from_raw(mode, kt_sum * inv_n, ppl_sum * inv_n)))
}

/// Forward-only batch objective.
pub fn attack_loss(model: &TinyModel, samples: &[AttackSample], mode: LossMode) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    Ok(record_attack_loss(model, &mut tape, &b, samples, mode)?.1)
}

/// Batch objective plus backward; gradients land in the model's grad slots.
pub fn attack_loss_with_grads(
    model: &mut TinyModel,
    samples: &[AttackSample],
    mode: LossMode,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let (root, breakdown) = record_attack_loss(model, &mut tape, &b, samples, mode)?;
    tape.backward(root)?;
    model.clear_grads();
    model.absorb_grads(&tape, &b)?;
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn probs(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        let v = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.leaf(&Tensor::new(vec![rows.len(), v], data).unwrap())
    }

    fn eval_kt(rows: &[&[f64]], k: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let p = probs(&mut tape, rows);
        let l = key_tokens_loss(&mut tape, p, &k.iter().copied().collect()).unwrap();
        tape.scalar(l).unwrap()
    }

    fn eval_ppl(rows: &[&[f64]], y: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let p = probs(&mut tape, rows);
        let l = ppl_loss(&mut tape, p, y).unwrap();
        tape.scalar(l).unwrap()
    }

    #[test]
    fn key_tokens_fixtures() {
        let r: &[f64] = &[0.5, 0.3, 0.2];
        assert_eq!(eval_kt(&[r], &[]), 0.0);
        assert!((eval_kt(&[r], &[0, 1]) - 0.64).abs() < 1e-9);
        let want = (2.0f64 * (0.5 + 0.2)).powi(2);
        assert!((eval_kt(&[r, r], &[0, 2]) - want).abs() < 1e-9);
    }

    #[test]
    fn ppl_fixtures() {
        assert!((eval_ppl(&[&[0.0, 1.0], &[1.0, 0.0]], &[1, 0]) - 1.0).abs() < 1e-9);
        let u: &[f64] = &[0.25; 4];
        for n in 1..5 {
            let rows = vec![u; n];
            assert!((eval_ppl(&rows, &vec![2; n]) - 4.0).abs() < 1e-9);
        }
        let a: &[f64] = &[0.5, 0.5, 0.0];
        let b: &[f64] = &[0.125, 0.0, 0.875];
        assert!((eval_ppl(&[a, b], &[0, 0]) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn ppl_clamps_zero_probability() {
        let v = eval_ppl(&[&[1.0, 0.0]], &[1]);
        assert!((v - 30f64.exp()).abs() / 30f64.exp() < 1e-12);
    }

    #[test]
    fn input_errors() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[&[0.5, 0.5]]);
        assert!(matches!(ppl_loss(&mut tape, p, &[0, 1]), Err(Error::Input(_))));
        let bad = probs(&mut tape, &[&[0.5, 0.6]]);
        assert!(key_tokens_loss(&mut tape, bad, &BTreeSet::new()).is_err());
        let empty = tape.leaf(&Tensor::zeros(vec![0, 3]));
        assert!(matches!(key_tokens_loss(&mut tape, empty, &BTreeSet::new()), Err(Error::Input(_))));
        assert!(AttackSample::new(vec![1], vec![], BTreeSet::new()).is_err());
    }

    fn model() -> TinyModel {
        TinyModel::new(ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            context_len: 12,
            seed: 9,
        })
        .unwrap()
    }

    fn samples() -> Vec<AttackSample> {
        vec![
            AttackSample::new(vec![3, 4, 5], vec![6, 7, 2], BTreeSet::from([6, 7])).unwrap(),
            AttackSample::new(vec![8, 9], vec![10, 11, 5, 2], BTreeSet::from([10, 5])).unwrap(),
        ]
    }

    #[test]
    fn breakdown_identity_in_every_mode() {
        let m = model();
        for mode in [LossMode::Full, LossMode::NoPpl, LossMode::NoKey, LossMode::InvertedPpl] {
            let b = attack_loss(&m, &samples(), mode).unwrap();
            assert_eq!(b.attack_loss, b.key_tokens_loss + b.ppl_loss);
            assert!(b.attack_loss.is_finite());
        }
        let full = attack_loss(&m, &samples(), LossMode::Full).unwrap();
        assert!(full.ppl_loss >= 1.0);
    }

    #[test]
    fn batch_is_mean_of_samples() {
        let m = model();
        let all = attack_loss(&m, &samples(), LossMode::Full).unwrap();
        let parts: Vec<_> = samples()
            .into_iter()
            .map(|s| attack_loss(&m, &[s], LossMode::Full).unwrap())
            .collect();
        let kt = parts.iter().map(|p| p.key_tokens_loss).sum::<f64>() / 2.0;
        let ppl = parts.iter().map(|p| p.ppl_loss).sum::<f64>() / 2.0;
        assert!((all.key_tokens_loss - kt).abs() < 1e-12);
        assert!((all.ppl_loss - ppl).abs() < 1e-12);
    }

    #[test]
    fn teacher_forcing_positions() {
        let s = &samples()[0];
        assert_eq!(s.teacher_input(), vec![3, 4, 5, 6, 7]);
        assert_eq!(s.response_positions(), vec![2, 3, 4]);
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        use crate::autodiff::{grad_check, GradCheckConfig};
        let m = model();
        let params: Vec<Tensor> = m.params().into_iter().cloned().collect();
        let batch = samples();
        for mode in [LossMode::Full, LossMode::InvertedPpl] {
            let err = grad_check(
                |tape, vars| {
                    let b = crate::model::Bindings::from_vars(vars.to_vec());
                    Ok(record_attack_loss(&m, tape, &b, &batch, mode)?.0)
                },
                &params,
                GradCheckConfig {
                    samples_per_param: Some(6),
                    seed: 4,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(err < 1e-4, "{mode}: {err}");
        }
    }

    #[test]
    fn with_grads_fills_every_module() {
        let mut m = model();
        let fwd = attack_loss(&m, &samples(), LossMode::Full).unwrap();
        let bwd = attack_loss_with_grads(&mut m, &samples(), LossMode::Full).unwrap();
        assert_eq!(fwd, bwd);
        let grads = m.grad_by_module().unwrap();
        assert_eq!(grads.len(), 7);
        assert!(grads.values().all(|g| g.data().iter().any(|x| *x != 0.0)));
    }

    proptest! {
        #[test]
        fn bounds_and_monotonicity(
            logits in proptest::collection::vec(-4.0f64..4.0, 12),
            k in proptest::collection::btree_set(0usize..4, 0..4),
            drop in 0usize..4,
        ) {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::new(vec![3, 4], logits).unwrap());
            let p = tape.softmax(x);
            let full = key_tokens_loss(&mut tape, p, &k).unwrap();
            let mut smaller = k.clone();
            smaller.remove(&drop);
            let less = key_tokens_loss(&mut tape, p, &smaller).unwrap();
            let (full, less) = (tape.scalar(full).unwrap(), tape.scalar(less).unwrap());
            prop_assert!(full >= 0.0 && full <= 9.0 + 1e-12);
            prop_assert!(less <= full);
            let ppl = ppl_loss(&mut tape, p, &[0, 1, 2]).unwrap();
            prop_assert!(tape.scalar(ppl).unwrap() >= 1.0);
        }
    }
}
