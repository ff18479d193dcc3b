use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter; `None` checks every coordinate.
    pub samples_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_param: None,
            seed: 0,
        }
    }
}

/// Relative error used throughout the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of `f` against central finite differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params` (same order)
/// and must return a scalar node. Returns the largest relative error over the
/// checked coordinates.
pub fn grad_check<F>(mut f: F, params: &[Tensor], config: GradCheckConfig) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut eval = |work: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = work.iter().map(|p| tape.leaf(p)).collect();
        let root = f(&mut tape, &vars)?;
        tape.scalar(root)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        let n = params[pi].numel();
        let coords: Vec<usize> = match config.samples_per_param {
            Some(s) if s < n => sample(&mut rng, n, s).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + config.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = orig - config.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            if !numeric.is_finite() {
                return Err(Error::Input(format!(
                    "non-finite finite difference at param {pi}, coordinate {c}"
                )));
            }
            worst = worst.max(relative_error(grads[c], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_and_constant() {
        let x = rand_tensor(vec![3, 4], 1);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x.clone()],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let err = grad_check(
            |t, _| Ok(t.leaf(&Tensor::scalar(4.2))),
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    fn check_op(seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>, shapes: &[Vec<usize>]) {
        let params: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| rand_tensor(s.clone(), seed * 31 + i as u64))
            .collect();
        // Contract through a fixed random projection so every output
        // coordinate carries a distinct weight.
        let err = grad_check(
            |t, v| {
                let y = build(t, v)?;
                let n = t.value(y).len();
                let w = rand_tensor(vec![n], 999);
                let shape = t.shape(y).to_vec();
                let w = Tensor::new(shape, w.into_data())?;
                let wv = t.leaf(&w);
                let p = t.mul(y, wv)?;
                Ok(t.sum(p))
            },
            &params,
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn every_op_matches_finite_differences(seed in 0u64..1_000) {
            check_op(seed, |t, v| t.matmul(v[0], v[1]), &[vec![3, 4], vec![4, 2]]);
            check_op(seed, |t, v| t.add(v[0], v[1]), &[vec![2, 3], vec![2, 3]]);
            check_op(seed, |t, v| t.add_row_bias(v[0], v[1]), &[vec![3, 2], vec![2]]);
            check_op(seed, |t, v| t.mul(v[0], v[1]), &[vec![2, 3], vec![2, 3]]);
            check_op(seed, |t, v| Ok(t.scale(v[0], -1.7)), &[vec![2, 2]]);
            check_op(seed, |t, v| t.gather(v[0], &[2, 0, 2]), &[vec![3, 4]]);
            check_op(seed, |t, v| Ok(t.softmax(v[0])), &[vec![3, 5]]);
            check_op(seed, |t, v| t.rms_norm(v[0], 1e-6), &[vec![3, 4]]);
            check_op(seed, |t, v| Ok(t.silu(v[0])), &[vec![2, 5]]);
            check_op(seed, |t, v| t.causal_attention(v[0], v[1], v[2], 2), &[vec![4, 6], vec![4, 6], vec![4, 6]]);
            check_op(seed, |t, v| t.cross_entropy(v[0], &[1, 4, 0]), &[vec![3, 5]]);
            check_op(seed, |t, v| t.select_rows(v[0], &[2, 2, 0]), &[vec![3, 3]]);
            check_op(seed, |t, v| { let p = t.softmax(v[0]); t.sum_columns(p, &[0, 3]) }, &[vec![3, 4]]);
            check_op(seed, |t, v| { let p = t.softmax(v[0]); let k = t.pick_per_row(p, &[1, 0, 3])?; Ok(t.ln_clamped(k, -30.0)) }, &[vec![3, 4]]);
            check_op(seed, |t, v| { let s = t.scale(v[0], 0.3); Ok(t.exp(s)) }, &[vec![2, 3]]);
        }

        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let n = row.len();
            let mut tape = Tape::new();
            let a = tape.leaf(&Tensor::new(vec![1, n], row.clone()).unwrap());
            let b = tape.leaf(&Tensor::new(vec![1, n], row.iter().map(|v| v + shift).collect()).unwrap());
            let pa = tape.softmax(a);
            let pb = tape.softmax(b);
            let s: f64 = tape.value(pa).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(tape.value(pa).iter().all(|&p| p > 0.0));
            for (x, y) in tape.value(pa).iter().zip(tape.value(pb)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
