//! Central finite-difference gradient checking.
//!
//! The checker re-evaluates the caller's forward closure at perturbed
//! inputs, so it shares no code path with [`super::tape::Tape::backward`].
//! Every differentiable subsystem is verified against this oracle in its
//! tests and in the acceptance gradient suite.

use super::tape::{Tape, Var};
use super::{NumResult, Tensor};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default maximum allowed relative error.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all input elements.
    pub max_rel_err: f64,
    /// (input index, element index) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with a small floor so that gradients that are zero on both
/// sides compare as equal.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Check the analytic gradient of `f` (a scalar-valued tape program over the
/// given leaves) against central finite differences with step `step`.
///
/// `f` receives a fresh tape and one bound `Var` per input tensor, in order,
/// and must return the scalar loss variable.
pub fn check<F>(inputs: &[Tensor], f: F, step: f64) -> NumResult<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> NumResult<Var>,
{
    check_coords(inputs, f, step, None)
}

/// Like [`check`], but probing only `per_input` deterministically sampled
/// coordinates of each input. Large modules use this to keep the gradient
/// suite inside its runtime budget; the probed coordinates still get the
/// full central-difference treatment.
pub fn check_sampled<F>(
    inputs: &[Tensor],
    f: F,
    step: f64,
    per_input: usize,
    seed: u64,
) -> NumResult<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> NumResult<Var>,
{
    check_coords(inputs, f, step, Some((per_input, seed)))
}

fn check_coords<F>(
    inputs: &[Tensor],
    f: F,
    step: f64,
    sample: Option<(usize, u64)>,
) -> NumResult<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> NumResult<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    // Numeric pass, one element at a time.
    let eval = |tensors: &[Tensor]| -> NumResult<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let coords: Vec<usize> = match sample {
            None => (0..input.numel()).collect(),
            Some((per_input, seed)) => {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                    seed.wrapping_add(ti as u64),
                );
                (0..per_input.min(input.numel()))
                    .map(|_| rng.gen_range(0..input.numel()))
                    .collect()
            }
        };
        for ei in coords {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_err(analytic[ti][ei], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, ei));
                report.analytic_at_worst = analytic[ti][ei];
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn matmul_softmax_ce_composite_passes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng).with_grad();
        let b = Tensor::randn(vec![4, 2], 1.0, &mut rng).with_grad();
        let report = check(
            &[a, b],
            |tape, vars| {
                let prod = tape.matmul(vars[0], vars[1])?;
                let sm = tape.softmax(prod, 1)?;
                let logits = tape.ln(sm)?;
                tape.cross_entropy(logits, &[0, 1, 0], 1)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(
            report.passed(DEFAULT_TOL),
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn layer_norm_and_gelu_pass() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(vec![3, 8], 1.0, &mut rng).with_grad();
        let gamma = Tensor::randn(vec![8], 0.5, &mut rng).with_grad();
        let beta = Tensor::randn(vec![8], 0.5, &mut rng).with_grad();
        let report = check(
            &[x, gamma, beta],
            |tape, vars| {
                let ln = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                let act = tape.gelu(ln);
                Ok(tape.sum_all(act))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(
            report.passed(DEFAULT_TOL),
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn pooling_and_upsampling_pass() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(vec![16, 2], 1.0, &mut rng).with_grad();
        let report = check(
            &[x],
            |tape, vars| {
                let pooled = tape.pool_avg2(vars[0], 4)?;
                let up = tape.upsample_nearest(pooled, 2, 3)?;
                let sq = tape.mul(up, up)?;
                Ok(tape.sum_all(sq))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(
            report.passed(DEFAULT_TOL),
            "max rel err {}",
            report.max_rel_err
        );
    }
}
