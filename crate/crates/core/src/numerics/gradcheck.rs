//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over all input elements of
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
    pub max_rel_error: f64,
    /// per-input maxima, same order as the inputs
    pub per_input: Vec<f64>,
}

/// Relative error with an absolute floor, so near-zero gradients do not
/// blow the ratio up.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks the analytic gradient of `f` (a scalar-valued graph builder)
/// against central finite differences of step `eps`, for every element of
/// every input. `f` must be deterministic: it is re-invoked on perturbed
/// copies of the inputs.
#[allow(clippy::needless_range_loop)]
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("grad_check eps must be > 0, got {eps}")));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.input(t)).collect();
        let out = f(&tape, &vars);
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check requires a scalar-valued function, got shape {:?}",
                out.shape()
            )));
        }
        Ok(out.item())
    };

    // analytic pass
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let grad_inputs: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad()).collect();
        let vars: Vec<Var> = grad_inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&tape, &vars);
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check requires a scalar-valued function, got shape {:?}",
                out.shape()
            )));
        }
        tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    };

    let mut per_input = vec![0.0f64; inputs.len()];
    let mut work: Vec<Tensor> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[ti][ei], numeric);
            if err > per_input[ti] {
                per_input[ti] = err;
            }
        }
    }
    let max_rel_error = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;
    use crate::numerics::rng::Rng;

    #[test]
    fn sum_has_tiny_error() {
        let input = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let report = grad_check(|_, vars| vars[0].sum_all(), &[input], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-10, "{}", report.max_rel_error);
    }

    #[test]
    fn softmax_then_sum_of_squares() {
        let mut rng = Rng::new(21);
        let input = Tensor::uniform(&mut rng, &[4], -1.0, 1.0);
        let report = grad_check(
            |_, vars| {
                let s = vars[0].softmax(0);
                s.mul(s).sum_all()
            },
            &[input],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn matmul_relu_chain() {
        let mut rng = Rng::new(33);
        let a = Tensor::uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let b = Tensor::uniform(&mut rng, &[4, 2], -1.0, 1.0);
        let report = grad_check(
            |_, vars| vars[0].matmul(vars[1]).relu().sum_all(),
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn composed_graph_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let x = Tensor::uniform(&mut rng, &[2, 3], -0.8, 0.8);
        let w = Tensor::uniform(&mut rng, &[3, 3], -0.8, 0.8);
        let report = grad_check(
            |_, vars| {
                let h = vars[0].matmul(vars[1]).tanh();
                let s = h.softmax(1);
                s.mul(s).sum_all().ln()
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = Rng::new(55);
        let x = Tensor::uniform(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
        let w = Tensor::uniform(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
        let b = Tensor::uniform(&mut rng, &[3], -0.5, 0.5);
        let report = grad_check(
            |_, vars| vars[0].conv2d(vars[1], vars[2]).tanh().sum_all(),
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut rng = Rng::new(77);
        let logits = Tensor::uniform(&mut rng, &[3, 5], -2.0, 2.0);
        let report = grad_check(
            |_, vars| ops::cross_entropy(vars[0], &[1, 4, 0]).unwrap(),
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{}", report.max_rel_error);
    }

    #[test]
    fn dropout_with_fixed_seed_is_checkable() {
        let mut rng = Rng::new(3);
        let x = Tensor::uniform(&mut rng, &[6], -1.0, 1.0);
        let report = grad_check(
            |_, vars| {
                let mut drop_rng = Rng::new(42);
                vars[0].dropout(0.5, true, &mut drop_rng).mul(vars[0]).sum_all()
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{}", report.max_rel_error);
    }

    #[test]
    fn rejects_non_scalar_function() {
        let input = Tensor::zeros(&[3]);
        let err = grad_check(|_, vars| vars[0].relu(), &[input], 1e-5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn rejects_non_positive_eps() {
        let input = Tensor::zeros(&[1]);
        assert!(grad_check(|_, vars| vars[0].sum_all(), &[input], 0.0).is_err());
    }
}
