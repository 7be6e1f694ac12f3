//! Finite-difference gradient verification.
//!
//! Compares tape gradients against central differences, element by element,
//! with the symmetric relative error
//! `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
//! The step and the pass tolerance default to 1e-3 in single precision and
//! 1e-5 in double precision.

use super::tape::{Tape, ValId};
use super::tensor::Tensor;
use crate::Real;

/// Central-difference step matched to the active precision.
pub fn default_eps() -> Real {
    if crate::REAL_IS_F64 {
        1e-5
    } else {
        1e-3
    }
}

/// Pass tolerance matched to the active precision.
pub fn default_tol() -> Real {
    if crate::REAL_IS_F64 {
        1e-5
    } else {
        1e-3
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst per-element error over all inputs.
    pub max_err: Real,
    pub mean_err: Real,
    /// Number of scalar entries checked.
    pub checked: usize,
    /// (input index, element index) of the worst error.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, tol: Real) -> bool {
        self.max_err <= tol
    }
}

/// Check the gradient of `build` w.r.t. every element of every input.
///
/// `build` must construct a scalar loss from leaves registered in input
/// order; it is re-invoked ~2 times per input element, so keep fixtures
/// small. Elements whose analytic gradient is absent (unreached leaves)
/// are compared against zero.
pub fn gradcheck<F>(build: F, inputs: &[Tensor], eps: Real) -> GradCheckReport
where
    F: Fn(&mut Tape, &[ValId]) -> ValId,
{
    let eval = |tensors: &[Tensor]| -> Real {
        let mut tape = Tape::new();
        let ids: Vec<ValId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item()
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let ids: Vec<ValId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.value(loss).numel(), 1, "gradcheck loss must be scalar");
    let grads = tape.backward(loss);
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, t)| grads.wrt(id).cloned().unwrap_or_else(|| Tensor::zeros(&t.shape)))
        .collect();

    let mut max_err: Real = 0.0;
    let mut sum_err: Real = 0.0;
    let mut checked = 0usize;
    let mut worst = (0usize, 0usize);
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = work[ii].data[e];
            work[ii].data[e] = orig + eps;
            let fp = eval(&work);
            work[ii].data[e] = orig - eps;
            let fm = eval(&work);
            work[ii].data[e] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ii].data[e];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if err > max_err {
                max_err = err;
                worst = (ii, e);
            }
            sum_err += err;
            checked += 1;
        }
    }
    GradCheckReport {
        max_err,
        mean_err: if checked > 0 { sum_err / checked as Real } else { 0.0 },
        checked,
        worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_smooth_graph() {
        let inputs = vec![Tensor::new(vec![0.3, -0.4, 0.9, 0.1], &[2, 2])];
        let rep = gradcheck(
            |t, ids| {
                let e = t.exp(ids[0]);
                let s = t.sin_scaled(ids[0], 2.0);
                let m = t.mul(e, s).unwrap();
                t.sum(m)
            },
            &inputs,
            default_eps(),
        );
        assert!(rep.passes(default_tol()), "max_err = {}", rep.max_err);
    }

    #[test]
    fn catches_a_wrong_backward() {
        // Use stop_grad to deliberately zero an analytic gradient the
        // numeric one sees: the checker must flag it.
        let inputs = vec![Tensor::new(vec![0.7], &[1])];
        let rep = gradcheck(
            |t, ids| {
                let d = t.stop_grad(ids[0]);
                let m = t.mul(ids[0], d).unwrap();
                t.sum(m)
            },
            &inputs,
            default_eps(),
        );
        // Numeric derivative of x*x is 2x = 1.4; analytic along the
        // stop-grad graph is 0.7. Mismatch must exceed the tolerance.
        assert!(!rep.passes(default_tol()), "negative control failed: {}", rep.max_err);
    }
}
