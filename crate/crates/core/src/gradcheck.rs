//! Finite-difference gradient checking.
//!
//! Test-support module: it never participates in training. A scalar loss is
//! re-evaluated from scratch with each input entry perturbed by ±h and the
//! central difference is compared against the analytic gradient from the
//! reverse sweep.

use crate::autodiff::{Tape, Tensor, Var};

/// Central-difference step. 64-bit evaluation keeps cancellation error well
/// below the comparison tolerance at this h.
pub const FD_STEP: f64 = 1e-6;

/// Default comparison tolerance for gradient checks.
pub const FD_TOL: f64 = 1e-4;

/// Relative error that degrades to absolute near zero:
/// `|a - b| / max(|a|, |b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Result of one gradient check: worst relative error and its location.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub worst: f64,
    pub worst_input: usize,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn ok(&self, tol: f64) -> bool {
        self.worst <= tol
    }
}

/// Check d(loss)/d(inputs) for `loss: inputs -> scalar Var`.
///
/// `build` is called once per evaluation with a fresh tape and the current
/// input tensors; it must register every input on that tape itself (so the
/// analytic pass can read the gradients back from the returned roots).
///
/// Returns the worst relative error over every entry of every input.
pub fn check<F>(inputs: &[Tensor], build: F) -> GradCheck
where
    F: Fn(&Tape, &[Tensor]) -> (Var, Vec<Var>),
{
    // Analytic gradients.
    let tape = Tape::new();
    let (loss, roots) = build(&tape, inputs);
    assert_eq!(roots.len(), inputs.len(), "build must return one root per input");
    loss.backward().expect("backward on gradcheck loss");
    let analytic: Vec<Vec<f64>> = roots
        .iter()
        .map(|r| r.grad().unwrap_or_else(|| vec![0.0; r.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let (loss, _) = build(&tape, perturbed);
        loss.scalar_value()
    };

    let mut result = GradCheck { worst: 0.0, worst_input: 0, worst_entry: 0, analytic: 0.0, numeric: 0.0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[ti].data_mut()[e] = orig + FD_STEP;
            let up = eval(&work);
            work[ti].data_mut()[e] = orig - FD_STEP;
            let down = eval(&work);
            work[ti].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[ti][e];
            let err = rel_err(a, numeric);
            if err > result.worst {
                result = GradCheck {
                    worst: err,
                    worst_input: ti,
                    worst_entry: e,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn exp_gradient_matches_central_difference() {
        // d/dx exp(x) at x = 1, the spec's elementwise oracle case.
        let x = Tensor::scalar(1.0);
        let r = check(&[x], |tape, ins| {
            let v = tape.param("x", &ins[0]);
            (v.exp().sum(), vec![v])
        });
        assert!(r.worst <= 1e-6, "rel err {}", r.worst);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // Loss uses x², but report the gradient of a node that is 3x² via
        // scaling — mismatch must be detected.
        let x = Tensor::scalar(2.0);
        let r = check(&[x], |tape, ins| {
            let v = tape.param("x", &ins[0]);
            let wrong_root = v.mul_scalar(3.0);
            (v.square().sum(), vec![wrong_root])
        });
        assert!(!r.ok(FD_TOL));
    }

    #[test]
    fn multi_input_composite() {
        let mut rng = stream_rng(1, Stream::Init, 0);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        let r = check(&[a, b], |tape, ins| {
            let a = tape.param("a", &ins[0]);
            let b = tape.param("b", &ins[1]);
            let loss = a.matmul(&b).unwrap().tanh().mean();
            (loss, vec![a, b])
        });
        assert!(r.ok(FD_TOL), "rel err {}", r.worst);
    }
}
