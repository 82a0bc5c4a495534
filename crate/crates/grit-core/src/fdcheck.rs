//! Central-difference gradient checking. Everything runs in f64, so a step
//! around 1e-5 leaves several digits of agreement when an adjoint is correct;
//! a wrong adjoint shows up orders of magnitude away from any tolerance.

use std::rc::Rc;

use crate::tape::{new_tape, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FdReport {
    /// max over coordinates of |analytic - numeric| / (|numeric| + 1e-8).
    pub max_rel_err: f64,
    /// (input index, flat coordinate) where the max occurred.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

impl FdReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Checks the adjoints of a scalar-valued graph against central differences,
/// rebuilding the graph for every perturbed evaluation. `build` receives one
/// differentiable leaf per input tensor and must return a scalar root.
pub fn finite_difference_check(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&Rc<Tape>, &[Var]) -> Var,
) -> FdReport {
    assert!(h > 0.0 && h.is_finite(), "finite_difference_check: bad step {h}");
    let tape = new_tape();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&tape, &leaves);
    assert_eq!(root.value().numel(), 1, "finite_difference_check: root must be scalar");
    tape.backward(&root);
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.value().numel()]))
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let tape = new_tape();
        let leaves: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        build(&tape, &leaves).value().data()[0]
    };
    compare_against_central(inputs, h, eval, &analytic)
}

/// Same comparison for cases where the function is easier to expose as a
/// plain value closure (e.g. a whole training step driven by a parameter
/// store). `analytic[i]` must hold the gradient for `inputs[i]`.
pub fn compare_against_central(
    inputs: &[Tensor],
    h: f64,
    eval: impl Fn(&[Tensor]) -> f64,
    analytic: &[Vec<f64>],
) -> FdReport {
    assert_eq!(inputs.len(), analytic.len(), "analytic grads do not cover inputs");
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = FdReport { max_rel_err: 0.0, worst: None, coords_checked: 0 };
    for (ti, tensor) in inputs.iter().enumerate() {
        assert_eq!(analytic[ti].len(), tensor.numel(), "analytic grad size mismatch");
        for ci in 0..tensor.numel() {
            let orig = tensor.data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let up = eval(&work);
            work[ti].data_mut()[ci] = orig - h;
            let down = eval(&work);
            work[ti].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic[ti][ci] - numeric).abs() / (numeric.abs() + 1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, ci));
            }
        }
    }
    report
}
