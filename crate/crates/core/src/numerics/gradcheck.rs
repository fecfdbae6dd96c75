//! Central-difference gradient checking for hand-written backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// An operation with an explicit backward pass, checked in 64-bit mode.
pub trait DifferentiableOp {
    fn name(&self) -> String;

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>>;

    /// Gradients with respect to every input, given the upstream gradient.
    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub non_finite: bool,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite && self.max_rel_error <= self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} at input {} elem {} (analytic {:.6e}, numeric {:.6e}), {} entries{}",
            self.op,
            self.max_rel_error,
            self.worst_input,
            self.worst_index,
            self.analytic,
            self.numeric,
            self.checked,
            if self.non_finite { ", NON-FINITE" } else { "" }
        )
    }
}

/// Compare analytic gradients of the scalar `sum(op(inputs) * R)` (R a fixed
/// random projection) against central differences with the given step.
pub fn check_gradients(
    op: &dyn DifferentiableOp,
    inputs: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(invalid("check_gradients: step must be positive"));
    }
    let out = op.forward(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let proj = Tensor::<f64>::randn(out.shape(), 1.0, &mut rng);
    let analytic = op.backward(inputs, &proj)?;
    if analytic.len() != inputs.len() {
        return Err(invalid(format!(
            "{}: backward returned {} gradients for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }
    let loss = |xs: &[Tensor<f64>]| -> Result<f64> { op.forward(xs)?.dot(&proj) };

    let mut report = GradCheckReport {
        op: op.name(),
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        non_finite: false,
        tolerance,
    };
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        inputs[i].same_shape("check_gradients", grad)?;
        for j in 0..inputs[i].len() {
            let a = grad.data()[j];
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let fp = loss(&work)?;
            work[i].data_mut()[j] = orig - step;
            let fm = loss(&work)?;
            work[i].data_mut()[j] = orig;
            let n = (fp - fm) / (2.0 * step);
            report.checked += 1;
            if !a.is_finite() {
                report.non_finite = true;
                report.worst_input = i;
                report.worst_index = j;
                report.analytic = a;
                report.numeric = n;
                continue;
            }
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = i;
                report.worst_index = j;
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    Ok(report)
}

/// Adapter turning a pair of closures into a [`DifferentiableOp`].
pub struct FnOp<F, B> {
    pub name: String,
    pub forward: F,
    pub backward: B,
}

impl<F, B> DifferentiableOp for FnOp<F, B>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    B: Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        (self.forward)(inputs)
    }

    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        (self.backward)(inputs, grad_out)
    }
}
