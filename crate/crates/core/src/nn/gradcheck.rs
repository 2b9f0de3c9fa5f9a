//! Central finite differences, used as an independent oracle for backward().

use super::encoder::ParamBuffers;
use super::optim::GradientSet;
use crate::error::Result;

/// `(loss(θ + h·eᵢ) − loss(θ − h·eᵢ)) / 2h` for every coordinate `i`.
///
/// `loss` must be deterministic. It returns `f64` so the final reduction does
/// not add rounding on top of the 32-bit forward pass.
pub fn finite_difference_gradient<P, F>(mut loss: F, params: &P, h: f32) -> Result<GradientSet>
where
    P: ParamBuffers + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let mut grads = GradientSet::zeros_like(params);
    let mut probe = params.clone();
    let buffer_count = grads.buffers().len();
    for b in 0..buffer_count {
        let len = grads.buffers()[b].data().len();
        for i in 0..len {
            let original = probe.buffers_mut()[b].data()[i];
            probe.buffers_mut()[b].data_mut()[i] = original + h;
            let plus = loss(&probe)?;
            probe.buffers_mut()[b].data_mut()[i] = original - h;
            let minus = loss(&probe)?;
            probe.buffers_mut()[b].data_mut()[i] = original;
            grads.buffers_mut()[b].data_mut()[i] = ((plus - minus) / (2.0 * h as f64)) as f32;
        }
    }
    Ok(grads)
}

/// Outcome of comparing an analytic gradient against a numeric one.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f32,
    /// Largest relative error among coordinates that exceeded `atol`.
    pub max_rel_err: f32,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

/// A coordinate passes when its absolute error is within `atol` or its
/// error relative to the larger magnitude is within `rtol`.
pub fn compare_gradients(analytic: &[f32], numeric: &[f32], rtol: f32, atol: f32) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: analytic.len(),
        ..Default::default()
    };
    for (&a, &n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        report.max_abs_err = report.max_abs_err.max(abs);
        if abs <= atol {
            continue;
        }
        let rel = abs / a.abs().max(n.abs());
        report.max_rel_err = report.max_rel_err.max(rel);
        if rel > rtol {
            report.failures += 1;
        }
    }
    if analytic.len() != numeric.len() {
        report.failures += 1;
    }
    report
}
