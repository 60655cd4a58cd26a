//! Central finite-difference verification of the analytic gradients.

use crate::cvt::MultiLevelLabel;
use crate::error::Result;
use crate::vtnet::net::VtNet;
use crate::vtnet::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
pub const ABS_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat parameter indices that failed both tolerances.
    pub failures: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare the analytic gradient of (coarse loss + fine loss) on `batch`
/// against central finite differences with step `h`. A parameter passes
/// when the relative error is below 1e-4, or the absolute error below
/// 1e-7 for gradients near zero.
pub fn gradient_check(
    net: &mut VtNet,
    batch: &[(Tensor, MultiLevelLabel)],
    loss_weights: &[f64],
    h: f64,
) -> Result<GradCheckReport> {
    net.zero_grads();
    net.backward_batch(batch, loss_weights)?;
    let analytic = net.flat_grads();
    let params = net.flat_params();

    let mut report = GradCheckReport {
        num_params: params.len(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        failures: Vec::new(),
    };
    let mut work = params.clone();
    for i in 0..params.len() {
        work[i] = params[i] + h;
        net.set_flat_params(&work)?;
        let plus = net.batch_loss(batch, loss_weights)?;
        work[i] = params[i] - h;
        net.set_flat_params(&work)?;
        let minus = net.batch_loss(batch, loss_weights)?;
        work[i] = params[i];

        let numeric = (plus - minus) / (2.0 * h);
        let abs_err = (analytic[i] - numeric).abs();
        let denom = analytic[i].abs().max(numeric.abs());
        let rel_err = if denom > 0.0 { abs_err / denom } else { 0.0 };
        report.max_abs_err = report.max_abs_err.max(abs_err);
        report.max_rel_err = report.max_rel_err.max(rel_err);
        if abs_err > ABS_TOLERANCE && rel_err > REL_TOLERANCE {
            report.failures.push(i);
        }
    }
    net.set_flat_params(&params)?;
    Ok(report)
}
