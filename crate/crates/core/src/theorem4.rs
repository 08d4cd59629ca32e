//! Layer-wise CE curvature of a ReLU network.
//!
//! Indexing is 1-based over activation levels: `I^(1)` is the network input,
//! `I^(i+1) = relu(I^(i) W^(i) + b^(i))` for hidden levels, and the last level
//! `I^(L+1)` is the logit vector (no ReLU). `W^(i)` is `net.layers()[i - 1]`.

use crate::error::{Error, Result};
use crate::hessian_oracle::SMOOTH_THRESHOLD;
use crate::losses::SoftmaxDerivs;
use crate::network::{ForwardTrace, MlpNetwork};
use crate::numerics::{norm_sq, Matrix};
use crate::trh::{ce_layer_trace, logit_preactivation_jacobian};

/// `h`-weighted squared Jacobian of the logits with respect to one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerHTensor {
    pub level: usize,
    /// `K × D` with entry `(∂g_k/∂I_d)² · h_k`.
    pub values: Matrix,
    /// Indices `d` with `I_d > 0`; every logit at the top level.
    pub positive_set: Vec<usize>,
}

impl LayerHTensor {
    pub fn max_entry(&self) -> f64 {
        self.values.as_slice().iter().copied().fold(0.0, f64::max)
    }

    /// Sum of the entries in the positive set columns.
    pub fn positive_sum(&self) -> f64 {
        (0..self.values.rows()).map(|k| self.positive_set.iter().map(|&d| self.values[(k, d)]).sum::<f64>()).sum()
    }
}

fn smooth_trace(net: &MlpNetwork, x: &[f64]) -> Result<ForwardTrace> {
    let trace = net.forward(x)?;
    trace.ensure_smooth(SMOOTH_THRESHOLD)?;
    if trace.inputs.iter().skip(1).any(|a| a.iter().all(|&v| v <= 0.0)) {
        return Err(Error::InvalidArgument("a hidden level is entirely inactive".into()));
    }
    Ok(trace)
}

fn check_level(net: &MlpNetwork, level: usize, lo: usize) -> Result<()> {
    let hi = net.depth() + 1;
    if level < lo || level > hi {
        return Err(Error::InvalidArgument(format!("level {level} outside {lo}..={hi}")));
    }
    Ok(())
}

/// `∂g/∂I^(level)` as a `K × D` matrix.
fn level_jacobian(net: &MlpNetwork, trace: &ForwardTrace, level: usize) -> Matrix {
    if level == net.depth() + 1 {
        return Matrix::identity(net.num_classes());
    }
    logit_preactivation_jacobian(net, trace, level - 1).matmul_nt(&net.layers()[level - 1].weights)
}

fn h_tensor_from_trace(net: &MlpNetwork, trace: &ForwardTrace, level: usize) -> LayerHTensor {
    let h = SoftmaxDerivs::new(trace.logits()).h;
    let jac = level_jacobian(net, trace, level);
    let values = Matrix::from_vec(
        jac.rows(),
        jac.cols(),
        jac.as_slice().iter().enumerate().map(|(i, v)| v * v * h[i / jac.cols()]).collect(),
    );
    let positive_set = if level == net.depth() + 1 {
        (0..net.num_classes()).collect()
    } else {
        let act = &trace.inputs[level - 1];
        (0..act.len()).filter(|&d| act[d] > 0.0).collect()
    };
    LayerHTensor { level, values, positive_set }
}

/// H tensor at `level` (1-based, up to `depth + 1`). Rejects inputs near a
/// ReLU kink and inputs that switch off a whole hidden level.
pub fn layer_h_tensor(net: &MlpNetwork, x: &[f64], level: usize) -> Result<LayerHTensor> {
    check_level(net, level, 1)?;
    let trace = smooth_trace(net, x)?;
    Ok(h_tensor_from_trace(net, &trace, level))
}

/// Exact CE trace over `W^(level − 1)`, for `level` in `2..=depth + 1`.
pub fn trh_ce_layer(net: &MlpNetwork, x: &[f64], level: usize) -> Result<f64> {
    check_level(net, level, 2)?;
    let trace = net.forward(x)?;
    trace.ensure_smooth(SMOOTH_THRESHOLD)?;
    Ok(ce_layer_trace(net, &trace, level - 2))
}

/// `‖I^(level−1)‖² Σ_{k, d ∈ P} H_{k,d}`: the diagonal-softmax form, which
/// keeps only `h_k` from the softmax Hessian. It coincides with
/// [`trh_ce_layer`] at the top level and bounds the per-unit curvature
/// elsewhere, but drops the cross-class terms for hidden levels.
pub fn trh_ce_layer_diag(net: &MlpNetwork, x: &[f64], level: usize) -> Result<f64> {
    check_level(net, level, 2)?;
    let trace = net.forward(x)?;
    trace.ensure_smooth(SMOOTH_THRESHOLD)?;
    let tensor = h_tensor_from_trace(net, &trace, level);
    Ok(norm_sq(&trace.inputs[level - 2]) * tensor.positive_sum())
}

/// Largest absolute row sum.
pub fn l1_operator_norm(w: &Matrix) -> f64 {
    (0..w.rows()).map(|i| w.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerInequality {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `max H^(level) ≤ max H^(level+1) · ‖W^(level)‖₁²`, for `level` in
/// `1..=depth`.
pub fn check_layer_inequality(net: &MlpNetwork, x: &[f64], level: usize) -> Result<LayerInequality> {
    check_level(net, level, 1)?;
    if level > net.depth() {
        return Err(Error::InvalidArgument(format!("level {level} has no next level")));
    }
    let trace = smooth_trace(net, x)?;
    let lhs = h_tensor_from_trace(net, &trace, level).max_entry();
    let next = h_tensor_from_trace(net, &trace, level + 1).max_entry();
    let norm = l1_operator_norm(&net.layers()[level - 1].weights);
    let rhs = next * norm * norm;
    Ok(LayerInequality { lhs, rhs, holds: lhs <= rhs + 1e-9 })
}
