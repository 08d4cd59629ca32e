//! Whole-network curvature measurements taken during training: the
//! top-layer closed form, the full weight trace (closed form and
//! Hutchinson), per-layer traces, and the eigenvalue summary per block.

use crate::attacks::{pgd_batch, AttackConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::hessian_oracle::{FixedInputLoss, LayerHessianReport, ProbeSet, HVP_STEP, QUAD_STEP};
use crate::losses::RobustLossKind;
use crate::network::MlpNetwork;
use crate::numerics::{Matrix, Rng};
use crate::trh::{ce_layer_trace, mean_trh, TradesCase};

/// Adversarial inputs for measurement, drawn from a stream that training
/// never touches.
pub fn measurement_inputs(net: &MlpNetwork, ds: &Dataset, attack: &AttackConfig, seed: u64, epoch: usize) -> Matrix {
    let mut rng = Rng::for_trial(seed ^ 0x6d65_6173_7572_6531, epoch as u64);
    pgd_batch(net, &ds.inputs, &ds.labels, attack, &mut rng)
}

/// Mean exact CE trace over layer `l` (0-based) at the rows of `x`.
pub fn mean_layer_trace(net: &MlpNetwork, x: &Matrix, l: usize) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..x.rows() {
        total += ce_layer_trace(net, &net.forward(x.row(i))?, l);
    }
    Ok(total / x.rows() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceMeasurement {
    pub top_analytic: f64,
    pub full_estimate: f64,
    pub full_stderr: f64,
    pub full_exact: f64,
    /// One entry per weight matrix, input side first.
    pub layers: Vec<f64>,
}

/// Measures the traces of the mean CE loss at `x_adv` over the weight
/// matrices. The Hutchinson estimate freezes the ReLU pattern at the base
/// weights; `probes` must have one entry per weight. Without probes the
/// estimate and its standard error are NaN.
pub fn measure_trace(
    net: &MlpNetwork,
    ds: &Dataset,
    x_adv: &Matrix,
    kind: RobustLossKind,
    case: TradesCase,
    probes: Option<&ProbeSet>,
) -> Result<TraceMeasurement> {
    let top_analytic = mean_trh(net, &ds.inputs, x_adv, &ds.labels, kind, case)?;
    let layers = (0..net.depth()).map(|l| mean_layer_trace(net, x_adv, l)).collect::<Result<Vec<_>>>()?;
    let full_exact = layers.iter().sum();
    let (full_estimate, full_stderr) = match probes {
        Some(p) => {
            let loss = FixedInputLoss::masked(net, x_adv, &ds.labels);
            let idx = net.all_weight_indices();
            let est = p.trace(|v| loss.quad_form(&idx, v, QUAD_STEP));
            (est.value, est.stderr)
        }
        None => (f64::NAN, f64::NAN),
    };
    Ok(TraceMeasurement { top_analytic, full_estimate, full_stderr, full_exact, layers })
}

/// Probe sets for [`measure_spectrum`]: one over all weights, then one per
/// weight matrix.
pub fn spectrum_probes(net: &MlpNetwork, count: usize, seed: u64) -> Vec<ProbeSet> {
    let mut sets = vec![ProbeSet::new(net.all_weight_indices().len(), count, seed)];
    for l in 0..net.depth() {
        sets.push(ProbeSet::new(net.weight_indices(l).len(), count, seed.wrapping_add(l as u64 + 1)));
    }
    sets
}

/// Trace, `Tr(H²)` and eigenvalue summary of the mean CE Hessian at `x_adv`:
/// block 0 spans every weight matrix, block `l` is weight matrix `l`.
pub fn measure_spectrum(net: &MlpNetwork, x_adv: &Matrix, labels: &[usize], probes: &[ProbeSet]) -> Result<Vec<LayerHessianReport>> {
    let loss = FixedInputLoss::masked(net, x_adv, labels);
    let traces = (0..net.depth()).map(|l| mean_layer_trace(net, x_adv, l)).collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::with_capacity(net.depth() + 1);
    let all = net.all_weight_indices();
    let sq = probes[0].trace_sq(|v| loss.hvp(&all, v, HVP_STEP));
    reports.push(LayerHessianReport::new(0, traces.iter().sum(), sq.value, all.len()));
    for l in 0..net.depth() {
        let idx: Vec<usize> = net.weight_indices(l).collect();
        let sq = probes[l + 1].trace_sq(|v| loss.hvp(&idx, v, HVP_STEP));
        reports.push(LayerHessianReport::new(l + 1, traces[l], sq.value, idx.len()));
    }
    Ok(reports)
}
