//! Closed-form trace of the Hessian (TrH) of robust losses with respect to
//! the top-layer weights, and the regularized training objective.
//!
//! With `z = f(x)` the penultimate features and logits `g = zᵀW`, each
//! top-layer weight `W[j][k]` moves only logit `k`, with slope `z_j`. The
//! trace therefore factors as `Σ_k Σ_j z_j² ∂²L/∂g_k²`, and every formula
//! below is a feature norm times a sum of diagonal logit curvatures. Where a
//! loss depends on both clean and adversarial logits, the mixed term carries
//! `z · z′` instead.
//!
//! Per-example adversarial inputs are constants here: the trace is taken
//! at a fixed `x′`.
//!
//! The one-step derivative of a softmax Jacobian entry that all of these
//! formulas need is `∂Φ_ik/∂g_k = s_k(1 − 2s_k)Ψ_ki`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{runner_up, softmax, RobustLossKind, SoftmaxDerivs};
use crate::network::{BoundNet, ForwardTrace, GraphForward, MlpNetwork};
use crate::numerics::{dot, norm_sq, Matrix};

/// Which clean-logit dependence the TRADES KL term keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TradesCase {
    /// Clean softmax frozen inside the KL term.
    #[default]
    StopGradient,
    /// KL differentiated through both logit sets; adds the mixed term `G`.
    Full,
}

/// Which weights the regularizer covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TrhScope {
    #[default]
    Top,
    /// Exact CE trace over every weight matrix at the adversarial input
    /// (AT only).
    Full,
}

/// `s_k(1 − 2s_k)`, the derivative of `h_k` along `g_k`.
fn curvature_slope(s: &[f64]) -> Vec<f64> {
    s.iter().map(|v| v * (1.0 - 2.0 * v)).collect()
}

/// `‖z′‖²·1ᵀh′`: exact top-layer trace of `CE(x′, y)`.
pub fn trh_at(adv: &ForwardTrace) -> f64 {
    norm_sq(adv.features()) * SoftmaxDerivs::new(adv.logits()).h_sum()
}

/// `‖z‖²·1ᵀh + λ_t‖z′‖²·1ᵀh′`: top-layer trace of
/// `CE(x, y) + λ_t·KL(s(g) ‖ s(g′))` with `s(g)` frozen inside the KL.
pub fn trh_trades(clean: &ForwardTrace, adv: &ForwardTrace, lambda_t: f64) -> f64 {
    trh_at(clean) + lambda_t * trh_at(adv)
}

/// Intermediate vectors of the unfrozen TRADES trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TradesFullTerms {
    /// `ψ_k = Ψ_k · log s(g)`
    pub psi: Vec<f64>,
    /// `ψ′_k = Ψ_k · log s(g′)`
    pub psi_prime: Vec<f64>,
    /// `ω_k = Σ_i Φ_ik Ψ_ik` (equals `h_k`)
    pub omega: Vec<f64>,
    /// `ω′_k = Σ_i Φ_ik Ψ′_ik` (equals `h_k` because columns of Ψ′ differ
    /// from unit vectors by a constant and rows of Φ sum to 0)
    pub omega_prime: Vec<f64>,
    /// Extra trace contributed by the clean-logit dependence of the KL term.
    pub g_term: f64,
}

/// Top-layer trace of `CE(x, y) + λ_t·KL(s(g) ‖ s(g′))` with nothing frozen.
///
/// The KL term has three curvature blocks: clean–clean contributes
/// `‖z‖² Σ_k [ω_k + s_k(1 − 2s_k)(ψ_k − ψ′_k)]`, each of the two mixed
/// blocks contributes `−(z·z′)·1ᵀh` (written as `1ᵀω′` for the second), and
/// adversarial–adversarial is the frozen-case `‖z′‖²·1ᵀh′`.
pub fn trh_trades_full(clean: &ForwardTrace, adv: &ForwardTrace, lambda_t: f64) -> (f64, TradesFullTerms) {
    let d = SoftmaxDerivs::new(clean.logits());
    let dp = SoftmaxDerivs::new(adv.logits());
    let k = d.num_classes();
    let psi: Vec<f64> = (0..k).map(|r| dot(d.psi.row(r), &d.log_s)).collect();
    let psi_prime: Vec<f64> = (0..k).map(|r| dot(d.psi.row(r), &dp.log_s)).collect();
    let omega: Vec<f64> = (0..k).map(|c| (0..k).map(|i| d.phi[(i, c)] * d.psi[(i, c)]).sum()).collect();
    let omega_prime: Vec<f64> = (0..k).map(|c| (0..k).map(|i| d.phi[(i, c)] * dp.psi[(i, c)]).sum()).collect();
    let slope = curvature_slope(&d.s);
    let (z, zp) = (clean.features(), adv.features());
    let clean_block: f64 = (0..k).map(|c| omega[c] + slope[c] * (psi[c] - psi_prime[c])).sum();
    let mixed = dot(z, zp);
    let g_term = norm_sq(z) * clean_block - mixed * (d.h_sum() + omega_prime.iter().sum::<f64>());
    let value = trh_trades(clean, adv, lambda_t) + lambda_t * g_term;
    (value, TradesFullTerms { psi, psi_prime, omega, omega_prime, g_term })
}

/// Top-layer trace of `‖p − s(g′)‖²` with the clean softmax `p` frozen:
/// `‖z′‖² Σ_k [2‖Φ′_k‖² − 2 s′_k(1 − 2s′_k)(d_k − d·s′)]`, `d = p − s′`.
pub fn alp_pair_trace(clean: &ForwardTrace, adv: &ForwardTrace) -> f64 {
    let p = softmax(clean.logits());
    let dp = SoftmaxDerivs::new(adv.logits());
    let k = dp.num_classes();
    let diff: Vec<f64> = p.iter().zip(&dp.s).map(|(a, b)| a - b).collect();
    let slope = curvature_slope(&dp.s);
    let mut total = 0.0;
    for c in 0..k {
        let row_sq = norm_sq(dp.phi.row(c));
        // Σ_i d_i ∂Φ′_ic/∂g′_c
        let bend: f64 = (0..k).map(|i| diff[i] * slope[c] * dp.psi[(c, i)]).sum();
        total += 2.0 * row_sq - 2.0 * bend;
    }
    norm_sq(adv.features()) * total
}

/// `‖z′‖²·1ᵀh′ + λ_A·(pairing trace)`; clean softmax frozen in the pairing.
pub fn trh_alp(clean: &ForwardTrace, adv: &ForwardTrace, lambda_a: f64) -> f64 {
    trh_at(adv) + lambda_a * alp_pair_trace(clean, adv)
}

/// Top-layer trace of `−log(1 − s(g′)_κ)` for the runner-up class `κ`:
/// `‖z′‖² Σ_k [s′_k(1 − 2s′_k)Ψ′_kκ/(1 − s′_κ) + Φ′_κk²/(1 − s′_κ)²]`.
pub fn mart_margin_trace(adv: &ForwardTrace, y: usize) -> f64 {
    let dp = SoftmaxDerivs::new(adv.logits());
    let kappa = runner_up(&dp.s, y);
    let rest = 1.0 - dp.s[kappa];
    let slope = curvature_slope(&dp.s);
    let total: f64 = (0..dp.num_classes())
        .map(|c| slope[c] * dp.psi[(c, kappa)] / rest + dp.phi[(kappa, c)].powi(2) / (rest * rest))
        .sum();
    norm_sq(adv.features()) * total
}

/// `‖z‖²·1ᵀh + margin trace + λ_m(1 − p_y)·‖z′‖²·1ᵀh′`, with the clean
/// softmax frozen inside the weighted KL.
pub fn trh_mart(clean: &ForwardTrace, adv: &ForwardTrace, y: usize, lambda_m: f64) -> f64 {
    let p_y = softmax(clean.logits())[y];
    trh_at(clean) + mart_margin_trace(adv, y) + lambda_m * (1.0 - p_y) * trh_at(adv)
}

/// Top-layer TrH of one example under `kind`.
pub fn trh_for_kind(kind: RobustLossKind, clean: &ForwardTrace, adv: &ForwardTrace, y: usize, case: TradesCase) -> f64 {
    match kind {
        RobustLossKind::At => trh_at(adv),
        RobustLossKind::Trades { lambda_t } => match case {
            TradesCase::StopGradient => trh_trades(clean, adv, lambda_t),
            TradesCase::Full => trh_trades_full(clean, adv, lambda_t).0,
        },
        RobustLossKind::Alp { lambda_a } => trh_alp(clean, adv, lambda_a),
        RobustLossKind::Mart { lambda_m } => trh_mart(clean, adv, y, lambda_m),
    }
}

/// Batch mean of [`trh_for_kind`].
pub fn mean_trh(net: &MlpNetwork, x: &Matrix, x_adv: &Matrix, labels: &[usize], kind: RobustLossKind, case: TradesCase) -> Result<f64> {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let clean = net.forward(x.row(i))?;
        let adv = net.forward(x_adv.row(i))?;
        total += trh_for_kind(kind, &clean, &adv, y, case);
    }
    Ok(total / labels.len() as f64)
}

/// Exact trace of the CE Hessian over the weights of layer `l` (0-based)
/// at one input. ReLU networks are piecewise linear in any single weight,
/// so only the softmax curvature contributes:
/// `‖a‖² Σ_e [Σ_k s_k c_ke² − (Σ_k s_k c_ke)²]` where `a` is the layer input
/// and `c_ke = ∂g_k/∂pre_e`.
pub fn ce_layer_trace(net: &MlpNetwork, trace: &ForwardTrace, l: usize) -> f64 {
    let s = softmax(trace.logits());
    let jac = logit_preactivation_jacobian(net, trace, l);
    let mut total = 0.0;
    for e in 0..jac.cols() {
        let mut first = 0.0;
        let mut mean = 0.0;
        for (k, &sk) in s.iter().enumerate() {
            first += sk * jac[(k, e)] * jac[(k, e)];
            mean += sk * jac[(k, e)];
        }
        total += first - mean * mean;
    }
    norm_sq(&trace.inputs[l]) * total
}

/// `∂g/∂pre` for layer `l` as a `K × d_out` matrix.
pub fn logit_preactivation_jacobian(net: &MlpNetwork, trace: &ForwardTrace, l: usize) -> Matrix {
    let layers = net.layers();
    let mut jac = Matrix::identity(net.num_classes());
    for m in (l + 1..layers.len()).rev() {
        jac = jac.matmul_nt(&layers[m].weights);
        let pre = &trace.pre[m - 1];
        for k in 0..jac.rows() {
            for (v, &p) in jac.row_mut(k).iter_mut().zip(pre) {
                if p <= 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
    jac
}

/// Exact CE trace over every weight matrix (biases excluded).
pub fn ce_full_trace(net: &MlpNetwork, trace: &ForwardTrace) -> f64 {
    (0..net.depth()).map(|l| ce_layer_trace(net, trace, l)).sum()
}

/// Per-example `‖z‖²·1ᵀh` on a graph, `m × 1`.
fn graph_at_term(g: &mut Graph, features: Var, logits: Var) -> Var {
    let nz = g.row_norm_sq(features);
    let hs = graph_h_sum(g, logits);
    g.mul(nz, hs)
}

fn graph_h_sum(g: &mut Graph, logits: Var) -> Var {
    let s = g.softmax(logits);
    let s2 = g.square(s);
    let h = g.sub(s, s2);
    g.row_sum(h)
}

/// `s(1 − 2s)` elementwise.
fn graph_slope(g: &mut Graph, s: Var) -> Var {
    let two_s = g.scale(s, 2.0);
    let one_minus = g.one_minus(two_s);
    g.mul(s, one_minus)
}

/// Per-example top-layer TrH on a graph, `m × 1`, differentiable through
/// the features and logits of both passes.
pub fn graph_trh(
    g: &mut Graph,
    kind: RobustLossKind,
    clean: &GraphForward,
    adv: &GraphForward,
    labels: &[usize],
    case: TradesCase,
) -> Var {
    let (z, zp) = (clean.features(), adv.features());
    let (lg, lgp) = (clean.logits(), adv.logits());
    match kind {
        RobustLossKind::At => graph_at_term(g, zp, lgp),
        RobustLossKind::Trades { lambda_t } => {
            let c = graph_at_term(g, z, lg);
            let a = graph_at_term(g, zp, lgp);
            let a = g.scale(a, lambda_t);
            let base = g.add(c, a);
            if case == TradesCase::StopGradient {
                return base;
            }
            let ls = g.log_softmax(lg);
            let lsp = g.log_softmax(lgp);
            let s = g.exp(ls);
            let k = g.value(lg).cols();
            let u = g.sub(ls, lsp);
            let su = g.row_dot(s, u);
            let su = g.broadcast_cols(su, k);
            let centered = g.sub(u, su);
            let slope = graph_slope(g, s);
            let bend = g.row_dot(slope, centered);
            let hs = graph_h_sum(g, lg);
            let clean_block = g.add(hs, bend);
            let nz = g.row_norm_sq(z);
            let first = g.mul(nz, clean_block);
            let zz = g.row_dot(z, zp);
            let mixed = g.mul(zz, hs);
            let mixed = g.scale(mixed, 2.0);
            let gt = g.sub(first, mixed);
            let gt = g.scale(gt, lambda_t);
            g.add(base, gt)
        }
        RobustLossKind::Alp { lambda_a } => {
            let at = graph_at_term(g, zp, lgp);
            let p = g.softmax(lg);
            let sp = g.softmax(lgp);
            let k = g.value(lg).cols();
            // Σ_k ‖Φ′_k‖² = Σ_k s′_k²(1 − 2s′_k + ‖s′‖²)
            let q = g.row_norm_sq(sp);
            let q = g.broadcast_cols(q, k);
            let two_sp = g.scale(sp, 2.0);
            let inner = g.sub(q, two_sp);
            let inner = g.add_scalar(inner, 1.0);
            let sp2 = g.square(sp);
            let rows = g.row_dot(sp2, inner);
            // Σ_k s′_k(1 − 2s′_k)(d_k − d·s′)
            let d = g.sub(p, sp);
            let slope = graph_slope(g, sp);
            let ds = g.row_dot(d, sp);
            let slope_sum = g.row_sum(slope);
            let b1 = g.row_dot(slope, d);
            let b2 = g.mul(ds, slope_sum);
            let bend = g.sub(b1, b2);
            let diff = g.sub(rows, bend);
            let nzp = g.row_norm_sq(zp);
            let pair = g.mul(nzp, diff);
            let pair = g.scale(pair, 2.0 * lambda_a);
            g.add(at, pair)
        }
        RobustLossKind::Mart { lambda_m } => {
            let ce_clean = graph_at_term(g, z, lg);
            let sp = g.softmax(lgp);
            let kappa = crate::losses::runner_up_rows(g.value(sp), labels);
            let s_kappa = g.pick(sp, &kappa);
            let rest = g.one_minus(s_kappa);
            let inv = g.recip(rest);
            // Σ_k s′_k(1 − 2s′_k)Ψ′_kκ = slope_κ − s′_κ Σ_k slope_k
            let slope = graph_slope(g, sp);
            let slope_kappa = g.pick(slope, &kappa);
            let slope_sum = g.row_sum(slope);
            let t = g.mul(s_kappa, slope_sum);
            let bend = g.sub(slope_kappa, t);
            let first = g.mul(bend, inv);
            // Σ_k Φ′_κk² = s′_κ²(1 − 2s′_κ + ‖s′‖²)
            let q = g.row_norm_sq(sp);
            let two = g.scale(s_kappa, 2.0);
            let inner = g.sub(q, two);
            let inner = g.add_scalar(inner, 1.0);
            let sk2 = g.square(s_kappa);
            let num = g.mul(sk2, inner);
            let inv2 = g.square(inv);
            let second = g.mul(num, inv2);
            let margin = g.add(first, second);
            let nzp = g.row_norm_sq(zp);
            let margin = g.mul(nzp, margin);
            let p = g.softmax(lg);
            let p_y = g.pick(p, labels);
            let w = g.one_minus(p_y);
            let at = graph_at_term(g, zp, lgp);
            let wkl = g.mul(w, at);
            let wkl = g.scale(wkl, lambda_m);
            let bce = g.add(ce_clean, margin);
            g.add(bce, wkl)
        }
    }
}

/// Per-example exact CE trace over all weight matrices at the inputs of
/// `fwd`, `m × 1`. The ReLU masks are constants; everything else is
/// differentiable.
pub fn graph_ce_full_trace(g: &mut Graph, bound: &BoundNet, fwd: &GraphForward) -> Var {
    let depth = bound.weights.len();
    let logits = fwd.logits();
    let (m, k) = g.value(logits).shape();
    let s = g.softmax(logits);
    let s_cols: Vec<Var> = (0..k).map(|c| g.col(s, c)).collect();
    // per class, ∂g_c/∂pre for the current layer, one example per row
    let mut jac: Vec<Var> = (0..k)
        .map(|c| {
            let mut e = Matrix::zeros(m, k);
            for i in 0..m {
                e[(i, c)] = 1.0;
            }
            g.constant(e)
        })
        .collect();
    let mut total: Option<Var> = None;
    for l in (0..depth).rev() {
        if l + 1 < depth {
            let mask = g.value(fwd.pre[l]).map(|p| if p > 0.0 { 1.0 } else { 0.0 });
            let mask = g.constant(mask);
            for j in jac.iter_mut() {
                let back = g.matmul_nt(*j, bound.weights[l + 1]);
                *j = g.mul(back, mask);
            }
        }
        let mut first: Option<Var> = None;
        let mut mean: Option<Var> = None;
        for c in 0..k {
            let sq = g.square(jac[c]);
            let sq = g.mul_col(sq, s_cols[c]);
            let w = g.mul_col(jac[c], s_cols[c]);
            first = Some(match first {
                Some(f) => g.add(f, sq),
                None => sq,
            });
            mean = Some(match mean {
                Some(f) => g.add(f, w),
                None => w,
            });
        }
        let first = g.row_sum(first.unwrap());
        let mean_sq = g.row_norm_sq(mean.unwrap());
        let curv = g.sub(first, mean_sq);
        let na = g.row_norm_sq(fwd.inputs[l]);
        let layer = g.mul(na, curv);
        total = Some(match total {
            Some(t) => g.add(t, layer),
            None => layer,
        });
    }
    total.unwrap()
}

/// Coefficients of the regularized objective
/// `mean[loss + λ·TrH] + γ‖θ‖²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: RobustLossKind,
    pub lambda: f64,
    pub gamma: f64,
    pub case: TradesCase,
    pub scope: TrhScope,
}

impl ObjectiveSpec {
    pub fn new(kind: RobustLossKind) -> Self {
        ObjectiveSpec { kind, lambda: 0.0, gamma: 0.0, case: TradesCase::StopGradient, scope: TrhScope::Top }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) || !(self.kind.penalty() >= 0.0) {
            return Err(Error::InvalidArgument("penalties must be >= 0".into()));
        }
        if self.scope == TrhScope::Full && self.kind != RobustLossKind::At {
            return Err(Error::InvalidArgument("full-network regularization is only defined for AT".into()));
        }
        Ok(())
    }
}

/// Records the objective for clean inputs `x` and fixed adversarial inputs
/// `x_adv` and returns its scalar node.
pub fn objective_graph(g: &mut Graph, bound: &BoundNet, x: &Matrix, x_adv: &Matrix, labels: &[usize], spec: &ObjectiveSpec) -> Var {
    let m = labels.len() as f64;
    let xa = g.constant(x_adv.clone());
    let adv = bound.forward(g, xa);
    let clean = if spec.kind == RobustLossKind::At {
        adv.clone()
    } else {
        let xc = g.constant(x.clone());
        bound.forward(g, xc)
    };
    let mut per_example = spec.kind.graph_loss(g, clean.logits(), adv.logits(), labels);
    if spec.lambda != 0.0 {
        let reg = match spec.scope {
            TrhScope::Top => graph_trh(g, spec.kind, &clean, &adv, labels, spec.case),
            TrhScope::Full => graph_ce_full_trace(g, bound, &adv),
        };
        let reg = g.scale(reg, spec.lambda);
        per_example = g.add(per_example, reg);
    }
    let total = g.sum(per_example);
    let mut obj = g.scale(total, 1.0 / m);
    if spec.gamma != 0.0 {
        let sq = bound.sq_norm(g);
        let pen = g.scale(sq, spec.gamma);
        obj = g.add(obj, pen);
    }
    obj
}

/// Value and flat gradient of the objective at fixed adversarial inputs.
pub fn objective_value_and_grad(
    net: &MlpNetwork,
    x: &Matrix,
    x_adv: &Matrix,
    labels: &[usize],
    spec: &ObjectiveSpec,
) -> Result<(f64, Vec<f64>)> {
    crate::network::backprop(net, |g, b| objective_graph(g, b, x, x_adv, labels, spec))
}

/// Objective value only.
pub fn objective_value(net: &MlpNetwork, x: &Matrix, x_adv: &Matrix, labels: &[usize], spec: &ObjectiveSpec) -> f64 {
    let mut g = Graph::new();
    let bound = net.bind_constant(&mut g);
    let out = objective_graph(&mut g, &bound, x, x_adv, labels, spec);
    g.value(out).item()
}

/// Result of one evaluation of the training objective.
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub x_adv: Matrix,
}

/// Runs the inner attack on the batch, then evaluates the objective and its
/// gradient with the adversarial inputs held fixed.
pub fn algorithm1_objective(
    net: &MlpNetwork,
    batch: &crate::data::Dataset,
    spec: &ObjectiveSpec,
    attack: &crate::attacks::AttackConfig,
    rng: &mut crate::numerics::Rng,
) -> Result<ObjectiveEval> {
    spec.validate()?;
    let x_adv = crate::attacks::pgd_batch(net, &batch.inputs, &batch.labels, attack, rng);
    let (value, grad) = objective_value_and_grad(net, &batch.inputs, &x_adv, &batch.labels, spec)?;
    Ok(ObjectiveEval { value, grad, x_adv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::DenseLayer;
    use crate::numerics::Rng;

    fn trace_from(z: &[f64], logits: &[f64]) -> ForwardTrace {
        ForwardTrace { inputs: vec![z.to_vec()], pre: vec![logits.to_vec()] }
    }

    #[test]
    fn at_reference_values() {
        let t = trace_from(&[1.0, 1.0], &[0.0, 0.0]);
        assert!((trh_at(&t) - 1.0).abs() < 1e-15);
        assert_eq!(trh_at(&trace_from(&[0.0, 0.0], &[1.0, -1.0])), 0.0);
    }

    #[test]
    fn trades_reference_values() {
        let c = trace_from(&[1.0, 0.0], &[0.0; 10]);
        let a = trace_from(&[0.0, 1.0], &[0.0; 10]);
        assert!((trh_trades(&c, &a, 6.0) - 6.3).abs() < 1e-12);
        assert_eq!(trh_trades(&c, &a, 0.0), trh_at(&c));
        assert_eq!(trh_trades_full(&c, &a, 0.0).0, trh_at(&c));
    }

    #[test]
    fn full_terms_identities() {
        let c = trace_from(&[0.3, -1.0], &[0.2, 1.1, -0.5]);
        let a = trace_from(&[0.5, 0.7], &[-0.3, 0.4, 0.9]);
        let (_, terms) = trh_trades_full(&c, &a, 1.0);
        let h = SoftmaxDerivs::new(c.logits()).h;
        for k in 0..3 {
            assert!((terms.omega[k] - h[k]).abs() < 1e-15);
            assert!((terms.omega_prime[k] - h[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn alp_without_penalty_is_at() {
        let c = trace_from(&[0.3, -1.0], &[0.2, 1.1]);
        let a = trace_from(&[0.5, 0.7], &[-0.3, 0.4]);
        assert_eq!(trh_alp(&c, &a, 0.0), trh_at(&a));
    }

    #[test]
    fn mart_saturated_margin_tends_to_clean_trace() {
        let c = trace_from(&[0.3, -1.0], &[0.2, 1.1, 0.0]);
        let a = trace_from(&[0.5, 0.7], &[40.0, -40.0, -40.0]);
        let v = trh_mart(&c, &a, 0, 0.0);
        assert!((v - trh_at(&c)).abs() < 1e-12);
    }

    #[test]
    fn top_layer_of_ce_full_trace_is_at_formula() {
        let net = MlpNetwork::init(&[3, 5, 4], true, &mut Rng::new(8)).unwrap();
        let t = net.forward(&[0.3, -0.2, 1.0]).unwrap();
        assert!((ce_layer_trace(&net, &t, 1) - trh_at(&t)).abs() < 1e-14);
    }

    #[test]
    fn inactive_layer_has_zero_trace() {
        let net = MlpNetwork::new(vec![
            DenseLayer { weights: Matrix::filled(2, 3, -1.0), bias: None },
            DenseLayer { weights: Matrix::filled(3, 2, 0.5), bias: None },
        ])
        .unwrap();
        let t = net.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(ce_layer_trace(&net, &t, 0), 0.0);
    }

    fn random_case(seed: u64) -> (MlpNetwork, Matrix, Matrix, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let net = MlpNetwork::init(&[3, 6, 5, 4], true, &mut rng).unwrap();
        let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect());
        let xa = x.map(|v| v + 0.1);
        (net, x, xa, vec![0, 3, 1, 2])
    }

    #[test]
    fn graph_formulas_match_scalar_formulas() {
        let (net, x, xa, labels) = random_case(21);
        for kind in [
            RobustLossKind::At,
            RobustLossKind::Trades { lambda_t: 6.0 },
            RobustLossKind::Alp { lambda_a: 0.8 },
            RobustLossKind::Mart { lambda_m: 3.0 },
        ] {
            for case in [TradesCase::StopGradient, TradesCase::Full] {
                let mut g = Graph::new();
                let b = net.bind_constant(&mut g);
                let xc = g.constant(x.clone());
                let xv = g.constant(xa.clone());
                let clean = b.forward(&mut g, xc);
                let adv = b.forward(&mut g, xv);
                let out = graph_trh(&mut g, kind, &clean, &adv, &labels, case);
                for i in 0..labels.len() {
                    let tc = net.forward(x.row(i)).unwrap();
                    let ta = net.forward(xa.row(i)).unwrap();
                    let expect = trh_for_kind(kind, &tc, &ta, labels[i], case);
                    let got = g.value(out)[(i, 0)];
                    assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1.0), "{kind:?} {case:?}: {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn graph_full_trace_matches_scalar() {
        let (net, x, _, _) = random_case(22);
        let mut g = Graph::new();
        let b = net.bind_constant(&mut g);
        let xc = g.constant(x.clone());
        let fwd = b.forward(&mut g, xc);
        let out = graph_ce_full_trace(&mut g, &b, &fwd);
        for i in 0..x.rows() {
            let t = net.forward(x.row(i)).unwrap();
            assert!((g.value(out)[(i, 0)] - ce_full_trace(&net, &t)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_penalties_give_bare_loss() {
        let (net, x, xa, labels) = random_case(23);
        for kind in [RobustLossKind::At, RobustLossKind::Mart { lambda_m: 2.0 }] {
            let spec = ObjectiveSpec::new(kind);
            let v = objective_value(&net, &x, &xa, &labels, &spec);
            let lc = net.logits_batch(&x);
            let la = net.logits_batch(&xa);
            let bare: f64 = (0..4).map(|i| kind.loss(lc.row(i), la.row(i), labels[i])).sum::<f64>() / 4.0;
            assert!((v - bare).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_net_with_weight_penalty_is_log_k() {
        let net = MlpNetwork::init(&[2, 3, 4], false, &mut Rng::new(1)).unwrap().unflatten(&[0.0; 18]).unwrap();
        let x = Matrix::from_rows(&[vec![0.5, -0.5]]);
        let mut spec = ObjectiveSpec::new(RobustLossKind::At);
        spec.gamma = 0.3;
        let v = objective_value(&net, &x, &x, &[1], &spec);
        assert!((v - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn full_scope_requires_at() {
        let mut spec = ObjectiveSpec::new(RobustLossKind::Trades { lambda_t: 1.0 });
        spec.scope = TrhScope::Full;
        assert!(spec.validate().is_err());
    }
}
