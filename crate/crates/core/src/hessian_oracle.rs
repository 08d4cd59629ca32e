//! Ground-truth curvature: Hessian diagonals from finite differences of
//! analytic gradients, Hutchinson estimates of `Tr(H)` and `Tr(H²)`, and the
//! eigenvalue summary derived from them.
//!
//! Nothing here reuses the closed-form trace code in [`crate::trh`]; the
//! oracles only need gradients, which come from the autodiff graph.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses::{graph_cross_entropy, graph_kl, runner_up, softmax, RobustLossKind};
use crate::network::MlpNetwork;
use crate::numerics::{finite_diff_hessian_diag_subset, rademacher_vector, Matrix, Rng, HESS_STEP};
use crate::trh::TradesCase;

/// Hidden pre-activations closer than this to 0 make a point unsuitable for
/// finite differences.
pub const SMOOTH_THRESHOLD: f64 = 1e-3;

/// Step of the second-difference quadratic form `vᵀHv`.
pub const QUAD_STEP: f64 = 1e-3;

/// Step of the gradient difference used for Hessian-vector products.
pub const HVP_STEP: f64 = 1e-4;

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    /// Sample standard deviation over `√probes`; NaN for a single probe.
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Estimate {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let stderr = if samples.len() < 2 {
            f64::NAN
        } else {
            let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Estimate { value: mean, stderr }
    }
}

/// Sum of finite-difference second derivatives over `indices`.
pub fn exact_trace<G>(grad: G, w: &[f64], indices: &[usize]) -> Result<f64>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    Ok(finite_diff_hessian_diag_subset(grad, w, indices, HESS_STEP)?.iter().sum())
}

/// Hutchinson trace estimate: mean of `vᵀHv` over Rademacher probes.
pub fn hutchinson_trace<Q>(mut quad_form: Q, dim: usize, probes: usize, rng: &mut Rng) -> Estimate
where
    Q: FnMut(&[f64]) -> f64,
{
    assert!(probes >= 1, "need at least one probe");
    let samples: Vec<f64> = (0..probes).map(|_| quad_form(&rademacher_vector(dim, rng))).collect();
    Estimate::from_samples(&samples)
}

/// Estimate of `Tr(H²)`: mean of `‖Hv‖²` over Rademacher probes.
pub fn hutchinson_trace_sq<H>(mut hvp: H, dim: usize, probes: usize, rng: &mut Rng) -> Estimate
where
    H: FnMut(&[f64]) -> Vec<f64>,
{
    assert!(probes >= 1, "need at least one probe");
    let samples: Vec<f64> = (0..probes)
        .map(|_| {
            let hv = hvp(&rademacher_vector(dim, rng));
            hv.iter().map(|x| x * x).sum()
        })
        .collect();
    Estimate::from_samples(&samples)
}

/// `vᵀHv ≈ (L(w + hv) − 2L(w) + L(w − hv)) / h²`
pub fn quadratic_form_fd<L>(loss: L, w: &[f64], v: &[f64], h: f64) -> f64
where
    L: Fn(&[f64]) -> f64,
{
    let plus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - h * b).collect();
    (loss(&plus) - 2.0 * loss(w) + loss(&minus)) / (h * h)
}

/// `Hv ≈ (∇L(w + hv) − ∇L(w − hv)) / 2h`
pub fn hvp_fd<G>(grad: G, w: &[f64], v: &[f64], h: f64) -> Vec<f64>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let plus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - h * b).collect();
    grad(&plus).iter().zip(grad(&minus)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// `(mean, std)` of the eigenvalues of an `n × n` symmetric matrix with the
/// given trace and trace of its square.
pub fn eigen_stats(trace: f64, trace_sq: f64, n: usize) -> (f64, f64) {
    assert!(n >= 1);
    let mean = trace / n as f64;
    let var = trace_sq / n as f64 - mean * mean;
    (mean, var.max(0.0).sqrt())
}

/// Curvature summary of one parameter block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerHessianReport {
    /// 0 for all weight matrices together, otherwise the 1-based layer.
    pub layer: usize,
    pub trace: f64,
    pub trace_sq: f64,
    pub eig_mean: f64,
    pub eig_std: f64,
    pub param_count: usize,
}

impl LayerHessianReport {
    pub fn new(layer: usize, trace: f64, trace_sq: f64, param_count: usize) -> Self {
        let (eig_mean, eig_std) = eigen_stats(trace, trace_sq, param_count);
        LayerHessianReport { layer, trace, trace_sq, eig_mean, eig_std, param_count }
    }
}

/// Mean cross-entropy of a network on fixed inputs, as a function of its
/// flat parameter vector. With `masks` set, hidden ReLUs are frozen to the
/// activity pattern at the base point, so the function is smooth and finite
/// differences see the Hessian of the active linear piece.
pub struct FixedInputLoss<'a> {
    net: &'a MlpNetwork,
    x: Matrix,
    labels: Vec<usize>,
    masks: Option<Vec<Matrix>>,
}

impl<'a> FixedInputLoss<'a> {
    pub fn new(net: &'a MlpNetwork, x: &Matrix, labels: &[usize]) -> Self {
        FixedInputLoss { net, x: x.clone(), labels: labels.to_vec(), masks: None }
    }

    pub fn masked(net: &'a MlpNetwork, x: &Matrix, labels: &[usize]) -> Self {
        FixedInputLoss { net, x: x.clone(), labels: labels.to_vec(), masks: Some(net.relu_masks(x)) }
    }

    pub fn base(&self) -> Vec<f64> {
        self.net.flatten()
    }

    fn eval(&self, flat: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let net = self.net.unflatten(flat).expect("flat length matches");
        let mut g = Graph::new();
        let bound = if want_grad { net.bind(&mut g) } else { net.bind_constant(&mut g) };
        let x = g.constant(self.x.clone());
        let fwd = match &self.masks {
            Some(m) => bound.forward_masked(&mut g, x, m),
            None => bound.forward(&mut g, x),
        };
        let ce = graph_cross_entropy(&mut g, fwd.logits(), &self.labels);
        let out = g.mean(ce);
        let value = g.value(out).item();
        let grad = want_grad.then(|| bound.flat_grad(&g.backward(out), &net));
        (value, grad)
    }

    pub fn loss(&self, flat: &[f64]) -> f64 {
        self.eval(flat, false).0
    }

    pub fn grad(&self, flat: &[f64]) -> Vec<f64> {
        self.eval(flat, true).1.unwrap()
    }

    /// Finite-difference trace over the given flat indices.
    pub fn exact_trace(&self, indices: &[usize]) -> Result<f64> {
        exact_trace(|w| self.grad(w), &self.base(), indices)
    }

    /// `vᵀHv` for a probe supported on `indices` (entries of `v` map to
    /// those indices in order).
    pub fn quad_form(&self, indices: &[usize], v: &[f64], h: f64) -> f64 {
        let w = self.base();
        let full = scatter(indices, v, w.len());
        quadratic_form_fd(|p| self.loss(p), &w, &full, h)
    }

    /// `(Hv)` restricted to `indices`, for a probe supported on `indices`.
    pub fn hvp(&self, indices: &[usize], v: &[f64], h: f64) -> Vec<f64> {
        let w = self.base();
        let full = scatter(indices, v, w.len());
        let hv = hvp_fd(|p| self.grad(p), &w, &full, h);
        indices.iter().map(|&i| hv[i]).collect()
    }
}

fn scatter(indices: &[usize], v: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(indices.len(), v.len());
    let mut out = vec![0.0; n];
    for (&i, &x) in indices.iter().zip(v) {
        out[i] = x;
    }
    out
}

/// Rademacher probes drawn once and reused, so that repeated measurements
/// share their randomness.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub probes: Vec<Vec<f64>>,
}

impl ProbeSet {
    pub fn new(dim: usize, count: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        ProbeSet { probes: (0..count).map(|_| rademacher_vector(dim, &mut rng)).collect() }
    }

    pub fn trace(&self, mut quad_form: impl FnMut(&[f64]) -> f64) -> Estimate {
        let samples: Vec<f64> = self.probes.iter().map(|v| quad_form(v)).collect();
        Estimate::from_samples(&samples)
    }

    pub fn trace_sq(&self, mut hvp: impl FnMut(&[f64]) -> Vec<f64>) -> Estimate {
        let samples: Vec<f64> = self.probes.iter().map(|v| hvp(v).iter().map(|x| x * x).sum()).collect();
        Estimate::from_samples(&samples)
    }
}

/// Top-layer view of one example: features and logit sets held fixed except
/// through the top weights, with the stop-gradient constants captured at the
/// base weights.
pub struct TopLayerProblem {
    pub kind: RobustLossKind,
    pub case: TradesCase,
    pub z: Vec<f64>,
    pub z_adv: Vec<f64>,
    pub y: usize,
    pub top: Matrix,
    frozen_clean: Vec<f64>,
    kappa: usize,
}

impl TopLayerProblem {
    pub fn new(net: &MlpNetwork, x: &[f64], x_adv: &[f64], y: usize, kind: RobustLossKind, case: TradesCase) -> Result<Self> {
        let clean = net.forward(x)?;
        let adv = net.forward(x_adv)?;
        let frozen_clean = softmax(clean.logits());
        let kappa = runner_up(&softmax(adv.logits()), y);
        Ok(TopLayerProblem {
            kind,
            case,
            z: clean.features().to_vec(),
            z_adv: adv.features().to_vec(),
            y,
            top: net.top_weights().clone(),
            frozen_clean,
            kappa,
        })
    }

    /// Gradient of the loss in the top weights (row-major flat).
    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        let (d, k) = self.top.shape();
        let mut g = Graph::new();
        let wv = g.param(Matrix::from_vec(d, k, w.to_vec()));
        let z = g.constant(Matrix::row_vector(&self.z));
        let za = g.constant(Matrix::row_vector(&self.z_adv));
        let lg = g.matmul(z, wv);
        let lga = g.matmul(za, wv);
        let y = [self.y];
        let p = g.constant(Matrix::row_vector(&self.frozen_clean));
        // `KL(p ‖ s(g′))` with p constant equals `−p·log s(g′)` up to a constant
        let frozen_ce = |g: &mut Graph| {
            let ls = g.log_softmax(lga);
            let dotp = g.row_dot(p, ls);
            g.neg(dotp)
        };
        let out = match self.kind {
            RobustLossKind::At => graph_cross_entropy(&mut g, lga, &y),
            RobustLossKind::Trades { lambda_t } => {
                let ce = graph_cross_entropy(&mut g, lg, &y);
                let kl = match self.case {
                    TradesCase::StopGradient => frozen_ce(&mut g),
                    TradesCase::Full => graph_kl(&mut g, lg, lga),
                };
                let kl = g.scale(kl, lambda_t);
                g.add(ce, kl)
            }
            RobustLossKind::Alp { lambda_a } => {
                let ce = graph_cross_entropy(&mut g, lga, &y);
                let sa = g.softmax(lga);
                let diff = g.sub(p, sa);
                let pair = g.row_norm_sq(diff);
                let pair = g.scale(pair, lambda_a);
                g.add(ce, pair)
            }
            RobustLossKind::Mart { lambda_m } => {
                let ce = graph_cross_entropy(&mut g, lg, &y);
                let sa = g.softmax(lga);
                let sk = g.pick(sa, &[self.kappa]);
                let rest = g.one_minus(sk);
                let margin = g.ln(rest);
                let bce = g.sub(ce, margin);
                let weight = 1.0 - self.frozen_clean[self.y];
                let kl = frozen_ce(&mut g);
                let kl = g.scale(kl, lambda_m * weight);
                g.add(bce, kl)
            }
        };
        let total = g.sum(out);
        g.backward(total).get_or_zeros(wv, &self.top).into_vec()
    }

    /// Finite-difference trace over every top weight.
    pub fn oracle_trace(&self) -> Result<f64> {
        let all: Vec<usize> = (0..self.top.len()).collect();
        exact_trace(|w| self.grad(w), self.top.as_slice(), &all)
    }
}

/// Finite-difference CE trace over layer `l`'s weights (0-based) at `x`.
/// Fails on inputs too close to a ReLU kink.
pub fn layer_oracle(net: &MlpNetwork, x: &[f64], y: usize, l: usize) -> Result<f64> {
    net.forward(x)?.ensure_smooth(SMOOTH_THRESHOLD)?;
    let xm = Matrix::row_vector(x);
    let f = FixedInputLoss::new(net, &xm, &[y]);
    let idx: Vec<usize> = net.weight_indices(l).collect();
    f.exact_trace(&idx)
}

/// Draws inputs from `sample` until one is smooth for `net`, up to
/// `attempts` tries.
pub fn sample_smooth_input(net: &MlpNetwork, attempts: usize, mut sample: impl FnMut() -> Vec<f64>) -> Result<Vec<f64>> {
    for _ in 0..attempts {
        let x = sample();
        if net.forward(&x)?.ensure_smooth(SMOOTH_THRESHOLD).is_ok() {
            return Ok(x);
        }
    }
    Err(Error::InvalidArgument(format!("no smooth input found in {attempts} attempts")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trh::{ce_layer_trace, trh_for_kind};

    #[test]
    fn diagonal_quadratic_trace() {
        let grad = |w: &[f64]| vec![w[0], 3.0 * w[1]];
        assert!((exact_trace(grad, &[0.2, 0.1], &[0, 1]).unwrap() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn hutchinson_is_exact_for_diagonal() {
        let diag = [1.0, 3.0, -0.5, 2.0];
        let qf = |v: &[f64]| v.iter().zip(&diag).map(|(x, d)| d * x * x).sum::<f64>();
        let e = hutchinson_trace(qf, 4, 1, &mut Rng::new(0));
        assert!((e.value - 5.5).abs() < 1e-12);
        assert!(e.stderr.is_nan());
        let hvp = |v: &[f64]| v.iter().zip(&[1.0, 3.0]).map(|(x, d)| d * x).collect::<Vec<_>>();
        assert!((hutchinson_trace_sq(hvp, 2, 3, &mut Rng::new(1)).value - 10.0).abs() < 1e-12);
        assert_eq!(hutchinson_trace_sq(|_| vec![0.0; 3], 3, 4, &mut Rng::new(1)).value, 0.0);
    }

    #[test]
    fn eigen_stats_examples() {
        assert_eq!(eigen_stats(4.0, 10.0, 2), (2.0, 1.0));
        assert_eq!(eigen_stats(6.0, 12.0, 3).1, 0.0);
    }

    #[test]
    fn top_layer_oracle_matches_at_formula() {
        let mut rng = Rng::new(12);
        let net = MlpNetwork::init(&[3, 5, 4], true, &mut rng).unwrap();
        let x = [0.4, -0.9, 1.2];
        let xa = [0.5, -0.8, 1.1];
        let p = TopLayerProblem::new(&net, &x, &xa, 2, RobustLossKind::At, TradesCase::StopGradient).unwrap();
        let oracle = p.oracle_trace().unwrap();
        let formula = trh_for_kind(
            RobustLossKind::At,
            &net.forward(&x).unwrap(),
            &net.forward(&xa).unwrap(),
            2,
            TradesCase::StopGradient,
        );
        assert!((oracle - formula).abs() / formula < 1e-6, "{oracle} vs {formula}");
    }

    #[test]
    fn layer_traces_add_up_and_match_closed_form() {
        let mut rng = Rng::new(13);
        let net = MlpNetwork::init(&[2, 4, 2], true, &mut rng).unwrap();
        let x = sample_smooth_input(&net, 100, || vec![rng.normal(), rng.normal()]).unwrap();
        let t = net.forward(&x).unwrap();
        let per_layer: Vec<f64> = (0..2).map(|l| layer_oracle(&net, &x, 1, l).unwrap()).collect();
        let f = FixedInputLoss::new(&net, &Matrix::row_vector(&x), &[1]);
        let all = f.exact_trace(&net.all_weight_indices()).unwrap();
        assert!((per_layer.iter().sum::<f64>() - all).abs() <= 1e-8 * all.abs().max(1.0));
        for (l, v) in per_layer.iter().enumerate() {
            let closed = ce_layer_trace(&net, &t, l);
            assert!((v - closed).abs() <= 1e-5 * closed.abs().max(1e-12), "layer {l}: {v} vs {closed}");
        }
    }

    #[test]
    fn masked_quadratic_form_matches_diagonal_on_one_coordinate() {
        let mut rng = Rng::new(14);
        let net = MlpNetwork::init(&[2, 5, 3], true, &mut rng).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.2]]);
        let f = FixedInputLoss::masked(&net, &x, &[0, 2]);
        let idx = [3usize];
        let q = f.quad_form(&idx, &[1.0], QUAD_STEP);
        let diag = f.exact_trace(&idx).unwrap();
        assert!((q - diag).abs() < 1e-6);
        let hv = f.hvp(&idx, &[1.0], HVP_STEP);
        assert!((hv[0] - diag).abs() < 1e-6);
    }
}
