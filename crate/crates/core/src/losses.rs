//! Clean and robust losses and the softmax derivative algebra.
//!
//! For logits `g` with softmax `s`:
//! `Φ = diag(s) − s·sᵀ` is the Jacobian of `s`, `Ψ = I − 1·sᵀ` is the
//! Jacobian of `log s`, and `h = s − s²` is the diagonal of `Φ`.

use crate::autodiff::{Graph, Var};
use crate::network::argmax;
use crate::numerics::Matrix;

#[derive(Clone, Debug)]
pub struct SoftmaxDerivs {
    pub s: Vec<f64>,
    pub log_s: Vec<f64>,
    pub phi: Matrix,
    pub psi: Matrix,
    pub h: Vec<f64>,
}

impl SoftmaxDerivs {
    pub fn new(logits: &[f64]) -> Self {
        let k = logits.len();
        assert!(k >= 2, "softmax needs at least two classes");
        let log_s = log_softmax(logits);
        let s: Vec<f64> = log_s.iter().map(|v| v.exp()).collect();
        let mut phi = Matrix::zeros(k, k);
        let mut psi = Matrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                let delta = if i == j { 1.0 } else { 0.0 };
                phi[(i, j)] = s[i] * delta - s[i] * s[j];
                psi[(i, j)] = delta - s[j];
            }
        }
        let h = s.iter().map(|v| v - v * v).collect();
        SoftmaxDerivs { s, log_s, phi, psi, h }
    }

    pub fn num_classes(&self) -> usize {
        self.s.len()
    }

    /// `1ᵀh`
    pub fn h_sum(&self) -> f64 {
        self.h.iter().sum()
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// `−log s(g)_y`
pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    assert!(y < logits.len(), "label out of range");
    -log_softmax(logits)[y]
}

/// `KL(p ‖ q)` for probability vectors; terms with `p_i = 0` contribute 0.
pub fn kl_div(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * (pi.ln() - qi.ln())).sum()
}

/// `KL(s(clean) ‖ s(adv))` evaluated from logits in log space.
pub fn kl_from_logits(clean: &[f64], adv: &[f64]) -> f64 {
    let lp = log_softmax(clean);
    let lq = log_softmax(adv);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Squared Euclidean distance between two probability vectors.
pub fn alp_pair_loss(s_clean: &[f64], s_adv: &[f64]) -> f64 {
    s_clean.iter().zip(s_adv).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Most probable class other than `y` (lowest index on ties).
pub fn runner_up(probs: &[f64], y: usize) -> usize {
    let mut best: Option<usize> = None;
    for (k, &p) in probs.iter().enumerate() {
        if k != y && best.is_none_or(|b| p > probs[b]) {
            best = Some(k);
        }
    }
    best.expect("at least two classes")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MartLosses {
    /// `CE(clean, y) − log(1 − s(adv)_κ)`
    pub bce: f64,
    /// `KL(s(clean) ‖ s(adv)) · (1 − s(clean)_y)`
    pub wkl: f64,
    /// Runner-up class `κ` on the adversarial softmax.
    pub kappa: usize,
}

/// Boosted CE and weighted KL. The CE term is taken on the clean logits.
pub fn mart_losses(clean_logits: &[f64], adv_logits: &[f64], y: usize) -> MartLosses {
    let s_adv = softmax(adv_logits);
    let kappa = runner_up(&s_adv, y);
    let bce = cross_entropy(clean_logits, y) - (1.0 - s_adv[kappa]).ln();
    let p_y = softmax(clean_logits)[y];
    let wkl = kl_from_logits(clean_logits, adv_logits) * (1.0 - p_y);
    MartLosses { bce, wkl, kappa }
}

/// Robust training loss family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RobustLossKind {
    /// `CE(x′, y)`
    At,
    /// `CE(x, y) + λ_t·KL(s(g) ‖ s(g′))`
    Trades { lambda_t: f64 },
    /// `CE(x′, y) + λ_A·‖s(g) − s(g′)‖²`
    Alp { lambda_a: f64 },
    /// `BCE + λ_m·WKL`
    Mart { lambda_m: f64 },
}

/// Objective maximized by the attack's inner loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerLoss {
    CrossEntropy,
    /// `KL(s(g(x)) ‖ s(g(x′)))` with the clean softmax fixed.
    Kl,
}

impl RobustLossKind {
    pub fn name(&self) -> &'static str {
        match self {
            RobustLossKind::At => "at",
            RobustLossKind::Trades { .. } => "trades",
            RobustLossKind::Alp { .. } => "alp",
            RobustLossKind::Mart { .. } => "mart",
        }
    }

    /// Penalty weight of the pairing term (0 for AT).
    pub fn penalty(&self) -> f64 {
        match *self {
            RobustLossKind::At => 0.0,
            RobustLossKind::Trades { lambda_t } => lambda_t,
            RobustLossKind::Alp { lambda_a } => lambda_a,
            RobustLossKind::Mart { lambda_m } => lambda_m,
        }
    }

    pub fn inner_loss(&self) -> InnerLoss {
        match self {
            RobustLossKind::Trades { .. } => InnerLoss::Kl,
            _ => InnerLoss::CrossEntropy,
        }
    }

    /// Per-example loss value.
    pub fn loss(&self, clean_logits: &[f64], adv_logits: &[f64], y: usize) -> f64 {
        match *self {
            RobustLossKind::At => cross_entropy(adv_logits, y),
            RobustLossKind::Trades { lambda_t } => {
                cross_entropy(clean_logits, y) + lambda_t * kl_from_logits(clean_logits, adv_logits)
            }
            RobustLossKind::Alp { lambda_a } => {
                cross_entropy(adv_logits, y) + lambda_a * alp_pair_loss(&softmax(clean_logits), &softmax(adv_logits))
            }
            RobustLossKind::Mart { lambda_m } => {
                let m = mart_losses(clean_logits, adv_logits, y);
                m.bce + lambda_m * m.wkl
            }
        }
    }

    /// Per-example losses on a graph, `m × 1`. Every term is differentiated
    /// through both logit sets.
    pub fn graph_loss(&self, g: &mut Graph, clean_logits: Var, adv_logits: Var, labels: &[usize]) -> Var {
        match *self {
            RobustLossKind::At => graph_cross_entropy(g, adv_logits, labels),
            RobustLossKind::Trades { lambda_t } => {
                let ce = graph_cross_entropy(g, clean_logits, labels);
                let kl = graph_kl(g, clean_logits, adv_logits);
                let kl = g.scale(kl, lambda_t);
                g.add(ce, kl)
            }
            RobustLossKind::Alp { lambda_a } => {
                let ce = graph_cross_entropy(g, adv_logits, labels);
                let s = g.softmax(clean_logits);
                let sa = g.softmax(adv_logits);
                let d = g.sub(s, sa);
                let pair = g.row_norm_sq(d);
                let pair = g.scale(pair, lambda_a);
                g.add(ce, pair)
            }
            RobustLossKind::Mart { lambda_m } => {
                let ce = graph_cross_entropy(g, clean_logits, labels);
                let sa = g.softmax(adv_logits);
                let kappa = runner_up_rows(g.value(sa), labels);
                let s_kappa = g.pick(sa, &kappa);
                let margin = g.one_minus(s_kappa);
                let margin = g.ln(margin);
                let bce = g.sub(ce, margin);
                let kl = graph_kl(g, clean_logits, adv_logits);
                let p = g.softmax(clean_logits);
                let p_y = g.pick(p, labels);
                let w = g.one_minus(p_y);
                let wkl = g.mul(kl, w);
                let wkl = g.scale(wkl, lambda_m);
                g.add(bce, wkl)
            }
        }
    }
}

/// Runner-up class per row of a probability matrix.
pub fn runner_up_rows(probs: &Matrix, labels: &[usize]) -> Vec<usize> {
    labels.iter().enumerate().map(|(i, &y)| runner_up(probs.row(i), y)).collect()
}

/// Row-wise cross-entropy, `m × 1`.
pub fn graph_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let ls = g.log_softmax(logits);
    let picked = g.pick(ls, labels);
    g.neg(picked)
}

/// Row-wise `KL(s(clean) ‖ s(adv))`, `m × 1`.
pub fn graph_kl(g: &mut Graph, clean_logits: Var, adv_logits: Var) -> Var {
    let lp = g.log_softmax(clean_logits);
    let lq = g.log_softmax(adv_logits);
    let p = g.exp(lp);
    let diff = g.sub(lp, lq);
    g.row_dot(p, diff)
}

/// Per-row predicted classes for a logit matrix.
pub fn predictions(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, relative_error, Rng};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn symmetric_two_class_derivs() {
        let d = SoftmaxDerivs::new(&[0.0, 0.0]);
        assert_eq!(d.s, vec![0.5, 0.5]);
        assert_eq!(d.phi, Matrix::from_rows(&[vec![0.25, -0.25], vec![-0.25, 0.25]]));
        assert_eq!(d.psi, Matrix::from_rows(&[vec![0.5, -0.5], vec![-0.5, 0.5]]));
        assert_eq!(d.h, vec![0.25, 0.25]);
    }

    #[test]
    fn uniform_h_sum() {
        for k in 2..8 {
            let d = SoftmaxDerivs::new(&vec![1.3; k]);
            assert!(close(d.h_sum(), 1.0 - 1.0 / k as f64, 1e-12));
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let g: Vec<f64> = (0..4).map(|_| 2.0 * rng.normal()).collect();
            let d = SoftmaxDerivs::new(&g);
            for i in 0..4 {
                let ds = finite_diff_gradient(|w| softmax(w)[i], &g, 1e-6).unwrap();
                let dls = finite_diff_gradient(|w| log_softmax(w)[i], &g, 1e-6).unwrap();
                assert!(relative_error(&ds, d.phi.row(i)) < 1e-7);
                assert!(relative_error(&dls, d.psi.row(i)) < 1e-7);
            }
        }
    }

    #[test]
    fn loss_reference_values() {
        assert!(close(cross_entropy(&[0.0, 0.0], 0), std::f64::consts::LN_2, 1e-15));
        assert!(cross_entropy(&[100.0, 0.0], 0) < 1e-40);
        assert!(close(cross_entropy(&[1.0, 2.0, 3.0], 2), 0.40760596444438, 1e-12));
        assert!(close(kl_div(&[0.5, 0.5], &[0.25, 0.75]), 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln(), 1e-15));
        assert_eq!(kl_div(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_eq!(alp_pair_loss(&[1.0, 0.0], &[0.0, 1.0]), 2.0);
        assert!(close(alp_pair_loss(&[0.5, 0.5], &[0.25, 0.75]), 0.125, 1e-15));
    }

    #[test]
    fn mart_reference_values() {
        let m = mart_losses(&[0.0, 0.0], &[0.0, 0.0], 0);
        assert!(close(m.bce, 2.0 * 2f64.ln(), 1e-15));
        assert_eq!(m.kappa, 1);
        let sat = mart_losses(&[40.0, 0.0, 0.0], &[40.0, 0.0, 0.0], 0);
        assert!(sat.wkl.abs() < 1e-15);
        // ties go to the lowest index other than y
        assert_eq!(mart_losses(&[0.0; 3], &[0.0; 3], 0).kappa, 1);
        assert_eq!(mart_losses(&[0.0; 3], &[0.0; 3], 1).kappa, 0);

        let (c, a, y) = ([0.2, -1.0, 0.7], [1.1, 0.3, -0.4], 2);
        let m = mart_losses(&c, &a, y);
        let sc = softmax(&c);
        let sa = softmax(&a);
        assert_eq!(m.kappa, 0);
        let bce = -sc[y].ln() - (1.0 - sa[0]).ln();
        let kl: f64 = (0..3).map(|i| sc[i] * (sc[i] / sa[i]).ln()).sum();
        assert!(close(m.bce, bce, 1e-14));
        assert!(close(m.wkl, kl * (1.0 - sc[y]), 1e-14));
    }

    #[test]
    fn graph_losses_match_scalar_losses() {
        let mut rng = Rng::new(4);
        let clean = Matrix::from_vec(3, 4, (0..12).map(|_| rng.normal()).collect());
        let adv = Matrix::from_vec(3, 4, (0..12).map(|_| rng.normal()).collect());
        let labels = [0, 3, 1];
        for kind in [
            RobustLossKind::At,
            RobustLossKind::Trades { lambda_t: 6.0 },
            RobustLossKind::Alp { lambda_a: 0.7 },
            RobustLossKind::Mart { lambda_m: 5.0 },
        ] {
            let mut g = Graph::new();
            let c = g.constant(clean.clone());
            let a = g.constant(adv.clone());
            let out = kind.graph_loss(&mut g, c, a, &labels);
            for i in 0..3 {
                let expect = kind.loss(clean.row(i), adv.row(i), labels[i]);
                assert!(close(g.value(out)[(i, 0)], expect, 1e-12), "{kind:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn derivs_invariants(g in proptest::collection::vec(-6.0f64..6.0, 2..7)) {
            let d = SoftmaxDerivs::new(&g);
            let k = g.len();
            for i in 0..k {
                let phi_row: f64 = d.phi.row(i).iter().sum();
                let psi_row: f64 = d.psi.row(i).iter().sum();
                prop_assert!(phi_row.abs() <= 1e-12);
                prop_assert!(psi_row.abs() <= 1e-12);
                prop_assert!(d.h[i] > 0.0);
                prop_assert!((d.h[i] - d.phi[(i, i)]).abs() <= 1e-15);
                for j in 0..k {
                    prop_assert_eq!(d.phi[(i, j)], d.phi[(j, i)]);
                    prop_assert!((d.phi[(i, j)] - d.s[i] * d.psi[(i, j)]).abs() <= 1e-12);
                }
            }
            prop_assert!(d.h_sum() <= 1.0 - 1.0 / k as f64 + 1e-12);
        }

        #[test]
        fn kl_is_nonnegative(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
            prop_assert!(kl_div(&softmax(&a), &softmax(&b)) >= -1e-15);
            prop_assert!(kl_from_logits(&a, &b) >= -1e-15);
        }

        #[test]
        fn losses_are_shift_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 3),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
            c in -20.0f64..20.0,
            y in 0usize..3,
        ) {
            let sa: Vec<f64> = a.iter().map(|v| v + c).collect();
            let sb: Vec<f64> = b.iter().map(|v| v - c).collect();
            for kind in [
                RobustLossKind::At,
                RobustLossKind::Trades { lambda_t: 6.0 },
                RobustLossKind::Alp { lambda_a: 1.0 },
                RobustLossKind::Mart { lambda_m: 2.0 },
            ] {
                prop_assert!((kind.loss(&a, &b, y) - kind.loss(&sa, &sb, y)).abs() <= 1e-10);
            }
        }
    }
}
