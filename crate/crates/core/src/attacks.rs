//! Projected gradient ascent on the inputs, for ℓ∞ and ℓ2 balls.

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{graph_cross_entropy, graph_kl, predictions, InnerLoss};
use crate::network::MlpNetwork;
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| x - y);
        match self {
            Norm::Linf => diffs.map(f64::abs).fold(0.0, f64::max),
            Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub norm: Norm,
    pub delta: f64,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub inner_loss: InnerLoss,
    pub random_start: bool,
    /// Optional `(lo, hi)` box every coordinate is clipped into.
    pub clamp: Option<(f64, f64)>,
}

impl AttackConfig {
    /// Defaults: step size `2.5·δ/steps`, one restart, CE objective, random
    /// start, no clamp.
    pub fn new(norm: Norm, delta: f64, steps: usize) -> Self {
        AttackConfig {
            norm,
            delta,
            steps,
            step_size: 2.5 * delta / steps.max(1) as f64,
            restarts: 1,
            inner_loss: InnerLoss::CrossEntropy,
            random_start: true,
            clamp: None,
        }
    }

    /// A radius of exactly 0 is accepted and makes every attack the identity.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return bad("attack radius must be finite and >= 0");
        }
        if self.steps < 1 {
            return bad("attack needs at least one step");
        }
        if self.delta > 0.0 && !(self.step_size > 0.0) {
            return bad("attack step size must be > 0");
        }
        if self.restarts < 1 {
            return bad("attack needs at least one restart");
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                return bad("clamp box must satisfy lo < hi");
            }
        }
        Ok(())
    }
}

/// Closest point to `x_adv` in the `delta`-ball around `x0`. Points already
/// inside are returned unchanged.
pub fn project(x_adv: &[f64], x0: &[f64], norm: Norm, delta: f64) -> Vec<f64> {
    assert_eq!(x_adv.len(), x0.len());
    match norm {
        Norm::Linf => x_adv
            .iter()
            .zip(x0)
            .map(|(&a, &o)| {
                let mut v = a;
                if v - o > delta {
                    v = o + delta;
                    while v - o > delta {
                        v = v.next_down();
                    }
                } else if v - o < -delta {
                    v = o - delta;
                    while v - o < -delta {
                        v = v.next_up();
                    }
                }
                v
            })
            .collect(),
        Norm::L2 => {
            let dist = Norm::L2.distance(x_adv, x0);
            if dist <= delta {
                return x_adv.to_vec();
            }
            let scale = delta / dist;
            let mut out: Vec<f64> = x_adv.iter().zip(x0).map(|(a, o)| o + (a - o) * scale).collect();
            // rounding can leave the rescaled point a hair outside
            let mut shrink = 1.0;
            while Norm::L2.distance(&out, x0) > delta {
                shrink *= 1.0 - 1e-15;
                out = x_adv.iter().zip(x0).map(|(a, o)| o + (a - o) * scale * shrink).collect();
            }
            out
        }
    }
}

fn random_start(x0: &[f64], cfg: &AttackConfig, rng: &mut Rng) -> Vec<f64> {
    match cfg.norm {
        Norm::Linf => x0.iter().map(|o| o + rng.uniform_in(-cfg.delta, cfg.delta)).collect(),
        Norm::L2 => {
            let dir: Vec<f64> = x0.iter().map(|_| rng.normal()).collect();
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let radius = cfg.delta * rng.uniform().powf(1.0 / x0.len() as f64);
            if len == 0.0 {
                return x0.to_vec();
            }
            x0.iter().zip(&dir).map(|(o, d)| o + radius * d / len).collect()
        }
    }
}

fn finish(point: Vec<f64>, x0: &[f64], cfg: &AttackConfig) -> Vec<f64> {
    let mut p = project(&point, x0, cfg.norm, cfg.delta);
    if let Some((lo, hi)) = cfg.clamp {
        p.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
    p
}

/// One ascent step along `grad` followed by projection. A zero gradient
/// leaves the point where it is.
fn ascend(x: &[f64], grad: &[f64], x0: &[f64], cfg: &AttackConfig) -> Vec<f64> {
    let stepped: Vec<f64> = match cfg.norm {
        Norm::Linf => x.iter().zip(grad).map(|(v, g)| v + cfg.step_size * sign(*g)).collect(),
        Norm::L2 => {
            let len = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if len == 0.0 {
                return x.to_vec();
            }
            x.iter().zip(grad).map(|(v, g)| v + cfg.step_size * g / len).collect()
        }
    };
    finish(stepped, x0, cfg)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// PGD against an arbitrary input gradient.
pub fn pgd_with_gradient<G>(x0: &[f64], cfg: &AttackConfig, mut grad: G, rng: &mut Rng) -> Vec<f64>
where
    G: FnMut(&[f64]) -> Vec<f64>,
{
    if cfg.delta == 0.0 {
        return x0.to_vec();
    }
    let mut x = if cfg.random_start { finish(random_start(x0, cfg, rng), x0, cfg) } else { x0.to_vec() };
    for _ in 0..cfg.steps {
        let g = grad(&x);
        x = ascend(&x, &g, x0, cfg);
    }
    x
}

/// Gradient of the summed inner loss with respect to each input row.
pub fn input_gradient(net: &MlpNetwork, x: &Matrix, labels: &[usize], inner: InnerLoss, clean_logits: Option<&Matrix>) -> Matrix {
    let mut g = Graph::new();
    let bound = net.bind_constant(&mut g);
    let xv = g.param(x.clone());
    let fwd = bound.forward(&mut g, xv);
    let per_row = match inner {
        InnerLoss::CrossEntropy => graph_cross_entropy(&mut g, fwd.logits(), labels),
        InnerLoss::Kl => {
            let clean = clean_logits.cloned().expect("KL objective needs clean logits");
            let c = g.constant(clean);
            graph_kl(&mut g, c, fwd.logits())
        }
    };
    let total = g.sum(per_row);
    g.backward(total).get_or_zeros(xv, x)
}

/// Attacks every row of `x` at once. Example `i` draws its random start from
/// its own stream derived from one draw of `rng`, so results do not depend
/// on how the batch is split.
pub fn pgd_batch(net: &MlpNetwork, x: &Matrix, labels: &[usize], cfg: &AttackConfig, rng: &mut Rng) -> Matrix {
    let base = rng.next_u64();
    if cfg.delta == 0.0 {
        return x.clone();
    }
    let clean_logits = (cfg.inner_loss == InnerLoss::Kl).then(|| net.logits_batch(x));
    let mut cur = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let mut r = Rng::for_trial(base, i as u64);
        let start = if cfg.random_start { finish(random_start(x.row(i), cfg, &mut r), x.row(i), cfg) } else { x.row(i).to_vec() };
        cur.row_mut(i).copy_from_slice(&start);
    }
    for _ in 0..cfg.steps {
        let grad = input_gradient(net, &cur, labels, cfg.inner_loss, clean_logits.as_ref());
        for i in 0..x.rows() {
            let next = ascend(cur.row(i), grad.row(i), x.row(i), cfg);
            cur.row_mut(i).copy_from_slice(&next);
        }
    }
    cur
}

/// Single-example PGD.
pub fn pgd(net: &MlpNetwork, x: &[f64], y: usize, cfg: &AttackConfig, rng: &mut Rng) -> Vec<f64> {
    pgd_batch(net, &Matrix::row_vector(x), &[y], cfg, rng).into_vec()
}

/// Fraction of examples classified correctly.
pub fn accuracy(net: &MlpNetwork, x: &Matrix, labels: &[usize]) -> f64 {
    let pred = predictions(&net.logits_batch(x));
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Fraction of examples that stay correctly classified under every restart.
/// Restart `r` always uses stream `r` of `seed`, so adding restarts can only
/// remove examples from the robust set.
pub fn eval_robust_accuracy(net: &MlpNetwork, ds: &Dataset, cfg: &AttackConfig, seed: u64) -> Result<f64> {
    cfg.validate()?;
    let mut robust = vec![true; ds.len()];
    for r in 0..cfg.restarts {
        let mut rng = Rng::for_trial(seed, r as u64);
        let adv = pgd_batch(net, &ds.inputs, &ds.labels, cfg, &mut rng);
        let pred = predictions(&net.logits_batch(&adv));
        for (i, ok) in robust.iter_mut().enumerate() {
            *ok &= pred[i] == ds.labels[i];
        }
    }
    Ok(robust.iter().filter(|&&ok| ok).count() as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::two_moons;
    use crate::network::DenseLayer;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn projection_examples() {
        assert_eq!(project(&[0.2, 0.3], &[0.2, 0.3], Norm::L2, 0.1), vec![0.2, 0.3]);
        assert_eq!(project(&[0.3, -0.3], &[0.0, 0.0], Norm::Linf, 0.1), vec![0.1, -0.1]);
        let p = project(&[3.0, 4.0], &[0.0, 0.0], Norm::L2, 1.0);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn linear_fgsm_hits_the_analytic_maximum() {
        let c = [0.7, -1.3, 0.0, 2.0];
        let x = [0.1, 0.2, -0.3, 0.4];
        let delta = 0.05;
        let mut cfg = AttackConfig::new(Norm::Linf, delta, 1);
        cfg.random_start = false;
        let out = pgd_with_gradient(&x, &cfg, |_| c.to_vec(), &mut Rng::new(0));
        let value: f64 = c.iter().zip(&out).map(|(a, b)| a * b).sum();
        let base: f64 = c.iter().zip(&x).map(|(a, b)| a * b).sum();
        let l1: f64 = c.iter().map(|v| v.abs()).sum();
        assert!((value - (base + delta * l1)).abs() < 1e-12);
    }

    #[test]
    fn zero_radius_returns_input() {
        let net = MlpNetwork::init(&[2, 4, 2], true, &mut Rng::new(1)).unwrap();
        let cfg = AttackConfig::new(Norm::Linf, 0.0, 3);
        assert_eq!(pgd(&net, &[0.3, -0.2], 1, &cfg, &mut Rng::new(2)), vec![0.3, -0.2]);
    }

    #[test]
    fn input_gradient_matches_linear_model() {
        // CE of a linear model: d/dx = W (s - e_y)
        let w = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]);
        let net = MlpNetwork::new(vec![DenseLayer { weights: w.clone(), bias: None }]).unwrap();
        let x = Matrix::row_vector(&[0.2, -0.1]);
        let grad = input_gradient(&net, &x, &[0], InnerLoss::CrossEntropy, None);
        let s = crate::losses::softmax(net.logits_batch(&x).row(0));
        let r = [s[0] - 1.0, s[1]];
        for j in 0..2 {
            let expect = w[(j, 0)] * r[0] + w[(j, 1)] * r[1];
            assert!((grad[(0, j)] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn batch_split_does_not_change_results() {
        let net = MlpNetwork::init(&[2, 6, 2], true, &mut Rng::new(3)).unwrap();
        let ds = two_moons(6, 0.1, 4).unwrap();
        let cfg = AttackConfig::new(Norm::L2, 0.1, 3);
        let whole = pgd_batch(&net, &ds.inputs, &ds.labels, &cfg, &mut Rng::new(5));
        let again = pgd_batch(&net, &ds.inputs, &ds.labels, &cfg, &mut Rng::new(5));
        assert_eq!(whole, again);
    }

    #[test]
    fn restarts_are_monotone() {
        let net = MlpNetwork::init(&[2, 8, 2], true, &mut Rng::new(6)).unwrap();
        let ds = two_moons(100, 0.1, 7).unwrap();
        let mut cfg = AttackConfig::new(Norm::Linf, 0.3, 2);
        let one = eval_robust_accuracy(&net, &ds, &cfg, 11).unwrap();
        cfg.restarts = 5;
        let five = eval_robust_accuracy(&net, &ds, &cfg, 11).unwrap();
        assert!(five <= one);
        cfg.delta = 0.0;
        assert_eq!(eval_robust_accuracy(&net, &ds, &cfg, 11).unwrap(), accuracy(&net, &ds.inputs, &ds.labels));
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_inside(
            v in proptest::collection::vec(-10.0f64..10.0, 1..6),
            delta in 1e-6f64..3.0,
            l2 in any::<bool>(),
        ) {
            let norm = if l2 { Norm::L2 } else { Norm::Linf };
            let x0 = vec![0.5; v.len()];
            let p = project(&v, &x0, norm, delta);
            prop_assert!(norm.distance(&p, &x0) <= delta + 1e-12);
            prop_assert_eq!(project(&p, &x0, norm, delta), p);
        }
    }
}
