//! Oracle cross-validation suite behind `trh verify`.

use std::fmt;

use crate::error::{Error, Result};
use crate::hessian_oracle::{
    hutchinson_trace, hutchinson_trace_sq, layer_oracle, sample_smooth_input, TopLayerProblem,
};
use crate::losses::RobustLossKind;
use crate::network::{ForwardTrace, MlpNetwork};
use crate::numerics::{finite_diff_gradient, relative_error, relative_error_scalar, Matrix, Rng, GRAD_STEP};
use crate::pacbayes::{bound_surrogate, gaussian_kl, optimal_sigma_diag, optimal_sigma_spherical, GaussianPosterior, PacBayesConfig};
use crate::theorem4::check_layer_inequality;
use crate::trh::{ce_layer_trace, mean_trh, objective_value, objective_value_and_grad, trh_for_kind, ObjectiveSpec, TradesCase, TrhScope};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl Level {
    fn instances(self) -> usize {
        match self {
            Level::Quick => 12,
            Level::Full => 50,
        }
    }
}

/// Formula that can be replaced by its negation to check that the suite
/// notices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    At,
    Trades,
    TradesFull,
    Alp,
    Mart,
    Layer,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "at" => Fault::At,
            "trades" => Fault::Trades,
            "trades_full" => Fault::TradesFull,
            "alp" => Fault::Alp,
            "mart" => Fault::Mart,
            "layer" => Fault::Layer,
            _ => return Err(Error::InvalidArgument(format!("unknown fault `{s}`"))),
        })
    }
}

/// The closed forms under test.
#[derive(Clone, Copy, Debug, Default)]
pub struct FormulaSet {
    pub fault: Option<Fault>,
}

impl FormulaSet {
    pub fn top(&self, kind: RobustLossKind, clean: &ForwardTrace, adv: &ForwardTrace, y: usize, case: TradesCase) -> f64 {
        let v = trh_for_kind(kind, clean, adv, y, case);
        let hit = matches!(
            (self.fault, kind, case),
            (Some(Fault::At), RobustLossKind::At, _)
                | (Some(Fault::Trades), RobustLossKind::Trades { .. }, TradesCase::StopGradient)
                | (Some(Fault::TradesFull), RobustLossKind::Trades { .. }, TradesCase::Full)
                | (Some(Fault::Alp), RobustLossKind::Alp { .. }, _)
                | (Some(Fault::Mart), RobustLossKind::Mart { .. }, _)
        );
        if hit {
            -v
        } else {
            v
        }
    }

    pub fn layer(&self, net: &MlpNetwork, trace: &ForwardTrace, l: usize) -> f64 {
        let v = ce_layer_trace(net, trace, l);
        if self.fault == Some(Fault::Layer) {
            -v
        } else {
            v
        }
    }
}

/// A random small network with a clean/adversarial input pair away from
/// every ReLU kink.
#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub net: MlpNetwork,
    pub x: Vec<f64>,
    pub x_adv: Vec<f64>,
    pub y: usize,
}

/// Input dim ≤ 6, one or two hidden layers of width ≤ 8, 2 to 5 classes.
pub fn random_instance(seed: u64) -> Result<Instance> {
    let mut rng = Rng::new(seed);
    for _ in 0..50 {
        let d = 1 + rng.below(6);
        let k = 2 + rng.below(4);
        let mut sizes = vec![d];
        for _ in 0..1 + rng.below(2) {
            sizes.push(2 + rng.below(7));
        }
        sizes.push(k);
        let net = MlpNetwork::init(&sizes, true, &mut rng)?;
        let Ok(x) = sample_smooth_input(&net, 50, || (0..d).map(|_| rng.normal()).collect()) else {
            continue;
        };
        let Ok(x_adv) = sample_smooth_input(&net, 50, || x.iter().map(|v| v + 0.1 * rng.uniform_in(-1.0, 1.0)).collect()) else {
            continue;
        };
        let y = rng.below(k);
        return Ok(Instance { seed, net, x, x_adv, y });
    }
    Err(Error::InvalidArgument(format!("seed {seed}: no smooth instance found")))
}

pub fn all_kinds() -> [(RobustLossKind, TradesCase); 5] {
    [
        (RobustLossKind::At, TradesCase::StopGradient),
        (RobustLossKind::Trades { lambda_t: 6.0 }, TradesCase::StopGradient),
        (RobustLossKind::Trades { lambda_t: 6.0 }, TradesCase::Full),
        (RobustLossKind::Alp { lambda_a: 0.5 }, TradesCase::StopGradient),
        (RobustLossKind::Mart { lambda_m: 6.0 }, TradesCase::StopGradient),
    ]
}

fn kind_label(kind: RobustLossKind, case: TradesCase) -> String {
    match (kind, case) {
        (RobustLossKind::Trades { .. }, TradesCase::Full) => "trades_full".into(),
        _ => kind.name().into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: &'static str,
    pub checks: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GroupReport {
    fn new(name: &'static str) -> Self {
        GroupReport { name, checks: 0, worst: 0.0, failures: Vec::new() }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, ok: bool, err: f64, what: impl FnOnce() -> String) {
        self.checks += 1;
        if err.is_finite() {
            self.worst = self.worst.max(err);
        }
        if !ok {
            self.failures.push(what());
        }
    }

    fn fail(&mut self, what: String) {
        self.checks += 1;
        self.failures.push(what);
    }
}

impl fmt::Display for GroupReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "group={} status={} checks={} worst={:.3e}",
            self.name,
            if self.passed() { "pass" } else { "fail" },
            self.checks,
            self.worst
        )?;
        for fail in &self.failures {
            write!(f, "\n  failure: {fail}")?;
        }
        Ok(())
    }
}

/// Top-layer closed forms against the finite-difference oracle.
pub fn check_trh_formulas(formulas: &FormulaSet, seeds: impl Iterator<Item = u64>, tol: f64) -> GroupReport {
    let mut rep = GroupReport::new("trh_formulas");
    for seed in seeds {
        let inst = match random_instance(seed) {
            Ok(i) => i,
            Err(e) => {
                rep.fail(e.to_string());
                continue;
            }
        };
        let clean = inst.net.forward(&inst.x).expect("instance dims");
        let adv = inst.net.forward(&inst.x_adv).expect("instance dims");
        for (kind, case) in all_kinds() {
            let formula = formulas.top(kind, &clean, &adv, inst.y, case);
            let oracle = TopLayerProblem::new(&inst.net, &inst.x, &inst.x_adv, inst.y, kind, case).and_then(|p| p.oracle_trace());
            match oracle {
                Ok(o) => {
                    let err = relative_error_scalar(formula, o);
                    rep.record(err <= tol, err, || {
                        format!("seed={seed} loss={} formula={formula:.9e} oracle={o:.9e} rel_err={err:.3e}", kind_label(kind, case))
                    });
                }
                Err(e) => rep.fail(format!("seed={seed} loss={} oracle error: {e}", kind_label(kind, case))),
            }
        }
    }
    rep
}

/// Exact per-layer CE trace against the single-layer oracle.
pub fn check_layer_traces(formulas: &FormulaSet, seeds: impl Iterator<Item = u64>, tol: f64) -> GroupReport {
    let mut rep = GroupReport::new("theorem4_layers");
    for seed in seeds {
        let inst = match random_instance(seed) {
            Ok(i) => i,
            Err(e) => {
                rep.fail(e.to_string());
                continue;
            }
        };
        let trace = inst.net.forward(&inst.x).expect("instance dims");
        for l in 0..inst.net.depth() {
            let formula = formulas.layer(&inst.net, &trace, l);
            match layer_oracle(&inst.net, &inst.x, inst.y, l) {
                Ok(o) => {
                    let err = relative_error_scalar(formula, o);
                    rep.record(err <= tol, err, || format!("seed={seed} layer={} formula={formula:.9e} oracle={o:.9e}", l + 1));
                }
                Err(e) => rep.fail(format!("seed={seed} layer={} oracle error: {e}", l + 1)),
            }
        }
    }
    rep
}

/// Layer inequality of the H tensors on every consecutive pair.
pub fn check_layer_inequalities(seeds: impl Iterator<Item = u64>) -> GroupReport {
    let mut rep = GroupReport::new("theorem4_inequality");
    for seed in seeds {
        let inst = match random_instance(seed) {
            Ok(i) => i,
            Err(e) => {
                rep.fail(e.to_string());
                continue;
            }
        };
        for level in 1..=inst.net.depth() {
            match check_layer_inequality(&inst.net, &inst.x, level) {
                Ok(r) => rep.record(r.holds, (r.lhs - r.rhs).max(0.0), || {
                    format!("seed={seed} level={level} lhs={:.9e} rhs={:.9e}", r.lhs, r.rhs)
                }),
                // Inputs that silence a whole hidden level are outside the
                // statement; draw-and-skip keeps the sweep honest.
                Err(Error::InvalidArgument(_)) | Err(Error::NonSmooth { .. }) => {}
                Err(e) => rep.fail(format!("seed={seed} level={level}: {e}")),
            }
        }
    }
    rep
}

/// Backprop of the full regularized objective against finite differences.
pub fn check_gradients(seeds: impl Iterator<Item = u64>, tol: f64) -> GroupReport {
    let mut rep = GroupReport::new("gradients");
    for seed in seeds {
        let inst = match random_instance(seed) {
            Ok(i) => i,
            Err(e) => {
                rep.fail(e.to_string());
                continue;
            }
        };
        let mut rng = Rng::new(seed ^ 0x6772_6164);
        let m = 3;
        let mut rows = vec![inst.x.clone()];
        let mut adv_rows = vec![inst.x_adv.clone()];
        let mut labels = vec![inst.y];
        for _ in 1..m {
            let Ok(x) = sample_smooth_input(&inst.net, 50, || (0..inst.x.len()).map(|_| rng.normal()).collect()) else { continue };
            let Ok(xa) = sample_smooth_input(&inst.net, 50, || x.iter().map(|v| v + 0.1 * rng.uniform_in(-1.0, 1.0)).collect()) else {
                continue;
            };
            rows.push(x);
            adv_rows.push(xa);
            labels.push(rng.below(inst.net.num_classes()));
        }
        let x = Matrix::from_rows(&rows);
        let xa = Matrix::from_rows(&adv_rows);
        let mut specs: Vec<(String, ObjectiveSpec)> = all_kinds()
            .into_iter()
            .map(|(kind, case)| {
                (kind_label(kind, case), ObjectiveSpec { kind, lambda: 0.7, gamma: 0.01, case, scope: TrhScope::Top })
            })
            .collect();
        specs.push((
            "at_full_scope".into(),
            ObjectiveSpec { kind: RobustLossKind::At, lambda: 0.3, gamma: 0.01, case: TradesCase::StopGradient, scope: TrhScope::Full },
        ));
        for (label, spec) in specs {
            let (_, grad) = match objective_value_and_grad(&inst.net, &x, &xa, &labels, &spec) {
                Ok(v) => v,
                Err(e) => {
                    rep.fail(format!("seed={seed} loss={label}: {e}"));
                    continue;
                }
            };
            let f = |theta: &[f64]| objective_value(&inst.net.unflatten(theta).expect("same shape"), &x, &xa, &labels, &spec);
            match finite_diff_gradient(f, &inst.net.flatten(), GRAD_STEP) {
                Ok(fd) => {
                    let err = relative_error(&grad, &fd);
                    rep.record(err <= tol, err, || format!("seed={seed} loss={label} rel_err={err:.3e}"));
                }
                Err(e) => rep.fail(format!("seed={seed} loss={label}: {e}")),
            }
        }
    }
    rep
}

/// KL properties, optimal variances against log-grid search.
pub fn check_pacbayes(seeds: impl Iterator<Item = u64>) -> GroupReport {
    let mut rep = GroupReport::new("pacbayes");
    for seed in seeds {
        let mut rng = Rng::new(seed ^ 0x7061_6362);
        let n = 1 + rng.below(8);
        let sigma0_sq = 10f64.powf(rng.uniform_in(-3.0, 0.0));
        let beta = 10f64.powf(rng.uniform_in(0.0, 3.0));
        let mean: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let var: Vec<f64> = (0..n).map(|_| sigma0_sq * 10f64.powf(rng.uniform_in(-1.0, 1.0))).collect();
        let kl = gaussian_kl(&GaussianPosterior::diagonal(mean, var).expect("positive"), sigma0_sq);
        rep.record(kl >= 0.0, (-kl).max(0.0), || format!("seed={seed} kl={kl}"));
        let prior = gaussian_kl(&GaussianPosterior::spherical(vec![0.0; n], sigma0_sq).expect("positive"), sigma0_sq);
        rep.record(prior.abs() <= 1e-12, prior.abs(), || format!("seed={seed} kl(prior, prior)={prior}"));

        let curv: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.0, 5.0)).collect();
        // per-coordinate objective with θ-dependent KL terms dropped
        let obj1 = |v: f64, h: f64| 0.5 * v * h + 0.5 * (v / sigma0_sq - 1.0 - (v / sigma0_sq).ln()) / beta;
        let grid = |center: f64| (0..100).map(move |i| center * 10f64.powf(-2.0 + 4.0 * i as f64 / 99.0));
        let diag = optimal_sigma_diag(&curv, sigma0_sq, beta).expect("positive curvature");
        for (i, (&v, &h)) in diag.iter().zip(&curv).enumerate() {
            let best = grid(v).map(|c| obj1(c, h)).fold(f64::INFINITY, f64::min);
            let gap = obj1(v, h) - best;
            rep.record(gap <= 1e-9, gap.max(0.0), || format!("seed={seed} diag[{i}] beaten by grid by {gap:e}"));
        }
        let trace: f64 = curv.iter().sum();
        let s = optimal_sigma_spherical(trace, sigma0_sq, beta, n).expect("positive curvature");
        let obj_sph = |v: f64| curv.iter().map(|&h| obj1(v, h)).sum::<f64>();
        let best = grid(s).map(obj_sph).fold(f64::INFINITY, f64::min);
        let gap = obj_sph(s) - best;
        rep.record(gap <= 1e-9, gap.max(0.0), || format!("seed={seed} spherical beaten by grid by {gap:e}"));
        let diag_obj: f64 = diag.iter().zip(&curv).map(|(&v, &h)| obj1(v, h)).sum();
        let gap = diag_obj - obj_sph(s);
        rep.record(gap <= 1e-12, gap.max(0.0), || format!("seed={seed} diagonal worse than spherical by {gap:e}"));

        if let Ok(inst) = random_instance(seed) {
            let (kind, _) = all_kinds()[seed as usize % 5];
            let cfg = PacBayesConfig::new(sigma0_sq, beta, 1);
            let spec = ObjectiveSpec { lambda: cfg.lambda(), gamma: cfg.gamma(), ..ObjectiveSpec::new(kind) };
            let (x, xa) = (Matrix::row_vector(&inst.x), Matrix::row_vector(&inst.x_adv));
            let labels = [inst.y];
            let objective = objective_value(&inst.net, &x, &xa, &labels, &spec);
            let surrogate = mean_trh(&inst.net, &x, &xa, &labels, kind, TradesCase::StopGradient)
                .map(|t| bound_surrogate(&inst.net, &x, &xa, &labels, kind, &cfg, t));
            match surrogate {
                Ok(b) => {
                    let err = relative_error_scalar(b, objective);
                    rep.record(err <= 1e-12, err, || format!("seed={seed} surrogate {b} vs objective {objective}"));
                }
                Err(e) => rep.record(false, f64::INFINITY, || format!("seed={seed} {e}")),
            }
        }
    }
    rep
}

/// Hutchinson estimators on explicit matrices.
pub fn check_hutchinson(seed: u64) -> GroupReport {
    let mut rep = GroupReport::new("hutchinson");
    let mut rng = Rng::new(seed);
    let diag = [1.0, 3.0, -0.5, 2.5, 4.0];
    let e = hutchinson_trace(|v| v.iter().zip(&diag).map(|(x, d)| d * x * x).sum(), diag.len(), 1, &mut rng);
    let err = (e.value - 10.0).abs();
    rep.record(err <= 1e-12, err, || format!("seed={seed} diagonal one-probe estimate {}", e.value));

    let dense = random_symmetric(6, &mut rng);
    let quad = |v: &[f64]| -> f64 { (0..6).map(|i| v[i] * (0..6).map(|j| dense[(i, j)] * v[j]).sum::<f64>()).sum() };
    let exact_trace: f64 = (0..6).map(|i| dense[(i, i)]).sum();
    let est = hutchinson_trace(quad, 6, 1000, &mut rng);
    let dev = (est.value - exact_trace).abs();
    rep.record(dev <= 3.0 * est.stderr, dev / est.stderr, || format!("seed={seed} trace {} vs {exact_trace} (se {})", est.value, est.stderr));

    let hvp = |v: &[f64]| -> Vec<f64> { (0..6).map(|i| (0..6).map(|j| dense[(i, j)] * v[j]).sum()).collect() };
    let exact_sq = dense.frobenius_sq();
    let est = hutchinson_trace_sq(hvp, 6, 1000, &mut rng);
    let dev = (est.value - exact_sq).abs();
    rep.record(dev <= 3.0 * est.stderr, dev / est.stderr, || format!("seed={seed} trace_sq {} vs {exact_sq} (se {})", est.value, est.stderr));
    rep
}

/// Symmetric matrix with trace scaled to 10.
pub fn random_symmetric(n: usize, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = rng.normal();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let tr: f64 = (0..n).map(|i| m[(i, i)]).sum();
    for i in 0..n {
        m[(i, i)] += (10.0 - tr) / n as f64;
    }
    m
}

/// Runs every group. Seeds start at `base_seed`.
pub fn run_suite(level: Level, formulas: &FormulaSet, base_seed: u64) -> Vec<GroupReport> {
    let n = level.instances() as u64;
    let seeds = move || base_seed..base_seed + n;
    let ineq = match level {
        Level::Quick => 30,
        Level::Full => 100,
    };
    vec![
        check_trh_formulas(formulas, seeds(), 1e-5),
        check_layer_traces(formulas, seeds(), 1e-5),
        check_layer_inequalities(base_seed..base_seed + ineq),
        check_gradients(seeds(), 1e-6),
        check_pacbayes(base_seed..base_seed + 20),
        check_hutchinson(base_seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_catches_each_fault() {
        let clean = check_trh_formulas(&FormulaSet::default(), 0..3, 1e-5);
        assert!(clean.passed(), "{clean}");
        for fault in [Fault::At, Fault::Trades, Fault::TradesFull, Fault::Alp, Fault::Mart] {
            let rep = check_trh_formulas(&FormulaSet { fault: Some(fault) }, 0..2, 1e-5);
            assert!(!rep.passed(), "{fault:?} not caught");
        }
        let rep = check_layer_traces(&FormulaSet { fault: Some(Fault::Layer) }, 0..2, 1e-5);
        assert!(!rep.passed());
    }

    #[test]
    fn instances_are_reproducible() {
        let a = random_instance(4).unwrap();
        let b = random_instance(4).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.x_adv, b.x_adv);
    }
}
