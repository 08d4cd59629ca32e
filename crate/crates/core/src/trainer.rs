//! Momentum-SGD training of the regularized robust objective, with
//! learning-rate and penalty schedules, SWA and AWP baselines, per-epoch
//! metrics and optional curvature measurements.

use std::io::Write;
use std::path::Path;

use crate::attacks::{accuracy, eval_robust_accuracy, pgd_batch, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hessian_oracle::{LayerHessianReport, ProbeSet};
use crate::losses::RobustLossKind;
use crate::measure::{measure_spectrum, measure_trace, measurement_inputs, spectrum_probes, TraceMeasurement};
use crate::network::MlpNetwork;
use crate::numerics::{norm_sq, Rng};
use crate::pacbayes::empirical_loss_at;
use crate::trh::{objective_value_and_grad, ObjectiveSpec, TradesCase, TrhScope};

/// Losses above this (or non-finite) abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub enum LrDecay {
    Constant,
    Cosine,
    /// Multiply by `factor` at each listed epoch.
    Multistep { milestones: Vec<usize>, factor: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaSchedule {
    Constant,
    /// `λ·t/(T−1)`
    Linear,
    /// `0.01λ` for the first 10% of iterations, `0.1λ` until 50%, then `λ`.
    Multistep,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Baseline {
    None,
    Swa { alpha: f64 },
    Awp { delta_awp: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub warmup_iters: usize,
    pub lr_decay: LrDecay,
    pub gamma: f64,
    pub seed: u64,
    pub baseline: Baseline,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 0,
            base_lr: 0.1,
            momentum: 0.9,
            warmup_iters: 0,
            lr_decay: LrDecay::Constant,
            gamma: 0.0,
            seed: 0,
            baseline: Baseline::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be >= 0");
        }
        match self.baseline {
            Baseline::Swa { alpha } if !(alpha > 0.0 && alpha < 1.0) => bad("swa alpha must lie in (0, 1)"),
            Baseline::Awp { delta_awp } if !(delta_awp > 0.0) => bad("awp delta must be > 0"),
            _ => Ok(()),
        }
    }

    pub fn iters_per_epoch(&self, n: usize) -> usize {
        if self.batch_size == 0 || self.batch_size >= n {
            1
        } else {
            n / self.batch_size
        }
    }
}

/// TrH regularizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrhConfig {
    pub lambda: f64,
    pub schedule: LambdaSchedule,
    pub case: TradesCase,
    pub scope: TrhScope,
}

impl Default for TrhConfig {
    fn default() -> Self {
        TrhConfig { lambda: 0.0, schedule: LambdaSchedule::Constant, case: TradesCase::StopGradient, scope: TrhScope::Top }
    }
}

/// Which curvature measurements to log, and how often.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeasureConfig {
    /// Measure after every `every` epochs (and the last); 0 disables.
    pub every: usize,
    pub trace: bool,
    pub spectrum: bool,
    /// Adds the Hutchinson estimate of the full trace to trace rows.
    pub hutchinson: bool,
    pub probes: usize,
    pub probe_seed: u64,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig { every: 0, trace: false, spectrum: false, hutchinson: true, probes: 20, probe_seed: 0 }
    }
}

pub fn lambda_at(schedule: LambdaSchedule, t: usize, total: usize, lambda_max: f64) -> f64 {
    match schedule {
        LambdaSchedule::Constant => lambda_max,
        LambdaSchedule::Linear => {
            if total <= 1 {
                lambda_max
            } else {
                lambda_max * t as f64 / (total - 1) as f64
            }
        }
        LambdaSchedule::Multistep => {
            let frac = t as f64 / total as f64;
            if frac < 0.1 {
                0.01 * lambda_max
            } else if frac < 0.5 {
                0.1 * lambda_max
            } else {
                lambda_max
            }
        }
    }
}

/// Linear warmup from 0 over `warmup_iters`, then the configured decay.
/// Multistep milestones are in epochs.
pub fn lr_at(cfg: &TrainConfig, t: usize, total: usize, iters_per_epoch: usize) -> f64 {
    let w = cfg.warmup_iters;
    if t < w {
        return cfg.base_lr * t as f64 / w as f64;
    }
    match &cfg.lr_decay {
        LrDecay::Constant => cfg.base_lr,
        LrDecay::Cosine => {
            let span = total.saturating_sub(1).saturating_sub(w);
            if span == 0 {
                return cfg.base_lr;
            }
            let progress = (t - w) as f64 / span as f64;
            cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
        LrDecay::Multistep { milestones, factor } => {
            let epoch = t / iters_per_epoch.max(1);
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            cfg.base_lr * factor.powi(passed as i32)
        }
    }
}

/// `avg ← α·avg + (1 − α)·new`
pub fn swa_update(avg: &mut [f64], new: &[f64], alpha: f64) {
    assert_eq!(avg.len(), new.len());
    for (a, n) in avg.iter_mut().zip(new) {
        *a = alpha * *a + (1.0 - alpha) * n;
    }
}

/// Rescales each weight block of `xi` so `‖ξ_l‖ ≤ δ·‖W_l‖`. Bias entries
/// are zeroed.
pub fn project_weight_perturbation(net: &MlpNetwork, xi: &mut [f64], delta_awp: f64) {
    let theta = net.flatten();
    let mut keep = vec![false; xi.len()];
    for l in 0..net.depth() {
        let idx = net.weight_indices(l);
        idx.clone().for_each(|i| keep[i] = true);
        let w_norm = norm_sq(&theta[idx.clone()]).sqrt();
        let xi_norm = norm_sq(&xi[idx.clone()]).sqrt();
        let limit = delta_awp * w_norm;
        if xi_norm > limit {
            let scale = if xi_norm > 0.0 { limit / xi_norm } else { 0.0 };
            xi[idx].iter_mut().for_each(|v| *v *= scale);
        }
    }
    for (v, k) in xi.iter_mut().zip(keep) {
        if !k {
            *v = 0.0;
        }
    }
}

/// Worst-case weight perturbation for one batch: a per-layer normalized
/// ascent step on the robust loss, of size `δ·‖W_l‖`, projected onto the
/// layer-wise ball.
pub fn awp_step(net: &MlpNetwork, batch: &Dataset, x_adv: &crate::numerics::Matrix, kind: RobustLossKind, delta_awp: f64) -> Result<Vec<f64>> {
    let spec = ObjectiveSpec::new(kind);
    let (_, grad) = objective_value_and_grad(net, &batch.inputs, x_adv, &batch.labels, &spec)?;
    let theta = net.flatten();
    let mut xi = vec![0.0; theta.len()];
    for l in 0..net.depth() {
        let idx = net.weight_indices(l);
        let g_norm = norm_sq(&grad[idx.clone()]).sqrt();
        let w_norm = norm_sq(&theta[idx.clone()]).sqrt();
        if g_norm > 0.0 {
            for i in idx {
                xi[i] = delta_awp * w_norm * grad[i] / g_norm;
            }
        }
    }
    project_weight_perturbation(net, &mut xi, delta_awp);
    Ok(xi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub lambda_eff: f64,
    pub objective: f64,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub robust_acc: f64,
    pub values: TraceMeasurement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumRow {
    pub epoch: usize,
    pub report: LayerHessianReport,
}

/// Everything a run logs.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub kind: RobustLossKind,
    pub epochs: Vec<EpochMetrics>,
    pub trace: Vec<TraceRow>,
    pub spectrum: Vec<SpectrumRow>,
}

fn penalty_column(kind: RobustLossKind) -> Option<&'static str> {
    match kind {
        RobustLossKind::At => None,
        RobustLossKind::Trades { .. } => Some("lambda_t"),
        RobustLossKind::Alp { .. } => Some("lambda_a"),
        RobustLossKind::Mart { .. } => Some("lambda_m"),
    }
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

impl MetricsLog {
    pub fn metrics_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["epoch", "iteration", "lr", "lambda_eff"].iter().map(|s| s.to_string()).collect();
        h.extend(penalty_column(self.kind).map(String::from));
        h.extend(["objective", "train_loss", "clean_acc", "robust_acc"].iter().map(|s| s.to_string()));
        h
    }

    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        let penalty = penalty_column(self.kind).map(|_| self.kind.penalty());
        let rows = self.epochs.iter().map(|m| {
            let mut r = vec![m.epoch.to_string(), m.iteration.to_string(), m.lr.to_string(), m.lambda_eff.to_string()];
            r.extend(penalty.map(|p| p.to_string()));
            r.extend([m.objective, m.train_loss, m.clean_acc, m.robust_acc].iter().map(|v| v.to_string()));
            r
        });
        write_csv(path, &self.metrics_header(), rows)
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let layers = self.trace.first().map_or(0, |r| r.values.layers.len());
        let mut header: Vec<String> =
            ["epoch", "trh_top_analytic", "trh_full_estimate", "trh_full_stderr", "trh_full_exact"].iter().map(|s| s.to_string()).collect();
        header.extend((1..=layers).map(|l| format!("trh_layer_{l}")));
        header.extend(["train_loss".to_string(), "robust_acc".to_string()]);
        let rows = self.trace.iter().map(|r| {
            let v = &r.values;
            let mut row = vec![r.epoch.to_string()];
            row.extend([v.top_analytic, v.full_estimate, v.full_stderr, v.full_exact].iter().map(|x| x.to_string()));
            row.extend(v.layers.iter().map(|x| x.to_string()));
            row.extend([r.train_loss.to_string(), r.robust_acc.to_string()]);
            row
        });
        write_csv(path, &header, rows)
    }

    pub fn write_spectrum(&self, path: &Path) -> Result<()> {
        let header: Vec<String> = ["epoch", "layer", "trace", "trace_sq", "eig_mean", "eig_std"].iter().map(|s| s.to_string()).collect();
        let rows = self.spectrum.iter().map(|r| {
            let p = &r.report;
            vec![
                r.epoch.to_string(),
                p.layer.to_string(),
                p.trace.to_string(),
                p.trace_sq.to_string(),
                p.eig_mean.to_string(),
                p.eig_std.to_string(),
            ]
        });
        write_csv(path, &header, rows)
    }
}

/// Outcome of [`train`]. On divergence `net` holds the last weights whose
/// loss was finite and `divergence` carries the error.
#[derive(Debug)]
pub struct TrainRun {
    pub net: MlpNetwork,
    pub log: MetricsLog,
    pub divergence: Option<Error>,
}

struct Measurer<'a> {
    cfg: MeasureConfig,
    trace_probes: Option<ProbeSet>,
    spectrum_probes: Vec<ProbeSet>,
    ds: &'a Dataset,
    attack: &'a AttackConfig,
    kind: RobustLossKind,
    case: TradesCase,
    seed: u64,
}

impl Measurer<'_> {
    fn due(&self, epoch: usize, last: usize) -> bool {
        self.cfg.every > 0 && (self.cfg.trace || self.cfg.spectrum) && (epoch.is_multiple_of(self.cfg.every) || epoch == last)
    }

    fn run(&self, net: &MlpNetwork, epoch: usize, metrics: &EpochMetrics, log: &mut MetricsLog) -> Result<()> {
        let x_adv = measurement_inputs(net, self.ds, self.attack, self.seed, epoch);
        if self.cfg.trace {
            let values = measure_trace(net, self.ds, &x_adv, self.kind, self.case, self.trace_probes.as_ref())?;
            log.trace.push(TraceRow { epoch, train_loss: metrics.train_loss, robust_acc: metrics.robust_acc, values });
        }
        if self.cfg.spectrum {
            for report in measure_spectrum(net, &x_adv, &self.ds.labels, &self.spectrum_probes)? {
                log.spectrum.push(SpectrumRow { epoch, report });
            }
        }
        Ok(())
    }
}

/// Trains `net` on `ds`. Epochs in the log are 1-based; epoch 0 (when
/// measurements are on) records the initial network.
pub fn train(
    net: MlpNetwork,
    ds: &Dataset,
    kind: RobustLossKind,
    trh: &TrhConfig,
    attack: &AttackConfig,
    cfg: &TrainConfig,
    measure: &MeasureConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    attack.validate()?;
    let base_spec = ObjectiveSpec { kind, lambda: trh.lambda, gamma: cfg.gamma, case: trh.case, scope: trh.scope };
    base_spec.validate()?;
    if net.input_dim() != ds.dim() {
        return Err(Error::Dimension { expected: net.input_dim(), actual: ds.dim(), context: "dataset features" });
    }
    if net.num_classes() < ds.num_classes {
        return Err(Error::Dimension { expected: ds.num_classes, actual: net.num_classes(), context: "network classes" });
    }

    let n = ds.len();
    let per_epoch = cfg.iters_per_epoch(n);
    let batch = if per_epoch == 1 { n } else { cfg.batch_size };
    let total = cfg.epochs * per_epoch;
    let mut rng = Rng::new(cfg.seed);
    let mut net = net;
    let mut theta = net.flatten();
    let mut velocity = vec![0.0; theta.len()];
    let mut avg = matches!(cfg.baseline, Baseline::Swa { .. }).then(|| theta.clone());
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = MetricsLog { kind, epochs: Vec::new(), trace: Vec::new(), spectrum: Vec::new() };

    let measurer = Measurer {
        cfg: *measure,
        trace_probes: (measure.trace && measure.hutchinson).then(|| ProbeSet::new(net.all_weight_indices().len(), measure.probes, measure.probe_seed)),
        spectrum_probes: if measure.spectrum { spectrum_probes(&net, measure.probes, measure.probe_seed ^ 0x5bec) } else { Vec::new() },
        ds,
        attack,
        kind,
        case: trh.case,
        seed: cfg.seed,
    };
    if measurer.due(0, cfg.epochs) {
        let m = evaluate(&net, ds, kind, attack, cfg.seed, 0, 0, 0.0, 0.0, f64::NAN)?;
        measurer.run(&net, 0, &m, &mut log)?;
    }

    let mut t = 0;
    for epoch in 1..=cfg.epochs {
        if per_epoch > 1 {
            rng.shuffle(&mut order);
        }
        let (mut obj_sum, mut loss_sum) = (0.0, 0.0);
        let (mut lr, mut lam) = (0.0, 0.0);
        for b in 0..per_epoch {
            let batch_ds = if per_epoch == 1 { ds.clone() } else { ds.subset(&order[b * batch..(b + 1) * batch]) };
            lr = lr_at(cfg, t, total, per_epoch);
            lam = lambda_at(trh.schedule, t, total, trh.lambda);
            let spec = ObjectiveSpec { lambda: lam, ..base_spec };
            let x_adv = pgd_batch(&net, &batch_ds.inputs, &batch_ds.labels, attack, &mut rng);
            let step = match cfg.baseline {
                Baseline::Awp { delta_awp } => awp_step(&net, &batch_ds, &x_adv, kind, delta_awp).and_then(|xi| {
                    let perturbed: Vec<f64> = theta.iter().zip(&xi).map(|(a, b)| a + b).collect();
                    objective_value_and_grad(&net.unflatten(&perturbed)?, &batch_ds.inputs, &x_adv, &batch_ds.labels, &spec)
                }),
                _ => objective_value_and_grad(&net, &batch_ds.inputs, &x_adv, &batch_ds.labels, &spec),
            };
            let (value, grad) = match step {
                Ok(v) => v,
                Err(e @ Error::Divergence { .. }) => return Ok(diverged(net, avg, log, e)),
                Err(e) => return Err(e),
            };
            if !value.is_finite() || value > DIVERGENCE_LIMIT || grad.iter().any(|g| !g.is_finite()) {
                return Ok(diverged(net, avg, log, Error::Divergence { iteration: t, loss: value }));
            }
            obj_sum += value;
            loss_sum += empirical_loss_at(&net, &batch_ds.inputs, &x_adv, &batch_ds.labels, kind);
            for ((w, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *w -= lr * *v;
            }
            net.assign_flat(&theta)?;
            if let (Some(avg), Baseline::Swa { alpha }) = (avg.as_mut(), cfg.baseline) {
                swa_update(avg, &theta, alpha);
            }
            t += 1;
        }
        let eval_net = match &avg {
            Some(a) => net.unflatten(a)?,
            None => net.clone(),
        };
        let metrics = evaluate(&eval_net, ds, kind, attack, cfg.seed, epoch, t, lr, lam, obj_sum / per_epoch as f64)?;
        let metrics = EpochMetrics { train_loss: loss_sum / per_epoch as f64, ..metrics };
        if measurer.due(epoch, cfg.epochs) {
            measurer.run(&eval_net, epoch, &metrics, &mut log)?;
        }
        log.epochs.push(metrics);
    }
    let net = match avg {
        Some(a) => net.unflatten(&a)?,
        None => net,
    };
    Ok(TrainRun { net, log, divergence: None })
}

fn diverged(net: MlpNetwork, avg: Option<Vec<f64>>, log: MetricsLog, e: Error) -> TrainRun {
    let net = match avg {
        Some(a) if a.iter().all(|v| v.is_finite()) => net.unflatten(&a).unwrap_or(net),
        _ => net,
    };
    TrainRun { net, log, divergence: Some(e) }
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    net: &MlpNetwork,
    ds: &Dataset,
    kind: RobustLossKind,
    attack: &AttackConfig,
    seed: u64,
    epoch: usize,
    iteration: usize,
    lr: f64,
    lambda_eff: f64,
    objective: f64,
) -> Result<EpochMetrics> {
    let eval_seed = Rng::for_trial(seed ^ 0x6576_616c, epoch as u64).next_u64();
    let robust_acc = eval_robust_accuracy(net, ds, attack, eval_seed)?;
    let mut rng = Rng::new(eval_seed);
    let train_loss = {
        let x_adv = pgd_batch(net, &ds.inputs, &ds.labels, attack, &mut rng);
        empirical_loss_at(net, &ds.inputs, &x_adv, &ds.labels, kind)
    };
    Ok(EpochMetrics { epoch, iteration, lr, lambda_eff, objective, train_loss, clean_acc: accuracy(net, &ds.inputs, &ds.labels), robust_acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Norm;
    use crate::data::two_moons;

    #[test]
    fn lambda_schedules() {
        let ms = |t| lambda_at(LambdaSchedule::Multistep, t, 100, 1.0);
        assert_eq!((ms(5), ms(30), ms(80)), (0.01, 0.1, 1.0));
        assert_eq!(lambda_at(LambdaSchedule::Linear, 0, 10, 2.0), 0.0);
        assert_eq!(lambda_at(LambdaSchedule::Linear, 9, 10, 2.0), 2.0);
        assert_eq!(lambda_at(LambdaSchedule::Constant, 3, 10, 2.0), 2.0);
    }

    #[test]
    fn lr_schedules() {
        let cfg = TrainConfig { warmup_iters: 10, lr_decay: LrDecay::Cosine, base_lr: 0.4, ..Default::default() };
        assert_eq!(lr_at(&cfg, 10, 111, 1), 0.4);
        assert_eq!(lr_at(&cfg, 5, 111, 1), 0.2);
        assert!(lr_at(&cfg, 110, 111, 1).abs() < 1e-15);
        assert!((lr_at(&cfg, 60, 111, 1) - 0.2).abs() < 1e-15);
        let ms = TrainConfig { lr_decay: LrDecay::Multistep { milestones: vec![2, 4], factor: 0.1 }, ..Default::default() };
        assert_eq!(lr_at(&ms, 3, 100, 2), 0.1);
        assert!((lr_at(&ms, 4, 100, 2) - 0.01).abs() < 1e-17);
        assert!((lr_at(&ms, 9, 100, 2) - 0.001).abs() < 1e-17);
    }

    #[test]
    fn swa_examples() {
        let mut avg = vec![0.0];
        swa_update(&mut avg, &[1.0], 0.995);
        assert!((avg[0] - 0.005).abs() < 1e-15);
        swa_update(&mut avg, &[3.0], 0.0);
        assert_eq!(avg, vec![3.0]);
    }

    #[test]
    fn awp_perturbation_respects_layer_balls() {
        let ds = two_moons(20, 0.1, 1).unwrap();
        let net = MlpNetwork::init(&[2, 6, 2], true, &mut Rng::new(2)).unwrap();
        let xi = awp_step(&net, &ds, &ds.inputs, RobustLossKind::At, 0.05).unwrap();
        let theta = net.flatten();
        for l in 0..net.depth() {
            let idx = net.weight_indices(l);
            let ratio = norm_sq(&xi[idx.clone()]).sqrt() / norm_sq(&theta[idx]).sqrt();
            assert!(ratio <= 0.05 * (1.0 + 1e-12));
        }
        let bias_start = net.weight_indices(0).end;
        assert!(xi[bias_start..bias_start + 6].iter().all(|&v| v == 0.0));
    }

    fn small_run(trh: TrhConfig, baseline: Baseline, seed: u64) -> TrainRun {
        let ds = two_moons(60, 0.1, 3).unwrap();
        let net = MlpNetwork::init(&[2, 8, 2], true, &mut Rng::new(4)).unwrap();
        let attack = AttackConfig::new(Norm::Linf, 0.02, 1);
        let cfg = TrainConfig { epochs: 5, batch_size: 20, seed, baseline, ..Default::default() };
        train(net, &ds, RobustLossKind::At, &trh, &attack, &cfg, &MeasureConfig::default()).unwrap()
    }

    #[test]
    fn runs_are_deterministic() {
        let a = small_run(TrhConfig { lambda: 0.5, ..Default::default() }, Baseline::None, 7);
        let b = small_run(TrhConfig { lambda: 0.5, ..Default::default() }, Baseline::None, 7);
        assert_eq!(a.log, b.log);
        assert_eq!(a.net, b.net);
        assert_eq!(a.log.epochs.len(), 5);
        assert_eq!(a.log.epochs[4].iteration, 15);
    }

    #[test]
    fn baselines_train() {
        let swa = small_run(TrhConfig::default(), Baseline::Swa { alpha: 0.9 }, 1);
        let awp = small_run(TrhConfig::default(), Baseline::Awp { delta_awp: 0.01 }, 1);
        assert!(swa.divergence.is_none() && awp.divergence.is_none());
    }

    #[test]
    fn divergence_is_reported() {
        let ds = two_moons(20, 0.1, 3).unwrap();
        let net = MlpNetwork::init(&[2, 8, 2], true, &mut Rng::new(4)).unwrap();
        let attack = AttackConfig::new(Norm::Linf, 0.0, 1);
        let cfg = TrainConfig { epochs: 50, base_lr: 1e6, momentum: 0.0, ..Default::default() };
        let run = train(net, &ds, RobustLossKind::At, &TrhConfig::default(), &attack, &cfg, &MeasureConfig::default()).unwrap();
        assert!(matches!(run.divergence, Some(Error::Divergence { .. })));
        assert!(run.net.flatten().iter().all(|v| v.is_finite()));
    }
}
