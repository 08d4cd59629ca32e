//! Experiment configuration: a flat `key = value` file with `#` comments
//! and dotted keys such as `attack.delta` or `train.base_lr`.

use std::path::{Path, PathBuf};

use crate::attacks::{AttackConfig, Norm};
use crate::data::{load_csv, normalize_center, two_moons, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::losses::{InnerLoss, RobustLossKind};
use crate::network::MlpNetwork;
use crate::numerics::Rng;
use crate::pacbayes::PacBayesConfig;
use crate::trainer::{Baseline, LambdaSchedule, LrDecay, MeasureConfig, TrainConfig, TrhConfig};
use crate::trh::{TradesCase, TrhScope};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    TwoMoons { n: usize, noise: f64, seed: u64 },
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub normalize: bool,
    pub hidden: Vec<usize>,
    pub hidden_bias: bool,
    pub kind: RobustLossKind,
    pub attack: AttackConfig,
    /// Attack used by `eval`; defaults to the training attack.
    pub eval_steps: Option<usize>,
    pub eval_restarts: usize,
    pub eval_seed: u64,
    pub trh: TrhConfig,
    pub train: TrainConfig,
    pub pacbayes: Option<PacBayesConfig>,
    pub measure: MeasureConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::TwoMoons { n: 500, noise: 0.1, seed: 0 },
            normalize: false,
            hidden: vec![100, 100],
            hidden_bias: true,
            kind: RobustLossKind::At,
            attack: AttackConfig::new(Norm::Linf, 0.02, 1),
            eval_steps: None,
            eval_restarts: 1,
            eval_seed: 0,
            trh: TrhConfig::default(),
            train: TrainConfig::default(),
            pacbayes: None,
            measure: MeasureConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Raw settings before cross-field resolution.
#[derive(Default)]
struct Pending {
    data_source: Option<(String, usize)>,
    n: Option<usize>,
    noise: Option<f64>,
    data_seed: Option<u64>,
    path: Option<PathBuf>,
    kind: Option<(String, usize)>,
    penalty: Option<(String, f64, usize)>,
    step_size: Option<f64>,
    inner: Option<(String, usize)>,
    clamp_lo: Option<f64>,
    clamp_hi: Option<f64>,
    lambda: Option<(f64, usize)>,
    gamma: Option<(f64, usize)>,
    sigma0_sq: Option<f64>,
    beta: Option<f64>,
    tau: Option<f64>,
    c_const: Option<f64>,
    lr_decay: Option<(String, usize)>,
    milestones: Vec<usize>,
    lr_factor: f64,
    baseline: Option<(String, usize)>,
    swa_alpha: f64,
    awp_delta: f64,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: Option<usize>) -> Result<T> {
    value.parse().map_err(|_| Error::config(key, line, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str, line: Option<usize>) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, line, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, line: Option<usize>) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim(), line)).collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `overrides` (key, value) as if appended.
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut pending = Pending { lr_factor: 0.1, swa_alpha: 0.995, awp_delta: 0.005, ..Default::default() };
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::config(content, Some(line), "expected `key = value`"));
            };
            cfg.set(&mut pending, key.trim(), value.trim(), Some(line))?;
        }
        for (key, value) in overrides {
            cfg.set(&mut pending, key, value, None)?;
        }
        cfg.resolve(pending)?;
        Ok(cfg)
    }

    fn set(&mut self, p: &mut Pending, key: &str, value: &str, line: Option<usize>) -> Result<()> {
        let num = |v: &str| parse_value::<f64>(key, v, line);
        let int = |v: &str| parse_value::<usize>(key, v, line);
        let int64 = |v: &str| parse_value::<u64>(key, v, line);
        let boolean = |v: &str| parse_bool(key, v, line);
        match key {
            "data.source" => p.data_source = Some((value.to_string(), line.unwrap_or(0))),
            "data.n" => p.n = Some(int(value)?),
            "data.noise" => p.noise = Some(num(value)?),
            "data.seed" => p.data_seed = Some(int64(value)?),
            "data.path" => p.path = Some(PathBuf::from(value)),
            "data.normalize" => self.normalize = boolean(value)?,
            "model.hidden" => self.hidden = parse_list(key, value, line)?,
            "model.hidden_bias" => self.hidden_bias = boolean(value)?,
            "loss.kind" => p.kind = Some((value.to_string(), line.unwrap_or(0))),
            "loss.lambda_t" | "loss.lambda_a" | "loss.lambda_m" => {
                p.penalty = Some((key.to_string(), num(value)?, line.unwrap_or(0)))
            }
            "attack.norm" => {
                self.attack.norm = match value {
                    "linf" => Norm::Linf,
                    "l2" => Norm::L2,
                    _ => return Err(Error::config(key, line, "expected linf or l2")),
                }
            }
            "attack.delta" => self.attack.delta = num(value)?,
            "attack.steps" => self.attack.steps = int(value)?,
            "attack.step_size" => p.step_size = Some(num(value)?),
            "attack.restarts" => self.attack.restarts = int(value)?,
            "attack.random_start" => self.attack.random_start = boolean(value)?,
            "attack.inner" => p.inner = Some((value.to_string(), line.unwrap_or(0))),
            "attack.clamp_lo" => p.clamp_lo = Some(num(value)?),
            "attack.clamp_hi" => p.clamp_hi = Some(num(value)?),
            "eval.steps" => self.eval_steps = Some(int(value)?),
            "eval.restarts" => self.eval_restarts = int(value)?,
            "eval.seed" => self.eval_seed = int64(value)?,
            "trh.lambda" => p.lambda = Some((num(value)?, line.unwrap_or(0))),
            "trh.schedule" => {
                self.trh.schedule = match value {
                    "constant" => LambdaSchedule::Constant,
                    "linear" => LambdaSchedule::Linear,
                    "multistep" => LambdaSchedule::Multistep,
                    _ => return Err(Error::config(key, line, "expected constant, linear or multistep")),
                }
            }
            "trh.case" => {
                self.trh.case = match value {
                    "stop_gradient" => TradesCase::StopGradient,
                    "full" => TradesCase::Full,
                    _ => return Err(Error::config(key, line, "expected stop_gradient or full")),
                }
            }
            "trh.scope" => {
                self.trh.scope = match value {
                    "top" => TrhScope::Top,
                    "full" => TrhScope::Full,
                    _ => return Err(Error::config(key, line, "expected top or full")),
                }
            }
            "train.epochs" => self.train.epochs = int(value)?,
            "train.batch_size" => self.train.batch_size = int(value)?,
            "train.base_lr" => self.train.base_lr = num(value)?,
            "train.momentum" => self.train.momentum = num(value)?,
            "train.warmup_iters" => self.train.warmup_iters = int(value)?,
            "train.lr_decay" => p.lr_decay = Some((value.to_string(), line.unwrap_or(0))),
            "train.milestones" => p.milestones = parse_list(key, value, line)?,
            "train.lr_factor" => p.lr_factor = num(value)?,
            "train.gamma" => p.gamma = Some((num(value)?, line.unwrap_or(0))),
            "train.seed" => self.train.seed = int64(value)?,
            "train.baseline" => p.baseline = Some((value.to_string(), line.unwrap_or(0))),
            "train.swa_alpha" => p.swa_alpha = num(value)?,
            "train.awp_delta" => p.awp_delta = num(value)?,
            "pacbayes.sigma0_sq" => p.sigma0_sq = Some(num(value)?),
            "pacbayes.beta" => p.beta = Some(num(value)?),
            "pacbayes.tau" => p.tau = Some(num(value)?),
            "pacbayes.c" => p.c_const = Some(num(value)?),
            "measure.every" => self.measure.every = int(value)?,
            "measure.trace" => self.measure.trace = boolean(value)?,
            "measure.spectrum" => self.measure.spectrum = boolean(value)?,
            "measure.hutchinson" => self.measure.hutchinson = boolean(value)?,
            "measure.probes" => self.measure.probes = int(value)?,
            "measure.probe_seed" => self.measure.probe_seed = int64(value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::config(key, line, "unknown key")),
        }
        Ok(())
    }

    fn resolve(&mut self, p: Pending) -> Result<()> {
        let at = |l: usize| (l > 0).then_some(l);
        self.data = match p.data_source.as_ref().map(|(s, l)| (s.as_str(), *l)) {
            None | Some(("two_moons", _)) => {
                DataSource::TwoMoons { n: p.n.unwrap_or(500), noise: p.noise.unwrap_or(0.1), seed: p.data_seed.unwrap_or(0) }
            }
            Some(("csv", l)) => match p.path {
                Some(path) => DataSource::Csv { path },
                None => return Err(Error::config("data.path", at(l), "csv source needs data.path")),
            },
            Some((other, l)) => return Err(Error::config("data.source", at(l), format!("unknown source `{other}`"))),
        };

        let (kind_name, kind_line) = p.kind.unwrap_or(("at".into(), 0));
        let penalty_key = match kind_name.as_str() {
            "at" => None,
            "trades" => Some("loss.lambda_t"),
            "alp" => Some("loss.lambda_a"),
            "mart" => Some("loss.lambda_m"),
            other => return Err(Error::config("loss.kind", at(kind_line), format!("unknown loss `{other}`"))),
        };
        let penalty = match (&p.penalty, penalty_key) {
            (Some((k, v, _)), Some(expected)) if k == expected => *v,
            (Some((k, _, l)), _) => {
                return Err(Error::config(k.clone(), at(*l), format!("does not apply to loss `{kind_name}`")));
            }
            (None, Some("loss.lambda_a")) => 0.5,
            (None, Some(_)) => 6.0,
            (None, None) => 0.0,
        };
        self.kind = match kind_name.as_str() {
            "at" => RobustLossKind::At,
            "trades" => RobustLossKind::Trades { lambda_t: penalty },
            "alp" => RobustLossKind::Alp { lambda_a: penalty },
            _ => RobustLossKind::Mart { lambda_m: penalty },
        };
        if penalty < 0.0 {
            return Err(Error::config(penalty_key.unwrap_or("loss"), None, "penalty must be >= 0"));
        }

        self.attack.step_size = p.step_size.unwrap_or(2.5 * self.attack.delta / self.attack.steps.max(1) as f64);
        self.attack.inner_loss = match p.inner.as_ref().map(|(s, l)| (s.as_str(), *l)) {
            None | Some(("auto", _)) => self.kind.inner_loss(),
            Some(("ce", _)) => InnerLoss::CrossEntropy,
            Some(("kl", _)) => InnerLoss::Kl,
            Some((other, l)) => return Err(Error::config("attack.inner", at(l), format!("unknown inner loss `{other}`"))),
        };
        self.attack.clamp = match (p.clamp_lo, p.clamp_hi) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            (None, None) => None,
            _ => return Err(Error::config("attack.clamp_lo", None, "set both clamp_lo and clamp_hi")),
        };
        self.attack.validate().map_err(|e| Error::config("attack", None, e.to_string()))?;

        self.train.lr_decay = match p.lr_decay.as_ref().map(|(s, l)| (s.as_str(), *l)) {
            None | Some(("constant", _)) => LrDecay::Constant,
            Some(("cosine", _)) => LrDecay::Cosine,
            Some(("multistep", _)) => LrDecay::Multistep { milestones: p.milestones.clone(), factor: p.lr_factor },
            Some((other, l)) => return Err(Error::config("train.lr_decay", at(l), format!("unknown decay `{other}`"))),
        };
        self.train.baseline = match p.baseline.as_ref().map(|(s, l)| (s.as_str(), *l)) {
            None | Some(("none", _)) => Baseline::None,
            Some(("swa", _)) => Baseline::Swa { alpha: p.swa_alpha },
            Some(("awp", _)) => Baseline::Awp { delta_awp: p.awp_delta },
            Some((other, l)) => return Err(Error::config("train.baseline", at(l), format!("unknown baseline `{other}`"))),
        };

        self.pacbayes = match (p.sigma0_sq, p.beta) {
            (Some(s), Some(b)) => {
                let m = match &self.data {
                    DataSource::TwoMoons { n, .. } => *n,
                    DataSource::Csv { .. } => 0,
                };
                let mut pb = PacBayesConfig::new(s, b, m);
                pb.tau = p.tau.unwrap_or(pb.tau);
                pb.c_const = p.c_const.unwrap_or(0.0);
                pb.validate().map_err(|e| Error::config("pacbayes", None, e.to_string()))?;
                Some(pb)
            }
            (None, None) => None,
            _ => return Err(Error::config("pacbayes.beta", None, "set both pacbayes.sigma0_sq and pacbayes.beta")),
        };
        match (&self.pacbayes, p.lambda, p.gamma) {
            (Some(pb), lambda, gamma) => {
                self.trh.lambda = lambda.map_or(pb.lambda(), |v| v.0);
                self.train.gamma = gamma.map_or(pb.gamma(), |v| v.0);
                if let Err(e) = pb.check_coefficients(self.trh.lambda, self.train.gamma) {
                    let line = lambda.map(|v| v.1).or(gamma.map(|v| v.1)).and_then(at);
                    return Err(Error::config("trh.lambda", line, e.to_string()));
                }
            }
            (None, lambda, gamma) => {
                self.trh.lambda = lambda.map_or(0.0, |v| v.0);
                self.train.gamma = gamma.map_or(0.0, |v| v.0);
            }
        }
        if self.trh.scope == TrhScope::Full && self.kind != RobustLossKind::At {
            return Err(Error::config("trh.scope", None, "full scope is only available with loss.kind = at"));
        }
        if !(self.trh.lambda >= 0.0) {
            return Err(Error::config("trh.lambda", None, "must be >= 0"));
        }
        self.train.validate().map_err(|e| Error::config("train", None, e.to_string()))?;
        if self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", None, "widths must be >= 1"));
        }
        if self.eval_restarts == 0 {
            return Err(Error::config("eval.restarts", None, "must be >= 1"));
        }
        Ok(())
    }

    /// Loads or generates the dataset, applying normalization when enabled.
    /// The attack radius and step are converted to normalized units.
    pub fn dataset(&self) -> Result<(Dataset, Option<Normalization>)> {
        let ds = match &self.data {
            DataSource::TwoMoons { n, noise, seed } => two_moons(*n, *noise, *seed)?,
            DataSource::Csv { path } => load_csv(path)?,
        };
        if self.normalize {
            let (ds, norm) = normalize_center(&ds);
            Ok((ds, Some(norm)))
        } else {
            Ok((ds, None))
        }
    }

    pub fn attack_for(&self, norm: Option<&Normalization>) -> AttackConfig {
        let mut a = self.attack;
        if let Some(n) = norm {
            a.delta = n.scale_radius(a.delta);
            a.step_size = n.scale_radius(a.step_size);
        }
        a
    }

    /// Attack used for evaluation: the training attack with the `eval.*`
    /// overrides.
    pub fn eval_attack_for(&self, norm: Option<&Normalization>) -> AttackConfig {
        let mut a = self.attack_for(norm);
        if let Some(steps) = self.eval_steps {
            a.step_size = a.step_size * a.steps as f64 / steps as f64;
            a.steps = steps;
        }
        a.restarts = self.eval_restarts;
        a
    }

    pub fn layer_sizes(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(classes);
        sizes
    }

    /// Fresh network for this run; initialization draws from its own stream.
    pub fn init_network(&self, ds: &Dataset) -> Result<MlpNetwork> {
        let mut rng = Rng::for_trial(self.train.seed, 0x696e_6974);
        MlpNetwork::init(&self.layer_sizes(ds.dim(), ds.num_classes), self.hidden_bias, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_two_moons_setting() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.hidden, vec![100, 100]);
        assert_eq!(cfg.attack.delta, 0.02);
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.kind, RobustLossKind::At);
    }

    #[test]
    fn parses_sections_and_comments() {
        let text = "# run\nloss.kind = trades\nloss.lambda_t = 6 # trailing comment\ntrh.lambda = 5e-4\nattack.norm = l2\nattack.delta = 0.5\n\ntrain.lr_decay = multistep\ntrain.milestones = 50, 75\ntrain.baseline = swa\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.kind, RobustLossKind::Trades { lambda_t: 6.0 });
        assert_eq!(cfg.attack.inner_loss, InnerLoss::Kl);
        assert_eq!(cfg.attack.norm, Norm::L2);
        assert_eq!(cfg.trh.lambda, 5e-4);
        assert_eq!(cfg.train.lr_decay, LrDecay::Multistep { milestones: vec![50, 75], factor: 0.1 });
        assert_eq!(cfg.train.baseline, Baseline::Swa { alpha: 0.995 });
    }

    #[test]
    fn errors_carry_key_and_line() {
        match ExperimentConfig::parse("train.epochs = 3\nattack.delta = abc\n") {
            Err(Error::Config { key, line, .. }) => assert_eq!((key.as_str(), line), ("attack.delta", Some(2))),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::parse("\n\nbogus.key = 1\n") {
            Err(Error::Config { key, line, .. }) => assert_eq!((key.as_str(), line), ("bogus.key", Some(3))),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::parse("loss.kind = at\nloss.lambda_t = 6\n").is_err());
        assert!(ExperimentConfig::parse("loss.kind = trades\ntrh.scope = full\n").is_err());
        assert!(ExperimentConfig::parse("no equals sign\n").is_err());
    }

    #[test]
    fn pacbayes_coefficients_are_derived_and_checked() {
        let cfg = ExperimentConfig::parse("pacbayes.sigma0_sq = 0.02\npacbayes.beta = 100\n").unwrap();
        assert_eq!(cfg.trh.lambda, 0.01);
        assert_eq!(cfg.train.gamma, 1.0 / 4.0);
        let err = ExperimentConfig::parse("pacbayes.sigma0_sq = 0.02\npacbayes.beta = 100\ntrh.lambda = 0.5\n");
        assert!(matches!(err, Err(Error::Config { line: Some(3), .. })));
    }

    #[test]
    fn overrides_apply_last() {
        let cfg = ExperimentConfig::parse_with_overrides("train.seed = 1\n", &[("train.seed".into(), "9".into())]).unwrap();
        assert_eq!(cfg.train.seed, 9);
    }
}
