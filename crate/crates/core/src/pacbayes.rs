//! Linear-form PAC-Bayes machinery for Gaussian posteriors around the
//! trained weights: KL to an isotropic prior, Monte-Carlo expected loss,
//! the closed-form optimal posterior variances, and the second-order
//! surrogate that the regularized objective descends.

use crate::attacks::{pgd_batch, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hessian_oracle::Estimate;
use crate::losses::RobustLossKind;
use crate::network::MlpNetwork;
use crate::numerics::{norm_sq, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub enum PosteriorVariance {
    Spherical { sigma_q_sq: f64 },
    Diagonal { sigma_sq: Vec<f64> },
}

/// Product of univariate Gaussians centred on a flat weight vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub variance: PosteriorVariance,
}

impl GaussianPosterior {
    pub fn spherical(mean: Vec<f64>, sigma_q_sq: f64) -> Result<Self> {
        let post = GaussianPosterior { mean, variance: PosteriorVariance::Spherical { sigma_q_sq } };
        post.validate()?;
        Ok(post)
    }

    pub fn diagonal(mean: Vec<f64>, sigma_sq: Vec<f64>) -> Result<Self> {
        let post = GaussianPosterior { mean, variance: PosteriorVariance::Diagonal { sigma_sq } };
        post.validate()?;
        Ok(post)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.variance {
            PosteriorVariance::Spherical { sigma_q_sq } if !(*sigma_q_sq > 0.0) => {
                Err(Error::InvalidArgument("posterior variance must be > 0".into()))
            }
            PosteriorVariance::Diagonal { sigma_sq } => {
                if sigma_sq.len() != self.mean.len() {
                    return Err(Error::Dimension { expected: self.mean.len(), actual: sigma_sq.len(), context: "posterior variances" });
                }
                if sigma_sq.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::InvalidArgument("posterior variances must be > 0".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance_at(&self, n: usize) -> f64 {
        match &self.variance {
            PosteriorVariance::Spherical { sigma_q_sq } => *sigma_q_sq,
            PosteriorVariance::Diagonal { sigma_sq } => sigma_sq[n],
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.mean.iter().enumerate().map(|(n, m)| m + self.variance_at(n).sqrt() * rng.normal()).collect()
    }
}

/// Prior variance, bound temperature and the remaining bound constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PacBayesConfig {
    pub sigma0_sq: f64,
    pub beta: f64,
    pub tau: f64,
    pub m: usize,
    /// Stands for the `Q`-independent constant of the bound; defaults to 0.
    pub c_const: f64,
}

impl PacBayesConfig {
    pub fn new(sigma0_sq: f64, beta: f64, m: usize) -> Self {
        PacBayesConfig { sigma0_sq, beta, tau: 0.05, m, c_const: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0_sq > 0.0) {
            return Err(Error::InvalidArgument("sigma0_sq must be > 0".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidArgument("beta must be > 0".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidArgument("tau must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Weight-decay coefficient `1 / (2βσ0²)`.
    pub fn gamma(&self) -> f64 {
        1.0 / (2.0 * self.beta * self.sigma0_sq)
    }

    /// TrH coefficient `σ0² / 2`.
    pub fn lambda(&self) -> f64 {
        self.sigma0_sq / 2.0
    }

    /// Inverse map from training coefficients; both must be positive.
    pub fn from_coefficients(lambda: f64, gamma: f64, m: usize) -> Result<Self> {
        if !(lambda > 0.0 && gamma > 0.0) {
            return Err(Error::InvalidArgument("lambda and gamma must be > 0".into()));
        }
        let sigma0_sq = 2.0 * lambda;
        Ok(PacBayesConfig::new(sigma0_sq, 1.0 / (2.0 * gamma * sigma0_sq), m))
    }

    /// Checks that training coefficients agree with this configuration.
    pub fn check_coefficients(&self, lambda: f64, gamma: f64) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        if !close(lambda, self.lambda()) || !close(gamma, self.gamma()) {
            return Err(Error::InvalidArgument(format!(
                "lambda={lambda}, gamma={gamma} disagree with sigma0_sq={}, beta={} (expected {}, {})",
                self.sigma0_sq,
                self.beta,
                self.lambda(),
                self.gamma()
            )));
        }
        Ok(())
    }
}

/// `KL(Q ‖ N(0, σ0² I))`.
pub fn gaussian_kl(post: &GaussianPosterior, sigma0_sq: f64) -> f64 {
    let n = post.dim();
    let mut sum = 0.0;
    for i in 0..n {
        let ratio = post.variance_at(i) / sigma0_sq;
        sum += ratio - 1.0 - ratio.ln();
    }
    0.5 * (sum + norm_sq(&post.mean) / sigma0_sq)
}

/// Shared variance minimizing `½σ²·trace + KL/β` over spherical posteriors.
pub fn optimal_sigma_spherical(trace: f64, sigma0_sq: f64, beta: f64, n_params: usize) -> Result<f64> {
    let denom = 1.0 + sigma0_sq * beta * trace / n_params as f64;
    if !(denom > 0.0) {
        return Err(Error::OutOfRegime { indices: vec![0] });
    }
    Ok(sigma0_sq / denom)
}

/// Per-weight variances minimizing `½Σσ_n²·H_nn + KL/β`.
pub fn optimal_sigma_diag(hessian_diag: &[f64], sigma0_sq: f64, beta: f64) -> Result<Vec<f64>> {
    let denoms: Vec<f64> = hessian_diag.iter().map(|h| 1.0 + sigma0_sq * beta * h).collect();
    let bad: Vec<usize> = denoms.iter().enumerate().filter(|(_, d)| !(**d > 0.0)).map(|(i, _)| i).collect();
    if !bad.is_empty() {
        return Err(Error::OutOfRegime { indices: bad });
    }
    Ok(denoms.iter().map(|d| sigma0_sq / d).collect())
}

/// Second-order objective `½Σσ_n²·H_nn + KL(Q‖P)/β` for a posterior around
/// `mean`.
pub fn second_order_objective(post: &GaussianPosterior, hessian_diag: &[f64], sigma0_sq: f64, beta: f64) -> f64 {
    let curv: f64 = hessian_diag.iter().enumerate().map(|(n, h)| post.variance_at(n) * h).sum();
    0.5 * curv + gaussian_kl(post, sigma0_sq) / beta
}

/// Monte-Carlo mean of `f` over weight draws from `post`.
pub fn expected_value_mc(post: &GaussianPosterior, samples: usize, rng: &mut Rng, mut f: impl FnMut(&[f64]) -> f64) -> Estimate {
    assert!(samples >= 1, "need at least one sample");
    let values: Vec<f64> = (0..samples).map(|_| f(&post.sample(rng))).collect();
    Estimate::from_samples(&values)
}

/// Mean robust loss on `ds` with adversarial inputs recomputed for `net`.
pub fn robust_empirical_loss(net: &MlpNetwork, ds: &Dataset, kind: RobustLossKind, attack: &AttackConfig, rng: &mut Rng) -> f64 {
    let x_adv = pgd_batch(net, &ds.inputs, &ds.labels, attack, rng);
    empirical_loss_at(net, &ds.inputs, &x_adv, &ds.labels, kind)
}

/// Mean robust loss with the adversarial inputs given.
pub fn empirical_loss_at(net: &MlpNetwork, x: &Matrix, x_adv: &Matrix, labels: &[usize], kind: RobustLossKind) -> f64 {
    let clean = net.logits_batch(x);
    let adv = net.logits_batch(x_adv);
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| kind.loss(clean.row(i), adv.row(i), y)).sum();
    total / labels.len() as f64
}

/// `E_{θ~Q} R̂(θ)`, attacking each sampled network afresh.
pub fn expected_loss_mc(
    net: &MlpNetwork,
    ds: &Dataset,
    kind: RobustLossKind,
    attack: &AttackConfig,
    post: &GaussianPosterior,
    samples: usize,
    rng: &mut Rng,
) -> Result<Estimate> {
    if post.dim() != net.param_count() {
        return Err(Error::Dimension { expected: net.param_count(), actual: post.dim(), context: "posterior mean" });
    }
    let mut attack_rng = rng.fork(1);
    let mut failure = None;
    let est = expected_value_mc(post, samples, rng, |theta| match net.unflatten(theta) {
        Ok(sampled) => robust_empirical_loss(&sampled, ds, kind, attack, &mut attack_rng),
        Err(e) => {
            failure = Some(e);
            f64::NAN
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(est),
    }
}

/// `R̂(θ) + ‖θ‖²/(2βσ0²) + (σ0²/2)·trh_value + c`, with the adversarial
/// inputs given.
pub fn bound_surrogate(
    net: &MlpNetwork,
    x: &Matrix,
    x_adv: &Matrix,
    labels: &[usize],
    kind: RobustLossKind,
    cfg: &PacBayesConfig,
    trh_value: f64,
) -> f64 {
    empirical_loss_at(net, x, x_adv, labels, kind) + cfg.gamma() * norm_sq(&net.flatten()) + cfg.lambda() * trh_value + cfg.c_const
}
