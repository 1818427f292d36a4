//! Data generators for the two simulation designs.
//!
//! Both designs are null: the outcome is drawn before the exposure and never
//! reads it, so the true exposure effect is exactly zero.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::{ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::lasso::expit;
use crate::rng;

/// Sparse high-dimensional binary design: a block of true confounders
/// followed by spurious covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Setup1Config {
    pub n: usize,
    pub n_confounders: usize,
    pub n_spurious: usize,
    /// Coefficients are drawn from `Uniform(0, coef_max)`.
    pub coef_max: f64,
    pub cov_prevalence: f64,
    pub target_exposure_prev: f64,
    pub target_outcome_incidence: f64,
    pub seed: u64,
}

impl Default for Setup1Config {
    fn default() -> Self {
        Self {
            n: 5000,
            n_confounders: 100,
            n_spurious: 900,
            coef_max: 0.693,
            cov_prevalence: 0.2,
            target_exposure_prev: 0.30,
            target_outcome_incidence: 0.05,
            seed: 0,
        }
    }
}

impl Setup1Config {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            ..Self::default()
        }
    }
}

/// Low-dimensional design with nonlinear exposure model and continuous outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Setup2Config {
    pub n: usize,
    pub seed: u64,
    /// Variance (not standard deviation) of the Gaussian outcome noise.
    pub noise_variance: f64,
}

impl Default for Setup2Config {
    fn default() -> Self {
        Self {
            n: 1000,
            seed: 0,
            noise_variance: 0.1,
        }
    }
}

impl Setup2Config {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub true_ps: Vec<f64>,
    pub true_effect: f64,
    /// Exposure model `[beta_0, beta_1, ..]` (Setup 1); empty for Setup 2.
    pub beta: Vec<f64>,
    /// Outcome model `[alpha_0, alpha_1, ..]` (Setup 1); empty for Setup 2.
    pub alpha: Vec<f64>,
    pub outcome_formula: Option<&'static str>,
}

/// `E[X^2]` for `X ~ Uniform(-2, 2)`.
pub const UNIF2_SECOND_MOMENT: f64 = 4.0 / 3.0;

pub const SETUP2_EXPOSURE_FORMULA: &str =
    "expit(X2^2 - exp(0.5*X1) - X3 + X4 - exp(0.5*X5) + X6 + X7)";
pub const SETUP2_OUTCOME_FORMULA: &str =
    "-2*X2^2 + 2*X1 + 2*E(X2^2) + X2 + X1*X2 + X3 + X4 + 2*X5^2 - 2*E(X5^2) + eps";

/// Intercept `b` with `mean_i expit(b + lp_i) = target_mean`.
pub fn calibrate_intercept(linear_predictor: &[f64], target_mean: f64) -> Result<f64> {
    if !(target_mean > 0.0 && target_mean < 1.0) {
        return Err(Error::invalid(format!(
            "target mean must lie in (0, 1), got {target_mean}"
        )));
    }
    if linear_predictor.is_empty() || linear_predictor.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("linear predictor must be non-empty and finite"));
    }
    let n = linear_predictor.len() as f64;
    Ok(solve_logistic_shift(linear_predictor, target_mean * n))
}

/// Root of the increasing map `c -> sum_i expit(c + theta_i) - target_sum`.
/// Requires `0 < target_sum < theta.len()` and finite `theta`.
///
/// The bracket starts one unit either side of a moment guess and doubles
/// until the sign changes; bisection then runs until the midpoint no longer
/// moves, so the root is located to the last bit.
pub(crate) fn solve_logistic_shift(theta: &[f64], target_sum: f64) -> f64 {
    let n = theta.len() as f64;
    let f = |c: f64| theta.iter().map(|&t| expit(c + t)).sum::<f64>() - target_sum;
    let mean_theta = theta.iter().sum::<f64>() / n;
    let guess = (target_sum / (n - target_sum)).ln() - mean_theta;
    let mut width = 1.0;
    let (mut lo, mut hi) = (guess - width, guess + width);
    while f(lo) > 0.0 {
        width *= 2.0;
        lo = guess - width;
    }
    while f(hi) < 0.0 {
        width *= 2.0;
        hi = guess + width;
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = f(mid);
        if v == 0.0 {
            return mid;
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if f(hi).abs() < f(lo).abs() {
        hi
    } else {
        lo
    }
}

fn bernoulli_column(rng: &mut impl Rng, n: usize, p: f64) -> Vec<f64> {
    let dist = Bernoulli::new(p).expect("probability in [0, 1]");
    (0..n).map(|_| f64::from(u8::from(dist.sample(rng)))).collect()
}

fn draw_by_prob(rng: &mut impl Rng, probs: &[f64]) -> Vec<f64> {
    probs
        .iter()
        .map(|&p| f64::from(u8::from(rng.random::<f64>() < p)))
        .collect()
}

pub fn generate_setup1(cfg: &Setup1Config) -> Result<(Dataset, GroundTruth)> {
    if cfg.n < 100 {
        return Err(Error::invalid(format!("setup 1 needs n >= 100, got {}", cfg.n)));
    }
    if !(cfg.cov_prevalence > 0.0 && cfg.cov_prevalence < 1.0) {
        return Err(Error::invalid("covariate prevalence must lie in (0, 1)"));
    }
    if !(cfg.coef_max >= 0.0) {
        return Err(Error::invalid("coef_max must be >= 0"));
    }
    let n = cfg.n;
    let d = cfg.n_confounders + cfg.n_spurious;

    let mut cov_rng = rng::stream(cfg.seed, rng::STREAM_COVARIATES);
    let x: Vec<Vec<f64>> = (0..d)
        .map(|_| bernoulli_column(&mut cov_rng, n, cfg.cov_prevalence))
        .collect();

    let coef_dist = Uniform::new_inclusive(0.0, cfg.coef_max).expect("valid coefficient range");
    let mut beta_rng = rng::stream(cfg.seed, rng::STREAM_EXPOSURE_COEFS);
    let beta: Vec<f64> = (0..cfg.n_confounders)
        .map(|_| coef_dist.sample(&mut beta_rng))
        .collect();
    let mut alpha_rng = rng::stream(cfg.seed, rng::STREAM_OUTCOME_COEFS);
    let alpha: Vec<f64> = (0..cfg.n_confounders)
        .map(|_| coef_dist.sample(&mut alpha_rng))
        .collect();

    let linear = |coefs: &[f64]| {
        let mut lp = vec![0.0; n];
        for (c, col) in coefs.iter().zip(&x) {
            for (v, xi) in lp.iter_mut().zip(col) {
                *v += c * xi;
            }
        }
        lp
    };
    let lp_e = linear(&beta);
    let lp_y = linear(&alpha);
    let beta0 = calibrate_intercept(&lp_e, cfg.target_exposure_prev)?;
    let alpha0 = calibrate_intercept(&lp_y, cfg.target_outcome_incidence)?;
    let true_ps: Vec<f64> = lp_e.iter().map(|v| expit(beta0 + v)).collect();
    let outcome_prob: Vec<f64> = lp_y.iter().map(|v| expit(alpha0 + v)).collect();

    // Outcome first: the exposure draw cannot influence it.
    let y = draw_by_prob(&mut rng::stream(cfg.seed, rng::STREAM_OUTCOME), &outcome_prob);
    let a: Vec<u8> = draw_by_prob(&mut rng::stream(cfg.seed, rng::STREAM_EXPOSURE), &true_ps)
        .into_iter()
        .map(|v| v as u8)
        .collect();

    let names = (1..=d).map(|j| format!("X{j}")).collect();
    let ds = Dataset::new(y, a, x, vec![ColumnKind::Binary; d], names)?;
    let mut beta_full = vec![beta0];
    beta_full.extend(beta);
    let mut alpha_full = vec![alpha0];
    alpha_full.extend(alpha);
    Ok((
        ds,
        GroundTruth {
            true_ps,
            true_effect: 0.0,
            beta: beta_full,
            alpha: alpha_full,
            outcome_formula: None,
        },
    ))
}

/// Deterministic part of the Setup 2 outcome for covariates `x[0..5]`.
pub fn setup2_outcome_mean(x: &[f64]) -> f64 {
    let (x1, x2, x3, x4, x5) = (x[0], x[1], x[2], x[3], x[4]);
    -2.0 * x2 * x2 + 2.0 * x1 + 2.0 * UNIF2_SECOND_MOMENT + x2 + x1 * x2 + x3 + x4
        + 2.0 * x5 * x5
        - 2.0 * UNIF2_SECOND_MOMENT
}

/// Setup 2 propensity score for covariates `x[0..7]`.
pub fn setup2_propensity(x: &[f64]) -> f64 {
    let (x1, x2, x3, x4, x5, x6, x7) = (x[0], x[1], x[2], x[3], x[4], x[5], x[6]);
    expit(x2 * x2 - (0.5 * x1).exp() - x3 + x4 - (0.5 * x5).exp() + x6 + x7)
}

pub fn generate_setup2(cfg: &Setup2Config) -> Result<(Dataset, GroundTruth)> {
    if cfg.n < 1 {
        return Err(Error::invalid("setup 2 needs n >= 1"));
    }
    if !(cfg.noise_variance >= 0.0) {
        return Err(Error::invalid("noise variance must be >= 0"));
    }
    let n = cfg.n;
    let mut cov_rng = rng::stream(cfg.seed, rng::STREAM_COVARIATES);
    let unif = Uniform::new(-2.0, 2.0).expect("valid range");
    let mut x: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..n).map(|_| unif.sample(&mut cov_rng)).collect())
        .collect();
    for _ in 0..5 {
        x.push(bernoulli_column(&mut cov_rng, n, 0.6));
    }

    let noise = Normal::new(0.0, cfg.noise_variance.sqrt()).expect("finite sd");
    let mut noise_rng = rng::stream(cfg.seed, rng::STREAM_NOISE);
    let mut row = vec![0.0; 10];
    let mut y = Vec::with_capacity(n);
    let mut true_ps = Vec::with_capacity(n);
    for i in 0..n {
        for (slot, col) in row.iter_mut().zip(&x) {
            *slot = col[i];
        }
        y.push(setup2_outcome_mean(&row) + noise.sample(&mut noise_rng));
        true_ps.push(setup2_propensity(&row));
    }
    let a: Vec<u8> = draw_by_prob(&mut rng::stream(cfg.seed, rng::STREAM_EXPOSURE), &true_ps)
        .into_iter()
        .map(|v| v as u8)
        .collect();

    let mut kinds = vec![ColumnKind::Continuous; 5];
    kinds.extend([ColumnKind::Binary; 5]);
    let names = (1..=10).map(|j| format!("X{j}")).collect();
    let ds = Dataset::new(y, a, x, kinds, names)?;
    Ok((
        ds,
        GroundTruth {
            true_ps,
            true_effect: 0.0,
            beta: Vec::new(),
            alpha: Vec::new(),
            outcome_formula: Some(SETUP2_OUTCOME_FORMULA),
        },
    ))
}
