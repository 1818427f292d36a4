//! Synthetic negative-control exposure cohorts.
//!
//! A reference propensity model fit to the whole cohort supplies linear
//! predictors `theta`. Among the unexposed, a synthetic exposure `Z` is drawn
//! with `logit P(Z = 1) = c + theta`, so its odds are proportional to the
//! estimated exposure odds, and `c` fixes the expected number of synthetic
//! exposed. Bootstrap samples of the unexposed (of the original cohort size)
//! get a fresh `Z` each. Since `Z` cannot affect the observed outcome, any
//! effect an analysis estimates in such a cohort is bias.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{run_analyses, AnalysisSpec, PipelineConfig};
use crate::dataset::{Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::lasso::{expit, fit_path_with, lambda_max, make_lambda_grid, LassoPath, SolverOptions};
use crate::rng::{derive_seed, STREAM_FOLDS};
use crate::simulation::solve_logistic_shift;
use crate::weighting::{compute_weights, unadjusted_difference, weighted_mean_difference, WeightScheme};

/// How the expected number of synthetic exposed is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSumFormula {
    /// Synthetic prevalence equals the observed exposed fraction:
    /// `sum pi = n_u * (n - n_u) / n`.
    #[default]
    Text,
    /// `sum pi = (n_u / n) * n_u`.
    Printed,
}

impl TargetSumFormula {
    pub fn target_sum(self, n: usize, n_unexposed: usize) -> f64 {
        let (n, nu) = (n as f64, n_unexposed as f64);
        match self {
            TargetSumFormula::Text => nu * (n - nu) / n,
            TargetSumFormula::Printed => nu * nu / n,
        }
    }
}

impl fmt::Display for TargetSumFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetSumFormula::Text => "text",
            TargetSumFormula::Printed => "printed",
        })
    }
}

impl FromStr for TargetSumFormula {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(TargetSumFormula::Text),
            "printed" => Ok(TargetSumFormula::Printed),
            other => Err(Error::invalid(format!(
                "unknown target-sum formula `{other}` (expected text or printed)"
            ))),
        }
    }
}

/// CV-tuned reference propensity model on the full cohort.
#[derive(Debug, Clone)]
pub struct ReferenceFit {
    pub path: LassoPath,
    /// `lambda_cv_index` of the path.
    pub index: usize,
    /// Full-data linear predictor at the chosen penalty.
    pub theta: Vec<f64>,
    /// `expit(theta)`.
    pub ps: Vec<f64>,
}

impl ReferenceFit {
    /// Reference quantities from an already fitted path on `ds`.
    pub fn from_path(path: LassoPath, ds: &Dataset) -> Result<Self> {
        let index = path.lambda_cv_index;
        let theta = path.fits[index].linear_predictor_all(ds)?;
        let ps = theta.iter().map(|&t| expit(t)).collect();
        Ok(Self {
            path,
            index,
            theta,
            ps,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.path.lambdas[self.index]
    }
}

/// Fits the CV-tuned lasso path on `ds` and returns full-data (not
/// out-of-fold) predictions at `lambda_CV`: this model generates data, so
/// accuracy of the fitted scores is what matters.
pub fn fit_reference_ps(
    ds: &Dataset,
    folds: &FoldAssignment,
    cfg: &PipelineConfig,
) -> Result<ReferenceFit> {
    let lmax = lambda_max(ds)?;
    let grid = if lmax > 0.0 {
        make_lambda_grid(lmax, cfg.n_lambda, cfg.lambda_ratio)?
    } else {
        vec![0.0]
    };
    let path = fit_path_with(ds, &grid, folds, &SolverOptions::default())?;
    ReferenceFit::from_path(path, ds)
}

/// Root `c` of `sum_i expit(c + theta_i) = target_sum`.
pub fn calibrate_offset(theta: &[f64], target_sum: f64) -> Result<f64> {
    let nu = theta.len() as f64;
    if theta.is_empty() {
        return Err(Error::invalid("theta is empty"));
    }
    if !(target_sum > 0.0 && target_sum < nu) {
        return Err(Error::invalid(format!(
            "target sum {target_sum} must lie strictly between 0 and {nu}"
        )));
    }
    if let Some(t) = theta.iter().find(|t| !t.is_finite()) {
        return Err(Error::invalid(format!("theta contains non-finite value {t}")));
    }
    Ok(solve_logistic_shift(theta, target_sum))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAssignmentModel {
    /// Reference linear predictor on the unexposed rows.
    pub theta: Vec<f64>,
    pub c: f64,
    /// `expit(c + theta_i)`.
    pub pi: Vec<f64>,
    pub target_sum: f64,
    pub reference_lambda: f64,
}

impl SyntheticAssignmentModel {
    pub fn new(theta: Vec<f64>, target_sum: f64, reference_lambda: f64) -> Result<Self> {
        let c = calibrate_offset(&theta, target_sum)?;
        let pi = theta.iter().map(|&t| expit(c + t)).collect();
        Ok(Self {
            theta,
            c,
            pi,
            target_sum,
            reference_lambda,
        })
    }

    /// Model for the unexposed units of `ds` under the reference fit.
    pub fn for_cohort(
        ds: &Dataset,
        reference: &ReferenceFit,
        formula: TargetSumFormula,
    ) -> Result<Self> {
        let theta: Vec<f64> = (0..ds.n())
            .filter(|&i| ds.a()[i] == 0)
            .map(|i| reference.theta[i])
            .collect();
        if theta.is_empty() {
            return Err(Error::NoUnexposed);
        }
        let target = formula.target_sum(ds.n(), theta.len());
        Self::new(theta, target, reference.lambda())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    /// Bootstrap rows into the unexposed subset.
    pub rows: Vec<usize>,
    pub z: Vec<u8>,
    pub seed: u64,
}

impl SyntheticCohort {
    /// `{Y, Z, X}` with `Z` in the exposure slot.
    pub fn materialize(&self, ds_unexposed: &Dataset) -> Result<Dataset> {
        ds_unexposed.select_rows(&self.rows).with_exposure(self.z.clone())
    }

    /// Assignment probabilities of the sampled units.
    pub fn pi<'a>(&'a self, model: &'a SyntheticAssignmentModel) -> impl Iterator<Item = f64> + 'a {
        self.rows.iter().map(|&r| model.pi[r])
    }
}

/// Draws `k` bootstrap cohorts of size `n_out` from the unexposed subset, each
/// with a fresh synthetic exposure. Cohort `j` depends only on
/// `(master_seed, j)`.
pub fn generate_cohorts(
    n_unexposed: usize,
    model: &SyntheticAssignmentModel,
    k: usize,
    n_out: usize,
    master_seed: u64,
) -> Result<Vec<SyntheticCohort>> {
    if k == 0 || n_out == 0 {
        return Err(Error::invalid("k and n_out must be at least 1"));
    }
    if model.pi.len() != n_unexposed || n_unexposed == 0 {
        return Err(Error::DimensionMismatch {
            expected: n_unexposed,
            got: model.pi.len(),
        });
    }
    Ok((0..k)
        .map(|j| {
            let seed = derive_seed(master_seed, j as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<usize> = (0..n_out).map(|_| rng.random_range(0..n_unexposed)).collect();
            let z = rows
                .iter()
                .map(|&r| u8::from(rng.random::<f64>() < model.pi[r]))
                .collect();
            SyntheticCohort { rows, z, seed }
        })
        .collect())
}

/// One cohort's result for one analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortEstimate {
    pub estimate: f64,
    pub unadjusted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisBias {
    pub spec: AnalysisSpec,
    pub k_ok: usize,
    pub mean_bias: f64,
    /// Mean over cohorts of `100 * estimate / unadjusted`.
    pub mean_percent_bias: f64,
    pub sd_bias: f64,
    /// `None` where this analysis failed on that cohort.
    pub per_cohort: Vec<Option<CohortEstimate>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBiasReport {
    pub analyses: Vec<AnalysisBias>,
    /// Unadjusted synthetic estimate per cohort (`None` for failed cohorts).
    pub unadjusted: Vec<Option<f64>>,
    pub n_cohorts: usize,
    pub n_failed: usize,
    /// More than 5% of cohorts failed entirely.
    pub failure_flag: bool,
}

impl SyntheticBiasReport {
    pub fn get(&self, spec: &AnalysisSpec) -> Option<&AnalysisBias> {
        self.analyses.iter().find(|a| a.spec == *spec)
    }

    pub fn mean_unadjusted(&self) -> f64 {
        mean(self.unadjusted.iter().flatten().copied())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        writeln!(
            out,
            "analysis_label,tuner,scheme,basis,k_ok,mean_bias,mean_percent_bias,sd_bias"
        )
        .map_err(io_err)?;
        for a in &self.analyses {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                a.spec.label(),
                a.spec.tuner,
                a.spec.scheme,
                a.spec.basis,
                a.k_ok,
                a.mean_bias,
                a.mean_percent_bias,
                a.sd_bias
            )
            .map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    pub fn write_cohorts_csv(&self, path: &Path) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        writeln!(out, "cohort,analysis_label,estimate,unadjusted").map_err(io_err)?;
        for a in &self.analyses {
            for (j, c) in a.per_cohort.iter().enumerate() {
                if let Some(c) = c {
                    writeln!(out, "{},{},{},{}", j, a.spec.label(), c.estimate, c.unadjusted)
                        .map_err(io_err)?;
                }
            }
        }
        out.flush().map_err(io_err)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, k) = values.fold((0.0, 0usize), |(s, k), v| (s + v, k + 1));
    if k == 0 {
        f64::NAN
    } else {
        s / k as f64
    }
}

fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Runs every analysis on every cohort and aggregates the synthetic bias.
/// Folds are redrawn per cohort from the cohort seed.
pub fn run_bias_detection(
    cohorts: &[SyntheticCohort],
    ds_unexposed: &Dataset,
    analyses: &[AnalysisSpec],
    cfg: &PipelineConfig,
) -> SyntheticBiasReport {
    let runs: Vec<Option<(f64, Vec<Option<f64>>)>> = cohorts
        .par_iter()
        .enumerate()
        .map(|(j, cohort)| {
            let outcome = cohort.materialize(ds_unexposed).and_then(|ds| {
                run_analyses(&ds, analyses, cfg, derive_seed(cohort.seed, STREAM_FOLDS))
            });
            match outcome {
                Ok(run) => {
                    let ests = run
                        .results
                        .iter()
                        .map(|(spec, r)| match r {
                            Ok(r) => Some(r.estimate.estimate),
                            Err(e) => {
                                log::warn!("synthetic cohort {j}: {} failed: {e}", spec.label());
                                None
                            }
                        })
                        .collect();
                    Some((run.unadjusted.estimate, ests))
                }
                Err(e) => {
                    log::warn!("synthetic cohort {j} failed: {e}");
                    None
                }
            }
        })
        .collect();

    let n_failed = runs.iter().filter(|r| r.is_none()).count();
    let unadjusted: Vec<Option<f64>> = runs.iter().map(|r| r.as_ref().map(|r| r.0)).collect();
    let summaries = analyses
        .iter()
        .enumerate()
        .map(|(a, &spec)| {
            let per_cohort: Vec<Option<CohortEstimate>> = runs
                .iter()
                .map(|r| {
                    r.as_ref().and_then(|(unadj, ests)| {
                        ests[a].map(|estimate| CohortEstimate {
                            estimate,
                            unadjusted: *unadj,
                        })
                    })
                })
                .collect();
            summarize(spec, per_cohort)
        })
        .collect();
    let failure_flag = n_failed * 20 > cohorts.len();
    if failure_flag {
        log::warn!("{n_failed} of {} synthetic cohorts failed", cohorts.len());
    }
    SyntheticBiasReport {
        analyses: summaries,
        unadjusted,
        n_cohorts: cohorts.len(),
        n_failed,
        failure_flag,
    }
}

fn summarize(spec: AnalysisSpec, per_cohort: Vec<Option<CohortEstimate>>) -> AnalysisBias {
    let ok: Vec<CohortEstimate> = per_cohort.iter().flatten().copied().collect();
    let biases: Vec<f64> = ok.iter().map(|c| c.estimate).collect();
    let percent = ok
        .iter()
        .filter(|c| c.unadjusted != 0.0)
        .map(|c| 100.0 * c.estimate / c.unadjusted);
    AnalysisBias {
        spec,
        k_ok: ok.len(),
        mean_bias: mean(biases.iter().copied()),
        mean_percent_bias: mean(percent),
        sd_bias: sample_sd(&biases),
        per_cohort,
    }
}

/// Synthetic estimate per cohort when weighting by the exact assignment
/// probabilities `pi` instead of an estimated propensity score.
pub fn oracle_estimates(
    cohorts: &[SyntheticCohort],
    ds_unexposed: &Dataset,
    model: &SyntheticAssignmentModel,
    scheme: WeightScheme,
) -> Vec<Result<f64>> {
    cohorts
        .iter()
        .map(|c| {
            let pi: Vec<f64> = c.pi(model).collect();
            let w = compute_weights(&pi, &c.z, scheme)?;
            let y: Vec<f64> = c.rows.iter().map(|&r| ds_unexposed.y()[r]).collect();
            Ok(weighted_mean_difference(&y, &c.z, &w)?.estimate)
        })
        .collect()
}

/// Unadjusted synthetic estimate per cohort (no model fitting).
pub fn unadjusted_estimates(cohorts: &[SyntheticCohort], ds_unexposed: &Dataset) -> Vec<Result<f64>> {
    cohorts
        .iter()
        .map(|c| {
            let y: Vec<f64> = c.rows.iter().map(|&r| ds_unexposed.y()[r]).collect();
            Ok(unadjusted_difference(&y, &c.z)?.estimate)
        })
        .collect()
}

/// Exposure-group covariate differences against synthetic-group differences.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateAlignment {
    pub names: Vec<String>,
    /// `mean(X | A = 1) - mean(X | A = 0)` per column.
    pub d_exposure: Vec<f64>,
    /// `mean(X | Z = 1) - mean(X | Z = 0)` per column, averaged over cohorts.
    pub d_synthetic: Vec<f64>,
    /// Least-squares fit of `d_synthetic` on `d_exposure`.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub k: usize,
}

fn group_difference(col: &[f64], rows: Option<&[usize]>, a: &[u8]) -> Option<f64> {
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (t, &g) in a.iter().enumerate() {
        let v = match rows {
            Some(r) => col[r[t]],
            None => col[t],
        };
        if g == 1 {
            s1 += v;
            n1 += 1;
        } else {
            s0 += v;
            n0 += 1;
        }
    }
    (n1 > 0 && n0 > 0).then(|| s1 / n1 as f64 - s0 / n0 as f64)
}

/// Compares covariate differences across exposure groups in `design` with
/// those across synthetic groups, where `design_unexposed` holds the same
/// columns restricted to the unexposed rows the cohorts index into.
pub fn covariate_alignment(
    design: &Dataset,
    design_unexposed: &Dataset,
    cohorts: &[SyntheticCohort],
) -> Result<CovariateAlignment> {
    if design.d() != design_unexposed.d() {
        return Err(Error::DimensionMismatch {
            expected: design.d(),
            got: design_unexposed.d(),
        });
    }
    design.require_both_classes()?;
    let d = design.d();
    let d_exposure: Vec<f64> = (0..d)
        .map(|j| group_difference(design.column(j), None, design.a()).expect("both classes"))
        .collect();
    let usable: Vec<&SyntheticCohort> = cohorts
        .iter()
        .filter(|c| c.z.iter().any(|&z| z == 1) && c.z.iter().any(|&z| z == 0))
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid("no synthetic cohort has both exposure classes"));
    }
    let k = usable.len();
    let d_synthetic: Vec<f64> = (0..d)
        .map(|j| {
            let col = design_unexposed.column(j);
            usable
                .iter()
                .map(|c| group_difference(col, Some(&c.rows), &c.z).expect("both classes"))
                .sum::<f64>()
                / k as f64
        })
        .collect();
    let (slope, intercept, r2) = least_squares(&d_exposure, &d_synthetic);
    Ok(CovariateAlignment {
        names: design.names().to_vec(),
        d_exposure,
        d_synthetic,
        slope,
        intercept,
        r2,
        k,
    })
}

/// Simple regression of `y` on `x`: `(slope, intercept, r2)`.
pub fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return (f64::NAN, my, f64::NAN);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}
