//! One propensity-score analysis pipeline: folds, path, tuner, estimate.
//!
//! The path for a given basis is computed once and shared by every tuner and
//! weighting scheme that uses it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::balance::{balance_along_path, BalanceColumns, BalanceCriterion, BalanceReport, TunerChoice};
use crate::dataset::{assign_folds, Dataset};
use crate::error::{Error, Result};
use crate::hal_basis::{expand_basis, BasisSpec};
use crate::lasso::{fit_path_with, lambda_max, make_lambda_grid, LassoPath, SolverOptions};
use crate::weighting::{estimate_effect, unadjusted_difference, WeightScheme, WeightedEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tuner {
    Cv,
    MaxSmd,
    MeanSmd,
}

impl Tuner {
    pub const ALL: [Tuner; 3] = [Tuner::Cv, Tuner::MaxSmd, Tuner::MeanSmd];

    pub fn criterion(self) -> Option<BalanceCriterion> {
        match self {
            Tuner::Cv => None,
            Tuner::MaxSmd => Some(BalanceCriterion::MaxSmd),
            Tuner::MeanSmd => Some(BalanceCriterion::MeanSmd),
        }
    }
}

impl fmt::Display for Tuner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tuner::Cv => "cv",
            Tuner::MaxSmd => "max_smd",
            Tuner::MeanSmd => "mean_smd",
        })
    }
}

impl FromStr for Tuner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cv" => Ok(Tuner::Cv),
            "max_smd" => Ok(Tuner::MaxSmd),
            "mean_smd" => Ok(Tuner::MeanSmd),
            other => Err(Error::invalid(format!("unknown tuner `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Raw,
    Hal,
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::Raw => "raw",
            Basis::Hal => "hal",
        })
    }
}

impl FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Basis::Raw),
            "hal" => Ok(Basis::Hal),
            other => Err(Error::invalid(format!("unknown basis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AnalysisSpec {
    pub tuner: Tuner,
    pub scheme: WeightScheme,
    pub basis: Basis,
}

impl AnalysisSpec {
    pub fn new(tuner: Tuner, scheme: WeightScheme, basis: Basis) -> Self {
        Self {
            tuner,
            scheme,
            basis,
        }
    }

    /// Every tuner and scheme on one basis, tuner-major.
    pub fn grid(tuners: &[Tuner], schemes: &[WeightScheme], basis: Basis) -> Vec<Self> {
        tuners
            .iter()
            .flat_map(|&t| schemes.iter().map(move |&s| Self::new(t, s, basis)))
            .collect()
    }

    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.tuner, self.scheme, self.basis)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_folds: usize,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    pub hal: BasisSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_folds: 10,
            n_lambda: 100,
            lambda_ratio: 1e-4,
            hal: BasisSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisResult {
    pub spec: AnalysisSpec,
    pub lambda_index: usize,
    pub lambda: f64,
    pub lambda_cv_index: usize,
    pub estimate: WeightedEstimate,
}

/// The fitted path for one basis together with the dataset it was fit on.
#[derive(Debug, Clone)]
pub struct FittedBasis {
    pub basis: Basis,
    /// `ds` itself for the raw basis, the indicator columns for HAL.
    pub design: Dataset,
    pub path: LassoPath,
}

#[derive(Debug)]
pub struct PipelineRun {
    pub unadjusted: WeightedEstimate,
    pub fitted: Vec<FittedBasis>,
    /// One entry per requested spec, in request order.
    pub results: Vec<(AnalysisSpec, Result<AnalysisResult>)>,
    /// Balance tuner choices keyed by (basis, scheme, criterion).
    pub choices: Vec<(Basis, WeightScheme, TunerChoice)>,
}

impl PipelineRun {
    pub fn fitted(&self, basis: Basis) -> Option<&FittedBasis> {
        self.fitted.iter().find(|f| f.basis == basis)
    }

    pub fn choice(
        &self,
        basis: Basis,
        scheme: WeightScheme,
        criterion: BalanceCriterion,
    ) -> Option<&TunerChoice> {
        self.choices
            .iter()
            .find(|(b, s, c)| *b == basis && *s == scheme && c.criterion == criterion)
            .map(|(_, _, c)| c)
    }
}

/// Design dataset for a basis: the raw covariates or their HAL expansion.
pub fn design_for(ds: &Dataset, basis: Basis, cfg: &PipelineConfig) -> Result<Dataset> {
    match basis {
        Basis::Raw => Ok(ds.clone()),
        Basis::Hal => expand_basis(ds, &cfg.hal)?.to_dataset(ds),
    }
}

/// Cross-validated path on a design dataset with folds drawn from `fold_seed`.
pub fn fit_design_path(design: &Dataset, cfg: &PipelineConfig, fold_seed: u64) -> Result<LassoPath> {
    let folds = assign_folds(design, cfg.n_folds, fold_seed)?;
    let lmax = lambda_max(design)?;
    let grid = if lmax > 0.0 {
        make_lambda_grid(lmax, cfg.n_lambda, cfg.lambda_ratio)?
    } else {
        // No covariate is associated with exposure: only the null model exists.
        vec![0.0]
    };
    fit_path_with(design, &grid, &folds, &SolverOptions::default())
}

/// Runs every requested analysis on `ds`, fitting each basis's path once.
pub fn run_analyses(
    ds: &Dataset,
    specs: &[AnalysisSpec],
    cfg: &PipelineConfig,
    fold_seed: u64,
) -> Result<PipelineRun> {
    ds.require_both_classes()?;
    let unadjusted = unadjusted_difference(ds.y(), ds.a())?;
    let mut bases: Vec<Basis> = specs.iter().map(|s| s.basis).collect();
    bases.sort();
    bases.dedup();

    let mut fitted = Vec::new();
    let mut choices = Vec::new();
    let mut results = Vec::with_capacity(specs.len());
    for basis in bases {
        let design = design_for(ds, basis, cfg)?;
        let path = fit_design_path(&design, cfg, fold_seed)?;
        log::debug!("{basis} path fingerprint {:016x}", path.fingerprint());
        let cols = BalanceColumns::covariates(&design)?;

        let mut schemes: Vec<WeightScheme> = specs
            .iter()
            .filter(|s| s.basis == basis && s.tuner != Tuner::Cv)
            .map(|s| s.scheme)
            .collect();
        schemes.sort();
        schemes.dedup();
        for scheme in schemes {
            let reports: Vec<Option<BalanceReport>> =
                balance_along_path(&path, &design, scheme, &cols)?;
            for criterion in [BalanceCriterion::MaxSmd, BalanceCriterion::MeanSmd] {
                if specs
                    .iter()
                    .any(|s| s.basis == basis && s.scheme == scheme && s.tuner.criterion() == Some(criterion))
                {
                    choices.push((basis, scheme, TunerChoice::from_reports(criterion, &reports)?));
                }
            }
        }
        fitted.push(FittedBasis {
            basis,
            design,
            path,
        });
    }

    for &spec in specs {
        let fb = fitted.iter().find(|f| f.basis == spec.basis).expect("basis fitted");
        let index = match spec.tuner.criterion() {
            None => Ok(fb.path.lambda_cv_index),
            Some(criterion) => choices
                .iter()
                .find(|(b, s, c)| *b == spec.basis && *s == spec.scheme && c.criterion == criterion)
                .map(|(_, _, c)| c.chosen_index)
                .ok_or_else(|| Error::invalid("balance choice missing")),
        };
        let result = index.and_then(|l| {
            let estimate = estimate_effect(&fb.path, l, &fb.design, spec.scheme)?;
            Ok(AnalysisResult {
                spec,
                lambda_index: l,
                lambda: fb.path.lambdas[l],
                lambda_cv_index: fb.path.lambda_cv_index,
                estimate,
            })
        });
        results.push((spec, result));
    }
    Ok(PipelineRun {
        unadjusted,
        fitted,
        results,
        choices,
    })
}
