//! Monte Carlo driver: generate replicates, run every analysis plus the
//! synthetic negative-control pass, aggregate and write plot-ready CSVs.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{run_analyses, AnalysisSpec, Basis, PipelineConfig, Tuner};
use crate::balance::{balance_report, BalanceColumns};
use crate::dataset::{subset_unexposed, Dataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, STREAM_FOLDS, STREAM_SYNTHETIC};
use crate::simulation::{generate_setup1, generate_setup2, Setup1Config, Setup2Config};
use crate::synthetic_nc::{
    covariate_alignment, generate_cohorts, oracle_estimates, run_bias_detection, CovariateAlignment,
    ReferenceFit, SyntheticAssignmentModel, SyntheticBiasReport, TargetSumFormula,
};
use crate::weighting::{compute_weights, WeightScheme, WeightedEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setup {
    Setup1,
    Setup2,
}

impl Setup {
    fn tag(self) -> u64 {
        match self {
            Setup::Setup1 => 1,
            Setup::Setup2 => 2,
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setup::Setup1 => "setup1",
            Setup::Setup2 => "setup2",
        })
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "setup1" => Ok(Setup::Setup1),
            "setup2" => Ok(Setup::Setup2),
            other => Err(Error::Config(format!("unknown setup `{other}`"))),
        }
    }
}

fn default_replicates() -> usize {
    100
}

fn default_k() -> usize {
    100
}

fn default_seed() -> u64 {
    20_240_601
}

fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub setup: Setup,
    pub n_list: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub n_replicates: usize,
    #[serde(default = "all_tuners")]
    pub tuners: Vec<Tuner>,
    #[serde(default = "all_schemes")]
    pub schemes: Vec<WeightScheme>,
    /// Defaults to raw for Setup 1; Setup 2 always uses the HAL basis.
    #[serde(default)]
    pub basis: Option<Basis>,
    /// Synthetic cohorts per replicate; 0 disables the synthetic pass.
    #[serde(default = "default_k")]
    pub k_synthetic: usize,
    /// Cohorts drawn on replicate 0 for the covariate-alignment summary;
    /// defaults to `k_synthetic`. Alignment needs no model fits, so it can
    /// afford more cohorts than the bias-detection pass.
    #[serde(default)]
    pub k_alignment: Option<usize>,
    /// Run the synthetic analyses only on the first this-many replicates of
    /// each scenario (all when absent). Covariate alignment always uses
    /// replicate 0.
    #[serde(default)]
    pub synthetic_replicates: Option<usize>,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub target_sum_formula: TargetSumFormula,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// Setup 1 constants; `n` and `seed` are set per replicate.
    #[serde(default)]
    pub setup1: Setup1Config,
    /// Setup 2 constants; `n` and `seed` are set per replicate.
    #[serde(default)]
    pub setup2: Setup2Config,
}

fn all_tuners() -> Vec<Tuner> {
    Tuner::ALL.to_vec()
}

fn all_schemes() -> Vec<WeightScheme> {
    WeightScheme::ALL.to_vec()
}

impl ExperimentConfig {
    pub fn new(setup: Setup, n_list: Vec<usize>) -> Self {
        Self {
            setup,
            n_list,
            n_replicates: default_replicates(),
            tuners: all_tuners(),
            schemes: all_schemes(),
            basis: None,
            k_synthetic: default_k(),
            k_alignment: None,
            synthetic_replicates: None,
            master_seed: default_seed(),
            parallelism: default_parallelism(),
            target_sum_formula: TargetSumFormula::Text,
            pipeline: PipelineConfig::default(),
            setup1: Setup1Config::default(),
            setup2: Setup2Config::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn basis(&self) -> Basis {
        match self.setup {
            Setup::Setup2 => Basis::Hal,
            Setup::Setup1 => self.basis.unwrap_or(Basis::Raw),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_list.is_empty() {
            return bad("n_list must not be empty");
        }
        if self.tuners.is_empty() || self.schemes.is_empty() {
            return bad("tuners and schemes must not be empty");
        }
        if self.n_replicates == 0 {
            return bad("n_replicates must be at least 1");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        if self.setup == Setup::Setup2 && self.basis == Some(Basis::Raw) {
            return bad("setup2 is analysed on the HAL basis; remove `basis = \"raw\"`");
        }
        if self.pipeline.n_folds < 2 || self.pipeline.n_lambda < 2 {
            return bad("pipeline needs n_folds >= 2 and n_lambda >= 2");
        }
        if !(self.pipeline.lambda_ratio > 0.0 && self.pipeline.lambda_ratio < 1.0) {
            return bad("pipeline.lambda_ratio must lie in (0, 1)");
        }
        self.pipeline.hal.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn analyses(&self) -> Vec<AnalysisSpec> {
        AnalysisSpec::grid(&self.tuners, &self.schemes, self.basis())
    }

    pub fn scenario_seed(&self, n: usize) -> u64 {
        derive_seed(derive_seed(self.master_seed, self.setup.tag()), n as u64)
    }

    pub fn k_alignment(&self) -> usize {
        self.k_alignment.unwrap_or(self.k_synthetic)
    }

    fn runs_synthetic(&self, replicate: usize) -> bool {
        self.k_synthetic > 0 && self.synthetic_replicates.is_none_or(|m| replicate < m)
    }
}

/// Simulated dataset for one replicate.
pub fn generate(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<Dataset> {
    match cfg.setup {
        Setup::Setup1 => {
            let c = Setup1Config {
                n,
                seed,
                ..cfg.setup1.clone()
            };
            Ok(generate_setup1(&c)?.0)
        }
        Setup::Setup2 => {
            let c = Setup2Config {
                n,
                seed,
                ..cfg.setup2.clone()
            };
            Ok(generate_setup2(&c)?.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOutcome {
    pub spec: AnalysisSpec,
    pub estimate: WeightedEstimate,
    pub lambda_index: usize,
    pub lambda: f64,
    pub lambda_cv_index: usize,
}

/// Synthetic estimates weighted by the exact assignment probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSummary {
    pub scheme: WeightScheme,
    pub estimates: Vec<f64>,
}

/// Per-covariate SMD before and after weighting for one analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct SmdDump {
    pub label: String,
    pub names: Vec<String>,
    pub unadjusted: Vec<f64>,
    pub weighted: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplicateOutput {
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    pub unadjusted: WeightedEstimate,
    pub analyses: Vec<(AnalysisSpec, std::result::Result<AnalysisOutcome, String>)>,
    pub path_fingerprint: u64,
    pub synthetic: Option<SyntheticBiasReport>,
    pub oracle: Vec<OracleSummary>,
    pub alignment: Option<CovariateAlignment>,
    pub smd: Vec<SmdDump>,
}

/// One replicate: data, every analysis on one shared path, then the
/// synthetic negative-control pass on cohorts drawn from this dataset.
pub fn run_replicate(
    cfg: &ExperimentConfig,
    n: usize,
    replicate: usize,
    seed: u64,
) -> Result<ReplicateOutput> {
    let ds = generate(cfg, n, seed)?;
    let specs = cfg.analyses();
    let run = run_analyses(&ds, &specs, &cfg.pipeline, derive_seed(seed, STREAM_FOLDS))?;
    let basis = cfg.basis();
    let fitted = run.fitted(basis).expect("basis fitted");
    let path_fingerprint = fitted.path.fingerprint();
    log::info!(
        "{} n={n} replicate {replicate}: path {path_fingerprint:016x}, lambda_cv index {}",
        cfg.setup,
        fitted.path.lambda_cv_index
    );

    let analyses = run
        .results
        .iter()
        .map(|(spec, r)| {
            let out = r
                .as_ref()
                .map(|r| AnalysisOutcome {
                    spec: *spec,
                    estimate: r.estimate,
                    lambda_index: r.lambda_index,
                    lambda: r.lambda,
                    lambda_cv_index: r.lambda_cv_index,
                })
                .map_err(|e| e.to_string());
            (*spec, out)
        })
        .collect();

    let mut smd = Vec::new();
    if replicate == 0 {
        let cols = BalanceColumns::covariates(&fitted.design)?;
        let unit = balance_report(&fitted.design, &vec![1.0; n], &cols)?;
        for (spec, r) in &run.results {
            if let Ok(r) = r {
                let w = compute_weights(fitted.path.oof_column(r.lambda_index), ds.a(), spec.scheme)?;
                let rep = balance_report(&fitted.design, &w, &cols)?;
                smd.push(SmdDump {
                    label: spec.label(),
                    names: fitted.design.names().to_vec(),
                    unadjusted: unit.smd.clone(),
                    weighted: rep.smd,
                });
            }
        }
    }

    let mut synthetic = None;
    let mut oracle = Vec::new();
    let mut alignment = None;
    let k_align = if replicate == 0 { cfg.k_alignment() } else { 0 };
    let k_run = if cfg.runs_synthetic(replicate) { cfg.k_synthetic } else { 0 };
    if k_align > 0 || k_run > 0 {
        let reference = ReferenceFit::from_path(fitted.path.clone(), &fitted.design)?;
        let model = SyntheticAssignmentModel::for_cohort(&ds, &reference, cfg.target_sum_formula)?;
        let ds_u = subset_unexposed(&ds)?;
        // Cohort j depends only on (seed, j), so the two sets share a prefix.
        let cohorts = generate_cohorts(
            ds_u.n(),
            &model,
            k_align.max(k_run),
            n,
            derive_seed(seed, STREAM_SYNTHETIC),
        )?;
        if k_align > 0 {
            let unexposed: Vec<usize> = (0..n).filter(|&i| ds.a()[i] == 0).collect();
            let design_u = fitted.design.select_rows(&unexposed);
            alignment = Some(covariate_alignment(&fitted.design, &design_u, &cohorts[..k_align])?);
        }
        if k_run > 0 {
            let cohorts = &cohorts[..k_run];
            for &scheme in &cfg.schemes {
                let estimates = oracle_estimates(cohorts, &ds_u, &model, scheme)
                    .into_iter()
                    .filter_map(|r| r.ok())
                    .collect();
                oracle.push(OracleSummary { scheme, estimates });
            }
            synthetic = Some(run_bias_detection(cohorts, &ds_u, &specs, &cfg.pipeline));
        }
    }

    Ok(ReplicateOutput {
        n,
        replicate,
        seed,
        unadjusted: run.unadjusted,
        analyses,
        path_fingerprint,
        synthetic,
        oracle,
        alignment,
        smd,
    })
}

/// One row of `metrics.csv`. The unadjusted baseline has `tuner` and
/// `scheme` set to `none`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub setup: Setup,
    pub n: usize,
    pub tuner: String,
    pub scheme: String,
    pub basis: Basis,
    pub n_replicates_ok: usize,
    pub bias: f64,
    /// `100 * mean(estimate) / mean(unadjusted estimate)`.
    pub percent_bias: f64,
    pub sd: f64,
    /// Monte Carlo standard error of `bias`.
    pub mc_se: f64,
    pub coverage95: f64,
    /// Fraction of replicates whose chosen penalty is below `lambda_CV`.
    pub frac_below_cv: f64,
    pub mean_synthetic_bias: f64,
    pub mean_synthetic_percent_bias: f64,
    pub n_synthetic: usize,
    /// Set when only one replicate contributed, so `sd` is not estimable.
    pub single_replicate: bool,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Aggregates replicates of one scenario into metrics rows: the unadjusted
/// baseline first, then one row per analysis in configuration order.
pub fn aggregate(cfg: &ExperimentConfig, n: usize, reps: &[ReplicateOutput]) -> Vec<MetricsRow> {
    let basis = cfg.basis();
    let mut rows = Vec::new();
    if reps.is_empty() {
        log::warn!("{} n={n}: no successful replicate, scenario omitted", cfg.setup);
        return rows;
    }
    let unadj: Vec<f64> = reps.iter().map(|r| r.unadjusted.estimate).collect();
    let syn_unadj: Vec<f64> = reps
        .iter()
        .filter_map(|r| r.synthetic.as_ref().map(|s| s.mean_unadjusted()))
        .filter(|v| v.is_finite())
        .collect();
    let cover = |e: &WeightedEstimate| f64::from(u8::from(e.covers(0.0)));
    let sd = sample_sd(&unadj);
    rows.push(MetricsRow {
        setup: cfg.setup,
        n,
        tuner: "none".into(),
        scheme: "none".into(),
        basis,
        n_replicates_ok: reps.len(),
        bias: mean(&unadj),
        percent_bias: 100.0,
        sd,
        mc_se: sd / (reps.len() as f64).sqrt(),
        coverage95: mean(&reps.iter().map(|r| cover(&r.unadjusted)).collect::<Vec<_>>()),
        frac_below_cv: f64::NAN,
        mean_synthetic_bias: mean(&syn_unadj),
        mean_synthetic_percent_bias: if syn_unadj.is_empty() { f64::NAN } else { 100.0 },
        n_synthetic: syn_unadj.len(),
        single_replicate: reps.len() == 1,
    });

    for spec in cfg.analyses() {
        let mut est = Vec::new();
        let mut base = Vec::new();
        let mut covered = Vec::new();
        let mut below = Vec::new();
        let mut syn_bias = Vec::new();
        let mut syn_pct = Vec::new();
        for r in reps {
            let Some((_, Ok(out))) = r.analyses.iter().find(|(s, _)| *s == spec) else {
                continue;
            };
            est.push(out.estimate.estimate);
            base.push(r.unadjusted.estimate);
            covered.push(cover(&out.estimate));
            below.push(f64::from(u8::from(out.lambda_index > out.lambda_cv_index)));
            if let Some(a) = r.synthetic.as_ref().and_then(|s| s.get(&spec)) {
                if a.k_ok > 0 {
                    syn_bias.push(a.mean_bias);
                    if a.mean_percent_bias.is_finite() {
                        syn_pct.push(a.mean_percent_bias);
                    }
                }
            }
        }
        if est.is_empty() {
            log::warn!("{} n={n} {}: no successful replicate", cfg.setup, spec.label());
            continue;
        }
        let sd = sample_sd(&est);
        rows.push(MetricsRow {
            setup: cfg.setup,
            n,
            tuner: spec.tuner.to_string(),
            scheme: spec.scheme.to_string(),
            basis,
            n_replicates_ok: est.len(),
            bias: mean(&est),
            percent_bias: 100.0 * mean(&est) / mean(&base),
            sd,
            mc_se: sd / (est.len() as f64).sqrt(),
            coverage95: mean(&covered),
            frac_below_cv: mean(&below),
            mean_synthetic_bias: mean(&syn_bias),
            mean_synthetic_percent_bias: mean(&syn_pct),
            n_synthetic: syn_bias.len(),
            single_replicate: est.len() == 1,
        });
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSeed {
    pub setup: Setup,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug)]
pub struct ScenarioResult {
    pub n: usize,
    pub seed: u64,
    pub replicates: Vec<ReplicateOutput>,
    /// `(replicate, error)` for replicates that failed outright.
    pub failures: Vec<(usize, String)>,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub scenarios: Vec<ScenarioResult>,
    pub wall_time_s: f64,
}

impl ExperimentResult {
    pub fn metrics(&self) -> impl Iterator<Item = &MetricsRow> {
        self.scenarios.iter().flat_map(|s| &s.metrics)
    }

    pub fn row(&self, n: usize, tuner: &str, scheme: &str) -> Option<&MetricsRow> {
        self.metrics()
            .find(|r| r.n == n && r.tuner == tuner && r.scheme == scheme)
    }
}

/// Runs the whole grid. Replicates are the parallel unit; results are
/// assembled by index so the output does not depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    let mut scenarios = Vec::new();
    for &n in &cfg.n_list {
        let seed = cfg.scenario_seed(n);
        let outcomes: Vec<Result<ReplicateOutput>> = pool.install(|| {
            (0..cfg.n_replicates)
                .into_par_iter()
                .map(|r| run_replicate(cfg, n, r, derive_seed(seed, r as u64)))
                .collect()
        });
        let mut replicates = Vec::new();
        let mut failures = Vec::new();
        for (r, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(out) => replicates.push(out),
                Err(e) => {
                    log::warn!("{} n={n} replicate {r} failed: {e}", cfg.setup);
                    failures.push((r, e.to_string()));
                }
            }
        }
        let metrics = aggregate(cfg, n, &replicates);
        scenarios.push(ScenarioResult {
            n,
            seed,
            replicates,
            failures,
            metrics,
        });
    }
    Ok(ExperimentResult {
        config: cfg.clone(),
        scenarios,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(std::io::BufWriter::new(file))
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[&MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(io_at(path))
}

/// Writes `metrics.csv`, `replicates.csv`, `balance_smd.csv`,
/// `alignment.csv`, `alignment_summary.csv`, `synthetic_oracle.csv` and
/// `run_meta.json` into `out_dir`.
pub fn emit_results(result: &ExperimentResult, out_dir: &Path, config_text: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    let cfg = &result.config;
    let metrics: Vec<&MetricsRow> = result.metrics().collect();
    write_metrics_csv(&out_dir.join("metrics.csv"), &metrics)?;

    let p = out_dir.join("replicates.csv");
    let mut f = create(&p)?;
    let e = io_at(&p);
    writeln!(
        f,
        "setup,n,replicate,seed,analysis,tuner,scheme,basis,estimate,se,ci_low,ci_high,\
         lambda_index,lambda,lambda_cv_index,max_weight,unadjusted,synthetic_mean_bias,\
         synthetic_mean_percent_bias,synthetic_k_ok,error"
    )
    .map_err(&e)?;
    for s in &result.scenarios {
        for r in &s.replicates {
            for (spec, out) in &r.analyses {
                let syn = r.synthetic.as_ref().and_then(|x| x.get(spec));
                let (sb, sp, sk) = syn.map_or((f64::NAN, f64::NAN, 0), |a| {
                    (a.mean_bias, a.mean_percent_bias, a.k_ok)
                });
                let prefix = format!(
                    "{},{},{},{},{},{},{},{}",
                    cfg.setup,
                    s.n,
                    r.replicate,
                    r.seed,
                    spec.label(),
                    spec.tuner,
                    spec.scheme,
                    spec.basis
                );
                match out {
                    Ok(o) => writeln!(
                        f,
                        "{prefix},{},{},{},{},{},{},{},{},{},{sb},{sp},{sk},",
                        o.estimate.estimate,
                        o.estimate.se,
                        o.estimate.ci_low,
                        o.estimate.ci_high,
                        o.lambda_index,
                        o.lambda,
                        o.lambda_cv_index,
                        o.estimate.max_weight,
                        r.unadjusted.estimate
                    ),
                    Err(msg) => writeln!(
                        f,
                        "{prefix},,,,,,,,,{},{sb},{sp},{sk},\"{}\"",
                        r.unadjusted.estimate,
                        msg.replace('"', "'")
                    ),
                }
                .map_err(&e)?;
            }
        }
    }
    f.flush().map_err(&e)?;

    let p = out_dir.join("balance_smd.csv");
    let mut f = create(&p)?;
    let e = io_at(&p);
    writeln!(f, "setup,n,analysis,covariate,smd_unadjusted,smd_weighted").map_err(&e)?;
    for s in &result.scenarios {
        for r in s.replicates.iter().filter(|r| r.replicate == 0) {
            for d in &r.smd {
                for (k, name) in d.names.iter().enumerate() {
                    writeln!(
                        f,
                        "{},{},{},{},{},{}",
                        cfg.setup, s.n, d.label, name, d.unadjusted[k], d.weighted[k]
                    )
                    .map_err(&e)?;
                }
            }
        }
    }
    f.flush().map_err(&e)?;

    let p = out_dir.join("alignment.csv");
    let mut f = create(&p)?;
    let e = io_at(&p);
    writeln!(f, "setup,n,covariate,d_exposure,d_synthetic,slope,r2,k").map_err(&e)?;
    let p2 = out_dir.join("alignment_summary.csv");
    let mut g = create(&p2)?;
    let e2 = io_at(&p2);
    writeln!(g, "setup,n,slope,intercept,r2,k").map_err(&e2)?;
    for s in &result.scenarios {
        for r in s.replicates.iter().filter(|r| r.replicate == 0) {
            if let Some(al) = &r.alignment {
                for (k, name) in al.names.iter().enumerate() {
                    writeln!(
                        f,
                        "{},{},{},{},{},{},{},{}",
                        cfg.setup,
                        s.n,
                        name,
                        al.d_exposure[k],
                        al.d_synthetic[k],
                        al.slope,
                        al.r2,
                        al.k
                    )
                    .map_err(&e)?;
                }
                writeln!(
                    g,
                    "{},{},{},{},{},{}",
                    cfg.setup, s.n, al.slope, al.intercept, al.r2, al.k
                )
                .map_err(&e2)?;
            }
        }
    }
    f.flush().map_err(&e)?;
    g.flush().map_err(&e2)?;

    let p = out_dir.join("synthetic_oracle.csv");
    let mut f = create(&p)?;
    let e = io_at(&p);
    writeln!(f, "setup,n,scheme,n_estimates,mean_bias,mc_se").map_err(&e)?;
    for s in &result.scenarios {
        for &scheme in &cfg.schemes {
            let all: Vec<f64> = s
                .replicates
                .iter()
                .flat_map(|r| r.oracle.iter().filter(|o| o.scheme == scheme))
                .flat_map(|o| o.estimates.iter().copied())
                .collect();
            if all.is_empty() {
                continue;
            }
            let se = sample_sd(&all) / (all.len() as f64).sqrt();
            writeln!(f, "{},{},{},{},{},{}", cfg.setup, s.n, scheme, all.len(), mean(&all), se)
                .map_err(&e)?;
        }
    }
    f.flush().map_err(&e)?;

    let seeds: Vec<ScenarioSeed> = result
        .scenarios
        .iter()
        .map(|s| ScenarioSeed {
            setup: cfg.setup,
            n: s.n,
            seed: s.seed,
        })
        .collect();
    let failures: Vec<serde_json::Value> = result
        .scenarios
        .iter()
        .flat_map(|s| {
            s.failures
                .iter()
                .map(move |(r, m)| serde_json::json!({"n": s.n, "replicate": r, "error": m}))
        })
        .collect();
    let meta = serde_json::json!({
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "config_text": config_text,
        "master_seed": cfg.master_seed,
        "scenario_seeds": seeds,
        "threads": cfg.parallelism,
        "wall_time_s": result.wall_time_s,
        "replicate_failures": failures,
    });
    let p = out_dir.join("run_meta.json");
    let mut f = create(&p)?;
    serde_json::to_writer_pretty(&mut f, &meta).map_err(|e| Error::Csv {
        path: p.clone(),
        message: e.to_string(),
    })?;
    writeln!(f).map_err(io_at(&p))?;
    f.flush().map_err(io_at(&p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(Setup::Setup1, vec![300]);
        cfg.n_replicates = 2;
        cfg.k_synthetic = 2;
        cfg.setup1.n_confounders = 4;
        cfg.setup1.n_spurious = 4;
        cfg.pipeline.n_folds = 3;
        cfg.pipeline.n_lambda = 8;
        cfg
    }

    #[test]
    fn toml_roundtrip_and_defaults() {
        let cfg = ExperimentConfig::from_toml("setup = \"setup2\"\nn_list = [500]\n").unwrap();
        assert_eq!(cfg.basis(), Basis::Hal);
        assert_eq!(cfg.n_replicates, 100);
        assert_eq!(cfg.k_synthetic, 100);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert!(ExperimentConfig::from_toml("setup = \"setup2\"\nn_list = [500]\nbasis = \"raw\"\n").is_err());
        assert!(ExperimentConfig::from_toml("setup = \"setup1\"\nn_list = []\n").is_err());
        assert!(ExperimentConfig::from_toml("setup = \"setup1\"\nn_list = [5]\nbogus = 1\n").is_err());
    }

    #[test]
    fn row_count_and_baseline() {
        let cfg = tiny();
        let res = run_experiment(&cfg).unwrap();
        let rows: Vec<_> = res.metrics().collect();
        assert_eq!(rows.len(), 1 + 9);
        assert_eq!(rows[0].tuner, "none");
        assert_eq!(rows[0].percent_bias, 100.0);
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.coverage95));
        }
        assert!(res.scenarios[0].replicates[0].alignment.is_some());
    }

    #[test]
    fn single_replicate_flags_sd() {
        let mut cfg = tiny();
        cfg.n_replicates = 1;
        cfg.k_synthetic = 0;
        let res = run_experiment(&cfg).unwrap();
        for r in res.metrics() {
            assert!(r.single_replicate);
            assert_eq!(r.sd, 0.0);
            assert!(r.coverage95 == 0.0 || r.coverage95 == 1.0);
        }
    }
}
