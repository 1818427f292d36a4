use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pslab::analysis::{design_for, fit_design_path, run_analyses, AnalysisSpec, Basis, PipelineConfig, Tuner};
use pslab::balance::{balance_report, write_balance_csv, write_smd_csv, BalanceColumns};
use pslab::dataset::{load_csv, subset_unexposed, Dataset};
use pslab::experiment::{emit_results, run_experiment, ExperimentConfig, Setup};
use pslab::hal_basis::expand_basis;
use pslab::simulation::{generate_setup1, generate_setup2, Setup1Config, Setup2Config};
use pslab::synthetic_nc::{generate_cohorts, run_bias_detection, ReferenceFit, SyntheticAssignmentModel, TargetSumFormula};
use pslab::weighting::{compute_weights, WeightScheme};
use pslab::Error;

#[derive(Parser)]
#[command(name = "pslab", version, about = "Lasso propensity scores, balance tuning and synthetic negative controls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "pslab_out")]
    out: PathBuf,
    /// Worker threads; overrides the configuration.
    #[arg(long)]
    threads: Option<usize>,
    /// Expected synthetic exposed count: `text` or `printed`.
    #[arg(long)]
    target_sum_formula: Option<TargetSumFormula>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Input CSV with outcome, exposure and covariate columns.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y")]
    outcome: String,
    #[arg(long, default_value = "a")]
    exposure: String,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one dataset from a simulation setup.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the cross-validated lasso path.
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Weighted effect estimates for every tuner and scheme.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Bias detection with synthetic negative-control exposures.
    SyntheticNc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Full Monte Carlo experiment.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

fn one() -> u64 {
    1
}

fn setup1() -> Setup {
    Setup::Setup1
}

fn n_default() -> usize {
    2000
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    #[serde(default = "setup1")]
    setup: Setup,
    #[serde(default = "n_default")]
    n: usize,
    #[serde(default = "one")]
    seed: u64,
    #[serde(default)]
    setup1: Setup1Config,
    #[serde(default)]
    setup2: Setup2Config,
}

fn k_default() -> usize {
    100
}

fn all_tuners() -> Vec<Tuner> {
    Tuner::ALL.to_vec()
}

fn all_schemes() -> Vec<WeightScheme> {
    WeightScheme::ALL.to_vec()
}

fn raw() -> Basis {
    Basis::Raw
}

/// Settings for the single-dataset subcommands.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataConfig {
    #[serde(default = "raw")]
    basis: Basis,
    #[serde(default = "all_tuners")]
    tuners: Vec<Tuner>,
    #[serde(default = "all_schemes")]
    schemes: Vec<WeightScheme>,
    #[serde(default = "k_default")]
    k_synthetic: usize,
    #[serde(default = "one")]
    seed: u64,
    #[serde(default)]
    threads: Option<usize>,
    #[serde(default)]
    target_sum_formula: TargetSumFormula,
    #[serde(default)]
    pipeline: PipelineConfig,
}

fn read_config<T: serde::de::DeserializeOwned>(path: Option<&Path>, fallback: &str) -> Result<(T, Option<String>), Error> {
    let text = match path {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let parsed = toml::from_str(text.as_deref().unwrap_or(fallback)).map_err(|e| Error::Config(e.to_string()))?;
    Ok((parsed, text))
}

fn out_dir(p: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(p).map_err(|source| Error::Io {
        path: p.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn install_pool(threads: Option<usize>) -> Result<(), Error> {
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn simulate(c: &Common) -> Result<(), Error> {
    let (mut cfg, _) = read_config::<SimulateConfig>(c.config.as_deref(), "")?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let (ds, truth) = match cfg.setup {
        Setup::Setup1 => generate_setup1(&Setup1Config {
            n: cfg.n,
            seed: cfg.seed,
            ..cfg.setup1.clone()
        })?,
        Setup::Setup2 => generate_setup2(&Setup2Config {
            n: cfg.n,
            seed: cfg.seed,
            ..cfg.setup2.clone()
        })?,
    };
    out_dir(&c.out)?;
    ds.write_csv(&c.out.join("data.csv"), "y", "a")?;
    let truth_ps = c.out.join("true_ps.csv");
    let mut text = String::from("true_ps\n");
    for p in &truth.true_ps {
        text.push_str(&format!("{p}\n"));
    }
    std::fs::write(&truth_ps, text).map_err(|source| Error::Io { path: truth_ps, source })?;
    write_json(
        &c.out.join("truth.json"),
        &serde_json::json!({
            "setup": cfg.setup,
            "n": cfg.n,
            "seed": cfg.seed,
            "true_effect": truth.true_effect,
            "exposure_coefficients": truth.beta,
            "outcome_coefficients": truth.alpha,
            "outcome_formula": truth.outcome_formula,
            "exposure_prevalence": ds.exposure_prevalence(),
        }),
    )?;
    Ok(())
}

fn load(d: &DataArgs) -> Result<Dataset, Error> {
    load_csv(&d.data, &d.outcome, &d.exposure)
}

fn data_config(c: &Common) -> Result<DataConfig, Error> {
    let (mut cfg, _) = read_config::<DataConfig>(c.config.as_deref(), "")?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(f) = c.target_sum_formula {
        cfg.target_sum_formula = f;
    }
    if c.threads.is_some() {
        cfg.threads = c.threads;
    }
    if cfg.tuners.is_empty() || cfg.schemes.is_empty() {
        return Err(Error::Config("tuners and schemes must not be empty".into()));
    }
    install_pool(cfg.threads)?;
    Ok(cfg)
}

fn fit(c: &Common, d: &DataArgs) -> Result<(), Error> {
    let cfg = data_config(c)?;
    let ds = load(d)?;
    out_dir(&c.out)?;
    let design = match cfg.basis {
        Basis::Raw => ds.clone(),
        Basis::Hal => {
            let exp = expand_basis(&ds, &cfg.pipeline.hal)?;
            exp.write_terms_csv(&c.out.join("hal_terms.csv"))?;
            exp.to_dataset(&ds)?
        }
    };
    let path = fit_design_path(&design, &cfg.pipeline, cfg.seed)?;
    path.write_csv(&c.out.join("path.csv"), Some(design.names()))?;
    println!(
        "lambda_cv = {} (index {} of {}), path {:016x}",
        path.lambda_cv(),
        path.lambda_cv_index,
        path.len(),
        path.fingerprint()
    );
    Ok(())
}

fn estimate(c: &Common, d: &DataArgs) -> Result<(), Error> {
    let cfg = data_config(c)?;
    let ds = load(d)?;
    out_dir(&c.out)?;
    let specs = AnalysisSpec::grid(&cfg.tuners, &cfg.schemes, cfg.basis);
    let run = run_analyses(&ds, &specs, &cfg.pipeline, cfg.seed)?;
    let fb = run.fitted(cfg.basis).expect("basis fitted");

    let file = c.out.join("estimates.csv");
    let mut text = String::from("analysis,tuner,scheme,basis,estimate,se,ci_low,ci_high,lambda_index,lambda,lambda_cv_index,error\n");
    let u = &run.unadjusted;
    text.push_str(&format!(
        "unadjusted,none,none,{},{},{},{},{},,,,\n",
        cfg.basis, u.estimate, u.se, u.ci_low, u.ci_high
    ));
    for (spec, r) in &run.results {
        let head = format!("{},{},{},{}", spec.label(), spec.tuner, spec.scheme, spec.basis);
        match r {
            Ok(r) => text.push_str(&format!(
                "{head},{},{},{},{},{},{},{},\n",
                r.estimate.estimate,
                r.estimate.se,
                r.estimate.ci_low,
                r.estimate.ci_high,
                r.lambda_index,
                r.lambda,
                r.lambda_cv_index
            )),
            Err(e) => text.push_str(&format!("{head},,,,,,,,\"{}\"\n", e.to_string().replace('"', "'"))),
        }
    }
    std::fs::write(&file, text).map_err(|source| Error::Io { path: file, source })?;

    let choices: Vec<_> = run.choices.iter().map(|(_, _, c)| c.clone()).collect();
    write_balance_csv(&c.out.join("balance.csv"), &fb.path.lambdas, &choices)?;
    let cols = BalanceColumns::covariates(&fb.design)?;
    let unit = balance_report(&fb.design, &vec![1.0; ds.n()], &cols)?;
    for (spec, r) in &run.results {
        if let Ok(r) = r {
            let w = compute_weights(fb.path.oof_column(r.lambda_index), ds.a(), spec.scheme)?;
            let rep = balance_report(&fb.design, &w, &cols)?;
            let name = format!("smd_{}_{}.csv", spec.tuner, spec.scheme);
            write_smd_csv(&c.out.join(name), fb.design.names(), &unit, &rep)?;
        }
    }
    Ok(())
}

fn synthetic_nc(c: &Common, d: &DataArgs) -> Result<(), Error> {
    let cfg = data_config(c)?;
    if cfg.k_synthetic == 0 {
        return Err(Error::Config("k_synthetic must be at least 1".into()));
    }
    let ds = load(d)?;
    ds.require_both_classes()?;
    out_dir(&c.out)?;
    let design = design_for(&ds, cfg.basis, &cfg.pipeline)?;
    let path = fit_design_path(&design, &cfg.pipeline, cfg.seed)?;
    let reference = ReferenceFit::from_path(path, &design)?;
    let model = SyntheticAssignmentModel::for_cohort(&ds, &reference, cfg.target_sum_formula)?;
    let ds_u = subset_unexposed(&ds)?;
    let cohorts = generate_cohorts(ds_u.n(), &model, cfg.k_synthetic, ds.n(), cfg.seed)?;
    let specs = AnalysisSpec::grid(&cfg.tuners, &cfg.schemes, cfg.basis);
    let report = run_bias_detection(&cohorts, &ds_u, &specs, &cfg.pipeline);
    report.write_csv(&c.out.join("synthetic_report.csv"))?;
    report.write_cohorts_csv(&c.out.join("synthetic_cohorts.csv"))?;
    write_json(
        &c.out.join("synthetic_meta.json"),
        &serde_json::json!({
            "reference_lambda": model.reference_lambda,
            "offset": model.c,
            "target_sum": model.target_sum,
            "target_sum_formula": cfg.target_sum_formula,
            "n_cohorts": report.n_cohorts,
            "n_failed": report.n_failed,
            "failure_flag": report.failure_flag,
            "seed": cfg.seed,
        }),
    )?;
    if report.failure_flag {
        log::warn!("{} of {} synthetic cohorts failed", report.n_failed, report.n_cohorts);
    }
    Ok(())
}

fn experiment(c: &Common) -> Result<(), Error> {
    let path = c
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("experiment needs --config".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    if let Some(t) = c.threads {
        cfg.parallelism = t;
    }
    if let Some(f) = c.target_sum_formula {
        cfg.target_sum_formula = f;
    }
    cfg.validate()?;
    let result = run_experiment(&cfg)?;
    emit_results(&result, &c.out, Some(&text))?;
    let failed: usize = result.scenarios.iter().map(|s| s.failures.len()).sum();
    println!(
        "{} scenarios, {} replicate failures, {:.1} s; results in {}",
        result.scenarios.len(),
        failed,
        result.wall_time_s,
        c.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Simulate { common } => simulate(common),
        Command::Fit { common, data } => fit(common, data),
        Command::Estimate { common, data } => estimate(common, data),
        Command::SyntheticNc { common, data } => synthetic_nc(common, data),
        Command::Experiment { common } => experiment(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("pslab: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("pslab: {e}");
            ExitCode::from(3)
        }
    }
}
