//! Property checks across the basis, weighting, balance, synthetic-cohort and
//! experiment layers.

mod common;

use std::collections::HashSet;

use pslab::analysis::{run_analyses, AnalysisSpec, Basis, PipelineConfig, Tuner};
use pslab::balance::{balance_along_path, BalanceColumns, BalanceCriterion, TunerChoice};
use pslab::dataset::{subset_unexposed, Dataset};
use pslab::experiment::{run_experiment, write_metrics_csv, ExperimentConfig, Setup};
use pslab::hal_basis::{expand_basis, BasisSpec, KnotRule};
use pslab::synthetic_nc::{generate_cohorts, SyntheticAssignmentModel, TargetSumFormula};
use pslab::weighting::{compute_weights, weighted_mean_difference, WeightScheme};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn continuous(seed: u64, n: usize, d: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..n).map(|_| (rng.random::<f64>() * 20.0).round() / 4.0).collect())
        .collect();
    let a = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
    Dataset::from_columns(vec![0.0; n], a, x).unwrap()
}

#[test]
fn hal_columns_match_their_terms() {
    let ds = continuous(1, 60, 3);
    let spec = BasisSpec {
        knot_rule: KnotRule::AllObserved,
        ..BasisSpec::default()
    };
    let exp = expand_basis(&ds, &spec).unwrap();
    assert!(exp.n_cols() <= ds.n() * ((1 << ds.d()) - 1));
    let mut seen = HashSet::new();
    for (j, term) in exp.terms.iter().enumerate() {
        let mut ones = 0;
        for i in 0..ds.n() {
            // Direct product of indicators, independent of the library's evaluator.
            let row = ds.row(i);
            let want = term.factors.iter().all(|&(c, k)| row[c] >= k);
            assert_eq!(exp.w.get(i, j), want, "column {j}, row {i}");
            ones += usize::from(want);
        }
        assert!(ones > 0 && ones < ds.n(), "constant column {j}");
        assert!(seen.insert(exp.w.ones(j).to_vec()), "duplicate column {j}");
    }
}

#[test]
fn hal_represents_single_steps_exactly() {
    // Every observed-value step 1(x_j >= v) that is not constant is a column.
    let ds = continuous(2, 40, 2);
    let spec = BasisSpec {
        knot_rule: KnotRule::AllObserved,
        max_degree: 1,
        ..BasisSpec::default()
    };
    let exp = expand_basis(&ds, &spec).unwrap();
    let columns: HashSet<Vec<u32>> = (0..exp.n_cols()).map(|j| exp.w.ones(j).to_vec()).collect();
    for c in 0..ds.d() {
        for &v in ds.column(c) {
            let ones: Vec<u32> = (0..ds.n() as u32).filter(|&i| ds.column(c)[i as usize] >= v).collect();
            if !ones.is_empty() && ones.len() < ds.n() {
                assert!(columns.contains(&ones), "step at {v} on column {c} missing");
            }
        }
    }
}

#[test]
fn hal_new_rows_follow_training_terms() {
    let ds = continuous(3, 50, 3);
    let exp = expand_basis(&ds, &BasisSpec::default()).unwrap();
    let rows: Vec<Vec<f64>> = (0..ds.n()).map(|i| ds.row(i)).collect();
    let again = exp.transform_new(&rows).unwrap();
    for j in 0..exp.n_cols() {
        assert_eq!(again.ones(j), exp.w.ones(j));
    }
}

#[test]
fn hal_column_cap_is_enforced() {
    let ds = continuous(4, 200, 6);
    let spec = BasisSpec {
        knot_rule: KnotRule::AllObserved,
        column_cap: 500,
        ..BasisSpec::default()
    };
    assert!(expand_basis(&ds, &spec).is_err());
}

proptest! {
    #[test]
    fn weights_are_positive_and_bounded(e in 1e-6f64..(1.0 - 1e-6)) {
        for scheme in WeightScheme::ALL {
            for a in [0u8, 1] {
                let w = scheme.weight(e, a);
                prop_assert!(w.is_finite() && w > 0.0);
                match scheme {
                    WeightScheme::Ipw => prop_assert!(w >= 1.0),
                    _ => prop_assert!(w <= 1.0),
                }
            }
        }
    }

    #[test]
    fn weighted_difference_matches_hand_means(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let a: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.1).collect();
        let est = weighted_mean_difference(&y, &a, &w).unwrap();
        let mean = |g: u8| {
            let (s, t) = (0..n).filter(|&i| a[i] == g).fold((0.0, 0.0), |(s, t), i| (s + w[i] * y[i], t + w[i]));
            s / t
        };
        prop_assert!((est.estimate - (mean(1) - mean(0))).abs() < 1e-12);
        prop_assert!(est.se > 0.0 && est.ci_low < est.estimate && est.estimate < est.ci_high);
    }
}

#[test]
fn balance_tuner_never_worse_than_cv() {
    let ds = common::instance(9, 400, 12);
    let cfg = PipelineConfig {
        n_folds: 5,
        n_lambda: 25,
        ..PipelineConfig::default()
    };
    let run = run_analyses(&ds, &AnalysisSpec::grid(&[Tuner::Cv], &[WeightScheme::Ipw], Basis::Raw), &cfg, 3).unwrap();
    let path = &run.fitted[0].path;
    let cols = BalanceColumns::covariates(&ds).unwrap();
    for scheme in WeightScheme::ALL {
        let reports = balance_along_path(path, &ds, scheme, &cols).unwrap();
        for criterion in [BalanceCriterion::MaxSmd, BalanceCriterion::MeanSmd] {
            let choice = TunerChoice::from_reports(criterion, &reports).unwrap();
            let cv = choice.per_lambda[path.lambda_cv_index];
            assert!(choice.achieved <= cv);
            let best = choice.per_lambda.iter().copied().fold(f64::INFINITY, f64::min);
            assert_eq!(choice.achieved, best);
            // Ties go to the larger penalty, i.e. the first index.
            let first = choice.per_lambda.iter().position(|&v| v == best).unwrap();
            assert_eq!(choice.chosen_index, first);
        }
    }
}

#[test]
fn synthetic_cohorts_match_target_and_seed() {
    let ds = common::instance(12, 600, 8);
    let ds_u = subset_unexposed(&ds).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta: Vec<f64> = (0..ds_u.n()).map(|_| rng.random::<f64>() * 2.0 - 1.5).collect();
    for formula in [TargetSumFormula::Text, TargetSumFormula::Printed] {
        let target = formula.target_sum(ds.n(), ds_u.n());
        let model = SyntheticAssignmentModel::new(theta.clone(), target, 0.0).unwrap();
        assert!((model.pi.iter().sum::<f64>() - target).abs() < 1e-8);
        let c1 = generate_cohorts(ds_u.n(), &model, 5, ds.n(), 77).unwrap();
        let c2 = generate_cohorts(ds_u.n(), &model, 7, ds.n(), 77).unwrap();
        assert_eq!(&c1[..], &c2[..5]);
        for c in &c1 {
            assert_eq!(c.rows.len(), ds.n());
            assert_eq!(c.z.len(), ds.n());
            assert!(c.rows.iter().all(|&r| r < ds_u.n()));
        }
    }
    let text = TargetSumFormula::Text.target_sum(1000, 700);
    let printed = TargetSumFormula::Printed.target_sum(1000, 700);
    assert!((text - 210.0).abs() < 1e-12 && (printed - 490.0).abs() < 1e-12);
}

#[test]
fn metrics_do_not_depend_on_thread_count() {
    let mut cfg = ExperimentConfig::new(Setup::Setup1, vec![300, 400]);
    cfg.n_replicates = 3;
    cfg.k_synthetic = 2;
    cfg.synthetic_replicates = Some(1);
    cfg.setup1.n_confounders = 5;
    cfg.setup1.n_spurious = 5;
    cfg.pipeline.n_folds = 3;
    cfg.pipeline.n_lambda = 10;
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for threads in [1, 3] {
        cfg.parallelism = threads;
        let res = run_experiment(&cfg).unwrap();
        let rows: Vec<_> = res.metrics().collect();
        assert_eq!(rows.len(), cfg.n_list.len() * (1 + cfg.tuners.len() * cfg.schemes.len()));
        let p = dir.path().join(format!("m{threads}.csv"));
        write_metrics_csv(&p, &rows).unwrap();
        bytes.push(std::fs::read(&p).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn weights_from_probabilities_reject_bad_input() {
    assert!(compute_weights(&[0.5, 1.0], &[1, 0], WeightScheme::Ipw).is_err());
    assert!(compute_weights(&[0.5], &[1, 0], WeightScheme::Ow).is_err());
}

#[test]
fn hal_main_effects_are_lower_triangular_when_sorted() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x: Vec<f64> = (0..20).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
    let ds = Dataset::from_columns(vec![0.0; 20], (0..20).map(|i| u8::from(i % 2 == 0)).collect(), vec![x.clone()]).unwrap();
    let spec = BasisSpec {
        knot_rule: KnotRule::AllObserved,
        max_degree: 1,
        dedupe: false,
        ..BasisSpec::default()
    };
    let exp = expand_basis(&ds, &spec).unwrap();
    assert_eq!(exp.n_cols(), 20);
    let mut order: Vec<usize> = (0..20).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    // Rows sorted by x, columns by knot: entry (r, c) is 1 exactly when r >= c.
    for (r, &i) in order.iter().enumerate() {
        for c in 0..20 {
            assert_eq!(exp.w.get(i, c), r >= c);
        }
    }
}

#[test]
fn hal_step_function_is_a_main_effect_combination() {
    // f(x) = 2.5 * 1(x >= t) for a knot t: solve for coefficients on the
    // intercept plus main-effect columns by least squares and check the fit.
    let ds = continuous(5, 30, 1);
    let spec = BasisSpec {
        knot_rule: KnotRule::AllObserved,
        max_degree: 1,
        ..BasisSpec::default()
    };
    let exp = expand_basis(&ds, &spec).unwrap();
    let t = exp.terms[exp.n_cols() / 2].factors[0].1;
    let f: Vec<f64> = ds.column(0).iter().map(|&v| if v >= t { 2.5 } else { 0.0 }).collect();
    let mut design: Vec<Vec<f64>> = vec![vec![1.0; ds.n()]];
    design.extend((0..exp.n_cols()).map(|j| exp.w.dense_column(j)));
    let p = design.len();
    // Normal equations with Gaussian elimination.
    let mut m = vec![vec![0.0; p + 1]; p];
    for a in 0..p {
        for b in 0..p {
            m[a][b] = (0..ds.n()).map(|i| design[a][i] * design[b][i]).sum();
        }
        m[a][p] = (0..ds.n()).map(|i| design[a][i] * f[i]).sum();
    }
    for c in 0..p {
        let piv = (c..p).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, piv);
        for r in 0..p {
            if r != c {
                let k = m[r][c] / m[c][c];
                for q in c..=p {
                    m[r][q] -= k * m[c][q];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..p).map(|c| m[c][p] / m[c][c]).collect();
    for i in 0..ds.n() {
        let fit: f64 = (0..p).map(|c| coef[c] * design[c][i]).sum();
        assert!((fit - f[i]).abs() < 1e-9);
    }
}
