//! Weighted standardized differences and balance-based penalty selection.
//!
//! Group prevalences (or means) and the pooled variance in the denominator
//! are both computed with the weights applied. For a 0/1 column the weighted
//! variance `sum w (x - m)^2 / sum w` reduces to `p (1 - p)`, so binary and
//! continuous columns share one formula.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::lasso::LassoPath;
use crate::weighting::{compute_weights, WeightScheme};

/// Magnitude reported when the pooled variance is zero but the groups differ.
pub const UNDEFINED_SMD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smd {
    pub value: f64,
    /// Denominator was zero with differing groups; `value` is the sentinel.
    pub undefined: bool,
}

fn ratio(diff: f64, v1: f64, v0: f64) -> Smd {
    let denom = ((v1 + v0) / 2.0).sqrt();
    if denom > 0.0 {
        Smd {
            value: diff / denom,
            undefined: false,
        }
    } else if diff == 0.0 {
        Smd {
            value: 0.0,
            undefined: false,
        }
    } else {
        Smd {
            value: diff.signum() * UNDEFINED_SMD,
            undefined: true,
        }
    }
}

/// Standardized difference (exposed minus unexposed) of one column.
pub fn standardized_difference(col: &[f64], kind: ColumnKind, a: &[u8], w: &[f64]) -> Result<Smd> {
    if col.len() != a.len() || w.len() != a.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: if col.len() != a.len() { col.len() } else { w.len() },
        });
    }
    let mut sw = [0.0f64; 2];
    let mut swx = [0.0f64; 2];
    for ((&x, &g), &wi) in col.iter().zip(a).zip(w) {
        sw[g as usize] += wi;
        swx[g as usize] += wi * x;
    }
    check_group_weights(sw)?;
    let m = [swx[0] / sw[0], swx[1] / sw[1]];
    let v = match kind {
        ColumnKind::Binary => [m[0] * (1.0 - m[0]), m[1] * (1.0 - m[1])],
        ColumnKind::Continuous => {
            let mut ss = [0.0f64; 2];
            for ((&x, &g), &wi) in col.iter().zip(a).zip(w) {
                let d = x - m[g as usize];
                ss[g as usize] += wi * d * d;
            }
            [ss[0] / sw[0], ss[1] / sw[1]]
        }
    };
    Ok(ratio(m[1] - m[0], v[1], v[0]))
}

fn check_group_weights(sw: [f64; 2]) -> Result<()> {
    if !(sw[1] > 0.0) {
        return Err(Error::ZeroGroupWeight { group: "exposed" });
    }
    if !(sw[0] > 0.0) {
        return Err(Error::ZeroGroupWeight { group: "unexposed" });
    }
    Ok(())
}

/// Columns on which balance is assessed, with their kinds.
#[derive(Debug, Clone)]
pub struct BalanceColumns<'a> {
    columns: Vec<&'a [f64]>,
    kinds: Vec<ColumnKind>,
}

impl<'a> BalanceColumns<'a> {
    pub fn new(columns: Vec<&'a [f64]>, kinds: Vec<ColumnKind>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::invalid("at least one balance column is required"));
        }
        if columns.len() != kinds.len() {
            return Err(Error::DimensionMismatch {
                expected: columns.len(),
                got: kinds.len(),
            });
        }
        Ok(Self { columns, kinds })
    }

    /// Every covariate of `ds`.
    pub fn covariates(ds: &'a Dataset) -> Result<Self> {
        Self::new(
            ds.columns().iter().map(Vec::as_slice).collect(),
            ds.kinds().to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub smd: Vec<f64>,
    pub max_abs: f64,
    pub mean_abs: f64,
    pub n_undefined: usize,
}

impl BalanceReport {
    fn from_smds(smds: Vec<Smd>) -> Self {
        let n_undefined = smds.iter().filter(|s| s.undefined).count();
        let smd: Vec<f64> = smds.into_iter().map(|s| s.value).collect();
        let max_abs = smd.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let mean_abs = smd.iter().map(|v| v.abs()).sum::<f64>() / smd.len() as f64;
        Self {
            smd,
            max_abs,
            mean_abs,
            n_undefined,
        }
    }

    pub fn value(&self, criterion: BalanceCriterion) -> f64 {
        match criterion {
            BalanceCriterion::MaxSmd => self.max_abs,
            BalanceCriterion::MeanSmd => self.mean_abs,
        }
    }
}

/// Balance columns pre-arranged for repeated evaluation under many weight
/// vectors: binary columns keep only their rows of ones per exposure group.
struct Prepared<'a> {
    a: &'a [u8],
    cols: Vec<PreparedColumn<'a>>,
}

enum PreparedColumn<'a> {
    Binary { ones: [Vec<u32>; 2] },
    Continuous(&'a [f64]),
}

impl<'a> Prepared<'a> {
    fn new(a: &'a [u8], cols: &BalanceColumns<'a>) -> Result<Self> {
        let n = a.len();
        let mut out = Vec::with_capacity(cols.len());
        for (col, kind) in cols.columns.iter().zip(&cols.kinds) {
            if col.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: col.len(),
                });
            }
            match kind {
                ColumnKind::Binary => {
                    let mut ones = [Vec::new(), Vec::new()];
                    for (i, (&x, &g)) in col.iter().zip(a).enumerate() {
                        if x != 0.0 {
                            ones[g as usize].push(i as u32);
                        }
                    }
                    out.push(PreparedColumn::Binary { ones });
                }
                ColumnKind::Continuous => out.push(PreparedColumn::Continuous(col)),
            }
        }
        Ok(Self { a, cols: out })
    }

    fn report(&self, w: &[f64]) -> Result<BalanceReport> {
        let mut sw = [0.0f64; 2];
        for (&g, &wi) in self.a.iter().zip(w) {
            sw[g as usize] += wi;
        }
        check_group_weights(sw)?;
        let smds = self
            .cols
            .iter()
            .map(|c| match c {
                PreparedColumn::Binary { ones } => {
                    let p0 = ones[0].iter().map(|&i| w[i as usize]).sum::<f64>() / sw[0];
                    let p1 = ones[1].iter().map(|&i| w[i as usize]).sum::<f64>() / sw[1];
                    ratio(p1 - p0, p1 * (1.0 - p1), p0 * (1.0 - p0))
                }
                PreparedColumn::Continuous(col) => {
                    let kind = ColumnKind::Continuous;
                    standardized_difference(col, kind, self.a, w)
                        .expect("group weights already checked")
                }
            })
            .collect();
        Ok(BalanceReport::from_smds(smds))
    }
}

pub fn balance_report(ds: &Dataset, w: &[f64], cols: &BalanceColumns<'_>) -> Result<BalanceReport> {
    if w.len() != ds.n() {
        return Err(Error::DimensionMismatch {
            expected: ds.n(),
            got: w.len(),
        });
    }
    Prepared::new(ds.a(), cols)?.report(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceCriterion {
    MaxSmd,
    MeanSmd,
}

impl fmt::Display for BalanceCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BalanceCriterion::MaxSmd => "max_smd",
            BalanceCriterion::MeanSmd => "mean_smd",
        })
    }
}

impl FromStr for BalanceCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_smd" => Ok(BalanceCriterion::MaxSmd),
            "mean_smd" => Ok(BalanceCriterion::MeanSmd),
            other => Err(Error::invalid(format!("unknown balance criterion `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunerChoice {
    pub criterion: BalanceCriterion,
    pub chosen_index: usize,
    pub achieved: f64,
    /// Criterion per path index; `NaN` where the index was skipped.
    pub per_lambda: Vec<f64>,
    /// Indices where a group's total weight was zero.
    pub skipped: Vec<usize>,
}

impl TunerChoice {
    /// Minimizer over evaluated indices, ties to the larger penalty.
    pub fn from_reports(
        criterion: BalanceCriterion,
        reports: &[Option<BalanceReport>],
    ) -> Result<Self> {
        let per_lambda: Vec<f64> = reports
            .iter()
            .map(|r| r.as_ref().map_or(f64::NAN, |r| r.value(criterion)))
            .collect();
        let skipped: Vec<usize> = (0..reports.len()).filter(|&l| reports[l].is_none()).collect();
        let mut chosen: Option<usize> = None;
        for (l, &v) in per_lambda.iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            if chosen.is_none_or(|c| v < per_lambda[c]) {
                chosen = Some(l);
            }
        }
        let chosen_index =
            chosen.ok_or_else(|| Error::invalid("no penalty value could be evaluated for balance"))?;
        Ok(Self {
            criterion,
            chosen_index,
            achieved: per_lambda[chosen_index],
            per_lambda,
            skipped,
        })
    }
}

/// Balance report at every path index under out-of-fold weights. Indices
/// whose weights cannot be formed or leave a group weightless are `None`.
pub fn balance_along_path(
    path: &LassoPath,
    ds: &Dataset,
    scheme: WeightScheme,
    cols: &BalanceColumns<'_>,
) -> Result<Vec<Option<BalanceReport>>> {
    let prepared = Prepared::new(ds.a(), cols)?;
    Ok((0..path.len())
        .into_par_iter()
        .map(|l| {
            let w = compute_weights(path.oof_column(l), ds.a(), scheme).ok()?;
            prepared.report(&w).ok()
        })
        .collect())
}

/// Picks the path index minimizing the balance criterion over the full grid.
/// The outcome never enters this computation.
pub fn tune_by_balance(
    path: &LassoPath,
    ds: &Dataset,
    scheme: WeightScheme,
    criterion: BalanceCriterion,
    cols: &BalanceColumns<'_>,
) -> Result<TunerChoice> {
    let reports = balance_along_path(path, ds, scheme, cols)?;
    TunerChoice::from_reports(criterion, &reports)
}

/// `lambda,criterion,value,chosen` rows for each tuner choice.
pub fn write_balance_csv(path: &Path, lambdas: &[f64], choices: &[TunerChoice]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(out, "lambda,criterion,value,chosen").map_err(io_err)?;
    for c in choices {
        for (l, v) in c.per_lambda.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{}",
                lambdas[l],
                c.criterion,
                v,
                u8::from(l == c.chosen_index)
            )
            .map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

/// `covariate,smd_unadjusted,smd_weighted` rows.
pub fn write_smd_csv(
    path: &Path,
    names: &[String],
    unadjusted: &BalanceReport,
    weighted: &BalanceReport,
) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(out, "covariate,smd_unadjusted,smd_weighted").map_err(io_err)?;
    for (k, name) in names.iter().enumerate() {
        writeln!(out, "{},{},{}", name, unadjusted.smd[k], weighted.smd[k]).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
