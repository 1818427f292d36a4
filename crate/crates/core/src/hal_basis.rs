//! Zero-order indicator basis for the highly adaptive lasso.
//!
//! Each basis column is a product of indicators `1(x_j >= knot)` over a set of
//! distinct covariates. A lasso over these columns fits a cadlag function of
//! bounded variation; the propensity model then lives on `W` instead of `X`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{ColumnKind, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnotRule {
    /// Every distinct observed value.
    AllObserved,
    /// Empirical quantiles at levels `i / (k + 1)`, `i = 1..k`.
    Quantile,
}

impl fmt::Display for KnotRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KnotRule::AllObserved => "all-observed",
            KnotRule::Quantile => "quantile",
        })
    }
}

impl FromStr for KnotRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-observed" => Ok(KnotRule::AllObserved),
            "quantile" => Ok(KnotRule::Quantile),
            other => Err(Error::invalid(format!("unknown knot rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisSpec {
    pub max_degree: usize,
    pub knots_per_cov: usize,
    pub knot_rule: KnotRule,
    pub dedupe: bool,
    /// Largest number of candidate columns the expansion may enumerate.
    pub column_cap: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            max_degree: 2,
            knots_per_cov: 10,
            knot_rule: KnotRule::Quantile,
            dedupe: true,
            column_cap: 50_000,
        }
    }
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_degree == 0 {
            return Err(Error::invalid("max_degree must be at least 1"));
        }
        if self.knots_per_cov == 0 {
            return Err(Error::invalid("knots_per_cov must be at least 1"));
        }
        Ok(())
    }
}

/// Product of indicators `1(x_j >= knot)` over distinct covariates `j`,
/// stored in increasing covariate order.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub factors: Vec<(usize, f64)>,
}

impl Term {
    pub fn degree(&self) -> usize {
        self.factors.len()
    }

    pub fn eval(&self, x_row: &[f64]) -> bool {
        self.factors.iter().all(|&(j, t)| x_row[j] >= t)
    }

    /// `"j:knot;j:knot"` with 1-based covariate indices.
    pub fn spec_string(&self) -> String {
        self.factors
            .iter()
            .map(|(j, t)| format!("{}:{}", j + 1, t))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Column-major 0/1 matrix storing, per column, the sorted rows holding a 1.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorMatrix {
    n_rows: usize,
    cols: Vec<Vec<u32>>,
}

impl IndicatorMatrix {
    pub fn new(n_rows: usize, cols: Vec<Vec<u32>>) -> Self {
        Self { n_rows, cols }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn ones(&self, j: usize) -> &[u32] {
        &self.cols[j]
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cols[j].binary_search(&(i as u32)).is_ok()
    }

    pub fn dense_column(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows];
        for &i in &self.cols[j] {
            out[i as usize] = 1.0;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisExpansion {
    pub w: IndicatorMatrix,
    pub terms: Vec<Term>,
    pub source_dims: usize,
}

/// Knot list per covariate. Constant covariates get an empty list.
pub fn enumerate_knots(ds: &Dataset, spec: &BasisSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(ds.d());
    for j in 0..ds.d() {
        let col = ds.column(j);
        let mut sorted = col.to_vec();
        sorted.sort_by(f64::total_cmp);
        if sorted.first() == sorted.last() {
            log::warn!(
                "covariate `{}` is constant and is dropped from the basis",
                ds.names()[j]
            );
            out.push(Vec::new());
            continue;
        }
        let knots = match (ds.kinds()[j], spec.knot_rule) {
            (ColumnKind::Binary, _) => vec![1.0],
            (ColumnKind::Continuous, KnotRule::AllObserved) => {
                let mut k = sorted;
                k.dedup();
                k
            }
            (ColumnKind::Continuous, KnotRule::Quantile) => {
                quantile_knots(&sorted, spec.knots_per_cov)
            }
        };
        out.push(knots);
    }
    Ok(out)
}

/// Inverse empirical CDF (the smallest observed value with at least a
/// fraction `q` of the sample at or below it) at `q = i / (k + 1)`.
fn quantile_knots(sorted: &[f64], k: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut knots: Vec<f64> = (1..=k)
        .map(|i| {
            let pos = (i * n).div_ceil(k + 1);
            sorted[pos.clamp(1, n) - 1]
        })
        .collect();
    knots.dedup();
    knots
}

fn intersect(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Increasing `k`-subsets of `0..d` in lexicographic order.
fn combinations(d: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > d {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] < d - k + i) else {
            return out;
        };
        idx[i] += 1;
        for t in i + 1..k {
            idx[t] = idx[t - 1] + 1;
        }
    }
}

/// Expands the covariates of `ds` into indicator columns, degree-major, then
/// by covariate subset, then by knot tuple.
///
/// Each row snaps every covariate to the largest knot at or below its value.
/// The terms of a covariate subset are the distinct snapped tuples that occur
/// in the data, so a subset contributes at most `n` columns and the basis has
/// at most `n * (2^d - 1)` columns.
pub fn expand_basis(ds: &Dataset, spec: &BasisSpec) -> Result<BasisExpansion> {
    let knots = enumerate_knots(ds, spec)?;
    let d = ds.d();
    let n = ds.n();
    let usable: Vec<usize> = (0..d).filter(|&j| !knots[j].is_empty()).collect();

    // Index of the largest knot <= x, per covariate and row.
    let snapped: Vec<Vec<Option<u32>>> = (0..d)
        .map(|j| {
            let k = &knots[j];
            ds.column(j)
                .iter()
                .map(|&x| k.partition_point(|&t| t <= x).checked_sub(1).map(|p| p as u32))
                .collect()
        })
        .collect();

    let mut candidates = 0usize;
    let mut blocks: Vec<(Vec<usize>, BTreeSet<Vec<u32>>)> = Vec::new();
    for degree in 1..=spec.max_degree.min(usable.len()) {
        for s in combinations(usable.len(), degree) {
            let subset: Vec<usize> = s.into_iter().map(|i| usable[i]).collect();
            let tuples: BTreeSet<Vec<u32>> = (0..n)
                .filter_map(|i| subset.iter().map(|&j| snapped[j][i]).collect::<Option<Vec<u32>>>())
                .collect();
            candidates = candidates.saturating_add(tuples.len());
            blocks.push((subset, tuples));
        }
        if candidates > spec.column_cap {
            return Err(Error::ColumnCap {
                columns: candidates,
                cap: spec.column_cap,
            });
        }
    }

    // Rows at or above each knot, per covariate.
    let main: Vec<Vec<Vec<u32>>> = (0..d)
        .map(|j| {
            let col = ds.column(j);
            knots[j]
                .iter()
                .map(|&t| {
                    (0..n)
                        .filter(|&i| col[i] >= t)
                        .map(|i| i as u32)
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut terms = Vec::new();
    let mut cols: Vec<Vec<u32>> = Vec::new();
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    for (subset, tuples) in &blocks {
        for pos in tuples {
            let mut rows = main[subset[0]][pos[0] as usize].clone();
            for (slot, &j) in subset.iter().enumerate().skip(1) {
                rows = intersect(&rows, &main[j][pos[slot] as usize]);
            }
            let keep = !spec.dedupe || (rows.len() < n && !seen.contains(&rows));
            if keep {
                if spec.dedupe {
                    seen.insert(rows.clone());
                }
                terms.push(Term {
                    factors: subset
                        .iter()
                        .zip(pos)
                        .map(|(&j, &p)| (j, knots[j][p as usize]))
                        .collect(),
                });
                cols.push(rows);
            }
        }
    }
    log::debug!(
        "basis: {} candidate columns, {} kept",
        candidates,
        cols.len()
    );
    Ok(BasisExpansion {
        w: IndicatorMatrix::new(n, cols),
        terms,
        source_dims: d,
    })
}

impl BasisExpansion {
    pub fn n_cols(&self) -> usize {
        self.terms.len()
    }

    /// Applies the stored terms to new covariate rows (row-major).
    pub fn transform_new(&self, x_new: &[Vec<f64>]) -> Result<IndicatorMatrix> {
        if let Some(row) = x_new.iter().find(|r| r.len() != self.source_dims) {
            return Err(Error::DimensionMismatch {
                expected: self.source_dims,
                got: row.len(),
            });
        }
        let cols = self
            .terms
            .iter()
            .map(|t| {
                x_new
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| t.eval(r))
                    .map(|(i, _)| i as u32)
                    .collect()
            })
            .collect();
        Ok(IndicatorMatrix::new(x_new.len(), cols))
    }

    /// Dataset with the same outcome and exposure whose covariates are the
    /// basis columns `W1..Wm`, all tagged binary.
    pub fn to_dataset(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.n() != self.w.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: self.w.n_rows(),
                got: ds.n(),
            });
        }
        let m = self.n_cols();
        let x = (0..m).map(|j| self.w.dense_column(j)).collect();
        let names = (1..=m).map(|j| format!("W{j}")).collect();
        ds.with_covariates(x, vec![ColumnKind::Binary; m], names)
    }

    pub fn write_terms_csv(&self, path: &Path) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut out = std::io::BufWriter::new(file);
        writeln!(out, "term_id,degree,spec").map_err(io_err)?;
        for (id, t) in self.terms.iter().enumerate() {
            writeln!(out, "{},{},{}", id + 1, t.degree(), t.spec_string()).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}
