//! Observation data `{Y, A, X}`, CSV ingestion and fold assignment.
//!
//! Covariates are stored column-major: almost every consumer (solver,
//! balance diagnostics, basis expansion) walks one covariate at a time.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Binary,
    Continuous,
}

impl ColumnKind {
    /// A column is binary iff every value is exactly 0 or 1.
    pub fn infer(values: &[f64]) -> Self {
        if values.iter().all(|&v| v == 0.0 || v == 1.0) {
            ColumnKind::Binary
        } else {
            ColumnKind::Continuous
        }
    }
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnKind::Binary => f.write_str("binary"),
            ColumnKind::Continuous => f.write_str("continuous"),
        }
    }
}

impl FromStr for ColumnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(ColumnKind::Binary),
            "continuous" => Ok(ColumnKind::Continuous),
            other => Err(Error::invalid(format!("unknown column kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<u8>,
    x: Vec<Vec<f64>>,
    kinds: Vec<ColumnKind>,
    names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from columns, validating exposure and binary tags.
    ///
    /// Both exposure classes are not required here: an unexposed-only subset
    /// is a legitimate dataset. Operations that need both classes check it.
    pub fn new(
        y: Vec<f64>,
        a: Vec<u8>,
        x: Vec<Vec<f64>>,
        kinds: Vec<ColumnKind>,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if a.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: a.len(),
            });
        }
        if kinds.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: kinds.len(),
            });
        }
        if names.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: names.len(),
            });
        }
        if let Some((row, &v)) = a.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::ExposureNotBinary {
                row: row + 1,
                value: f64::from(v),
            });
        }
        for (j, col) in x.iter().enumerate() {
            if col.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: col.len(),
                });
            }
            if let Some((row, &v)) = col.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonNumeric {
                    row: row + 1,
                    column: names[j].clone(),
                    value: v.to_string(),
                });
            }
            if kinds[j] == ColumnKind::Binary {
                if let Some((row, &v)) =
                    col.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0)
                {
                    return Err(Error::BinaryColumnViolation {
                        column: names[j].clone(),
                        row: row + 1,
                        value: v,
                    });
                }
            }
        }
        if let Some((row, &v)) = y.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonNumeric {
                row: row + 1,
                column: "outcome".into(),
                value: v.to_string(),
            });
        }
        Ok(Self {
            y,
            a,
            x,
            kinds,
            names,
        })
    }

    /// Like [`Dataset::new`] with kinds inferred and names `X1..Xd`.
    pub fn from_columns(y: Vec<f64>, a: Vec<u8>, x: Vec<Vec<f64>>) -> Result<Self> {
        let kinds = x.iter().map(|c| ColumnKind::infer(c)).collect();
        let names = (1..=x.len()).map(|j| format!("X{j}")).collect();
        Self::new(y, a, x, kinds, names)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.x[j]
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_exposed(&self) -> usize {
        self.a.iter().filter(|&&v| v == 1).count()
    }

    pub fn n_unexposed(&self) -> usize {
        self.n() - self.n_exposed()
    }

    pub fn exposure_prevalence(&self) -> f64 {
        self.n_exposed() as f64 / self.n() as f64
    }

    /// Covariate row `i` as an owned vector.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.iter().map(|c| c[i]).collect()
    }

    /// Fails unless at least one exposed and one unexposed unit are present.
    pub fn require_both_classes(&self) -> Result<()> {
        match self.n_exposed() {
            0 => Err(Error::ConstantExposure { value: 0 }),
            k if k == self.n() => Err(Error::ConstantExposure { value: 1 }),
            _ => Ok(()),
        }
    }

    /// Re-tags column `j`. Tagging a non-{0,1} column binary is an error.
    pub fn set_kind(&mut self, j: usize, kind: ColumnKind) -> Result<()> {
        if kind == ColumnKind::Binary {
            if let Some((row, &v)) = self.x[j]
                .iter()
                .enumerate()
                .find(|(_, &v)| v != 0.0 && v != 1.0)
            {
                return Err(Error::BinaryColumnViolation {
                    column: self.names[j].clone(),
                    row: row + 1,
                    value: v,
                });
            }
        }
        self.kinds[j] = kind;
        Ok(())
    }

    /// Rows selected by index (with repetition allowed), in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            a: rows.iter().map(|&i| self.a[i]).collect(),
            x: self
                .x
                .iter()
                .map(|c| rows.iter().map(|&i| c[i]).collect())
                .collect(),
            kinds: self.kinds.clone(),
            names: self.names.clone(),
        }
    }

    /// Same outcome and covariates, new exposure vector.
    pub fn with_exposure(&self, a: Vec<u8>) -> Result<Dataset> {
        Dataset::new(
            self.y.clone(),
            a,
            self.x.clone(),
            self.kinds.clone(),
            self.names.clone(),
        )
    }

    /// Same outcome and exposure, new covariate block.
    pub fn with_covariates(
        &self,
        x: Vec<Vec<f64>>,
        kinds: Vec<ColumnKind>,
        names: Vec<String>,
    ) -> Result<Dataset> {
        Dataset::new(self.y.clone(), self.a.clone(), x, kinds, names)
    }

    /// Writes the dataset with the given outcome/exposure column names.
    ///
    /// Floats use the shortest representation that parses back to the same
    /// bits, so `load_csv(write_csv(ds)) == ds` whenever kinds are inferable.
    pub fn write_csv(&self, path: &Path, outcome_col: &str, exposure_col: &str) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut out = std::io::BufWriter::new(file);
        let mut header = vec![outcome_col.to_string(), exposure_col.to_string()];
        header.extend(self.names.iter().cloned());
        writeln!(out, "{}", header.join(",")).map_err(io_err)?;
        let mut line = String::new();
        for i in 0..self.n() {
            line.clear();
            line.push_str(&self.y[i].to_string());
            line.push(',');
            line.push_str(&self.a[i].to_string());
            for col in &self.x {
                line.push(',');
                line.push_str(&col[i].to_string());
            }
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Err(Error::MissingValue {
            row,
            column: column.to_string(),
        });
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonNumeric {
            row,
            column: column.to_string(),
            value: s.to_string(),
        }),
    }
}

/// Reads a numeric CSV with a header row. Every column other than the
/// outcome and exposure becomes a covariate, in file order, with its kind
/// inferred by exact membership in {0, 1}.
pub fn load_csv(path: &Path, outcome_col: &str, exposure_col: &str) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let mut seen = HashSet::new();
    for name in &header {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateColumn { name: name.clone() });
        }
    }
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                name: name.to_string(),
            })
    };
    let y_idx = find(outcome_col)?;
    let a_idx = find(exposure_col)?;
    if y_idx == a_idx {
        return Err(Error::invalid("outcome and exposure must be different columns"));
    }
    let cov_idx: Vec<usize> = (0..header.len())
        .filter(|&j| j != y_idx && j != a_idx)
        .collect();

    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut x: Vec<Vec<f64>> = vec![Vec::new(); cov_idx.len()];
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = r + 1;
        y.push(parse_cell(&record[y_idx], row, outcome_col)?);
        let av = parse_cell(&record[a_idx], row, exposure_col)?;
        if av != 0.0 && av != 1.0 {
            return Err(Error::ExposureNotBinary { row, value: av });
        }
        a.push(av as u8);
        for (slot, &j) in x.iter_mut().zip(&cov_idx) {
            slot.push(parse_cell(&record[j], row, &header[j])?);
        }
    }
    let kinds = x.iter().map(|c| ColumnKind::infer(c)).collect();
    let names = cov_idx.iter().map(|&j| header[j].clone()).collect();
    Dataset::new(y, a, x, kinds, names)
}

/// Rows with `A = 0`, in original order.
pub fn subset_unexposed(ds: &Dataset) -> Result<Dataset> {
    let rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.a()[i] == 0).collect();
    if rows.is_empty() {
        return Err(Error::NoUnexposed);
    }
    Ok(ds.select_rows(&rows))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    n_folds: usize,
    seed: u64,
}

impl FoldAssignment {
    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn n_folds(&self) -> usize {
        self.n_folds
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row indices inside fold `k`.
    pub fn held_out(&self, k: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == k)
            .collect()
    }

    /// Row indices outside fold `k`.
    pub fn training(&self, k: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != k)
            .collect()
    }
}

/// Exposure-stratified fold assignment.
///
/// Exposed and unexposed units are shuffled separately and dealt round-robin;
/// the unexposed deal starts where the exposed deal stopped so fold sizes
/// differ by at most one.
pub fn assign_folds(ds: &Dataset, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    assign_folds_for(ds.a(), n_folds, seed)
}

pub(crate) fn assign_folds_for(a: &[u8], n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    let mut exposed: Vec<usize> = (0..a.len()).filter(|&i| a[i] == 1).collect();
    let mut unexposed: Vec<usize> = (0..a.len()).filter(|&i| a[i] == 0).collect();
    let limit = exposed.len().min(unexposed.len());
    if n_folds < 2 || n_folds > limit {
        return Err(Error::invalid(format!(
            "n_folds = {n_folds} must lie in [2, {limit}] (min of exposed/unexposed counts)"
        )));
    }
    let mut rng = rng::stream(seed, rng::STREAM_FOLDS);
    exposed.shuffle(&mut rng);
    unexposed.shuffle(&mut rng);
    let mut fold_of = vec![0usize; a.len()];
    for (pos, &i) in exposed.iter().chain(unexposed.iter()).enumerate() {
        fold_of[i] = pos % n_folds;
    }
    Ok(FoldAssignment {
        fold_of,
        n_folds,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_three_row_file() {
        let f = write_tmp("Y,A,X1\n0,1,1\n1,0,0\n0,1,1\n");
        let ds = load_csv(f.path(), "Y", "A").unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.d(), 1);
        assert_eq!(ds.kinds(), &[ColumnKind::Binary]);
        assert_eq!(ds.a(), &[1, 0, 1]);
        assert_eq!(ds.y(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn half_value_makes_column_continuous() {
        let f = write_tmp("Y,A,X1\n0,1,1\n1,0,0.5\n0,1,1\n");
        let ds = load_csv(f.path(), "Y", "A").unwrap();
        assert_eq!(ds.kinds(), &[ColumnKind::Continuous]);
    }

    #[test]
    fn exposure_two_is_rejected_with_row() {
        let f = write_tmp("Y,A,X1\n0,1,1\n1,2,0\n");
        match load_csv(f.path(), "Y", "A") {
            Err(Error::ExposureNotBinary { row, value }) => {
                assert_eq!(row, 2);
                assert_eq!(value, 2.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn distinct_diagnostics() {
        let missing = std::path::Path::new("/nonexistent/never.csv");
        assert!(matches!(load_csv(missing, "Y", "A"), Err(Error::Io { .. })));
        let f = write_tmp("Y,A,X1\n0,1,1\n");
        assert!(matches!(
            load_csv(f.path(), "Y", "T"),
            Err(Error::MissingColumn { .. })
        ));
        let f = write_tmp("Y,A,X1,X1\n0,1,1,1\n");
        assert!(matches!(
            load_csv(f.path(), "Y", "A"),
            Err(Error::DuplicateColumn { .. })
        ));
        let f = write_tmp("Y,A,X1\n0,1,abc\n");
        match load_csv(f.path(), "Y", "A") {
            Err(Error::NonNumeric { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "X1");
            }
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("Y,A,X1\n0,1,1\n0,,1\n");
        match load_csv(f.path(), "Y", "A") {
            Err(Error::MissingValue { row, column }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "A");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = Dataset::from_columns(
            vec![0.1, -3.3e-7, 2.0 / 3.0],
            vec![1, 0, 1],
            vec![vec![1.0, 0.0, 1.0], vec![std::f64::consts::PI, 1e300, -0.5]],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path, "Y", "A").unwrap();
        let back = load_csv(&path, "Y", "A").unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn binary_override_is_validated() {
        let mut ds =
            Dataset::from_columns(vec![0.0; 3], vec![1, 0, 1], vec![vec![0.0, 1.0, 0.5]]).unwrap();
        assert!(ds.set_kind(0, ColumnKind::Binary).is_err());
        let mut ds =
            Dataset::from_columns(vec![0.0; 3], vec![1, 0, 1], vec![vec![0.0, 1.0, 1.0]]).unwrap();
        ds.set_kind(0, ColumnKind::Continuous).unwrap();
        assert_eq!(ds.kinds()[0], ColumnKind::Continuous);
    }

    #[test]
    fn folds_exact_stratification() {
        let a = vec![1, 0, 1, 0, 1, 0, 1, 0, 1, 0];
        let ds = Dataset::from_columns(vec![0.0; 10], a, vec![]).unwrap();
        let f = assign_folds(&ds, 5, 1).unwrap();
        for k in 0..5 {
            let rows = f.held_out(k);
            let exp = rows.iter().filter(|&&i| ds.a()[i] == 1).count();
            assert_eq!((rows.len(), exp), (2, 1));
        }
        assert_eq!(f, assign_folds(&ds, 5, 1).unwrap());
        assert!(assign_folds(&ds, 11, 1).is_err());
        assert!(assign_folds(&ds, 1, 1).is_err());
        assert_ne!(f.fold_of(), assign_folds(&ds, 5, 2).unwrap().fold_of());
    }

    #[test]
    fn subset_unexposed_filters_in_order() {
        let ds = Dataset::from_columns(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![1, 0, 1, 0],
            vec![vec![0.0, 1.0, 0.0, 1.0]],
        )
        .unwrap();
        let u = subset_unexposed(&ds).unwrap();
        assert_eq!(u.y(), &[2.0, 4.0]);
        assert_eq!(u.n() + ds.n_exposed(), ds.n());

        let zeros = ds.with_exposure(vec![0; 4]).unwrap();
        assert_eq!(subset_unexposed(&zeros).unwrap(), zeros);

        let ones = ds.with_exposure(vec![1; 4]).unwrap();
        assert!(matches!(subset_unexposed(&ones), Err(Error::NoUnexposed)));
    }

    proptest::proptest! {
        #[test]
        fn folds_are_stratified_and_nonempty(
            a in proptest::collection::vec(0u8..2, 20..200),
            k in 2usize..8,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let n1 = a.iter().filter(|&&v| v == 1).count();
            let n0 = a.len() - n1;
            proptest::prop_assume!(k <= n1.min(n0));
            let f = assign_folds_for(&a, k, seed).unwrap();
            for fold in 0..k {
                let rows = f.held_out(fold);
                proptest::prop_assert!(!rows.is_empty());
                let e = rows.iter().filter(|&&i| a[i] == 1).count() as f64;
                let ideal = n1 as f64 / k as f64;
                proptest::prop_assert!((e - ideal).abs() <= 1.0);
            }
        }
    }
}
