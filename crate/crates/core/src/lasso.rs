//! L1-penalized logistic regression for the propensity score.
//!
//! The objective minimized at penalty `lambda` is the mean negative binomial
//! log-likelihood plus `lambda * sum_j |beta_j|`, with the intercept left
//! unpenalized. Continuous covariates are standardized internally (mean 0,
//! population variance 1) so the penalty treats them on a common scale;
//! binary covariates are penalized on their native 0/1 scale. Reported
//! coefficients are always on the original covariate scale.
//!
//! The solver is cyclic coordinate descent on the IRLS quadratic
//! approximation with active-set cycling, sequential strong-rule screening
//! along a path, a full KKT check before declaring convergence, and step
//! halving on the outer iteration so the objective never increases. Once the
//! signs of the active coefficients settle, the inner problem is finished by
//! conjugate gradients on that face, which matters deep in the path where
//! the quadratic is badly conditioned.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{ColumnKind, Dataset, FoldAssignment};
use crate::error::{Error, Result};

/// Probability clip used inside deviance and IRLS weights only.
pub const PROB_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Largest absolute coefficient change (standardized scale) accepted as converged.
    pub tol_coef: f64,
    /// Tolerance of the KKT certificate checked before declaring convergence.
    pub kkt_tol: f64,
    /// Budget of coordinate passes (active or full) per penalty value.
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_coef: 1e-7,
            kkt_tol: 1e-6,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub intercept: f64,
    /// Slopes on the original covariate scale.
    pub coefs: Vec<f64>,
    pub lambda: f64,
    pub n_nonzero: usize,
    pub converged: bool,
    /// Coordinate passes used.
    pub n_iter: usize,
    /// The fitted linear predictor classifies every training unit correctly.
    pub separated: bool,
}

impl LassoFit {
    /// Intercept-only model at the given exposure prevalence.
    pub fn null(d: usize, prevalence: f64, lambda: f64) -> Self {
        Self {
            intercept: logit(prevalence),
            coefs: vec![0.0; d],
            lambda,
            n_nonzero: 0,
            converged: true,
            n_iter: 0,
            separated: false,
        }
    }

    /// `beta_0 + x . beta` on the original scale.
    pub fn linear_predictor(&self, x_row: &[f64]) -> Result<f64> {
        if x_row.len() != self.coefs.len() {
            return Err(Error::DimensionMismatch {
                expected: self.coefs.len(),
                got: x_row.len(),
            });
        }
        Ok(self.intercept
            + self
                .coefs
                .iter()
                .zip(x_row)
                .filter(|(b, _)| **b != 0.0)
                .map(|(b, x)| b * x)
                .sum::<f64>())
    }

    /// Linear predictor for every row of a dataset with matching columns.
    pub fn linear_predictor_all(&self, ds: &Dataset) -> Result<Vec<f64>> {
        if ds.d() != self.coefs.len() {
            return Err(Error::DimensionMismatch {
                expected: self.coefs.len(),
                got: ds.d(),
            });
        }
        let mut eta = vec![self.intercept; ds.n()];
        for (j, &b) in self.coefs.iter().enumerate() {
            if b != 0.0 {
                for (e, x) in eta.iter_mut().zip(ds.column(j)) {
                    *e += b * x;
                }
            }
        }
        Ok(eta)
    }
}

pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Probability from a linear predictor, kept strictly inside (0, 1).
///
/// `expit` rounds to exactly 0 or 1 for |eta| beyond roughly 37 / 745; those
/// values are moved to the nearest representable interior probability.
pub fn prob_from_eta(eta: f64) -> f64 {
    let p = expit(eta);
    if p >= 1.0 {
        1.0 - f64::EPSILON / 2.0
    } else if p <= 0.0 {
        f64::MIN_POSITIVE
    } else {
        p
    }
}

/// Propensity score `expit(beta_0 + x . beta)` for one covariate row.
pub fn predict(fit: &LassoFit, x_row: &[f64]) -> Result<f64> {
    Ok(prob_from_eta(fit.linear_predictor(x_row)?))
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Binomial deviance contribution `-2 log L_i` with the probability clipped.
pub fn unit_deviance(a: f64, p: f64) -> f64 {
    let p = clip(p);
    -2.0 * (a * p.ln() + (1.0 - a) * (1.0 - p).ln())
}

// ---------------------------------------------------------------------------
// Internal design representation
//
// Every column is centered (binary: by its prevalence, continuous: by its
// mean, then scaled to unit variance). Binary columns stay sparse: the
// centering term is carried as a scalar multiple of the IRLS weight vector in
// `Residual`, so an update touches only the rows holding a 1.

#[derive(Debug, Clone)]
enum Column {
    /// Binary column: rows holding a 1, centered by `mu`.
    Sparse { ones: Vec<u32>, mu: f64 },
    /// Standardized continuous values.
    Dense(Vec<f64>),
    /// Constant column: can never enter the model.
    Empty,
}

impl Column {
    fn is_empty(&self) -> bool {
        matches!(self, Column::Empty)
    }

    /// `(sum_i x_i v_i, sum_i x_i w_i)` over the raw (uncentered) entries.
    fn raw_dots(&self, v: &[f64], w: &[f64]) -> (f64, f64) {
        match self {
            Column::Sparse { ones, .. } => ones.iter().fold((0.0, 0.0), |(sv, sw), &i| {
                let i = i as usize;
                (sv + v[i], sw + w[i])
            }),
            Column::Dense(x) => x
                .iter()
                .zip(v)
                .zip(w)
                .fold((0.0, 0.0), |(sv, sw), ((xi, vi), wi)| (sv + xi * vi, sw + xi * wi)),
            Column::Empty => (0.0, 0.0),
        }
    }

    fn raw_dot(&self, v: &[f64]) -> f64 {
        match self {
            Column::Sparse { ones, .. } => ones.iter().map(|&i| v[i as usize]).sum(),
            Column::Dense(x) => x.iter().zip(v).map(|(a, b)| a * b).sum(),
            Column::Empty => 0.0,
        }
    }

    /// Centering constant subtracted from the raw entries.
    fn mu(&self) -> f64 {
        match self {
            Column::Sparse { mu, .. } => *mu,
            _ => 0.0,
        }
    }
}

/// Weighted working residual, stored as `r + shift * w`.
struct Residual {
    r: Vec<f64>,
    shift: f64,
    sum_r: f64,
}

/// Per-column quantities for one IRLS iteration.
#[derive(Clone, Copy, Default)]
struct ColWeights {
    /// `sum_i x_i w_i` over raw entries.
    raw_w: f64,
    /// `sum_i w_i (x_i - mu)^2`.
    xv: f64,
}

impl Residual {
    fn total(&self, sum_w: f64) -> f64 {
        self.sum_r + self.shift * sum_w
    }

    /// Gradient of the quadratic model along a centered column plus its
    /// weight summaries.
    fn column_gradient(&self, col: &Column, w: &[f64], sum_w: f64) -> (f64, ColWeights) {
        let (sv, sw) = col.raw_dots(&self.r, w);
        match col {
            Column::Sparse { mu, .. } => {
                let g = sv + self.shift * sw - mu * self.total(sum_w);
                let xv = sw * (1.0 - mu) * (1.0 - mu) + (sum_w - sw) * mu * mu;
                (g, ColWeights { raw_w: sw, xv })
            }
            Column::Dense(x) => {
                let xv = x.iter().zip(w).map(|(xi, wi)| wi * xi * xi).sum();
                (sv + self.shift * sw, ColWeights { raw_w: sw, xv })
            }
            Column::Empty => (0.0, ColWeights::default()),
        }
    }

    /// Gradient when the column's weight summaries are already known.
    fn gradient_known(&self, col: &Column, cw: &ColWeights, sum_w: f64) -> f64 {
        let sv = col.raw_dot(&self.r);
        sv + self.shift * cw.raw_w - col.mu() * self.total(sum_w)
    }

    /// Residual after the column's coefficient moves by `delta`.
    fn step(&mut self, col: &Column, delta: f64, cw: &ColWeights, w: &[f64]) {
        match col {
            Column::Sparse { ones, mu } => {
                for &i in ones {
                    let i = i as usize;
                    self.r[i] -= delta * w[i];
                }
                self.shift += delta * mu;
            }
            Column::Dense(x) => {
                for ((ri, wi), xi) in self.r.iter_mut().zip(w).zip(x) {
                    *ri -= delta * wi * xi;
                }
            }
            Column::Empty => return,
        }
        self.sum_r -= delta * cw.raw_w;
    }

    /// Residual after the intercept moves by `delta`.
    fn step_intercept(&mut self, delta: f64) {
        self.shift -= delta;
    }
}

/// Standardized view of (a row subset of) a dataset.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    n: usize,
    cols: Vec<Column>,
    center: Vec<f64>,
    scale: Vec<f64>,
    a: Vec<f64>,
}

impl Design {
    pub(crate) fn new(ds: &Dataset, rows: Option<&[usize]>) -> Self {
        let all: Vec<usize>;
        let rows = match rows {
            Some(r) => r,
            None => {
                all = (0..ds.n()).collect();
                &all
            }
        };
        let n = rows.len();
        let mut cols = Vec::with_capacity(ds.d());
        let mut center = Vec::with_capacity(ds.d());
        let mut scale = Vec::with_capacity(ds.d());
        for (j, kind) in ds.kinds().iter().enumerate() {
            let src = ds.column(j);
            match kind {
                ColumnKind::Binary => {
                    let ones: Vec<u32> = rows
                        .iter()
                        .enumerate()
                        .filter(|(_, &i)| src[i] == 1.0)
                        .map(|(r, _)| r as u32)
                        .collect();
                    let mu = ones.len() as f64 / n as f64;
                    scale.push(1.0);
                    if ones.is_empty() || ones.len() == n {
                        center.push(0.0);
                        cols.push(Column::Empty);
                    } else {
                        center.push(mu);
                        cols.push(Column::Sparse { ones, mu });
                    }
                }
                ColumnKind::Continuous => {
                    let mean = rows.iter().map(|&i| src[i]).sum::<f64>() / n as f64;
                    let var =
                        rows.iter().map(|&i| (src[i] - mean).powi(2)).sum::<f64>() / n as f64;
                    let sd = var.sqrt();
                    center.push(mean);
                    if sd > 0.0 && sd.is_finite() {
                        scale.push(sd);
                        cols.push(Column::Dense(
                            rows.iter().map(|&i| (src[i] - mean) / sd).collect(),
                        ));
                    } else {
                        scale.push(1.0);
                        cols.push(Column::Empty);
                    }
                }
            }
        }
        let a = rows.iter().map(|&i| f64::from(ds.a()[i])).collect();
        Self {
            n,
            cols,
            center,
            scale,
            a,
        }
    }

    fn p(&self) -> usize {
        self.cols.len()
    }

    fn prevalence(&self) -> f64 {
        self.a.iter().sum::<f64>() / self.n as f64
    }

    /// `sum_i x~_ij v_i` for every column, given `sum_i v_i`.
    fn centered_dots(&self, v: &[f64]) -> Vec<f64> {
        let total: f64 = v.iter().sum();
        self.cols
            .iter()
            .map(|c| c.raw_dot(v) - c.mu() * total)
            .collect()
    }

    /// Absolute null-model gradient per column; its max is lambda_max.
    fn null_gradient(&self) -> Vec<f64> {
        let abar = self.prevalence();
        let r: Vec<f64> = self.a.iter().map(|a| (a - abar) / self.n as f64).collect();
        self.centered_dots(&r).into_iter().map(f64::abs).collect()
    }

    fn to_original(&self, st: &StdState) -> (f64, Vec<f64>) {
        let mut b0 = st.b0;
        let coefs = st
            .beta
            .iter()
            .enumerate()
            .map(|(j, &b)| {
                if b == 0.0 {
                    0.0
                } else {
                    b0 -= b * self.center[j] / self.scale[j];
                    b / self.scale[j]
                }
            })
            .collect();
        (b0, coefs)
    }

    fn from_original(&self, fit: &LassoFit) -> StdState {
        let mut b0 = fit.intercept;
        let beta: Vec<f64> = fit
            .coefs
            .iter()
            .enumerate()
            .map(|(j, &b)| {
                if b == 0.0 || self.cols[j].is_empty() {
                    0.0
                } else {
                    b0 += b * self.center[j];
                    b * self.scale[j]
                }
            })
            .collect();
        let mut st = StdState {
            b0,
            beta,
            eta: Vec::new(),
        };
        st.eta = self.eta(&st);
        st
    }

    fn eta(&self, st: &StdState) -> Vec<f64> {
        let mut offset = st.b0;
        let mut eta = vec![0.0; self.n];
        for (c, &b) in self.cols.iter().zip(&st.beta) {
            if b == 0.0 {
                continue;
            }
            match c {
                Column::Sparse { ones, mu } => {
                    offset -= b * mu;
                    for &i in ones {
                        eta[i as usize] += b;
                    }
                }
                Column::Dense(x) => {
                    for (e, xi) in eta.iter_mut().zip(x) {
                        *e += b * xi;
                    }
                }
                Column::Empty => {}
            }
        }
        eta.iter_mut().for_each(|e| *e += offset);
        eta
    }

    fn objective(&self, st: &StdState, lambda: f64) -> f64 {
        let nll = st
            .eta
            .iter()
            .zip(&self.a)
            .map(|(&e, &a)| softplus(e) - a * e)
            .sum::<f64>()
            / self.n as f64;
        nll + lambda * st.beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    /// Gradient of the mean log-likelihood: `(sum_i r_i, sum_i x~_ij r_i)`
    /// with `r_i = (a_i - p_i) / n`.
    fn gradient(&self, eta: &[f64]) -> (f64, Vec<f64>) {
        let r: Vec<f64> = eta
            .iter()
            .zip(&self.a)
            .map(|(&e, &a)| (a - expit(e)) / self.n as f64)
            .collect();
        (r.iter().sum(), self.centered_dots(&r))
    }

    fn kkt_holds(&self, st: &StdState, g0: f64, grad: &[f64], lambda: f64, tol: f64) -> bool {
        if g0.abs() > tol {
            return false;
        }
        grad.iter().zip(&st.beta).zip(&self.cols).all(|((&g, &b), c)| {
            if c.is_empty() {
                true
            } else if b == 0.0 {
                g.abs() <= lambda + tol
            } else {
                (g - lambda * b.signum()).abs() <= tol
            }
        })
    }

    fn null_state(&self) -> StdState {
        let b0 = logit(self.prevalence());
        StdState {
            b0,
            beta: vec![0.0; self.p()],
            eta: vec![b0; self.n],
        }
    }
}

#[derive(Debug, Clone)]
struct StdState {
    b0: f64,
    beta: Vec<f64>,
    eta: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct SolveStats {
    converged: bool,
    passes: usize,
}

fn soft_threshold(u: f64, t: f64) -> f64 {
    if u > t {
        u - t
    } else if u < -t {
        u + t
    } else {
        0.0
    }
}

/// Solves one penalty value in place. `screen` restricts the columns the inner
/// loop considers; the final KKT check always covers every column and adds
/// violators back. Returns the full gradient at the solution.
fn solve(
    design: &Design,
    lambda: f64,
    st: &mut StdState,
    screen: Option<&[bool]>,
    opts: &SolverOptions,
    mut trace: Option<&mut Vec<f64>>,
) -> (SolveStats, f64, Vec<f64>) {
    let n = design.n;
    let p = design.p();
    let inv_n = 1.0 / n as f64;
    let mut candidate: Vec<bool> = match screen {
        Some(s) => s.to_vec(),
        None => vec![true; p],
    };
    for j in 0..p {
        if st.beta[j] != 0.0 {
            candidate[j] = true;
        }
        if design.cols[j].is_empty() {
            candidate[j] = false;
        }
    }
    let mut active: Vec<usize> = (0..p).filter(|&j| st.beta[j] != 0.0).collect();
    let mut in_active = vec![false; p];
    for &j in &active {
        in_active[j] = true;
    }

    let mut w = vec![0.0; n];
    let mut res = Residual {
        r: vec![0.0; n],
        shift: 0.0,
        sum_r: 0.0,
    };
    let mut cw = vec![ColWeights::default(); p];
    let mut passes = 0usize;
    let mut obj = design.objective(st, lambda);
    if let Some(t) = trace.as_deref_mut() {
        t.push(obj);
    }
    let tol = opts.tol_coef;
    // Early IRLS steps only need a rough inner solve; the tolerance tightens
    // with the size of the last outer step and the KKT check has the final say.
    let mut inner_tol = 1e-3_f64.max(tol);

    loop {
        // IRLS weights and weighted working residual at the current point.
        for i in 0..n {
            let pi = clip(expit(st.eta[i]));
            w[i] = pi * (1.0 - pi) * inv_n;
            res.r[i] = (design.a[i] - pi) * inv_n;
        }
        res.shift = 0.0;
        res.sum_r = res.r.iter().sum();
        let sum_w: f64 = w.iter().sum();
        for &j in &active {
            cw[j] = res.column_gradient(&design.cols[j], &w, sum_w).1;
        }
        let old_b0 = st.b0;
        let old_beta = st.beta.clone();

        // Inner coordinate descent on the quadratic model.
        loop {
            let mut stable = 0usize;
            loop {
                let d0 = res.total(sum_w) / sum_w;
                st.b0 += d0;
                res.step_intercept(d0);
                let mut max_d = d0.abs();
                let mut pattern_changed = false;
                for &j in &active {
                    let col = &design.cols[j];
                    let bj = st.beta[j];
                    let u = res.gradient_known(col, &cw[j], sum_w) + cw[j].xv * bj;
                    let nb = soft_threshold(u, lambda) / cw[j].xv;
                    let d = nb - bj;
                    if d != 0.0 {
                        res.step(col, d, &cw[j], &w);
                        st.beta[j] = nb;
                        max_d = max_d.max(d.abs());
                        pattern_changed |= nb.signum() != bj.signum();
                    }
                }
                passes += 1;
                if max_d < inner_tol || passes >= opts.max_iter {
                    break;
                }
                stable = if pattern_changed { 0 } else { stable + 1 };
                if stable >= 2 {
                    // Coordinate descent crawls along ill-conditioned
                    // directions; once the signs settle, solve the smooth
                    // problem on the current face by conjugate gradients.
                    passes += face_cg(design, &active, st, &mut res, &w, lambda, inner_tol);
                    stable = 0;
                }
            }
            let mut added = false;
            for j in 0..p {
                if candidate[j] && !in_active[j] {
                    let (g, weights) = res.column_gradient(&design.cols[j], &w, sum_w);
                    if g.abs() > lambda {
                        in_active[j] = true;
                        active.push(j);
                        cw[j] = weights;
                        added = true;
                    }
                }
            }
            passes += 1;
            if !added || passes >= opts.max_iter {
                break;
            }
        }

        // Step halving keeps the true objective monotone.
        let new_b0 = st.b0;
        let new_beta = st.beta.clone();
        st.eta = design.eta(st);
        let mut new_obj = design.objective(st, lambda);
        let mut step = 1.0;
        let slack = 1e-13 * obj.abs().max(1.0);
        while new_obj > obj + slack && step > 1e-10 {
            step *= 0.5;
            st.b0 = old_b0 + step * (new_b0 - old_b0);
            for j in 0..p {
                st.beta[j] = old_beta[j] + step * (new_beta[j] - old_beta[j]);
            }
            st.eta = design.eta(st);
            new_obj = design.objective(st, lambda);
        }
        if new_obj > obj + slack {
            st.b0 = old_b0;
            st.beta.clone_from(&old_beta);
            st.eta = design.eta(st);
            new_obj = obj;
        }
        obj = new_obj;
        if let Some(t) = trace.as_deref_mut() {
            t.push(obj);
        }
        for &j in &active {
            if st.beta[j] == 0.0 {
                in_active[j] = false;
            }
        }
        active.retain(|&j| in_active[j]);

        let max_change = st
            .beta
            .iter()
            .zip(&old_beta)
            .map(|(a, b)| (a - b).abs())
            .fold((st.b0 - old_b0).abs(), f64::max);

        inner_tol = (0.1 * max_change).clamp(tol, inner_tol);
        if (max_change < tol && inner_tol <= tol) || passes >= opts.max_iter {
            let (g0, grad) = design.gradient(&st.eta);
            passes += 1;
            let converged = design.kkt_holds(st, g0, &grad, lambda, opts.kkt_tol);
            if converged || passes >= opts.max_iter {
                return (SolveStats { converged, passes }, g0, grad);
            }
            for j in 0..p {
                if !design.cols[j].is_empty() && grad[j].abs() > lambda {
                    candidate[j] = true;
                }
            }
        }
    }
}

/// Conjugate gradients on the quadratic model restricted to the intercept and
/// the nonzero active coefficients, holding their signs fixed. Stops early at
/// the first sign crossing (that coefficient is set to zero). Leaves `res`
/// consistent with the new coefficients and returns the iterations used.
fn face_cg(
    design: &Design,
    active: &[usize],
    st: &mut StdState,
    res: &mut Residual,
    w: &[f64],
    lambda: f64,
    tol: f64,
) -> usize {
    let n = design.n;
    let free: Vec<usize> = active.iter().copied().filter(|&j| st.beta[j] != 0.0).collect();
    let sign: Vec<f64> = free.iter().map(|&j| st.beta[j].signum()).collect();
    // Materialized residual.
    let mut r: Vec<f64> = res.r.iter().zip(w).map(|(ri, wi)| ri + res.shift * wi).collect();
    let cols = &design.cols;

    // Negative gradient of the face objective; slot 0 is the intercept.
    let neg_grad = |v: &[f64]| -> Vec<f64> {
        let total: f64 = v.iter().sum();
        let mut g = Vec::with_capacity(free.len() + 1);
        g.push(total);
        for (&j, s) in free.iter().zip(&sign) {
            g.push(cols[j].raw_dot(v) - cols[j].mu() * total - lambda * s);
        }
        g
    };
    let mut g = neg_grad(&r);
    let mut dir = g.clone();
    let mut gg: f64 = g.iter().map(|x| x * x).sum();
    let mut u = vec![0.0; n];
    let mut q = vec![0.0; n];
    let max_iter = 4 * (free.len() + 1).min(250);
    let mut iters = 0;
    while iters < max_iter {
        iters += 1;
        // u = X~ dir (with intercept), q = w * u.
        let mut offset = dir[0];
        u.iter_mut().for_each(|x| *x = 0.0);
        for (k, &j) in free.iter().enumerate() {
            let dj = dir[k + 1];
            match &cols[j] {
                Column::Sparse { ones, mu } => {
                    offset -= dj * mu;
                    for &i in ones {
                        u[i as usize] += dj;
                    }
                }
                Column::Dense(x) => {
                    for (ui, xi) in u.iter_mut().zip(x) {
                        *ui += dj * xi;
                    }
                }
                Column::Empty => {}
            }
        }
        let mut curv = 0.0;
        for i in 0..n {
            u[i] += offset;
            q[i] = w[i] * u[i];
            curv += q[i] * u[i];
        }
        if !(curv > 0.0) {
            break;
        }
        let mut alpha = gg / curv;
        let mut crossing = None;
        for (k, &j) in free.iter().enumerate() {
            let dj = dir[k + 1];
            if dj * sign[k] < 0.0 {
                let a = -st.beta[j] / dj;
                if a < alpha {
                    alpha = a;
                    crossing = Some(j);
                }
            }
        }
        st.b0 += alpha * dir[0];
        let mut max_step = (alpha * dir[0]).abs();
        for (k, &j) in free.iter().enumerate() {
            let step = alpha * dir[k + 1];
            st.beta[j] += step;
            max_step = max_step.max(step.abs());
        }
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= alpha * qi;
        }
        if let Some(j) = crossing {
            st.beta[j] = 0.0;
            break;
        }
        if max_step < 0.1 * tol {
            break;
        }
        // Hessian-vector product from q, then the usual recurrences.
        let hq = {
            let total: f64 = q.iter().sum();
            let mut h = Vec::with_capacity(free.len() + 1);
            h.push(total);
            for &j in &free {
                h.push(cols[j].raw_dot(&q) - cols[j].mu() * total);
            }
            h
        };
        for (gk, hk) in g.iter_mut().zip(&hq) {
            *gk -= alpha * hk;
        }
        let gg_new: f64 = g.iter().map(|x| x * x).sum();
        let beta_cg = gg_new / gg;
        gg = gg_new;
        for (dk, gk) in dir.iter_mut().zip(&g) {
            *dk = gk + beta_cg * *dk;
        }
    }
    // Rebuild the residual from scratch so round-off does not accumulate.
    let _ = &mut g;
    res.r = r;
    res.shift = 0.0;
    res.sum_r = res.r.iter().sum();
    iters
}

fn separated(design: &Design, eta: &[f64]) -> bool {
    eta.iter()
        .zip(&design.a)
        .all(|(&e, &a)| (a == 1.0 && e > 0.0) || (a == 0.0 && e < 0.0))
}

fn finish(design: &Design, st: &StdState, lambda: f64, stats: SolveStats) -> LassoFit {
    let (intercept, coefs) = design.to_original(st);
    let n_nonzero = coefs.iter().filter(|&&b| b != 0.0).count();
    let sep = separated(design, &st.eta);
    if sep {
        log::warn!("complete separation at lambda = {lambda:.3e}");
    }
    LassoFit {
        intercept,
        coefs,
        lambda,
        n_nonzero,
        converged: stats.converged,
        n_iter: stats.passes,
        separated: sep,
    }
}

// ---------------------------------------------------------------------------
// Public operations

/// Smallest penalty at which the intercept-only model satisfies the KKT
/// conditions: `max_j |sum_i x~_ij (a_i - abar)| / n` over standardized columns.
pub fn lambda_max(ds: &Dataset) -> Result<f64> {
    ds.require_both_classes()?;
    let design = Design::new(ds, None);
    Ok(design.null_gradient().into_iter().fold(0.0, f64::max))
}

/// Geometric grid from `lmax` down to `ratio * lmax`.
pub fn make_lambda_grid(lmax: f64, len: usize, ratio: f64) -> Result<Vec<f64>> {
    if !(lmax > 0.0 && lmax.is_finite()) {
        return Err(Error::invalid(format!("lambda_max must be positive, got {lmax}")));
    }
    if len < 2 {
        return Err(Error::invalid(format!("grid length must be >= 2, got {len}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let step = ratio.ln() / (len - 1) as f64;
    let mut grid: Vec<f64> = (0..len).map(|l| lmax * (step * l as f64).exp()).collect();
    grid[0] = lmax;
    grid[len - 1] = ratio * lmax;
    Ok(grid)
}

/// Penalized objective of `(intercept, coefs)` on `ds` at `lambda`, using the
/// same internal standardization as the solver.
pub fn penalized_objective(ds: &Dataset, intercept: f64, coefs: &[f64], lambda: f64) -> f64 {
    let design = Design::new(ds, None);
    let fit = LassoFit {
        intercept,
        coefs: coefs.to_vec(),
        lambda,
        n_nonzero: 0,
        converged: false,
        n_iter: 0,
        separated: false,
    };
    let st = design.from_original(&fit);
    design.objective(&st, lambda)
}

pub fn fit_at_lambda(ds: &Dataset, lambda: f64, warm: Option<&LassoFit>) -> Result<LassoFit> {
    fit_at_lambda_with(ds, lambda, warm, &SolverOptions::default())
}

pub fn fit_at_lambda_with(
    ds: &Dataset,
    lambda: f64,
    warm: Option<&LassoFit>,
    opts: &SolverOptions,
) -> Result<LassoFit> {
    Ok(fit_at_lambda_traced(ds, lambda, warm, opts)?.0)
}

/// As [`fit_at_lambda_with`], also returning the objective after every outer
/// (IRLS) iteration, starting with the initial point.
pub fn fit_at_lambda_traced(
    ds: &Dataset,
    lambda: f64,
    warm: Option<&LassoFit>,
    opts: &SolverOptions,
) -> Result<(LassoFit, Vec<f64>)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    ds.require_both_classes()?;
    let design = Design::new(ds, None);
    let mut st = match warm {
        Some(fit) => {
            if fit.coefs.len() != ds.d() {
                return Err(Error::DimensionMismatch {
                    expected: ds.d(),
                    got: fit.coefs.len(),
                });
            }
            design.from_original(fit)
        }
        None => design.null_state(),
    };
    let mut trace = Vec::new();
    let lmax = design.null_gradient().into_iter().fold(0.0, f64::max);
    if lambda >= lmax {
        // The intercept-only model is the exact solution; solving would only
        // add round-off sized slopes.
        let null = design.null_state();
        trace.push(design.objective(&st, lambda));
        trace.push(design.objective(&null, lambda));
        let stats = SolveStats {
            converged: true,
            passes: 0,
        };
        return Ok((finish(&design, &null, lambda, stats), trace));
    }
    let (stats, _, _) = solve(&design, lambda, &mut st, None, opts, Some(&mut trace));
    if !stats.converged {
        log::warn!("lasso did not converge at lambda = {lambda:.3e} after {} passes", stats.passes);
    }
    Ok((finish(&design, &st, lambda, stats), trace))
}

/// Fits every grid value on one design with warm starts and strong-rule
/// screening. Index 0 is the intercept-only anchor.
fn fit_grid(design: &Design, grid: &[f64], opts: &SolverOptions) -> Vec<LassoFit> {
    let mut st = design.null_state();
    let mut fits = Vec::with_capacity(grid.len());
    fits.push(finish(
        design,
        &st,
        grid[0],
        SolveStats {
            converged: true,
            passes: 0,
        },
    ));
    let (_, mut grad) = design.gradient(&st.eta);
    let mut prev: Option<StdState> = None;
    for l in 1..grid.len() {
        let lambda = grid[l];
        let cut = 2.0 * lambda - grid[l - 1];
        let screen: Vec<bool> = grad.iter().map(|g| g.abs() >= cut).collect();
        let before = st.clone();
        if let Some(p) = &prev {
            extrapolate(design, lambda, &mut st, p);
        }
        let (stats, _, g) = solve(design, lambda, &mut st, Some(&screen), opts, None);
        if !stats.converged {
            log::warn!(
                "lasso path: no convergence at lambda = {lambda:.3e} after {} passes",
                stats.passes
            );
        }
        grad = g;
        fits.push(finish(design, &st, lambda, stats));
        prev = Some(before);
    }
    fits
}

/// Replaces the warm start by a linear extrapolation along the (geometric)
/// path when that lowers the objective. Deep in the path the coefficients grow
/// steadily as the penalty shrinks, and a plain warm start lags behind.
fn extrapolate(design: &Design, lambda: f64, st: &mut StdState, prev: &StdState) {
    let beta: Vec<f64> = st
        .beta
        .iter()
        .zip(&prev.beta)
        .map(|(&b, &p)| {
            let e = 2.0 * b - p;
            if b != 0.0 && e.signum() == b.signum() {
                e
            } else {
                b
            }
        })
        .collect();
    let mut cand = StdState {
        b0: 2.0 * st.b0 - prev.b0,
        beta,
        eta: Vec::new(),
    };
    cand.eta = design.eta(&cand);
    if design.objective(&cand, lambda) < design.objective(st, lambda) {
        *st = cand;
    }
}

#[derive(Debug, Clone)]
pub struct LassoPath {
    pub lambdas: Vec<f64>,
    /// Full-data fits, one per penalty value.
    pub fits: Vec<LassoFit>,
    /// Mean held-out binomial deviance per penalty value.
    pub cv_deviance: Vec<f64>,
    pub cv_se: Vec<f64>,
    pub lambda_cv_index: usize,
    /// `oof_pred[l][i]`: out-of-fold probability for unit `i` at `lambdas[l]`.
    pub oof_pred: Vec<Vec<f64>>,
    pub n_folds: usize,
}

impl LassoPath {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn lambda_cv(&self) -> f64 {
        self.lambdas[self.lambda_cv_index]
    }

    pub fn oof_column(&self, l: usize) -> &[f64] {
        &self.oof_pred[l]
    }

    /// FNV-1a hash over the bits of every number in the path.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (l, fit) in self.fits.iter().enumerate() {
            eat(self.lambdas[l]);
            eat(fit.intercept);
            fit.coefs.iter().for_each(|&c| eat(c));
            eat(self.cv_deviance[l]);
            self.oof_pred[l].iter().for_each(|&p| eat(p));
        }
        h
    }

    /// Writes `lambda,intercept,n_nonzero,cv_deviance,cv_se[,coef columns]`.
    pub fn write_csv(&self, path: &Path, coef_names: Option<&[String]>) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        let mut header = String::from("lambda,intercept,n_nonzero,cv_deviance,cv_se,is_lambda_cv");
        if let Some(names) = coef_names {
            for name in names {
                header.push(',');
                header.push_str(name);
            }
        }
        writeln!(out, "{header}").map_err(io_err)?;
        for (l, fit) in self.fits.iter().enumerate() {
            let mut line = format!(
                "{},{},{},{},{},{}",
                self.lambdas[l],
                fit.intercept,
                fit.n_nonzero,
                self.cv_deviance[l],
                self.cv_se[l],
                u8::from(l == self.lambda_cv_index)
            );
            if coef_names.is_some() {
                for c in &fit.coefs {
                    line.push(',');
                    line.push_str(&c.to_string());
                }
            }
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

pub fn fit_path(ds: &Dataset, grid: &[f64], folds: &FoldAssignment) -> Result<LassoPath> {
    fit_path_with(ds, grid, folds, &SolverOptions::default())
}

/// Full-data path plus per-fold refits for out-of-fold predictions and CV.
pub fn fit_path_with(
    ds: &Dataset,
    grid: &[f64],
    folds: &FoldAssignment,
    opts: &SolverOptions,
) -> Result<LassoPath> {
    ds.require_both_classes()?;
    if grid.is_empty() {
        return Err(Error::invalid("empty lambda grid"));
    }
    if grid.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(Error::invalid("lambda grid values must be finite and >= 0"));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("lambda grid must be strictly decreasing"));
    }
    if folds.fold_of().len() != ds.n() {
        return Err(Error::DimensionMismatch {
            expected: ds.n(),
            got: folds.fold_of().len(),
        });
    }
    let k_folds = folds.n_folds();
    let mut fold_rows = Vec::with_capacity(k_folds);
    for k in 0..k_folds {
        let held = folds.held_out(k);
        let train = folds.training(k);
        for (rows, _) in [(&held, "held-out"), (&train, "training")] {
            let exposed = rows.iter().filter(|&&i| ds.a()[i] == 1).count();
            if exposed == 0 {
                return Err(Error::FoldMissingClass {
                    fold: k,
                    class: "exposed",
                });
            }
            if exposed == rows.len() {
                return Err(Error::FoldMissingClass {
                    fold: k,
                    class: "unexposed",
                });
            }
        }
        fold_rows.push((held, train));
    }

    let full_design = Design::new(ds, None);
    let fits = fit_grid(&full_design, grid, opts);

    // Per-fold refits: (held-out rows, per-lambda held-out probabilities).
    let fold_preds: Vec<Vec<Vec<f64>>> = fold_rows
        .par_iter()
        .map(|(held, train)| {
            let design = Design::new(ds, Some(train));
            let fold_fits = fit_grid(&design, grid, opts);
            let held_ds = ds.select_rows(held);
            fold_fits
                .iter()
                .map(|fit| {
                    fit.linear_predictor_all(&held_ds)
                        .expect("fold design has matching columns")
                        .into_iter()
                        .map(prob_from_eta)
                        .collect()
                })
                .collect()
        })
        .collect();

    let n = ds.n();
    let n_lambda = grid.len();
    let mut oof_pred = vec![vec![0.0; n]; n_lambda];
    let mut fold_dev = vec![vec![0.0; k_folds]; n_lambda];
    for (k, ((held, _), preds)) in fold_rows.iter().zip(&fold_preds).enumerate() {
        for l in 0..n_lambda {
            let mut dev = 0.0;
            for (pos, &i) in held.iter().enumerate() {
                let p = preds[l][pos];
                oof_pred[l][i] = p;
                dev += unit_deviance(f64::from(ds.a()[i]), p);
            }
            fold_dev[l][k] = dev / held.len() as f64;
        }
    }
    let fold_weight: Vec<f64> = fold_rows
        .iter()
        .map(|(held, _)| held.len() as f64 / n as f64)
        .collect();
    let mut cv_deviance = Vec::with_capacity(n_lambda);
    let mut cv_se = Vec::with_capacity(n_lambda);
    for devs in &fold_dev {
        let mean: f64 = devs.iter().zip(&fold_weight).map(|(d, w)| d * w).sum();
        let var: f64 = devs
            .iter()
            .zip(&fold_weight)
            .map(|(d, w)| w * (d - mean).powi(2))
            .sum();
        cv_deviance.push(mean);
        cv_se.push((var / (k_folds as f64 - 1.0)).sqrt());
    }
    let lambda_cv_index = argmin_first(&cv_deviance);

    Ok(LassoPath {
        lambdas: grid.to_vec(),
        fits,
        cv_deviance,
        cv_se,
        lambda_cv_index,
        oof_pred,
        n_folds: k_folds,
    })
}

/// Index of the smallest value; ties resolve to the earliest index, i.e. the
/// larger penalty. NaN entries never win.
pub(crate) fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] || v[best].is_nan() {
            best = i;
        }
    }
    best
}
