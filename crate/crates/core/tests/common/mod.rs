//! Independent test-side oracles shared by the integration tests.
#![allow(dead_code)]

use pslab::dataset::{ColumnKind, Dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Mixed binary/continuous instance with a sparse logistic signal.
pub fn instance(seed: u64, n: usize, d: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = if j % 2 == 0 {
            (0..n).map(|_| rng.random::<f64>() * 4.0 - 1.0).collect()
        } else {
            (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect()
        };
        x.push(col);
    }
    let coef: Vec<f64> = (0..d)
        .map(|j| if j < 4 { rng.random::<f64>() - 0.5 } else { 0.0 })
        .collect();
    let a: Vec<u8> = (0..n)
        .map(|i| {
            let eta: f64 = -0.3 + (0..d).map(|j| coef[j] * x[j][i]).sum::<f64>();
            u8::from(rng.random_bool(expit(eta)))
        })
        .collect();
    Dataset::from_columns(vec![0.0; n], a, x).unwrap()
}

/// Standardized design used by the objective: continuous columns centered
/// and scaled by the population SD, binary columns left as they are.
pub struct StdDesign {
    pub n: usize,
    pub cols: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub a: Vec<f64>,
}

impl StdDesign {
    pub fn new(ds: &Dataset) -> Self {
        let n = ds.n();
        let mut cols = Vec::new();
        let mut mean = Vec::new();
        let mut sd = Vec::new();
        for j in 0..ds.d() {
            let c = ds.column(j);
            match ds.kinds()[j] {
                ColumnKind::Binary => {
                    cols.push(c.to_vec());
                    mean.push(0.0);
                    sd.push(1.0);
                }
                ColumnKind::Continuous => {
                    let m = c.iter().sum::<f64>() / n as f64;
                    let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
                    cols.push(c.iter().map(|v| (v - m) / s).collect());
                    mean.push(m);
                    sd.push(s);
                }
            }
        }
        let a = ds.a().iter().map(|&v| f64::from(v)).collect();
        Self {
            n,
            cols,
            mean,
            sd,
            a,
        }
    }

    pub fn eta(&self, b0: f64, b: &[f64]) -> Vec<f64> {
        let mut e = vec![b0; self.n];
        for (c, bj) in self.cols.iter().zip(b) {
            for (ei, xi) in e.iter_mut().zip(c) {
                *ei += bj * xi;
            }
        }
        e
    }

    pub fn loss(&self, b0: f64, b: &[f64]) -> f64 {
        self.eta(b0, b)
            .iter()
            .zip(&self.a)
            .map(|(&e, &a)| softplus(e) - a * e)
            .sum::<f64>()
            / self.n as f64
    }

    pub fn objective(&self, b0: f64, b: &[f64], lambda: f64) -> f64 {
        self.loss(b0, b) + lambda * b.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Gradient of the mean log-likelihood (intercept first).
    pub fn score(&self, b0: f64, b: &[f64]) -> (f64, Vec<f64>) {
        let r: Vec<f64> = self
            .eta(b0, b)
            .iter()
            .zip(&self.a)
            .map(|(&e, &a)| (a - expit(e)) / self.n as f64)
            .collect();
        let g = self
            .cols
            .iter()
            .map(|c| c.iter().zip(&r).map(|(x, r)| x * r).sum())
            .collect();
        (r.iter().sum(), g)
    }

    /// Original-scale fit to standardized coefficients.
    pub fn to_std(&self, intercept: f64, coefs: &[f64]) -> (f64, Vec<f64>) {
        let mut b0 = intercept;
        let b = coefs
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                b0 += c * self.mean[j];
                c * self.sd[j]
            })
            .collect();
        (b0, b)
    }

    /// FISTA with backtracking on the penalized objective.
    pub fn fista(&self, lambda: f64, iters: usize) -> (f64, Vec<f64>) {
        let d = self.cols.len();
        let mut x0 = 0.0;
        let mut x = vec![0.0; d];
        let mut y0 = x0;
        let mut y = x.clone();
        let mut t: f64 = 1.0;
        let mut step = 1.0;
        for _ in 0..iters {
            let (g0, g) = self.score(y0, &y);
            let fy = self.loss(y0, &y);
            loop {
                let n0 = y0 + step * g0;
                let nx: Vec<f64> = y
                    .iter()
                    .zip(&g)
                    .map(|(yj, gj)| {
                        let u = yj + step * gj;
                        u.signum() * (u.abs() - step * lambda).max(0.0)
                    })
                    .collect();
                let mut diff2 = (n0 - y0).powi(2);
                let mut lin = -(n0 - y0) * g0;
                for j in 0..d {
                    diff2 += (nx[j] - y[j]).powi(2);
                    lin -= (nx[j] - y[j]) * g[j];
                }
                if self.loss(n0, &nx) <= fy + lin + diff2 / (2.0 * step) + 1e-15 {
                    let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
                    let mom = (t - 1.0) / t_next;
                    y0 = n0 + mom * (n0 - x0);
                    for j in 0..d {
                        y[j] = nx[j] + mom * (nx[j] - x[j]);
                    }
                    x0 = n0;
                    x = nx;
                    t = t_next;
                    break;
                }
                step *= 0.5;
            }
        }
        (x0, x)
    }
}

/// Unpenalized logistic MLE by Newton's method on the raw covariates.
pub fn newton_mle(ds: &Dataset) -> Vec<f64> {
    let n = ds.n();
    let p = ds.d() + 1;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = vec![1.0];
            r.extend(ds.row(i));
            r
        })
        .collect();
    let mut beta = vec![0.0; p];
    for _ in 0..100 {
        let mut grad = vec![0.0; p];
        let mut hess = vec![vec![0.0; p]; p];
        for (i, r) in rows.iter().enumerate() {
            let e: f64 = r.iter().zip(&beta).map(|(x, b)| x * b).sum();
            let pi = expit(e);
            let res = f64::from(ds.a()[i]) - pi;
            for j in 0..p {
                grad[j] += r[j] * res;
                for k in 0..p {
                    hess[j][k] += r[j] * r[k] * pi * (1.0 - pi);
                }
            }
        }
        // Solve hess * step = grad by Gaussian elimination.
        let mut m = hess;
        let mut v = grad;
        for c in 0..p {
            let piv = (c..p).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
            m.swap(c, piv);
            v.swap(c, piv);
            for r in c + 1..p {
                let f = m[r][c] / m[c][c];
                for k in c..p {
                    m[r][k] -= f * m[c][k];
                }
                v[r] -= f * v[c];
            }
        }
        let mut step = vec![0.0; p];
        for c in (0..p).rev() {
            let s: f64 = (c + 1..p).map(|k| m[c][k] * step[k]).sum();
            step[c] = (v[c] - s) / m[c][c];
        }
        for j in 0..p {
            beta[j] += step[j];
        }
        if step.iter().all(|s| s.abs() < 1e-14) {
            break;
        }
    }
    beta
}

pub fn kkt_ok(sd: &StdDesign, intercept: f64, coefs: &[f64], lambda: f64, tol: f64) -> bool {
    let (b0, b) = sd.to_std(intercept, coefs);
    let (g0, g) = sd.score(b0, &b);
    if g0.abs() > tol {
        return false;
    }
    b.iter().zip(&g).all(|(&bj, &gj)| {
        if bj == 0.0 {
            gj.abs() <= lambda + tol
        } else {
            (gj - lambda * bj.signum()).abs() <= tol
        }
    })
}
