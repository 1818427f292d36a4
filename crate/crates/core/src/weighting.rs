//! Propensity-score weights and the weighted mean-difference estimator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::lasso::LassoPath;

/// Normal critical value for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WeightScheme {
    #[serde(rename = "IPW")]
    Ipw,
    #[serde(rename = "MW")]
    Mw,
    #[serde(rename = "OW")]
    Ow,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 3] = [WeightScheme::Ipw, WeightScheme::Mw, WeightScheme::Ow];

    /// Weight of one unit with propensity `e` and exposure `a`.
    pub fn weight(self, e: f64, a: u8) -> f64 {
        let exposed = a == 1;
        match self {
            WeightScheme::Ipw => {
                if exposed {
                    1.0 / e
                } else {
                    1.0 / (1.0 - e)
                }
            }
            WeightScheme::Mw => {
                let m = e.min(1.0 - e);
                if exposed {
                    m / e
                } else {
                    m / (1.0 - e)
                }
            }
            WeightScheme::Ow => {
                if exposed {
                    1.0 - e
                } else {
                    e
                }
            }
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightScheme::Ipw => "IPW",
            WeightScheme::Mw => "MW",
            WeightScheme::Ow => "OW",
        })
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "IPW" => Ok(WeightScheme::Ipw),
            "MW" => Ok(WeightScheme::Mw),
            "OW" => Ok(WeightScheme::Ow),
            other => Err(Error::invalid(format!("unknown weight scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedEstimate {
    /// Exposed minus unexposed weighted mean.
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub sum_w_exposed: f64,
    pub sum_w_unexposed: f64,
    pub max_weight: f64,
}

impl WeightedEstimate {
    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }
}

pub fn compute_weights(ps: &[f64], a: &[u8], scheme: WeightScheme) -> Result<Vec<f64>> {
    if ps.len() != a.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: ps.len(),
        });
    }
    ps.iter()
        .zip(a)
        .enumerate()
        .map(|(i, (&e, &ai))| {
            if e > 0.0 && e < 1.0 {
                Ok(scheme.weight(e, ai))
            } else {
                Err(Error::Positivity { index: i, value: e })
            }
        })
        .collect()
}

/// Caps weights at the given upper percentile (e.g. 0.99). Not applied by
/// any default pipeline.
pub fn truncate_weights(w: &mut [f64], upper_quantile: f64) -> Result<()> {
    if !(upper_quantile > 0.0 && upper_quantile <= 1.0) {
        return Err(Error::invalid("truncation quantile must lie in (0, 1]"));
    }
    if w.is_empty() {
        return Ok(());
    }
    let mut sorted = w.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = ((upper_quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let cap = sorted[pos - 1];
    for v in w.iter_mut() {
        *v = v.min(cap);
    }
    Ok(())
}

struct GroupMoments {
    sum_w: f64,
    mean: f64,
    var_of_mean: f64,
}

fn group_moments(y: &[f64], a: &[u8], w: &[f64], group: u8) -> GroupMoments {
    let mut sum_w = 0.0;
    let mut sum_wy = 0.0;
    for ((&yi, &ai), &wi) in y.iter().zip(a).zip(w) {
        if ai == group {
            sum_w += wi;
            sum_wy += wi * yi;
        }
    }
    let mean = sum_wy / sum_w;
    let mut ss = 0.0;
    for ((&yi, &ai), &wi) in y.iter().zip(a).zip(w) {
        if ai == group {
            ss += wi * wi * (yi - mean) * (yi - mean);
        }
    }
    GroupMoments {
        sum_w,
        mean,
        var_of_mean: ss / (sum_w * sum_w),
    }
}

/// Hajek contrast of weighted group means with a fixed-weight robust
/// variance `sum w^2 (y - ybar_g)^2 / (sum w)^2` per group.
pub fn weighted_mean_difference(y: &[f64], a: &[u8], w: &[f64]) -> Result<WeightedEstimate> {
    if y.len() != a.len() || w.len() != a.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: if y.len() != a.len() { y.len() } else { w.len() },
        });
    }
    if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid(format!("weight {} at unit {i} is not finite and >= 0", w[i])));
    }
    let g1 = group_moments(y, a, w, 1);
    let g0 = group_moments(y, a, w, 0);
    if !(g1.sum_w > 0.0) {
        return Err(Error::ZeroGroupWeight { group: "exposed" });
    }
    if !(g0.sum_w > 0.0) {
        return Err(Error::ZeroGroupWeight { group: "unexposed" });
    }
    let estimate = g1.mean - g0.mean;
    let se = (g1.var_of_mean + g0.var_of_mean).sqrt();
    Ok(WeightedEstimate {
        estimate,
        se,
        ci_low: estimate - Z_95 * se,
        ci_high: estimate + Z_95 * se,
        sum_w_exposed: g1.sum_w,
        sum_w_unexposed: g0.sum_w,
        max_weight: w.iter().copied().fold(0.0, f64::max),
    })
}

/// Unit-weight difference of group means.
pub fn unadjusted_difference(y: &[f64], a: &[u8]) -> Result<WeightedEstimate> {
    weighted_mean_difference(y, a, &vec![1.0; a.len()])
}

/// Weighted estimate using out-of-fold propensity scores at one path index.
pub fn estimate_effect(
    path: &LassoPath,
    lambda_index: usize,
    ds: &Dataset,
    scheme: WeightScheme,
) -> Result<WeightedEstimate> {
    if lambda_index >= path.len() {
        return Err(Error::invalid(format!(
            "lambda index {lambda_index} out of range (path has {})",
            path.len()
        )));
    }
    let ps = path.oof_column(lambda_index);
    let w = compute_weights(ps, ds.a(), scheme)?;
    weighted_mean_difference(ds.y(), ds.a(), &w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_point() {
        for a in [0, 1] {
            assert_eq!(WeightScheme::Ipw.weight(0.5, a), 2.0);
            assert_eq!(WeightScheme::Mw.weight(0.5, a), 1.0);
            assert_eq!(WeightScheme::Ow.weight(0.5, a), 0.5);
        }
    }

    #[test]
    fn substitution_at_point_three() {
        let close = |x: f64, y: f64| (x - y).abs() < 1e-15;
        assert!(close(WeightScheme::Ipw.weight(0.3, 1), 10.0 / 3.0));
        assert!(close(WeightScheme::Mw.weight(0.3, 1), 1.0));
        assert!(close(WeightScheme::Ow.weight(0.3, 1), 0.7));
        assert!(close(WeightScheme::Ipw.weight(0.3, 0), 10.0 / 7.0));
        assert!(close(WeightScheme::Mw.weight(0.3, 0), 3.0 / 7.0));
        assert!(close(WeightScheme::Ow.weight(0.3, 0), 0.3));
    }

    #[test]
    fn mw_below_ipw_and_ow_below_one() {
        for k in 1..100 {
            let e = k as f64 / 100.0;
            for a in [0, 1] {
                let ipw = WeightScheme::Ipw.weight(e, a);
                let mw = WeightScheme::Mw.weight(e, a);
                let ow = WeightScheme::Ow.weight(e, a);
                assert!(mw <= ipw);
                assert!(ow <= 1.0 && ow > 0.0);
                assert!(mw <= 1.0 && mw > 0.0);
                assert!(ipw >= 1.0);
            }
        }
    }

    #[test]
    fn boundary_ps_is_rejected() {
        assert!(matches!(
            compute_weights(&[0.5, 1.0], &[1, 0], WeightScheme::Ow),
            Err(Error::Positivity { index: 1, .. })
        ));
        assert!(compute_weights(&[0.0], &[1], WeightScheme::Ipw).is_err());
    }

    #[test]
    fn unit_weights_give_group_mean_difference() {
        let y = [1.0, 3.0, 2.0, 6.0];
        let a = [1, 1, 0, 0];
        let est = weighted_mean_difference(&y, &a, &[1.0; 4]).unwrap();
        assert_eq!(est.estimate, 2.0 - 4.0);
        // Group variances of the mean: (1 + 1) / 4 and (4 + 4) / 4.
        assert!((est.se - (0.5f64 + 2.0).sqrt()).abs() < 1e-15);
        assert!(est.ci_low <= est.estimate && est.estimate <= est.ci_high);
    }

    #[test]
    fn constant_outcome_has_zero_estimate_and_se() {
        let est =
            weighted_mean_difference(&[4.0; 5], &[1, 0, 1, 0, 0], &[0.2, 3.0, 1.0, 7.0, 1.0])
                .unwrap();
        assert_eq!(est.estimate, 0.0);
        assert_eq!(est.se, 0.0);
    }

    #[test]
    fn scale_invariance() {
        let y = [0.3, 1.7, -2.0, 0.4, 5.0, 1.1];
        let a = [1, 0, 1, 0, 0, 1];
        let w = [0.5, 2.0, 1.25, 4.0, 0.125, 8.0];
        let w17: Vec<f64> = w.iter().map(|v| v * 17.0).collect();
        let e1 = weighted_mean_difference(&y, &a, &w).unwrap();
        let e2 = weighted_mean_difference(&y, &a, &w17).unwrap();
        for (u, v) in [
            (e1.estimate, e2.estimate),
            (e1.se, e2.se),
            (e1.ci_low, e2.ci_low),
            (e1.ci_high, e2.ci_high),
        ] {
            assert!((u - v).abs() <= 1e-14 * u.abs().max(1.0));
        }
    }

    #[test]
    fn zero_group_weight_is_an_error() {
        assert!(matches!(
            weighted_mean_difference(&[1.0, 2.0], &[1, 0], &[0.0, 1.0]),
            Err(Error::ZeroGroupWeight { group: "exposed" })
        ));
        assert!(matches!(
            weighted_mean_difference(&[1.0, 2.0], &[1, 1], &[1.0, 1.0]),
            Err(Error::ZeroGroupWeight { group: "unexposed" })
        ));
    }

    #[test]
    fn truncation_caps_at_quantile() {
        let mut w = vec![1.0, 2.0, 3.0, 4.0, 100.0];
        truncate_weights(&mut w, 0.8).unwrap();
        assert_eq!(w, vec![1.0, 2.0, 3.0, 4.0, 4.0]);
    }

    proptest::proptest! {
        #[test]
        fn ow_estimate_symmetric_under_relabelling(
            rows in proptest::collection::vec((0.01f64..0.99, 0u8..2, -5.0f64..5.0), 4..60)
        ) {
            let e: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let a: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
            proptest::prop_assume!(a.iter().any(|&v| v == 1) && a.iter().any(|&v| v == 0));
            let w = compute_weights(&e, &a, WeightScheme::Ow).unwrap();
            let e_flip: Vec<f64> = e.iter().map(|v| 1.0 - v).collect();
            let a_flip: Vec<u8> = a.iter().map(|v| 1 - v).collect();
            let w_flip = compute_weights(&e_flip, &a_flip, WeightScheme::Ow).unwrap();
            let est = weighted_mean_difference(&y, &a, &w).unwrap();
            let est_flip = weighted_mean_difference(&y, &a_flip, &w_flip).unwrap();
            proptest::prop_assert!((est.estimate + est_flip.estimate).abs() < 1e-12);
        }

        #[test]
        fn weights_positive_and_bounded(e in 1e-6f64..(1.0 - 1e-6), a in 0u8..2) {
            for s in WeightScheme::ALL {
                let w = s.weight(e, a);
                proptest::prop_assert!(w > 0.0 && w.is_finite());
            }
            proptest::prop_assert!(WeightScheme::Mw.weight(e, a) <= 1.0);
            proptest::prop_assert!(WeightScheme::Ow.weight(e, a) <= 1.0);
        }
    }
}
