//! Rank statistics and Wald significance arithmetic.
//!
//! Conventions:
//! - ranks are fractional: tied values share the mean of the positions they
//!   occupy, and Spearman's coefficient is the Pearson correlation of those
//!   ranks. Without ties it equals `1 - 6 * sum(d^2) / (n (n^2 - 1))`.
//! - quartiles use the nearest-rank rule `x(ceil(n p / 100))` on the sorted
//!   sample; `p = 50` is the ordinary median.
//! - the standard normal CDF is computed from the series
//!   `Phi(z) = 1/2 + phi(z) * sum z^(2k+1) / (2k+1)!!` for `|z| <= 3` and from
//!   the Laplace continued fraction for the upper tail beyond that. Both
//!   branches are accurate to well below `1e-10` absolute.

use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Fractional (average) ranks, 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector(Vec<f64>);

impl RankVector {
    pub fn from_values(x: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let mut ranks = vec![0.0; x.len()];
        let mut start = 0;
        while start < order.len() {
            let mut end = start + 1;
            while end < order.len() && x[order[end]] == x[order[start]] {
                end += 1;
            }
            // positions start+1 ..= end share their mean
            let rank = (start + 1 + end) as f64 / 2.0;
            for &i in &order[start..end] {
                ranks[i] = rank;
            }
            start = end;
        }
        Self(ranks)
    }

    pub fn ranks(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation; errors when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantVector);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let rx = RankVector::from_values(x);
    let ry = RankVector::from_values(y);
    pearson(rx.ranks(), ry.ranks())
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two observations".into()));
    }
    Ok(())
}

fn sorted(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

pub fn median(x: &[f64]) -> Result<f64> {
    let s = sorted(x)?;
    let n = s.len();
    Ok(if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    })
}

/// Quartile `p` in {25, 50, 75}.
pub fn quartile(x: &[f64], p: u32) -> Result<f64> {
    if !matches!(p, 25 | 50 | 75) {
        return Err(Error::InvalidArgument(format!("unsupported quartile {p}")));
    }
    if p == 50 {
        return median(x);
    }
    let s = sorted(x)?;
    let n = s.len();
    let rank = (n * p as usize).div_ceil(100).max(1);
    Ok(s[rank - 1])
}

pub fn std_normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Upper tail `1 - Phi(z)`, accurate in relative terms for large `z`.
pub fn std_normal_sf(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite z: {z}")));
    }
    Ok(if z < 0.0 {
        1.0 - upper_tail(-z)
    } else {
        upper_tail(z)
    })
}

pub fn std_normal_cdf(z: f64) -> Result<f64> {
    std_normal_sf(-z)
}

fn upper_tail(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x <= 3.0 {
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut k = 1.0;
        while term > 1e-17 * sum {
            term *= x2 / (2.0 * k + 1.0);
            sum += term;
            k += 1.0;
        }
        0.5 - std_normal_pdf(x) * sum
    } else {
        // Q(x) = phi(x) / (x + 1/(x + 2/(x + 3/(x + ...)))), evaluated bottom-up.
        let mut t = x;
        for k in (1..=300).rev() {
            t = x + k as f64 / t;
        }
        std_normal_pdf(x) / t
    }
}

/// Two-sided Wald p-value `2 (1 - Phi(|coefficient| / std_error))`.
///
/// An infinite standard error (an aliased coefficient) gives 1. Results that
/// underflow are floored at the smallest positive double so the value stays
/// in `(0, 1]`.
pub fn wald_p_value(coefficient: f64, std_error: f64) -> Result<f64> {
    if !(std_error > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "standard error must be positive, got {std_error}"
        )));
    }
    if !coefficient.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite coefficient {coefficient}")));
    }
    let z = coefficient.abs() / std_error;
    Ok((2.0 * std_normal_sf(z)?).clamp(f64::MIN_POSITIVE, 1.0))
}
