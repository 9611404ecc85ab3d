//! Binary logistic regression with Wald tests, and backward elimination.
//!
//! The model is `P(y = 1 | x) = 1 / (1 + exp(-(b0 + b . x)))`, fitted by
//! Newton-Raphson (equivalently IRLS) on z-scored columns. Estimates and
//! their covariance are mapped back to the original column scales before
//! they are reported, so Wald statistics refer to the raw features.
//!
//! A column with zero variance carries no information and is aliased with
//! the intercept. It is kept in the model with coefficient 0, an infinite
//! standard error, `z = 0` and `p = 1`, which makes it the first candidate
//! for elimination.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::wald_p_value;
use crate::tabular::FeatureMatrix;

pub const INTERCEPT: &str = "(Intercept)";
pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-8;
/// Largest admissible standardized coefficient before the fit is declared
/// divergent.
pub const DIVERGENCE_BOUND: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitModel {
    /// Retained feature columns, without the intercept.
    pub feature_names: Vec<String>,
    /// Intercept first, then one entry per feature.
    pub coefficients: Vec<f64>,
    /// Infinite for aliased (constant) columns, written as `null` in JSON.
    #[serde(with = "infinite_as_null")]
    pub std_errors: Vec<f64>,
    pub z_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| x.is_finite().then_some(*x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<Option<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

impl LogitModel {
    /// Linear predictor for a raw feature vector.
    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_names.len() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_names.len(),
                found: x.len(),
            });
        }
        Ok(self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>())
    }

    /// `P(y = 1 | x)`.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.linear_predictor(x)?))
    }

    /// `[P(y = 0 | x), P(y = 1 | x)]`.
    pub fn class_probabilities(&self, x: &[f64]) -> Result<[f64; 2]> {
        let eta = self.linear_predictor(x)?;
        Ok([sigmoid(-eta), sigmoid(eta)])
    }

    /// Names of all coefficients, intercept first.
    pub fn coefficient_names(&self) -> Vec<String> {
        std::iter::once(INTERCEPT.to_owned())
            .chain(self.feature_names.iter().cloned())
            .collect()
    }
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(eta))` without overflow.
fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

fn check_beta(data: &FeatureMatrix, beta: &[f64]) -> Result<()> {
    if beta.len() != data.n_features() + 1 {
        return Err(Error::DimensionMismatch {
            expected: data.n_features() + 1,
            found: beta.len(),
        });
    }
    Ok(())
}

fn eta_of(row: &[f64], beta: &[f64]) -> f64 {
    beta[0] + beta[1..].iter().zip(row).map(|(b, v)| b * v).sum::<f64>()
}

/// Binomial log-likelihood at `beta` (intercept first) on the raw columns.
pub fn log_likelihood(data: &FeatureMatrix, beta: &[f64]) -> Result<f64> {
    check_beta(data, beta)?;
    Ok((0..data.n_rows())
        .map(|i| {
            let eta = eta_of(data.row(i), beta);
            f64::from(data.labels()[i]) * eta - softplus(eta)
        })
        .sum())
}

/// Gradient of [`log_likelihood`]: `X^T (y - p)` with a leading column of ones.
pub fn gradient(data: &FeatureMatrix, beta: &[f64]) -> Result<Vec<f64>> {
    check_beta(data, beta)?;
    let mut g = vec![0.0; beta.len()];
    for i in 0..data.n_rows() {
        let row = data.row(i);
        let r = f64::from(data.labels()[i]) - sigmoid(eta_of(row, beta));
        g[0] += r;
        for (gj, v) in g[1..].iter_mut().zip(row) {
            *gj += r * v;
        }
    }
    Ok(g)
}

/// Maximum-likelihood fit with an intercept.
///
/// Newton steps are taken on standardized columns until the largest
/// coefficient change falls below [`TOLERANCE`] or [`MAX_ITERATIONS`] is
/// reached. Standard errors come from the inverse observed information at
/// the optimum.
pub fn fit_logit(data: &FeatureMatrix) -> Result<LogitModel> {
    data.require_both_classes()?;
    let n = data.n_rows();
    let v = data.n_features();
    if n <= v + 1 {
        return Err(Error::InvalidArgument(format!(
            "logistic fit needs more than {} rows for {v} features, got {n}",
            v + 1
        )));
    }

    // z-score the informative columns; constant ones are aliased
    let mut active = Vec::new();
    let mut centers = Vec::new();
    let mut scales = Vec::new();
    for j in 0..v {
        let col = data.column(j);
        let m = col.iter().sum::<f64>() / n as f64;
        let s = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        if s > 0.0 && s.is_finite() {
            active.push(j);
            centers.push(m);
            scales.push(s);
        }
    }
    let p = active.len() + 1;
    let z = DMatrix::from_fn(n, p, |i, c| {
        if c == 0 {
            1.0
        } else {
            (data.value(i, active[c - 1]) - centers[c - 1]) / scales[c - 1]
        }
    });
    let y = DVector::from_iterator(n, data.labels().iter().map(|&l| f64::from(l)));

    let information = |gamma: &DVector<f64>| -> (DMatrix<f64>, DVector<f64>) {
        let eta = &z * gamma;
        let mut weighted = z.clone();
        let mut resid = DVector::zeros(n);
        for i in 0..n {
            let mu = sigmoid(eta[i]);
            resid[i] = y[i] - mu;
            let w = mu * (1.0 - mu);
            weighted.row_mut(i).scale_mut(w);
        }
        (z.transpose() * weighted, z.transpose() * resid)
    };

    let mut gamma = DVector::<f64>::zeros(p);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (h, g) = information(&gamma);
        let Some(chol) = h.cholesky() else {
            return Err(if iterations == 1 {
                Error::Singular
            } else {
                Error::NonConvergence { iterations }
            });
        };
        let step = chol.solve(&g);
        gamma += &step;
        if gamma.iter().any(|c| !c.is_finite() || c.abs() > DIVERGENCE_BOUND) {
            return Err(Error::NonConvergence { iterations });
        }
        if step.amax() < TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence { iterations });
    }

    let (h, _) = information(&gamma);
    let cov_gamma = h.cholesky().ok_or(Error::Singular)?.inverse();

    // beta = A gamma with beta_0 = g_0 - sum g_j m_j / s_j and beta_j = g_j / s_j
    let mut a = DMatrix::<f64>::zeros(p, p);
    a[(0, 0)] = 1.0;
    for c in 1..p {
        a[(0, c)] = -centers[c - 1] / scales[c - 1];
        a[(c, c)] = 1.0 / scales[c - 1];
    }
    let beta_active = &a * &gamma;
    let cov_beta = &a * cov_gamma * a.transpose();

    let mut coefficients = vec![0.0; v + 1];
    let mut std_errors = vec![f64::INFINITY; v + 1];
    coefficients[0] = beta_active[0];
    std_errors[0] = cov_beta[(0, 0)].max(0.0).sqrt();
    for (c, &j) in active.iter().enumerate() {
        coefficients[j + 1] = beta_active[c + 1];
        std_errors[j + 1] = cov_beta[(c + 1, c + 1)].max(0.0).sqrt();
    }
    if std_errors.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Singular);
    }
    let z_values: Vec<f64> = coefficients
        .iter()
        .zip(&std_errors)
        .map(|(b, s)| b / s)
        .collect();
    let p_values = coefficients
        .iter()
        .zip(&std_errors)
        .map(|(&b, &s)| wald_p_value(b, s))
        .collect::<Result<Vec<_>>>()?;
    let log_likelihood = log_likelihood(data, &coefficients)?;

    Ok(LogitModel {
        feature_names: data.names().to_vec(),
        coefficients,
        std_errors,
        z_values,
        p_values,
        converged,
        iterations,
        log_likelihood,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub name: String,
    pub estimate: f64,
    #[serde(with = "infinite_as_null_scalar")]
    pub std_error: f64,
    pub z_value: f64,
    pub p_value: f64,
}

mod infinite_as_null_scalar {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        v.is_finite().then_some(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl WaldRow {
    /// Row computed from an estimate and its standard error.
    pub fn from_estimate(name: impl Into<String>, estimate: f64, std_error: f64) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            estimate,
            std_error,
            z_value: estimate / std_error,
            p_value: wald_p_value(estimate, std_error)?,
        })
    }
}

/// Coefficient table, intercept first.
pub fn wald_table(model: &LogitModel) -> Result<Vec<WaldRow>> {
    if !model.converged {
        return Err(Error::NonConvergence {
            iterations: model.iterations,
        });
    }
    model
        .coefficient_names()
        .into_iter()
        .zip(model.coefficients.iter().zip(&model.std_errors))
        .map(|(name, (&b, &s))| WaldRow::from_estimate(name, b, s))
        .collect()
}

/// Aligned text rendering of a Wald table.
pub fn wald_table_text(rows: &[WaldRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.name.len())
        .chain(std::iter::once(8))
        .max()
        .unwrap_or(8);
    let mut out = format!(
        "{:<width$}  {:>12}  {:>12}  {:>9}  {:>10}\n",
        "term", "estimate", "std_error", "z", "p"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>12.5}  {:>12.5}  {:>9.3}  {:>10.3e}\n",
            r.name, r.estimate, r.std_error, r.z_value, r.p_value
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedP {
    pub feature: String,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationRound {
    pub dropped: String,
    pub p_value: f64,
    /// Feature p-values of the fit that triggered the drop.
    pub fitted: Vec<NamedP>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EliminationTrace {
    pub alpha: f64,
    pub rounds: Vec<EliminationRound>,
    pub surviving: Vec<String>,
}

/// Backward elimination: refit, drop the single feature with the largest
/// p-value if it exceeds `alpha`, and repeat. The intercept is never
/// dropped. Equal p-values drop the leftmost column. `max_rounds` caps the
/// number of drops.
///
/// When the last remaining feature still fails, the result is
/// [`Error::AllEliminated`] carrying the trace.
pub fn backward_eliminate(
    data: &FeatureMatrix,
    alpha: f64,
    max_rounds: Option<usize>,
) -> Result<(LogitModel, EliminationTrace)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if data.n_features() == 0 {
        return Err(Error::InvalidArgument("no features to refine".into()));
    }
    let mut columns: Vec<usize> = (0..data.n_features()).collect();
    let mut trace = EliminationTrace {
        alpha,
        ..Default::default()
    };
    loop {
        let current = data.select_columns(&columns)?;
        let model = fit_logit(&current)?;
        let mut worst = 0;
        for j in 1..columns.len() {
            if model.p_values[j + 1] > model.p_values[worst + 1] {
                worst = j;
            }
        }
        let worst_p = model.p_values[worst + 1];
        let capped = max_rounds.is_some_and(|m| trace.rounds.len() >= m);
        if worst_p <= alpha || capped {
            trace.surviving = model.feature_names.clone();
            return Ok((model, trace));
        }
        trace.rounds.push(EliminationRound {
            dropped: model.feature_names[worst].clone(),
            p_value: worst_p,
            fitted: model
                .feature_names
                .iter()
                .zip(&model.p_values[1..])
                .map(|(f, &p)| NamedP {
                    feature: f.clone(),
                    p_value: p,
                })
                .collect(),
        });
        if columns.len() == 1 {
            return Err(Error::AllEliminated { alpha, trace });
        }
        columns.remove(worst);
    }
}
