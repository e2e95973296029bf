//! Reconstruction scores: NMSE, support extraction and F-measure.
//!
//! Convention: `ω = 1` is a spike (the component is exactly zero), so the
//! support of a signal is where `ω = 0`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative threshold of the magnitude support rule.
pub const DEFAULT_MAGNITUDE_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub nmse: f64,
    pub f_measure: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_support: usize,
    pub estimated_support: usize,
    pub intersection: usize,
    /// Set when a precision or recall denominator was zero.
    pub degenerate: bool,
}

/// How a support mask is read off an estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SupportRule {
    /// Non-zero where the posterior spike probability `Φ(z)` is below 0.5.
    Posterior,
    /// Non-zero where `|x̂|` exceeds an absolute threshold.
    Magnitude(f64),
    /// Non-zero where `|x̂|` exceeds this fraction of `max |x̂|`.
    RelativeMagnitude(f64),
}

impl Default for SupportRule {
    fn default() -> Self {
        SupportRule::RelativeMagnitude(DEFAULT_MAGNITUDE_FRACTION)
    }
}

/// `‖X − X̂‖²_F / ‖X‖²_F`.
pub fn nmse(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<f64> {
    check_shape(truth.shape(), estimate.shape())?;
    let den = truth.norm_squared();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("NMSE of an all-zero true signal"));
    }
    Ok((truth - estimate).norm_squared() / den)
}

/// Support mask (`true` = non-zero). `values` are spike probabilities `Φ(z)`
/// for [`SupportRule::Posterior`] and signal estimates otherwise.
pub fn support(values: &DMatrix<f64>, rule: SupportRule) -> DMatrix<bool> {
    match rule {
        SupportRule::Posterior => values.map(|p| p < 0.5),
        SupportRule::Magnitude(tau) => values.map(|x| x.abs() > tau),
        SupportRule::RelativeMagnitude(frac) => {
            let tau = frac * values.amax();
            values.map(|x| x.abs() > tau)
        }
    }
}

/// Support of a probit-score matrix under the posterior rule.
pub fn support_from_scores(scores: &DMatrix<f64>) -> DMatrix<bool> {
    scores.map(|z| crate::expfam::probit(z) < 0.5)
}

/// Support of a spike indicator matrix `Ω`.
pub fn support_from_spikes(spikes: &DMatrix<bool>) -> DMatrix<bool> {
    spikes.map(|s| !s)
}

/// Precision, recall and F-measure of `estimated` against `truth`; the NMSE
/// field is left at `NaN`.
pub fn f_measure(truth: &DMatrix<bool>, estimated: &DMatrix<bool>) -> Result<ScoreReport> {
    check_shape(truth.shape(), estimated.shape())?;
    let true_support = truth.iter().filter(|&&b| b).count();
    let estimated_support = estimated.iter().filter(|&&b| b).count();
    let intersection = truth.iter().zip(estimated.iter()).filter(|(&a, &b)| a && b).count();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(intersection, estimated_support);
    let recall = ratio(intersection, true_support);
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ScoreReport {
        nmse: f64::NAN,
        f_measure: f,
        precision,
        recall,
        true_support,
        estimated_support,
        intersection,
        degenerate: true_support == 0 || estimated_support == 0,
    })
}

/// Full report: support scores plus NMSE of the estimate.
pub fn score(
    truth: &DMatrix<f64>,
    true_support: &DMatrix<bool>,
    estimate: &DMatrix<f64>,
    estimated_support: &DMatrix<bool>,
) -> Result<ScoreReport> {
    let mut report = f_measure(true_support, estimated_support)?;
    report.nmse = nmse(truth, estimate)?;
    Ok(report)
}

/// NMSE of each column; `NaN` for all-zero true columns.
pub fn nmse_per_timestamp(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_shape(truth.shape(), estimate.shape())?;
    Ok(truth
        .column_iter()
        .zip(estimate.column_iter())
        .map(|(x, e)| {
            let den = x.norm_squared();
            if den == 0.0 {
                f64::NAN
            } else {
                (x - e).norm_squared() / den
            }
        })
        .collect())
}

fn check_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a.0 != b.0 {
        return Err(Error::DimensionMismatch {
            context: "metric rows",
            expected: a.0,
            actual: b.0,
        });
    }
    if a.1 != b.1 {
        return Err(Error::DimensionMismatch {
            context: "metric columns",
            expected: a.1,
            actual: b.1,
        });
    }
    Ok(())
}
