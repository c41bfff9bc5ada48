//! Binary linear SVMs trained by dual coordinate descent, with a logistic
//! map from margin to confidence.

mod calibration;
mod solver;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{GroupId, SpeciesId};

pub use calibration::{fit_logistic, log_loss, FALLBACK_A, FALLBACK_B};
pub use solver::{train, TrainOutput};

/// Which class an SVM is the positive side for. Coarse SVMs order before
/// fine ones, which gives the global SVM id order used for quotas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvmId {
    Coarse(GroupId),
    Fine(SpeciesId),
}

impl fmt::Display for SvmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SvmId::Coarse(g) => write!(f, "coarse:{g}"),
            SvmId::Fine(s) => write!(f, "fine:{s}"),
        }
    }
}

/// Solver hyperparameters shared by every SVM of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    /// Stop once the duality gap is at most this.
    pub tol: f64,
    /// Maximum number of epochs over the training set.
    pub max_iter: usize,
    /// Seed of the per-epoch coordinate permutation.
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 1.0,
            tol: 1e-6,
            max_iter: 10_000,
            seed: 0,
        }
    }
}

impl SvmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Validation(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Validation(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Validation("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Training set of one binary SVM.
#[derive(Debug, Clone)]
pub struct SvmProblem<'a> {
    features: Vec<&'a [f32]>,
    labels: Vec<f64>,
    dimension: usize,
    c_pos: f64,
    c_neg: f64,
}

impl<'a> SvmProblem<'a> {
    /// `labels` must be +1 or -1. Both classes must be present.
    pub fn new(features: Vec<&'a [f32]>, labels: Vec<f64>, c: f64) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Validation(format!("C must be positive, got {c}")));
        }
        let dimension = features.first().map_or(0, |f| f.len());
        for (i, f) in features.iter().enumerate() {
            if f.len() != dimension {
                return Err(Error::Validation(format!(
                    "row {i} has dimension {}, expected {dimension}",
                    f.len()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("row {i} has a non-finite value")));
            }
        }
        if let Some(l) = labels.iter().find(|&&l| l != 1.0 && l != -1.0) {
            return Err(Error::Validation(format!("label {l} is not +1/-1")));
        }
        let n_pos = labels.iter().filter(|&&l| l > 0.0).count();
        if n_pos == 0 || n_pos == labels.len() {
            return Err(Error::Degenerate(
                "training set contains a single class".into(),
            ));
        }
        Ok(SvmProblem {
            features,
            labels,
            dimension,
            c_pos: c,
            c_neg: c,
        })
    }

    /// Reweights the positive penalty to `C * n_neg / n_pos`.
    pub fn balanced(mut self) -> Self {
        let n_pos = self.labels.iter().filter(|&&l| l > 0.0).count() as f64;
        let n_neg = self.labels.len() as f64 - n_pos;
        self.c_pos = self.c_neg * n_neg / n_pos;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn features(&self) -> &[&'a [f32]] {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Per-sample box bound of the dual variable.
    pub fn upper_bound(&self, i: usize) -> f64 {
        if self.labels[i] > 0.0 {
            self.c_pos
        } else {
            self.c_neg
        }
    }
}

/// Hyperplane `w.x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    pub fn margin(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::Validation(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.weights.len()
            )));
        }
        Ok(self.margin_unchecked(x))
    }

    /// Dimension must already be checked.
    pub(crate) fn margin_unchecked(&self, x: &[f32]) -> f64 {
        self.weights
            .iter()
            .zip(x)
            .map(|(w, &v)| w * v as f64)
            .sum::<f64>()
            + self.bias
    }
}

/// Linear SVM plus the logistic map `1 / (1 + exp(A*m + B))` of its margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSvm {
    pub id: SvmId,
    pub dimension: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
}

/// Largest f64 below one; confidences are clamped into `(0, 1)`.
const CONF_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

impl CalibratedSvm {
    /// Uses the fixed map `A = -1, B = 0`.
    pub fn uncalibrated(id: SvmId, svm: LinearSvm) -> Self {
        CalibratedSvm {
            id,
            dimension: svm.weights.len(),
            weights: svm.weights,
            bias: svm.bias,
            a: FALLBACK_A,
            b: FALLBACK_B,
        }
    }

    /// Zero hyperplane: margin 0 and confidence 0.5 everywhere under the
    /// fixed map. Stands in for a class whose one-vs-all problem has no
    /// negatives (or no positives) and no previously trained SVM.
    pub fn constant(id: SvmId, dimension: usize) -> Self {
        Self::uncalibrated(
            id,
            LinearSvm {
                weights: vec![0.0; dimension],
                bias: 0.0,
            },
        )
    }

    pub fn linear(&self) -> LinearSvm {
        LinearSvm {
            weights: self.weights.clone(),
            bias: self.bias,
        }
    }

    pub fn margin(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::Validation(format!(
                "input has dimension {}, {} expects {}",
                x.len(),
                self.id,
                self.weights.len()
            )));
        }
        Ok(self.margin_unchecked(x))
    }

    pub(crate) fn margin_unchecked(&self, x: &[f32]) -> f64 {
        self.weights
            .iter()
            .zip(x)
            .map(|(w, &v)| w * v as f64)
            .sum::<f64>()
            + self.bias
    }

    pub fn confidence(&self, x: &[f32]) -> Result<f64> {
        Ok(self.confidence_of_margin(self.margin(x)?))
    }

    pub(crate) fn confidence_unchecked(&self, x: &[f32]) -> f64 {
        self.confidence_of_margin(self.margin_unchecked(x))
    }

    pub fn confidence_of_margin(&self, margin: f64) -> f64 {
        let z = self.a * margin + self.b;
        let p = if z >= 0.0 {
            let e = (-z).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + z.exp())
        };
        p.clamp(f64::MIN_POSITIVE, CONF_MAX)
    }
}

/// Fits the logistic map on the margins of `features` under `svm`.
///
/// Single-class data, or a fit that would not be increasing in the margin,
/// falls back to `A = -1, B = 0` with a warning.
pub fn calibrate(
    svm: LinearSvm,
    id: SvmId,
    features: &[&[f32]],
    labels: &[f64],
) -> Result<CalibratedSvm> {
    if features.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let margins = features
        .iter()
        .map(|x| svm.margin(x))
        .collect::<Result<Vec<_>>>()?;
    let mut out = CalibratedSvm::uncalibrated(id, svm);
    match fit_logistic(&margins, labels) {
        Some((a, b)) if a < 0.0 && a.is_finite() && b.is_finite() => {
            out.a = a;
            out.b = b;
        }
        Some((a, _)) => {
            log::warn!("{id}: calibration slope {a} is not negative, using fixed map");
        }
        None => {
            log::warn!("{id}: single-class calibration data, using fixed map");
        }
    }
    Ok(out)
}
