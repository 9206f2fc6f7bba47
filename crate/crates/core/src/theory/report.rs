//! The result record shared by every validator.

use serde::{Deserialize, Serialize};

/// A named error measure and its value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMeasure {
    pub metric: String,
    pub value: f64,
}

/// Outcome of one statistical check. `pass` holds exactly when the error is
/// at most the tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub name: String,
    pub estimate: Vec<f64>,
    pub closed_form: Vec<f64>,
    pub error: ErrorMeasure,
    pub tol: f64,
    pub n: usize,
    pub seed: u64,
    pub pass: bool,
    /// Diagnostics such as rank deficiency or a shrunk variance.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ValidationReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        estimate: Vec<f64>,
        closed_form: Vec<f64>,
        metric: &str,
        error: f64,
        tol: f64,
        n: usize,
        seed: u64,
    ) -> Self {
        Self {
            name: name.into(),
            estimate,
            closed_form,
            error: ErrorMeasure {
                metric: metric.to_string(),
                value: error,
            },
            tol,
            n,
            seed,
            pass: error <= tol,
            notes: Vec::new(),
        }
    }

    pub fn note(mut self, text: impl Into<String>) -> Self {
        self.notes.push(text.into());
        self
    }

    /// Marks the report failed with an explanation, for checks whose
    /// precondition could not be met.
    pub fn fail_with(mut self, text: impl Into<String>) -> Self {
        self.pass = false;
        self.notes.push(text.into());
        self
    }
}

/// `|a − b| / |b|`, or `|a − b|` when `b` is zero.
pub fn relative_error(estimate: f64, reference: f64) -> f64 {
    let diff = (estimate - reference).abs();
    if reference == 0.0 {
        diff
    } else {
        diff / reference.abs()
    }
}
