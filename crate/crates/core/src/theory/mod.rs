//! Monte Carlo validators for the probabilistic claims behind unlearning
//! fragility and the noise-augmentation defense.

pub mod cauchy;
pub mod linear;
pub mod mc;
pub mod report;
pub mod sensitivity;
pub mod suite;
pub mod taylor;

pub use cauchy::{
    cauchy_ratio_check, rejection_end_to_end, rejection_mc, rejection_prob, rejection_prob_exact, CauchyScale,
    RejectionProbability, RejectionQuery,
};
pub use linear::logit_covariance_check;
pub use report::ValidationReport;
pub use sensitivity::{
    calibrate_eta, layer_inputs, loss_change_distribution, maxact_shift, noise_sensitivity, LossChangeSummary,
    MomentSummary, SensitivityReport, SensitivityVariant,
};
pub use suite::{closed_form_checks, model_checks, suite_passes, SuiteEntry, TheoryConfig};
pub use taylor::{hutchinson_check, taylor_increase_check};
