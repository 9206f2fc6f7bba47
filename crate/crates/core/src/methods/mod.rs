//! The nine unlearning objectives, random noise augmentation and the training loop.

pub mod config;
pub mod losses;
pub mod run;

pub use config::{desk, large_model_defaults, Method, Preference, UnlearnConfig};
pub use losses::{
    adaptive_rmu_target, dpo_loss, npo_loss, retain_kl, retain_mse, rmu_loss, rsv_target, simnpo_loss, RandomTarget,
    RetainDivergence,
};
pub use run::{
    backdoor_behavior_check, rna_augment, unlearn_run, BackdoorReport, BackdoorTarget, Batch, LossRecord, Objective,
    StepLoss, UnlearnData, UnlearnOutcome,
};
