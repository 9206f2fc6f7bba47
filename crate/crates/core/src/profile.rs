//! Desk-scale defaults: corpus, base model, and per-method unlearning values.

use crate::data::CorpusSpec;
use crate::methods::Method;
use crate::train::TrainConfig;

pub const DESK_UNLEARN_LAYER: usize = 3;

/// Method-specific part of the desk profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeskMethod {
    pub coefficient: f64,
    pub scaling_factor: f64,
    pub retain_weight: f64,
    pub po_beta: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// RNA noise variance used when RNA is switched on.
    pub noise_scale: f64,
}

pub fn desk_method(method: Method) -> DeskMethod {
    let base = DeskMethod {
        coefficient: 8.0,
        scaling_factor: 6.0,
        retain_weight: 10.0,
        po_beta: 0.01,
        steps: 300,
        learning_rate: 1e-2,
        batch_size: 16,
        noise_scale: 0.3,
    };
    match method {
        Method::Rmu | Method::AdaptiveRmu | Method::SimNpoKl => base,
        Method::Rsv => DeskMethod {
            coefficient: 16.0,
            ..base
        },
        Method::NpoKl => DeskMethod {
            noise_scale: 0.03,
            ..base
        },
        Method::DpoKl => DeskMethod {
            retain_weight: 1.0,
            noise_scale: 0.03,
            ..base
        },
        Method::NpoMse => DeskMethod {
            retain_weight: 0.01,
            noise_scale: 0.03,
            ..base
        },
        Method::SimNpoMse => DeskMethod {
            retain_weight: 0.03,
            noise_scale: 0.03,
            ..base
        },
        Method::DpoMse => DeskMethod {
            retain_weight: 0.003,
            po_beta: 0.03,
            noise_scale: 0.03,
            ..base
        },
    }
}

pub fn desk_corpus(seed: u64) -> CorpusSpec {
    CorpusSpec {
        seed,
        keyword_len: 3,
        ..CorpusSpec::default()
    }
}

pub fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}
