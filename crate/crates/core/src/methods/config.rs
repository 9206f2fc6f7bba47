//! Method selector, hyperparameters and named profiles.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::losses::RetainDivergence;
use crate::error::{input, Error, Result};
use crate::nn::Trainable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "RMU")]
    Rmu,
    #[serde(rename = "AdaptiveRMU")]
    AdaptiveRmu,
    #[serde(rename = "RSV")]
    Rsv,
    #[serde(rename = "NPO_KL")]
    NpoKl,
    #[serde(rename = "NPO_MSE")]
    NpoMse,
    #[serde(rename = "DPO_KL")]
    DpoKl,
    #[serde(rename = "DPO_MSE")]
    DpoMse,
    #[serde(rename = "SimNPO_KL")]
    SimNpoKl,
    #[serde(rename = "SimNPO_MSE")]
    SimNpoMse,
}

/// Sequence-level preference objective of a PO method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preference {
    Npo,
    SimNpo,
    Dpo,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Rmu,
        Method::AdaptiveRmu,
        Method::Rsv,
        Method::NpoKl,
        Method::NpoMse,
        Method::DpoKl,
        Method::DpoMse,
        Method::SimNpoKl,
        Method::SimNpoMse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rmu => "RMU",
            Method::AdaptiveRmu => "AdaptiveRMU",
            Method::Rsv => "RSV",
            Method::NpoKl => "NPO_KL",
            Method::NpoMse => "NPO_MSE",
            Method::DpoKl => "DPO_KL",
            Method::DpoMse => "DPO_MSE",
            Method::SimNpoKl => "SimNPO_KL",
            Method::SimNpoMse => "SimNPO_MSE",
        }
    }

    /// Representation-misdirection methods act on layer-`l` states.
    pub fn is_rm(self) -> bool {
        matches!(self, Method::Rmu | Method::AdaptiveRmu | Method::Rsv)
    }

    pub fn preference(self) -> Option<Preference> {
        match self {
            Method::NpoKl | Method::NpoMse => Some(Preference::Npo),
            Method::SimNpoKl | Method::SimNpoMse => Some(Preference::SimNpo),
            Method::DpoKl | Method::DpoMse => Some(Preference::Dpo),
            _ => None,
        }
    }

    pub fn retain_divergence(self) -> Option<RetainDivergence> {
        match self {
            Method::NpoKl | Method::DpoKl | Method::SimNpoKl => Some(RetainDivergence::Kl),
            Method::NpoMse | Method::DpoMse | Method::SimNpoMse => Some(RetainDivergence::Mse),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown method {s:?}")))
    }
}

fn one() -> f64 {
    1.0
}

/// Every hyperparameter of one unlearning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    pub unlearn_layer: usize,
    /// Target magnitude `c` of RMU and RSV.
    pub coefficient: f64,
    /// Adaptive RMU's `β`.
    pub scaling_factor: f64,
    /// Variance scale of RSV's Gaussian direction before normalization.
    pub rsv_mu: f64,
    /// Retain weight `α`.
    pub retain_weight: f64,
    /// Preference temperature `β`.
    pub po_beta: f64,
    /// SimNPO margin `γ`.
    pub gamma: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Layers updated by the optimizer; `None` selects `{l−2, l−1, l}`.
    #[serde(default)]
    pub trainable_layers: Option<Vec<usize>>,
    pub rna_enabled: bool,
    /// RNA noise variance `ν`.
    pub noise_scale: f64,
    /// Layer whose reference retain state receives the noise; `None` selects `l`.
    #[serde(default)]
    pub rna_layer: Option<usize>,
    pub seed: u64,
    /// Multiplier of the forget term.
    #[serde(default = "one")]
    pub forget_weight: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl UnlearnConfig {
    pub fn rna_layer(&self) -> usize {
        self.rna_layer.unwrap_or(self.unlearn_layer)
    }

    pub fn trainable(&self) -> Trainable {
        match &self.trainable_layers {
            Some(layers) => Trainable::layers(layers.iter().copied()),
            None => Trainable::around(self.unlearn_layer),
        }
    }

    /// Whether retain targets receive noise on this run.
    pub fn rna_active(&self) -> bool {
        self.rna_enabled && self.noise_scale > 0.0
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let in_range = |l: usize| l >= 1 && l <= num_layers;
        if !in_range(self.unlearn_layer) {
            return input(format!(
                "unlearn_layer {} outside 1..={num_layers}",
                self.unlearn_layer
            ));
        }
        if !in_range(self.rna_layer()) {
            return input(format!("rna_layer {} outside 1..={num_layers}", self.rna_layer()));
        }
        self.trainable().validate(num_layers)?;
        if self.trainable().layers.is_empty() {
            return input("trainable layer set is empty");
        }
        let checks = [
            ("retain_weight", self.retain_weight >= 0.0),
            ("noise_scale", self.noise_scale >= 0.0),
            ("po_beta", self.po_beta > 0.0),
            ("gamma", self.gamma >= 0.0),
            ("learning_rate", self.learning_rate > 0.0),
            ("forget_weight", self.forget_weight >= 0.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("rsv_mu", self.rsv_mu > 0.0),
            ("coefficient", self.coefficient >= 0.0),
            ("scaling_factor", self.scaling_factor >= 0.0),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
            return input(format!("{name} is out of range"));
        }
        if self.batch_size == 0 {
            return input("batch_size must be at least 1");
        }
        Ok(())
    }

    /// Resolves a named profile for one method.
    pub fn profile(name: &str, method: Method) -> Result<Self> {
        match name {
            "paper-defaults" => Ok(large_model_defaults(method)),
            "desk" => Ok(desk(method)),
            other => input(format!(
                "unknown profile {other:?} (expected \"paper-defaults\" or \"desk\")"
            )),
        }
    }
}

/// Hyperparameters used for 7B-scale models: layer 7, `c = 6.5`, `α = 1200`,
/// `β = 3`, preference temperature 0.1, `γ = 0`, 500 steps at learning rate
/// 5e-5 with batch size 4.
pub fn large_model_defaults(method: Method) -> UnlearnConfig {
    UnlearnConfig {
        method,
        unlearn_layer: 7,
        coefficient: 6.5,
        scaling_factor: 3.0,
        rsv_mu: 1.0,
        retain_weight: 1200.0,
        po_beta: 0.1,
        gamma: 0.0,
        steps: 500,
        learning_rate: 5e-5,
        batch_size: 4,
        trainable_layers: None,
        rna_enabled: false,
        noise_scale: 0.0,
        rna_layer: None,
        seed: 0,
        forget_weight: 1.0,
        weight_decay: 0.0,
    }
}

/// Values tuned for the desk-scale model of [`crate::profile`].
pub fn desk(method: Method) -> UnlearnConfig {
    let p = crate::profile::desk_method(method);
    UnlearnConfig {
        method,
        unlearn_layer: crate::profile::DESK_UNLEARN_LAYER,
        coefficient: p.coefficient,
        scaling_factor: p.scaling_factor,
        rsv_mu: 1.0,
        retain_weight: p.retain_weight,
        po_beta: p.po_beta,
        gamma: 0.0,
        steps: p.steps,
        learning_rate: p.learning_rate,
        batch_size: p.batch_size,
        trainable_layers: None,
        rna_enabled: false,
        noise_scale: p.noise_scale,
        rna_layer: None,
        seed: 0,
        forget_weight: 1.0,
        weight_decay: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("GA".parse::<Method>().is_err());
    }

    #[test]
    fn large_model_profile_values() {
        let c = UnlearnConfig::profile("paper-defaults", Method::Rmu).unwrap();
        assert_eq!(c.unlearn_layer, 7);
        assert_eq!(c.coefficient, 6.5);
        assert_eq!(c.retain_weight, 1200.0);
        assert_eq!(c.scaling_factor, 3.0);
        assert_eq!(c.po_beta, 0.1);
        assert_eq!(c.trainable().layers.into_iter().collect::<Vec<_>>(), vec![5, 6, 7]);
        assert!(UnlearnConfig::profile("nope", Method::Rmu).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = desk(Method::NpoKl);
        assert!(c.validate(6).is_ok());
        c.po_beta = 0.0;
        assert!(c.validate(6).is_err());
        let mut c = desk(Method::Rmu);
        c.unlearn_layer = 7;
        assert!(c.validate(6).is_err());
        let mut c = desk(Method::Rmu);
        c.noise_scale = -1.0;
        assert!(c.validate(6).is_err());
    }
}
