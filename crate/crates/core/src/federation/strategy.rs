//! Strategy registry and validated strategy parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A validated aggregation strategy with exactly the parameters it uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// Similarity-weighted aggregation of `A`; `B` stays local.
    Epfl { lambda: f64, epsilon: f64 },
    /// Uniform average of every client's `A`; `B` stays local.
    SimpleAvgA,
    FedAvg,
    FedProx { mu: f64 },
    Scaffold,
    Apfl { alpha: f64 },
    LocalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Average classification heads across clients (A-only strategies).
    pub share_head: bool,
}

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_MU: f64 = 0.01;
pub const DEFAULT_APFL_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Availability {
    Implemented,
    ExtensionPoint,
}

pub struct RegistryEntry {
    pub name: &'static str,
    pub availability: Availability,
    pub parameters: &'static [&'static str],
    pub summary: &'static str,
}

pub const REGISTRY: &[RegistryEntry] = &[
    RegistryEntry {
        name: "epfl",
        availability: Availability::Implemented,
        parameters: &["lambda", "epsilon", "share_head"],
        summary: "B-distance similarity weights aggregate LoRA A; B and head stay local",
    },
    RegistryEntry {
        name: "simple-avg-a",
        availability: Availability::Implemented,
        parameters: &["share_head"],
        summary: "uniform average of LoRA A; B and head stay local",
    },
    RegistryEntry {
        name: "fedavg",
        availability: Availability::Implemented,
        parameters: &[],
        summary: "size-weighted average of all trainable tensors",
    },
    RegistryEntry {
        name: "fedprox",
        availability: Availability::Implemented,
        parameters: &["mu"],
        summary: "fedavg with a proximal term towards the round's global model",
    },
    RegistryEntry {
        name: "scaffold",
        availability: Availability::Implemented,
        parameters: &[],
        summary: "fedavg with server and client control variates",
    },
    RegistryEntry {
        name: "apfl",
        availability: Availability::Implemented,
        parameters: &["apfl_alpha"],
        summary: "mixture of a personalized local model and the shared global model",
    },
    RegistryEntry {
        name: "local-only",
        availability: Availability::Implemented,
        parameters: &[],
        summary: "no communication",
    },
    RegistryEntry {
        name: "apple",
        availability: Availability::ExtensionPoint,
        parameters: &[],
        summary: "registered, not provided",
    },
    RegistryEntry {
        name: "fedala",
        availability: Availability::ExtensionPoint,
        parameters: &[],
        summary: "registered, not provided",
    },
];

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Epfl { .. } => "epfl",
            Strategy::SimpleAvgA => "simple-avg-a",
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx { .. } => "fedprox",
            Strategy::Scaffold => "scaffold",
            Strategy::Apfl { .. } => "apfl",
            Strategy::LocalOnly => "local-only",
        }
    }

    /// Whether the server keeps a single global model.
    pub fn uses_global_model(&self) -> bool {
        matches!(
            self,
            Strategy::FedAvg | Strategy::FedProx { .. } | Strategy::Scaffold | Strategy::Apfl { .. }
        )
    }
}

/// Strategy section of the configuration as written by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apfl_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub share_head: Option<bool>,
}

impl Default for StrategySection {
    fn default() -> Self {
        Self {
            name: "epfl".into(),
            lambda: None,
            epsilon: None,
            mu: None,
            apfl_alpha: None,
            share_head: None,
        }
    }
}

impl StrategySection {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn resolve(&self) -> Result<StrategyConfig> {
        let entry = REGISTRY
            .iter()
            .find(|e| e.name == self.name)
            .ok_or_else(|| {
                let known: Vec<&str> = REGISTRY.iter().map(|e| e.name).collect();
                Error::config(
                    "strategy.name",
                    format!("unknown strategy `{}` (known: {})", self.name, known.join(", ")),
                )
            })?;
        if entry.availability == Availability::ExtensionPoint {
            return Err(Error::NotImplemented(self.name.clone()));
        }
        let given = [
            ("lambda", self.lambda.is_some()),
            ("epsilon", self.epsilon.is_some()),
            ("mu", self.mu.is_some()),
            ("apfl_alpha", self.apfl_alpha.is_some()),
            ("share_head", self.share_head.is_some()),
        ];
        for (param, present) in given {
            if present && !entry.parameters.contains(&param) {
                return Err(Error::config(
                    format!("strategy.{param}"),
                    format!("not a parameter of `{}`", self.name),
                ));
            }
        }
        let strategy = match entry.name {
            "epfl" => {
                let lambda = self.lambda.unwrap_or(DEFAULT_LAMBDA);
                if !(0.0..=1.0).contains(&lambda) {
                    return Err(Error::config("strategy.lambda", format!("{lambda} outside [0, 1]")));
                }
                let epsilon = self.epsilon.unwrap_or(DEFAULT_EPSILON);
                if !(epsilon > 0.0 && epsilon.is_finite()) {
                    return Err(Error::config("strategy.epsilon", format!("{epsilon} must be > 0")));
                }
                Strategy::Epfl { lambda, epsilon }
            }
            "simple-avg-a" => Strategy::SimpleAvgA,
            "fedavg" => Strategy::FedAvg,
            "fedprox" => {
                let mu = self.mu.unwrap_or(DEFAULT_MU);
                if !(mu >= 0.0 && mu.is_finite()) {
                    return Err(Error::config("strategy.mu", format!("{mu} must be ≥ 0")));
                }
                Strategy::FedProx { mu }
            }
            "scaffold" => Strategy::Scaffold,
            "apfl" => {
                let alpha = self.apfl_alpha.unwrap_or(DEFAULT_APFL_ALPHA);
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::config(
                        "strategy.apfl_alpha",
                        format!("{alpha} outside [0, 1]"),
                    ));
                }
                Strategy::Apfl { alpha }
            }
            "local-only" => Strategy::LocalOnly,
            other => unreachable!("registry entry {other} without a constructor"),
        };
        Ok(StrategyConfig {
            strategy,
            share_head: self.share_head.unwrap_or(false),
        })
    }
}
