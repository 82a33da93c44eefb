use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gdc::CapsuleMode;
use crate::numcore::Precision;
use crate::Modality;

/// Ablation switches. All off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Acoustic and visual sequences are projected and average-pooled to
    /// `T_l` rows; no capsules, edges or GCN.
    pub no_gdc: bool,
    /// Capsule routing is replaced by average-pooled nodes; edges and GCN stay.
    pub no_caps: bool,
    /// Skip selection and always use this primary.
    pub fixed_primary: Option<Modality>,
    /// Regress on the primary sequence without cross-attention.
    pub no_pcca: bool,
}

impl Ablation {
    pub fn is_full(&self) -> bool {
        *self == Ablation::default()
    }

    /// Applies one flag name: `no_gdc`, `no_caps`, `no_pcca`, `fixed_l`,
    /// `fixed_a`, `fixed_v` or `full` (clears everything).
    pub fn apply(&mut self, flag: &str) -> Result<()> {
        match flag {
            "full" | "none" => *self = Ablation::default(),
            "no_gdc" => self.no_gdc = true,
            "no_caps" => self.no_caps = true,
            "no_pcca" => self.no_pcca = true,
            _ => {
                let m = flag
                    .strip_prefix("fixed_")
                    .or_else(|| flag.strip_suffix("-oriented"))
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation `{flag}`")))?;
                self.fixed_primary = Some(m.parse()?);
            }
        }
        Ok(())
    }
}

impl fmt::Display for Ablation {
    /// Comma-separated active flags, or `full`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.no_gdc {
            parts.push("no_gdc".to_string());
        }
        if self.no_caps {
            parts.push("no_caps".to_string());
        }
        if let Some(m) = self.fixed_primary {
            parts.push(format!("fixed_{m}"));
        }
        if self.no_pcca {
            parts.push("no_pcca".to_string());
        }
        if parts.is_empty() {
            f.write_str("full")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width shared by every module.
    pub d: usize,
    pub pcca_depth: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Feed-forward inner width is `ff_mult·d`.
    pub ff_mult: usize,
    pub routing_iters: usize,
    pub gcn_layers: usize,
    pub capsule_mode: CapsuleMode,
    /// Longest language sequence; bounds the node count `J = T_l`.
    pub max_nodes: usize,
    /// Longest acoustic or visual sequence in full capsule mode.
    pub max_len: usize,
    pub ablation: Ablation,
    /// Weight of the contrastive term.
    pub alpha: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Reserved; only 0 is accepted.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            pcca_depth: 3,
            heads: 4,
            ff_mult: 2,
            routing_iters: 3,
            gcn_layers: 2,
            capsule_mode: CapsuleMode::Shared,
            max_nodes: 64,
            max_len: 512,
            ablation: Ablation::default(),
            alpha: 0.1,
            tau: 0.1,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.d == 0 {
            return bad("d must be at least 1".into());
        }
        if self.pcca_depth == 0 {
            return bad("pcca_depth must be at least 1".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("heads = {} must divide d = {}", self.heads, self.d));
        }
        if self.ff_mult == 0 || self.routing_iters == 0 || self.max_nodes == 0 || self.max_len == 0 {
            return bad("ff_mult, routing_iters, max_nodes and max_len must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be finite and > 0, got {}", self.tau));
        }
        if self.dropout != 0.0 {
            return bad(format!("dropout is not supported, got {}", self.dropout));
        }
        if self.ablation.no_gdc && self.ablation.no_caps {
            return bad("no_gdc and no_caps are mutually exclusive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Decoupled weight decay, scaled by the learning rate.
    pub weight_decay: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Storage precision of parameters and optimizer moments.
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            weight_decay: 1e-3,
            patience: 25,
            max_epochs: 100,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return bad("batch_size, patience and max_epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// Hyperparameter columns for four benchmark-like settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "mosi-like")]
    MosiLike,
    #[serde(rename = "mosei-like")]
    MoseiLike,
    #[serde(rename = "sims-like")]
    SimsLike,
    #[serde(rename = "simsv2-like")]
    Simsv2Like,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::MosiLike, Preset::MoseiLike, Preset::SimsLike, Preset::Simsv2Like];

    pub fn name(self) -> &'static str {
        match self {
            Preset::MosiLike => "mosi-like",
            Preset::MoseiLike => "mosei-like",
            Preset::SimsLike => "sims-like",
            Preset::Simsv2Like => "simsv2-like",
        }
    }

    /// Label range of the matching benchmark.
    pub fn label_range(self) -> [f64; 2] {
        match self {
            Preset::MosiLike | Preset::MoseiLike => [-3.0, 3.0],
            Preset::SimsLike | Preset::Simsv2Like => [-1.0, 1.0],
        }
    }

    pub fn configs(self) -> (ModelConfig, TrainConfig) {
        // (lr, batch, d, depth, alpha, weight decay, patience)
        let (lr, batch, d, depth, alpha, wd, patience) = match self {
            Preset::MosiLike => (3e-5, 32, 128, 3, 0.1, 1e-3, 25),
            Preset::MoseiLike => (1e-5, 64, 128, 3, 0.1, 1e-3, 15),
            Preset::SimsLike => (1e-5, 32, 64, 3, 0.01, 1e-2, 25),
            Preset::Simsv2Like => (1e-5, 32, 128, 4, 0.01, 1e-2, 25),
        };
        let model = ModelConfig {
            d,
            pcca_depth: depth,
            alpha,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            learning_rate: lr,
            batch_size: batch,
            weight_decay: wd,
            patience,
            ..TrainConfig::default()
        };
        (model, train)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset `{s}`")))
    }
}
