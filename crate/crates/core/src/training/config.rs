use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::lsa::{EtaMode, ModelConfig, Variant, WindowLayout};

/// Everything that determines a training run. Serialized as flat TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Neighbours per side in the aggregation window.
    pub k: usize,
    /// Distance up to which tokens keep their full weight.
    pub alpha: f64,
    pub max_len: usize,
    /// Examples per optimizer step; every aspect of an example is included.
    pub batch_size: usize,
    pub lr: f64,
    pub eta_lr: f64,
    /// Decoupled weight decay of the model parameters.
    pub l2: f64,
    /// Decoupled weight decay of the window weights.
    pub eta_l2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub no_dwa: bool,
    pub la_only: bool,
    pub ra_only: bool,
    pub backbone_only: bool,
    /// Fixed `[eta_l, eta_r]`; implies the weights are not trained.
    pub static_eta: Option<[f64; 2]>,
    pub freeze_encoder: bool,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub parse_path: Option<PathBuf>,
    /// Share of training examples held out for model selection when no
    /// validation file is given.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::LsaT,
            k: 1,
            alpha: 3.0,
            max_len: 80,
            batch_size: 16,
            lr: 1e-3,
            eta_lr: 0.01,
            l2: 1e-5,
            eta_l2: 1e-5,
            epochs: 20,
            seed: 0,
            no_dwa: false,
            la_only: false,
            ra_only: false,
            backbone_only: false,
            static_eta: None,
            freeze_encoder: false,
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            train_path: None,
            val_path: None,
            test_path: None,
            parse_path: None,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 || self.max_len == 0 || self.batch_size == 0 {
            return fail("k, max_len and batch_size must be positive");
        }
        if self.d_model == 0 || self.heads == 0 || self.ff_dim == 0 {
            return fail("model dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail("d_model must be divisible by heads");
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("lr", self.lr),
            ("eta_lr", self.eta_lr),
            ("l2", self.l2),
            ("eta_l2", self.eta_l2),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail("val_fraction must be in [0, 1)");
        }
        if self.la_only && self.ra_only {
            return fail("la_only and ra_only are mutually exclusive");
        }
        if self.backbone_only && (self.la_only || self.ra_only) {
            return fail("backbone_only cannot be combined with la_only or ra_only");
        }
        if let Some(eta) = self.static_eta {
            if eta.iter().any(|e| !e.is_finite()) {
                return fail("static_eta must be finite");
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> WindowLayout {
        if self.backbone_only {
            WindowLayout::TargetOnly
        } else if self.la_only {
            WindowLayout::LeftOnly
        } else if self.ra_only {
            WindowLayout::RightOnly
        } else {
            WindowLayout::Full
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let layout = self.layout();
        let (eta, initial_eta) = match (self.static_eta, self.no_dwa || layout == WindowLayout::TargetOnly) {
            (Some(e), _) => (EtaMode::Fixed, e),
            (None, true) => (EtaMode::Off, [1.0, 1.0]),
            (None, false) => (EtaMode::Learned, [1.0, 1.0]),
        };
        ModelConfig {
            variant: self.variant,
            encoder: EncoderConfig {
                vocab_size,
                d_model: self.d_model,
                layers: self.layers,
                heads: self.heads,
                ff_dim: self.ff_dim,
                max_len: self.max_len,
            },
            k: self.k,
            alpha: self.alpha,
            layout,
            eta,
            initial_eta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = TrainConfig::from_toml_str("variant = \"lsa_s\"\nepochs = 3\nstatic_eta = [0.2, 0.8]\n").unwrap();
        assert_eq!(cfg.variant, Variant::LsaS);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.model_config(10).eta, EtaMode::Fixed);
        assert_eq!(cfg.model_config(10).initial_eta, [0.2, 0.8]);
    }

    #[test]
    fn contradictory_ablations_rejected() {
        let cfg = TrainConfig {
            la_only: true,
            ra_only: true,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(TrainConfig::from_toml_str("unknown_key = 1").is_err());
        assert!(TrainConfig::from_toml_str("heads = 3").is_err());
    }

    #[test]
    fn ablation_routing() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.model_config(5).eta, EtaMode::Learned);
        cfg.no_dwa = true;
        assert_eq!(cfg.model_config(5).eta, EtaMode::Off);
        cfg.no_dwa = false;
        cfg.backbone_only = true;
        assert_eq!(cfg.layout(), WindowLayout::TargetOnly);
        assert_eq!(cfg.model_config(5).eta, EtaMode::Off);
    }
}
