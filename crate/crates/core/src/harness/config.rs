use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

fn default_lr() -> f64 {
    3e-4
}
fn default_wd() -> f64 {
    0.01
}
fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    10
}
fn default_clip() -> f64 {
    1.0
}

/// Optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Global L2 gradient-norm threshold.
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
    /// Seeds the per-epoch shuffle.
    #[serde(default)]
    pub seed: u64,
    /// Present each training instance with its options in a fresh random
    /// order every epoch.
    #[serde(default)]
    pub shuffle_options: bool,
    /// Linear ramp of the learning rate over the first steps.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Cosine decay of the learning rate to zero at the last step.
    #[serde(default)]
    pub cosine_decay: bool,
    /// Epochs of image/option matching on the training split before the main
    /// run. The vision tower of the trained model starts from the result.
    #[serde(default)]
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            grad_clip_norm: default_clip(),
            seed: 0,
            shuffle_options: false,
            warmup_steps: 0,
            cosine_decay: false,
            pretrain_epochs: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate for 1-based optimizer step `step` of `total`.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let mut lr = self.learning_rate;
        if step <= self.warmup_steps {
            lr *= step as f64 / self.warmup_steps as f64;
        }
        if self.cosine_decay && total > self.warmup_steps {
            let frac = (step - self.warmup_steps.min(step)) as f64 / (total - self.warmup_steps) as f64;
            lr *= 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        lr
    }

    /// Learning rate and weight decay may be zero; everything else must be
    /// strictly positive.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: String| Err(Error::Config(format!("{what} must be {v}")));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", format!("finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("finite and >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "positive".into());
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm", format!("finite and > 0, got {}", self.grad_clip_norm));
        }
        Ok(())
    }
}

/// Contents of a `train --config` file.
///
/// ```toml
/// split_seed = 0
///
/// [model]
/// seed = 0
/// vision = "tiny"
/// text = "tiny"
/// fusion = { align = "text_to_image", pool = "attn_pool" }
///
/// [train]
/// learning_rate = 1e-3
/// epochs = 20
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub split_seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Contents of an `ablate --grid` file. Every entry in `model` is trained
/// with the grid's `seed`, `split_seed` and `train` settings; any `seed` in an
/// entry is overridden.
///
/// ```toml
/// seed = 0
///
/// [train]
/// epochs = 5
///
/// [[model]]
/// vision = "tiny"
/// text = "tiny"
/// head = "matching"
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    pub model: Vec<ModelConfig>,
}

impl GridConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.model.is_empty() {
            return Err(Error::Config("grid has no [[model]] entries".into()));
        }
        cfg.train.validate()?;
        for m in &mut cfg.model {
            m.seed = cfg.seed;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = TrainConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            cosine_decay: true,
            ..TrainConfig::default()
        };
        assert_eq!(c.learning_rate_at(1, 14), 0.25);
        assert_eq!(c.learning_rate_at(4, 14), 1.0);
        assert!((c.learning_rate_at(9, 14) - 0.5).abs() < 1e-12);
        assert!(c.learning_rate_at(14, 14).abs() < 1e-12);
        let flat = TrainConfig::default();
        assert_eq!(flat.learning_rate_at(1, 10), flat.learning_rate);
        assert_eq!(flat.learning_rate_at(10, 10), flat.learning_rate);
    }

    #[test]
    fn defaults_are_documented_values() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.weight_decay, c.grad_clip_norm), (3e-4, 0.01, 1.0));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_non_positive_fields() {
        for c in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { grad_clip_norm: 0.0, ..Default::default() },
            TrainConfig { learning_rate: -1.0, ..Default::default() },
            TrainConfig { weight_decay: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn doc_examples_parse() {
        let run = RunConfig::from_toml(
            "split_seed = 0\n[model]\nseed = 0\nvision = \"tiny\"\ntext = \"tiny\"\n\
             fusion = { align = \"text_to_image\", pool = \"attn_pool\" }\n[train]\nlearning_rate = 1e-3\nepochs = 20\n",
        )
        .unwrap();
        assert_eq!(run.train.epochs, 20);
        assert_eq!(RunConfig::from_toml(&run.to_toml()).unwrap(), run);

        let grid = GridConfig::from_toml(
            "seed = 7\n[train]\nepochs = 5\n[[model]]\nseed = 3\nvision = \"tiny\"\ntext = \"tiny\"\nhead = \"matching\"\n",
        )
        .unwrap();
        assert_eq!(grid.model[0].seed, 7);
        assert_eq!(GridConfig::from_toml(&grid.to_toml()).unwrap(), grid);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::from_toml("[model]\nseed=0\nvision=\"tiny\"\ntext=\"tiny\"\nwidth=3\n").is_err());
        assert!(GridConfig::from_toml("seed = 1\n").is_err());
    }
}
