use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Size and shape of one encoder tower. Vision towers read `patch_size` and
/// `image_side`; text towers read `vocab_size` and `max_seq_len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EncoderConfig {
    /// Label shown in ablation reports.
    pub name: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl EncoderConfig {
    /// Desk-scale default: 64-wide, 2 layers, 4 heads, 32 px images in 8 px
    /// patches, 64 tokens over a 512-word vocabulary.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            patch_size: 8,
            image_side: 32,
            vocab_size: 512,
            max_seq_len: 64,
        }
    }

    /// `tiny` widened to 96.
    pub fn small() -> Self {
        Self {
            name: "small".into(),
            d_model: 96,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            other => Err(Error::Config(format!("unknown encoder preset {other:?} (expected tiny or small)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("patch_size", self.patch_size),
            ("image_side", self.image_side),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {}: {k} must be positive", self.name)));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "encoder {}: n_heads {} does not divide d_model {}",
                self.name, self.n_heads, self.d_model
            )));
        }
        if !self.image_side.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "encoder {}: patch_size {} does not divide image_side {}",
                self.name, self.patch_size, self.image_side
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(format!("encoder {}: vocab_size must cover the 3 reserved ids", self.name)));
        }
        Ok(())
    }

    /// Patch tokens per image, excluding the CLS token.
    pub fn num_patches(&self) -> usize {
        let g = self.image_side / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EncoderSpec {
    Preset(String),
    Full(FullSpec),
}

/// Explicit table form; missing fields fall back to `preset` (default tiny).
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FullSpec {
    preset: Option<String>,
    name: Option<String>,
    d_model: Option<usize>,
    n_heads: Option<usize>,
    n_layers: Option<usize>,
    patch_size: Option<usize>,
    image_side: Option<usize>,
    vocab_size: Option<usize>,
    max_seq_len: Option<usize>,
}

impl<'de> Deserialize<'de> for EncoderConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match EncoderSpec::deserialize(d)? {
            EncoderSpec::Preset(name) => EncoderConfig::preset(&name).map_err(D::Error::custom),
            EncoderSpec::Full(f) => {
                let base = match &f.preset {
                    Some(p) => EncoderConfig::preset(p).map_err(D::Error::custom)?,
                    None => EncoderConfig::tiny(),
                };
                Ok(EncoderConfig {
                    name: f.name.or(f.preset).unwrap_or(base.name),
                    d_model: f.d_model.unwrap_or(base.d_model),
                    n_heads: f.n_heads.unwrap_or(base.n_heads),
                    n_layers: f.n_layers.unwrap_or(base.n_layers),
                    patch_size: f.patch_size.unwrap_or(base.patch_size),
                    image_side: f.image_side.unwrap_or(base.image_side),
                    vocab_size: f.vocab_size.unwrap_or(base.vocab_size),
                    max_seq_len: f.max_seq_len.unwrap_or(base.max_seq_len),
                })
            }
        }
    }
}
