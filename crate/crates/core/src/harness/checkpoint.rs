//! Binary parameter container.
//!
//! ```text
//! "MMF1"
//! repeated per parameter, in construction order:
//!   u32 name_len, name (UTF-8), u32 rank, u32 dims[rank], f32 values[∏dims]
//! ```
//!
//! All integers and floats are little-endian. The architecture is not
//! stored in the container; [`save_model`] writes it next to the file as
//! `CKPT.config.toml` together with the vocabulary as `CKPT.vocab.tsv`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::Vocab;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelConfig, PuzzleModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMF1";

pub fn save_checkpoint(model: &PuzzleModel) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for p in model.params().iter() {
        out.extend((p.name.len() as u32).to_le_bytes());
        out.extend(p.name.as_bytes());
        out.extend((p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated { what: what.to_string() });
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

/// Builds a model from `config` and `vocab`, then replaces every parameter
/// with the stored values. Each stored name and shape must match the
/// parameter the config constructs at the same position.
pub fn load_checkpoint(bytes: &[u8], config: ModelConfig, vocab: Vocab) -> Result<PuzzleModel> {
    let mut model = PuzzleModel::new(config, vocab)?;
    let mut r = Reader { buf: bytes };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() }.into());
    }
    for (index, p) in model.params_mut().iter_mut().enumerate() {
        if r.buf.is_empty() {
            return Err(CheckpointError::Missing { name: p.name.clone() }.into());
        }
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "parameter name")?).map_err(|_| CheckpointError::BadName)?;
        if name != p.name {
            return Err(CheckpointError::NameMismatch {
                index,
                expected: p.name.clone(),
                found: name.to_string(),
            }
            .into());
        }
        let what = format!("shape of {name}");
        let rank = r.u32(&what)?;
        let dims = (0..rank).map(|_| r.u32(&what)).collect::<Result<Vec<_>, _>>()?;
        if dims != p.tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: p.tensor.shape().to_vec(),
                found: dims,
            }
            .into());
        }
        let raw = r.take(4 * p.tensor.numel(), &format!("values of {name}"))?;
        for (dst, chunk) in p.tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Extra { extra: r.buf.len() }.into());
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    split_seed: u64,
    model: ModelConfig,
}

/// `(CKPT.config.toml, CKPT.vocab.tsv)` for a checkpoint path.
pub fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = path.as_os_str().to_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".config.toml"), with(".vocab.tsv"))
}

/// Writes the checkpoint and its sidecars. `split_seed` records which root
/// partition the model was trained against.
pub fn save_model(model: &PuzzleModel, split_seed: u64, path: &Path) -> Result<()> {
    let (cfg_path, vocab_path) = sidecar_paths(path);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, save_checkpoint(model)).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        split_seed,
        model: model.config().clone(),
    };
    let text = toml::to_string(&sidecar).expect("config serializes");
    std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    model.vocab().save(&vocab_path)
}

/// Inverse of [`save_model`]; returns the model and its split seed.
pub fn load_model(path: &Path) -> Result<(PuzzleModel, u64)> {
    let (cfg_path, vocab_path) = sidecar_paths(path);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let sidecar: Sidecar = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", cfg_path.display())))?;
    let vocab = Vocab::load(&vocab_path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((load_checkpoint(&bytes, sidecar.model, vocab)?, sidecar.split_seed))
}
