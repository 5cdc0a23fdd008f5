use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamBuilder, ParamId, ParamVars, TransformerBlock};

use super::config::EncoderConfig;
use super::text::TokenSequence;

const VISION_EMBED_STD: f64 = 0.02;
const TEXT_EMBED_STD: f64 = 1.0;

/// ViT-style image tower: patch embedding, learned CLS token and positions,
/// pre-norm self-attention blocks, final layer norm.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub config: EncoderConfig,
    patch_embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_final: LayerNorm,
}

impl VisionEncoder {
    pub fn new(b: &mut ParamBuilder, name: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        b.scope(name, |b| {
            Ok(Self {
                config: config.clone(),
                patch_embed: Linear::new(b, "patch_embed", config.patch_dim(), d, true),
                cls: b.normal("cls", &[1, d], VISION_EMBED_STD),
                pos: b.normal("pos", &[config.num_patches() + 1, d], VISION_EMBED_STD),
                blocks: (0..config.n_layers)
                    .map(|i| TransformerBlock::new(b, &format!("block{i}"), d, config.n_heads))
                    .collect::<Result<_>>()?,
                ln_final: LayerNorm::new(b, "ln_final", d),
            })
        })
    }

    /// `patches: [Nv, 3p²]` → `[(Nv+1), d_model]`; row 0 is the CLS token.
    pub fn forward(&self, t: &mut Tape, p: &ParamVars, patches: Var) -> Result<Var> {
        let want = [self.config.num_patches(), self.config.patch_dim()];
        if t.shape(patches) != want {
            return Err(Error::dim(
                "encode_vision",
                format!("expected patches {want:?}, got {:?}", t.shape(patches)),
            ));
        }
        let x = self.patch_embed.forward(t, p, patches)?;
        let x = t.concat_rows(&[p[self.cls], x])?;
        let mut x = t.add(x, p[self.pos])?;
        for block in &self.blocks {
            x = block.forward(t, p, x, None)?;
        }
        self.ln_final.forward(t, p, x)
    }
}

/// Text tower: token and position embeddings, pre-norm self-attention
/// blocks, final layer norm.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: EncoderConfig,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_final: LayerNorm,
}

impl TextEncoder {
    pub fn new(b: &mut ParamBuilder, name: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        b.scope(name, |b| {
            Ok(Self {
                config: config.clone(),
                tok: b.normal("tok", &[config.vocab_size, d], TEXT_EMBED_STD),
                pos: b.normal("pos", &[config.max_seq_len, d], TEXT_EMBED_STD),
                blocks: (0..config.n_layers)
                    .map(|i| TransformerBlock::new(b, &format!("block{i}"), d, config.n_heads))
                    .collect::<Result<_>>()?,
                ln_final: LayerNorm::new(b, "ln_final", d),
            })
        })
    }

    /// `seq` → `[len, d_model]`.
    ///
    /// Only valid positions are run through the blocks: with masked keys at
    /// exactly zero attention weight this equals full masked attention on the
    /// valid rows. Masked rows of the output are zero.
    pub fn forward(&self, t: &mut Tape, p: &ParamVars, seq: &TokenSequence) -> Result<Var> {
        let len = seq.len();
        if len > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of {len} tokens exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = seq.ids().iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let valid = seq.valid_positions();
        if valid.is_empty() {
            return Err(Error::Input("token sequence has no valid positions".into()));
        }
        let ids: Vec<usize> = valid.iter().map(|&i| seq.ids()[i] as usize).collect();
        let tok = t.gather_rows(p[self.tok], &ids)?;
        let pos = t.gather_rows(p[self.pos], &valid)?;
        let mut x = t.add(tok, pos)?;
        for block in &self.blocks {
            x = block.forward(t, p, x, None)?;
        }
        let x = self.ln_final.forward(t, p, x)?;
        if valid.len() == len {
            Ok(x)
        } else {
            t.scatter_rows(x, &valid, len)
        }
    }
}
