//! Alignment, cross-attention fusion and pooling.
//!
//! The vision sequence always supplies the queries and the text sequence the
//! keys and values. [`AlignDirection`] only decides which of the two is
//! linearly projected into the other's width before they meet.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamBuilder, ParamId, ParamVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignDirection {
    /// Project text features into the vision width.
    #[serde(alias = "T_to_I")]
    TextToImage,
    /// Project vision features into the text width.
    #[serde(alias = "I_to_T")]
    ImageToText,
}

impl AlignDirection {
    pub const ALL: [AlignDirection; 2] = [AlignDirection::TextToImage, AlignDirection::ImageToText];

    /// Width shared by both sequences after alignment.
    pub fn fused_width(self, d_vision: usize, d_text: usize) -> usize {
        match self {
            AlignDirection::TextToImage => d_vision,
            AlignDirection::ImageToText => d_text,
        }
    }
}

impl fmt::Display for AlignDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignDirection::TextToImage => "T_to_I",
            AlignDirection::ImageToText => "I_to_T",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolVariant {
    /// `tanh(W·x₀ + b)` over the leading (CLS) row.
    #[serde(alias = "first-token")]
    FirstToken,
    /// One learned probe query attends over all rows, then a residual MLP.
    #[serde(alias = "attn-pool")]
    AttnPool,
}

impl PoolVariant {
    pub const ALL: [PoolVariant; 2] = [PoolVariant::FirstToken, PoolVariant::AttnPool];
}

impl fmt::Display for PoolVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolVariant::FirstToken => "first-token",
            PoolVariant::AttnPool => "attn-pool",
        })
    }
}

fn default_heads() -> usize {
    4
}
fn default_blocks() -> usize {
    1
}
fn default_ffn() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub align: AlignDirection,
    pub pool: PoolVariant,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_blocks")]
    pub n_blocks: usize,
    /// Include the MLP sublayer in each fusion block.
    #[serde(default = "default_ffn")]
    pub ffn: bool,
}

impl FusionConfig {
    pub fn new(align: AlignDirection, pool: PoolVariant) -> Self {
        Self {
            align,
            pool,
            n_heads: default_heads(),
            n_blocks: default_blocks(),
            ffn: default_ffn(),
        }
    }

    pub fn validate(&self, d_fuse: usize) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("fusion needs at least one block".into()));
        }
        if self.n_heads == 0 || !d_fuse.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "fusion n_heads {} does not divide fused width {d_fuse}",
                self.n_heads
            )));
        }
        Ok(())
    }
}

/// Linear map bringing one tower into the other's width.
#[derive(Clone, Debug)]
pub struct Aligner {
    pub direction: AlignDirection,
    pub proj: Linear,
    pub d_vision: usize,
    pub d_text: usize,
}

impl Aligner {
    pub fn new(b: &mut ParamBuilder, direction: AlignDirection, d_vision: usize, d_text: usize) -> Self {
        let proj = match direction {
            AlignDirection::TextToImage => Linear::new(b, "align", d_text, d_vision, true),
            AlignDirection::ImageToText => Linear::new(b, "align", d_vision, d_text, true),
        };
        Self {
            direction,
            proj,
            d_vision,
            d_text,
        }
    }

    pub fn d_fuse(&self) -> usize {
        self.direction.fused_width(self.d_vision, self.d_text)
    }

    /// Returns `(q_src, kv_src)`: the (possibly projected) vision sequence and
    /// the (possibly projected) text sequence, both `d_fuse` wide.
    pub fn forward(&self, t: &mut Tape, p: &ParamVars, vision: Var, text: Var) -> Result<(Var, Var)> {
        let dv = t.shape(vision).last().copied();
        let dt = t.shape(text).last().copied();
        if dv != Some(self.d_vision) || dt != Some(self.d_text) {
            return Err(Error::dim(
                "align",
                format!(
                    "expected widths {}/{}, got vision {:?} and text {:?}",
                    self.d_vision,
                    self.d_text,
                    t.shape(vision),
                    t.shape(text)
                ),
            ));
        }
        match self.direction {
            AlignDirection::TextToImage => Ok((vision, self.proj.forward(t, p, text)?)),
            AlignDirection::ImageToText => Ok((self.proj.forward(t, p, vision)?, text)),
        }
    }
}

/// One pre-norm cross-attention transformer block:
/// `x = q + MHA(LN(q), LN(kv))`, then `x = x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    ffn: Option<(LayerNorm, FeedForward)>,
}

impl FusionBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize, n_heads: usize, ffn: bool) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                ln_q: LayerNorm::new(b, "ln_q", d),
                ln_kv: LayerNorm::new(b, "ln_kv", d),
                attn: MultiHeadAttention::new(b, "cross_attn", d, n_heads)?,
                ffn: ffn.then(|| (LayerNorm::new(b, "ln_ffn", d), FeedForward::new(b, "ffn", d))),
            })
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &ParamVars, q_src: Var, kv_src: Var, kv_mask: Option<&[bool]>) -> Result<Var> {
        let q = self.ln_q.forward(t, p, q_src)?;
        let kv = self.ln_kv.forward(t, p, kv_src)?;
        let a = self.attn.forward(t, p, q, kv, kv_mask)?;
        let x = t.add(q_src, a)?;
        match &self.ffn {
            Some((ln, ffn)) => {
                let h = ln.forward(t, p, x)?;
                let h = ffn.forward(t, p, h)?;
                t.add(x, h)
            }
            None => Ok(x),
        }
    }
}

/// Stack of [`FusionBlock`]s sharing the same key/value sequence, followed by
/// a final layer norm. Output length equals the query (vision) length.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub blocks: Vec<FusionBlock>,
    ln_final: LayerNorm,
}

impl Fusion {
    pub fn new(b: &mut ParamBuilder, d: usize, cfg: &FusionConfig) -> Result<Self> {
        cfg.validate(d)?;
        b.scope("fusion", |b| {
            Ok(Self {
                blocks: (0..cfg.n_blocks)
                    .map(|i| FusionBlock::new(b, &format!("block{i}"), d, cfg.n_heads, cfg.ffn))
                    .collect::<Result<_>>()?,
                ln_final: LayerNorm::new(b, "ln_final", d),
            })
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &ParamVars, q_src: Var, kv_src: Var, kv_mask: Option<&[bool]>) -> Result<Var> {
        if t.shape(q_src).last() != t.shape(kv_src).last() {
            return Err(Error::dim(
                "fuse_block",
                format!("q_src {:?} and kv_src {:?} are not aligned", t.shape(q_src), t.shape(kv_src)),
            ));
        }
        let mut x = q_src;
        for block in &self.blocks {
            x = block.forward(t, p, x, kv_src, kv_mask)?;
        }
        self.ln_final.forward(t, p, x)
    }
}

/// Reduces the fused sequence to one vector.
#[derive(Clone, Debug)]
pub enum Pooler {
    FirstToken {
        dense: Linear,
    },
    Attn {
        probe: ParamId,
        attn: MultiHeadAttention,
        ln: LayerNorm,
        ffn: FeedForward,
    },
}

impl Pooler {
    pub fn new(b: &mut ParamBuilder, variant: PoolVariant, d: usize, n_heads: usize) -> Result<Self> {
        b.scope("pool", |b| {
            Ok(match variant {
                PoolVariant::FirstToken => Pooler::FirstToken {
                    dense: Linear::new(b, "dense", d, d, true),
                },
                PoolVariant::AttnPool => Pooler::Attn {
                    probe: b.normal("probe", &[1, d], 0.02),
                    attn: MultiHeadAttention::new(b, "attn", d, n_heads)?,
                    ln: LayerNorm::new(b, "ln", d),
                    ffn: FeedForward::new(b, "ffn", d),
                },
            })
        })
    }

    pub fn variant(&self) -> PoolVariant {
        match self {
            Pooler::FirstToken { .. } => PoolVariant::FirstToken,
            Pooler::Attn { .. } => PoolVariant::AttnPool,
        }
    }

    /// `fused: [Nq, d]` → `[d]`.
    pub fn forward(&self, t: &mut Tape, p: &ParamVars, fused: Var) -> Result<Var> {
        let d = match t.shape(fused) {
            [n, d] if *n >= 1 => *d,
            s => return Err(Error::dim("pool", format!("expected [Nq >= 1, d], got {s:?}"))),
        };
        let pooled = match self {
            Pooler::FirstToken { dense } => {
                let x0 = t.gather_rows(fused, &[0])?;
                let h = dense.forward(t, p, x0)?;
                t.tanh(h)?
            }
            Pooler::Attn { probe, attn, ln, ffn } => {
                let x = attn.forward(t, p, p[*probe], fused, None)?;
                let h = ln.forward(t, p, x)?;
                let h = ffn.forward(t, p, h)?;
                t.add(x, h)?
            }
        };
        t.reshape(pooled, &[d])
    }
}
