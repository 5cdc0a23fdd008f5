//! Parameter storage and the layers shared by the encoders and the fusion
//! module.

use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;
/// Additive bias applied to masked attention logits. `exp(-1e9)` underflows
/// to exactly zero, so masked keys carry no weight at all.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Named trainable tensors in creation order. The order is part of the
/// checkpoint format.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    fn push(&mut self, name: String, tensor: Tensor) -> ParamId {
        debug_assert!(self.by_name(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            tensor: tensor.with_grad(),
        });
        ParamId(self.params.len() - 1)
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.params.iter().map(|p| tape.param(&p.tensor)).collect())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Bitwise equality of all parameter values.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape() && a.tensor.data() == b.tensor.data())
    }
}

/// Tape handles for every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn as_slice(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for ParamVars {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Creates parameters with hierarchical names and seeded initial values.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    /// Runs `f` with `name` appended to the parameter-name prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("param shape");
        self.store.push(self.full_name(name), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.push(self.full_name(name), Tensor::full(shape.to_vec(), value))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights `N(0, 1/d_in)`, zero bias.
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        b.scope(name, |b| {
            let weight = b.normal("weight", &[d_in, d_out], (1.0 / d_in as f64).sqrt());
            let bias = bias.then(|| b.constant("bias", &[d_out], 0.0));
            Self {
                weight,
                bias,
                d_in,
                d_out,
            }
        })
    }

    /// `x·W + b` for `x: [n, d_in]`.
    pub fn forward(&self, t: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
        linear(t, x, p[self.weight], self.bias.map(|b| p[b]))
    }
}

/// Affine map `x·W + b` on a matrix or a single vector.
pub fn linear(t: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let vector = t.shape(x).len() == 1;
    let xm = if vector {
        let n = t.shape(x)[0];
        t.reshape(x, &[1, n])?
    } else {
        x
    };
    let y = t.matmul(xm, w).map_err(|e| match e {
        Error::Dimension { detail, .. } => Error::dim("linear", detail),
        e => e,
    })?;
    let y = match b {
        Some(b) => t.add_row(y, b)?,
        None => y,
    };
    if vector {
        let n = t.shape(y)[1];
        t.reshape(y, &[n])
    } else {
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize) -> Self {
        b.scope(name, |b| Self {
            gamma: b.constant("gamma", &[d], 1.0),
            beta: b.constant("beta", &[d], 0.0),
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
        t.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// Two-layer GELU MLP with hidden width `4·d`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize) -> Self {
        b.scope(name, |b| Self {
            up: Linear::new(b, "up", d, 4 * d, true),
            down: Linear::new(b, "down", 4 * d, d, true),
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
        let h = self.up.forward(t, p, x)?;
        let h = t.gelu(h)?;
        self.down.forward(t, p, h)
    }
}

/// Scaled dot-product attention split over `n_heads` column groups.
///
/// `q: Nq×d`, `k, v: Nk×d`. Per head `h`, the weights are
/// `softmax(Q_h·K_hᵀ/√(d/n_heads) + mask_bias)` and the head outputs are
/// concatenated back to `Nq×d`. Keys with `kv_mask[j] == false` receive
/// [`MASK_BIAS`]; a mask with no valid key is a contract error.
pub fn attention(t: &mut Tape, q: Var, k: Var, v: Var, kv_mask: Option<&[bool]>, n_heads: usize) -> Result<Var> {
    let (nq, d) = mat_dims(t, "attention", q)?;
    let (nk, dk) = mat_dims(t, "attention", k)?;
    if t.shape(v) != [nk, dk] || dk != d {
        return Err(Error::dim(
            "attention",
            format!("q {:?}, k {:?}, v {:?} are incompatible", t.shape(q), t.shape(k), t.shape(v)),
        ));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::dim("attention", format!("{n_heads} heads do not divide width {d}")));
    }
    let bias = match kv_mask {
        Some(mask) => {
            if mask.len() != nk {
                return Err(Error::dim("attention", format!("mask length {} for {nk} keys", mask.len())));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::Contract("attention over a fully masked key/value sequence".into()));
            }
            if mask.iter().all(|&m| m) {
                None
            } else {
                let row: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { MASK_BIAS }).collect();
                let data = row.iter().copied().cycle().take(nq * nk).collect();
                Some(t.constant(Tensor::new([nq, nk], data)?))
            }
        }
        None => None,
    };
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                t.slice_cols(q, h * hd, hd)?,
                t.slice_cols(k, h * hd, hd)?,
                t.slice_cols(v, h * hd, hd)?,
            )
        };
        let scores = t.matmul_nt(qh, kh)?;
        let scores = t.scale(scores, scale)?;
        let scores = match bias {
            Some(b) => t.add(scores, b)?,
            None => scores,
        };
        let weights = t.softmax_rows(scores)?;
        t.record_attention(weights);
        heads.push(t.matmul(weights, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        t.concat_cols(&heads)
    }
}

fn mat_dims(t: &Tape, op: &'static str, v: Var) -> Result<(usize, usize)> {
    match t.shape(v) {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::dim(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// Multi-head attention with learned projections. The key projection has no
/// bias: a key bias only shifts every logit in a row by the same amount.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("{n_heads} heads do not divide width {d}")));
        }
        Ok(b.scope(name, |b| Self {
            wq: Linear::new(b, "q", d, d, true),
            wk: Linear::new(b, "k", d, d, false),
            wv: Linear::new(b, "v", d, d, true),
            wo: Linear::new(b, "out", d, d, true),
            n_heads,
        }))
    }

    pub fn forward(&self, t: &mut Tape, p: &ParamVars, q_src: Var, kv_src: Var, kv_mask: Option<&[bool]>) -> Result<Var> {
        let q = self.wq.forward(t, p, q_src)?;
        let k = self.wk.forward(t, p, kv_src)?;
        let v = self.wv.forward(t, p, kv_src)?;
        let o = attention(t, q, k, v, kv_mask, self.n_heads)?;
        self.wo.forward(t, p, o)
    }
}

/// Pre-norm self-attention transformer block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize, n_heads: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                ln_attn: LayerNorm::new(b, "ln_attn", d),
                attn: MultiHeadAttention::new(b, "attn", d, n_heads)?,
                ln_ffn: LayerNorm::new(b, "ln_ffn", d),
                ffn: FeedForward::new(b, "ffn", d),
            })
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &ParamVars, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let h = self.ln_attn.forward(t, p, x)?;
        let a = self.attn.forward(t, p, h, h, mask)?;
        let x = t.add(x, a)?;
        let h = self.ln_ffn.forward(t, p, x)?;
        let f = self.ffn.forward(t, p, h)?;
        t.add(x, f)
    }
}
