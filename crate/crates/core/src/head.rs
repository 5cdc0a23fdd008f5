//! Five-way answer head, its loss, and the contrastive matching baseline.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamBuilder, ParamId, ParamVars};

pub const NUM_OPTIONS: usize = 5;

/// Initial log temperature of the matching head, `ln(1/0.07)`.
pub const INIT_LOGIT_SCALE: f64 = 2.659_260_036_932_778_4;
/// Upper clamp on the log temperature, `ln(100)`.
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

/// Unnormalized class scores, index `i` ↔ option letter `A + i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Logits(pub [f64; NUM_OPTIONS]);

impl Logits {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; NUM_OPTIONS] = v
            .try_into()
            .map_err(|_| Error::dim("logits", format!("expected {NUM_OPTIONS} values, got {}", v.len())))?;
        Ok(Self(arr))
    }

    pub fn predict(&self) -> usize {
        predict(&self.0)
    }
}

/// Argmax with ties going to the lowest index.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Single affine map `d → 5`.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new(b: &mut ParamBuilder, d: usize) -> Self {
        Self {
            linear: Linear::new(b, "classifier", d, NUM_OPTIONS, true),
        }
    }

    /// `pooled: [d]` → logits `[5]`.
    pub fn forward(&self, t: &mut Tape, p: &ParamVars, pooled: Var) -> Result<Var> {
        if t.shape(pooled) != [self.linear.d_in] {
            return Err(Error::dim(
                "classify",
                format!("pooled {:?} does not match head width {}", t.shape(pooled), self.linear.d_in),
            ));
        }
        self.linear.forward(t, p, pooled)
    }
}

/// Cosine similarities between an image and each of the five options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchScores(pub [f64; NUM_OPTIONS]);

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Input("embedding has zero (or non-finite) norm".into()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Scores each option embedding against the image embedding by cosine
/// similarity and picks the best (lowest index on ties).
pub fn match_baseline(img_emb: &[f64], option_embs: &[Vec<f64>]) -> Result<(MatchScores, usize)> {
    if option_embs.len() != NUM_OPTIONS {
        return Err(Error::Input(format!("expected {NUM_OPTIONS} option embeddings, got {}", option_embs.len())));
    }
    let img = unit(img_emb)?;
    let mut scores = [0.0; NUM_OPTIONS];
    for (s, opt) in scores.iter_mut().zip(option_embs) {
        if opt.len() != img.len() {
            return Err(Error::dim(
                "match_baseline",
                format!("option width {} vs image width {}", opt.len(), img.len()),
            ));
        }
        let o = unit(opt)?;
        *s = img.iter().zip(&o).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
    }
    let answer = predict(&scores);
    Ok((MatchScores(scores), answer))
}

/// CLIP-style head: both towers are projected into a shared space, compared
/// by cosine similarity, and the similarities are scaled by a learned
/// temperature `exp(logit_scale)` for the softmax loss.
#[derive(Clone, Debug)]
pub struct MatchHead {
    pub image_proj: Linear,
    pub text_proj: Linear,
    pub logit_scale: ParamId,
}

impl MatchHead {
    pub fn new(b: &mut ParamBuilder, d_vision: usize, d_text: usize, d_embed: usize) -> Self {
        b.scope("match", |b| Self {
            image_proj: Linear::new(b, "image_proj", d_vision, d_embed, false),
            text_proj: Linear::new(b, "text_proj", d_text, d_embed, false),
            logit_scale: b.constant("logit_scale", &[1], INIT_LOGIT_SCALE),
        })
    }

    /// `image: [d_vision]`, `options: [5, d_text]` → `(similarities, scaled logits)`, both `[5]`.
    pub fn forward(&self, t: &mut Tape, p: &ParamVars, image: Var, options: Var) -> Result<(Var, Var)> {
        let img = self.image_proj.forward(t, p, image)?;
        let d = t.shape(img)[0];
        let img = t.reshape(img, &[1, d])?;
        let img = t.normalize_rows(img)?;
        let opt = self.text_proj.forward(t, p, options)?;
        let opt = t.normalize_rows(opt)?;
        let sims = t.matmul_nt(img, opt)?;
        let sims = t.reshape(sims, &[NUM_OPTIONS])?;
        let scale = t.exp(p[self.logit_scale])?;
        let logits = t.mul_scalar(sims, scale)?;
        Ok((sims, logits))
    }
}
