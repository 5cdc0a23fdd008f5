//! The full two-tower puzzle model: configuration, construction, per-instance
//! forward pass and gradient accumulation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Tape, Var};
use crate::data::PuzzleInstance;
use crate::encoders::{
    patchify, preprocess_image, tokenize, tokenize_option, EncoderConfig, TextEncoder, TokenSequence, VisionEncoder,
    Vocab,
};
use crate::error::{Error, Result};
use crate::fusion::{Aligner, AlignDirection, Fusion, FusionConfig, PoolVariant, Pooler};
use crate::head::{ClassifierHead, Logits, MatchHead, MAX_LOGIT_SCALE};
use crate::nn::{ParamBuilder, ParamStore, ParamVars};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Fusion classifier with a five-way linear head.
    #[default]
    Classification,
    /// CLIP-style image/option cosine matching, no fusion.
    Matching,
}

/// Storage precision of trained parameters. Arithmetic is always double
/// precision; `F32` rounds every parameter to the nearest `f32` after
/// initialisation and after each optimizer step, so checkpoints (which store
/// `f32`) reproduce the model exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_fusion() -> FusionConfig {
    FusionConfig::new(AlignDirection::TextToImage, PoolVariant::AttnPool)
}
fn default_match_dim() -> usize {
    64
}
fn default_option_len() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub head: HeadKind,
    pub vision: EncoderConfig,
    pub text: EncoderConfig,
    #[serde(default = "default_fusion")]
    pub fusion: FusionConfig,
    /// Shared embedding width of the matching head.
    #[serde(default = "default_match_dim")]
    pub match_dim: usize,
    /// Token length of each option sequence fed to the matching head.
    #[serde(default = "default_option_len")]
    pub option_seq_len: usize,
}

impl ModelConfig {
    /// Tiny towers, classification head with the given fusion variant.
    pub fn tiny(align: AlignDirection, pool: PoolVariant, seed: u64) -> Self {
        Self {
            seed,
            precision: Precision::F32,
            head: HeadKind::Classification,
            vision: EncoderConfig::tiny(),
            text: EncoderConfig::tiny(),
            fusion: FusionConfig::new(align, pool),
            match_dim: default_match_dim(),
            option_seq_len: default_option_len(),
        }
    }

    pub fn tiny_matching(seed: u64) -> Self {
        Self {
            head: HeadKind::Matching,
            ..Self::tiny(AlignDirection::TextToImage, PoolVariant::AttnPool, seed)
        }
    }

    pub fn d_fuse(&self) -> usize {
        self.fusion.align.fused_width(self.vision.d_model, self.text.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        match self.head {
            HeadKind::Classification => self.fusion.validate(self.d_fuse()),
            HeadKind::Matching => {
                if self.match_dim == 0 {
                    return Err(Error::Config("match_dim must be positive".into()));
                }
                if self.option_seq_len == 0 || self.option_seq_len > self.text.max_seq_len {
                    return Err(Error::Config(format!(
                        "option_seq_len {} must be in 1..={}",
                        self.option_seq_len, self.text.max_seq_len
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
enum Arch {
    Classifier {
        vision: VisionEncoder,
        text: TextEncoder,
        align: Aligner,
        fusion: Fusion,
        pool: Pooler,
        head: ClassifierHead,
    },
    Matcher {
        vision: VisionEncoder,
        text: TextEncoder,
        head: MatchHead,
    },
}

/// Model inputs derived from one [`PuzzleInstance`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPuzzle {
    pub root_id: u32,
    pub patches: Tensor,
    pub prompt: TokenSequence,
    pub options: Vec<TokenSequence>,
    pub answer: usize,
}

#[derive(Clone, Debug)]
pub struct PuzzleModel {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamStore,
    arch: Arch,
}

impl PuzzleModel {
    /// Builds a freshly initialised model. Parameter values depend only on
    /// `config` (its seed included).
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() > config.text.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the text tower holds {}",
                vocab.len(),
                config.text.vocab_size
            )));
        }
        let mut params = ParamStore::default();
        let mut b = ParamBuilder::new(&mut params, config.seed);
        let vision = VisionEncoder::new(&mut b, "vision", &config.vision)?;
        let text = TextEncoder::new(&mut b, "text", &config.text)?;
        let arch = match config.head {
            HeadKind::Classification => {
                let align = Aligner::new(&mut b, config.fusion.align, config.vision.d_model, config.text.d_model);
                let d = align.d_fuse();
                let fusion = Fusion::new(&mut b, d, &config.fusion)?;
                let pool = Pooler::new(&mut b, config.fusion.pool, d, config.fusion.n_heads)?;
                let head = ClassifierHead::new(&mut b, d);
                Arch::Classifier {
                    vision,
                    text,
                    align,
                    fusion,
                    pool,
                    head,
                }
            }
            HeadKind::Matching => {
                let head = MatchHead::new(&mut b, config.vision.d_model, config.text.d_model, config.match_dim);
                Arch::Matcher { vision, text, head }
            }
        };
        let mut model = Self {
            config,
            vocab,
            params,
            arch,
        };
        model.apply_precision();
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Rounds parameters to the configured storage precision and keeps the
    /// matching temperature within its clamp.
    pub fn apply_precision(&mut self) {
        if let Arch::Matcher { head, .. } = &self.arch {
            let id = head.logit_scale;
            let name = self.params.get(id).name.clone();
            let p = self.params.by_name_mut(&name).unwrap();
            let v = &mut p.tensor.data_mut()[0];
            *v = v.min(MAX_LOGIT_SCALE);
        }
        if self.config.precision == Precision::F32 {
            for p in self.params.iter_mut() {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
    }

    pub fn encode(&self, p: &PuzzleInstance) -> Result<EncodedPuzzle> {
        let img = preprocess_image(&p.image, self.config.vision.image_side)?;
        let patches = patchify(&img, self.config.vision.patch_size)?;
        let prompt = tokenize(&self.vocab, &p.question, &p.options, self.config.text.max_seq_len)?;
        let options = match self.config.head {
            HeadKind::Classification => Vec::new(),
            HeadKind::Matching => p
                .options
                .iter()
                .map(|o| tokenize_option(&self.vocab, o, self.config.option_seq_len))
                .collect::<Result<_>>()?,
        };
        Ok(EncodedPuzzle {
            root_id: p.root_id,
            patches,
            prompt,
            options,
            answer: p.answer,
        })
    }

    pub fn encode_all<'a>(&self, items: impl IntoIterator<Item = &'a PuzzleInstance>) -> Result<Vec<EncodedPuzzle>> {
        items.into_iter().map(|p| self.encode(p)).collect()
    }

    /// Records the forward pass for one puzzle and returns the `[5]` logits.
    pub fn forward(&self, t: &mut Tape, p: &ParamVars, x: &EncodedPuzzle) -> Result<Var> {
        let patches = t.constant(x.patches.clone());
        match &self.arch {
            Arch::Classifier {
                vision,
                text,
                align,
                fusion,
                pool,
                head,
            } => {
                let v = vision.forward(t, p, patches)?;
                let s = text.forward(t, p, &x.prompt)?;
                let (q_src, kv_src) = align.forward(t, p, v, s)?;
                let fused = fusion.forward(t, p, q_src, kv_src, Some(x.prompt.mask()))?;
                let pooled = pool.forward(t, p, fused)?;
                head.forward(t, p, pooled)
            }
            Arch::Matcher { vision, text, head } => {
                if x.options.len() != 5 {
                    return Err(Error::Input("matching head needs 5 encoded options".into()));
                }
                let v = vision.forward(t, p, patches)?;
                let cls = t.gather_rows(v, &[0])?;
                let cls = t.reshape(cls, &[self.config.vision.d_model])?;
                let mut rows = Vec::with_capacity(5);
                for opt in &x.options {
                    let enc = text.forward(t, p, opt)?;
                    rows.push(t.gather_rows(enc, &[0])?);
                }
                let opts = t.concat_rows(&rows)?;
                let (_, logits) = head.forward(t, p, cls, opts)?;
                Ok(logits)
            }
        }
    }

    pub fn loss(&self, t: &mut Tape, p: &ParamVars, x: &EncodedPuzzle) -> Result<Var> {
        let logits = self.forward(t, p, x)?;
        t.cross_entropy(logits, x.answer)
    }

    pub fn logits(&self, x: &EncodedPuzzle) -> Result<Logits> {
        let mut t = Tape::new();
        let p = self.params.bind(&mut t);
        let out = self.forward(&mut t, &p, x)?;
        Logits::from_slice(t.value(out).data())
    }

    pub fn predict(&self, x: &EncodedPuzzle) -> Result<usize> {
        Ok(self.logits(x)?.predict())
    }

    /// Adds `scale · ∂loss/∂θ` for each puzzle into the parameter grad slots,
    /// in input order. Returns the summed loss.
    pub fn accumulate_gradients(&mut self, batch: &[&EncodedPuzzle], scale: f64) -> Result<f64> {
        let mut total = 0.0;
        for x in batch {
            let mut t = Tape::new();
            let p = self.params.bind(&mut t);
            let loss = self.loss(&mut t, &p, x)?;
            let value = t.value(loss).data()[0];
            total += value;
            if !value.is_finite() {
                return Ok(value);
            }
            let grads = t.backward(loss)?;
            let scaled: Vec<Vec<f64>> = p
                .as_slice()
                .iter()
                .map(|v| grads.get(*v).expect("param grad").iter().map(|g| g * scale).collect())
                .collect();
            for (param, g) in self.params.iter_mut().zip(&scaled) {
                param.tensor.accumulate_grad(g);
            }
        }
        Ok(total)
    }

    /// Gradient check of the whole model on `batch` (mean loss).
    ///
    /// Each parameter tensor `θ_j` is moved along its own random direction
    /// `v_j`, `θ_j(c) = θ_j + c_j·v_j`, and the reverse-mode derivative with
    /// respect to every coefficient `c_j` is compared to central differences.
    /// Every parameter's gradient enters through `∂L/∂c_j = ⟨∇θ_j L, v_j⟩`.
    pub fn grad_check(&self, batch: &[EncodedPuzzle], eps: f64, seed: u64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Input("gradient check needs at least one puzzle".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<Tensor> = self.params.iter().map(|p| p.tensor.clone()).collect();
        let dirs: Vec<Tensor> = base
            .iter()
            .map(|b| {
                let data = (0..b.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
                Tensor::new(b.shape().to_vec(), data).unwrap()
            })
            .collect();
        let n = base.len();
        grad_check(
            |t, coeffs| {
                let c = t.reshape(coeffs, &[n, 1])?;
                let mut vars = Vec::with_capacity(n);
                for (j, (b, d)) in base.iter().zip(&dirs).enumerate() {
                    let b = t.constant(b.clone());
                    let d = t.constant(d.clone());
                    let cj = t.gather_rows(c, &[j])?;
                    let cj = t.reshape(cj, &[1])?;
                    let step = t.mul_scalar(d, cj)?;
                    vars.push(t.add(b, step)?);
                }
                let p = ParamVars::from_vars(vars);
                let mut losses = Vec::with_capacity(batch.len());
                for x in batch {
                    losses.push(self.loss(t, &p, x)?);
                }
                let all = t.concat_rows(&losses)?;
                let total = t.sum(all)?;
                t.scale(total, 1.0 / batch.len() as f64)
            },
            &Tensor::zeros([n]),
            eps,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_puzzles;
    use crate::harness::build_vocab;

    fn small(head: HeadKind) -> ModelConfig {
        let enc = EncoderConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            ..EncoderConfig::tiny()
        };
        ModelConfig {
            head,
            precision: Precision::F64,
            vision: enc.clone(),
            text: enc,
            fusion: FusionConfig {
                n_heads: 2,
                ..default_fusion()
            },
            match_dim: 8,
            ..ModelConfig::tiny(AlignDirection::TextToImage, PoolVariant::AttnPool, 5)
        }
    }

    fn build(cfg: ModelConfig) -> (PuzzleModel, Vec<PuzzleInstance>) {
        let data = synth_puzzles(3, 3, 2).unwrap();
        let vocab = build_vocab(&data, cfg.text.vocab_size).unwrap();
        (PuzzleModel::new(cfg, vocab).unwrap(), data)
    }

    #[test]
    fn both_heads_score_five_options() {
        for head in [HeadKind::Classification, HeadKind::Matching] {
            let (m, data) = build(small(head));
            for p in &data {
                let x = m.encode(p).unwrap();
                assert_eq!(x.options.len(), if head == HeadKind::Matching { 5 } else { 0 });
                let logits = m.logits(&x).unwrap();
                assert!(logits.0.iter().all(|v| v.is_finite()));
                assert_eq!(m.predict(&x).unwrap(), logits.predict());
            }
        }
    }

    #[test]
    fn tiny_preset_shapes() {
        let cfg = ModelConfig::tiny(AlignDirection::ImageToText, PoolVariant::FirstToken, 0);
        assert_eq!((cfg.vision.num_patches(), cfg.d_fuse()), (16, 64));
        let (m, data) = build(cfg);
        let x = m.encode(&data[0]).unwrap();
        assert_eq!(x.patches.shape(), &[16, 192]);
        assert_eq!(x.prompt.len(), 64);
    }

    #[test]
    fn initialisation_depends_only_on_config() {
        let (a, _) = build(small(HeadKind::Classification));
        let (b, _) = build(small(HeadKind::Classification));
        assert!(a.params().same_values(b.params()));
        let (c, _) = build(ModelConfig { seed: 6, ..small(HeadKind::Classification) });
        assert!(!a.params().same_values(c.params()));
    }

    #[test]
    fn f32_precision_rounds_parameters() {
        let (m, _) = build(ModelConfig {
            precision: Precision::F32,
            ..small(HeadKind::Classification)
        });
        assert!(m.params().iter().all(|p| p.tensor.data().iter().all(|&v| v == v as f32 as f64)));
    }

    #[test]
    fn matching_temperature_is_clamped() {
        let (mut m, _) = build(small(HeadKind::Matching));
        m.params_mut().by_name_mut("match.logit_scale").unwrap().tensor.data_mut()[0] = 10.0;
        m.apply_precision();
        assert_eq!(m.params().by_name("match.logit_scale").unwrap().tensor.data()[0], MAX_LOGIT_SCALE);
    }

    #[test]
    fn oversized_vocabulary_is_rejected() {
        let data = synth_puzzles(3, 3, 2).unwrap();
        let vocab = build_vocab(&data, 512).unwrap();
        let mut cfg = small(HeadKind::Classification);
        cfg.text.vocab_size = vocab.len() - 1;
        assert!(matches!(PuzzleModel::new(cfg, vocab), Err(Error::Config(_))));
    }

    #[test]
    fn config_toml_round_trips() {
        for cfg in [small(HeadKind::Matching), ModelConfig::tiny(AlignDirection::ImageToText, PoolVariant::FirstToken, 9)] {
            assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
        let bad = small(HeadKind::Classification).to_toml().replace("match_dim", "matchdim");
        assert!(matches!(ModelConfig::from_toml(&bad), Err(Error::Config(_))));
        let mut cfg = small(HeadKind::Classification);
        cfg.fusion.n_heads = 3;
        assert!(ModelConfig::from_toml(&cfg.to_toml()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for head in [HeadKind::Classification, HeadKind::Matching] {
            let (m, data) = build(small(head));
            let batch = m.encode_all(&data[..2]).unwrap();
            let err = m.grad_check(&batch, 1e-6, 1).unwrap();
            assert!(err < 1e-4, "{head:?}: {err}");
        }
    }
}
