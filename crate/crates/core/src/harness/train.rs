use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{PuzzleInstance, Split, SplitSpec};
use crate::encoders::{render_option, render_prompt, Vocab};
use crate::error::{Error, Result};
use crate::model::{EncodedPuzzle, HeadKind, ModelConfig, PuzzleModel};
use crate::nn::ParamStore;

use super::config::TrainConfig;
use super::optim::AdamW;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: PuzzleModel,
    /// Main-run epochs; `best_epoch` indexes these.
    pub metrics: Vec<EpochMetrics>,
    /// Matching epochs run first when `pretrain_epochs > 0`.
    pub pretrain_metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    /// Every root that contributed an instance to some training batch.
    pub trained_roots: BTreeSet<u32>,
}

impl TrainOutcome {
    pub fn best_val_accuracy(&self) -> f64 {
        self.metrics[self.best_epoch - 1].val_accuracy
    }
}

/// Vocabulary over the rendered prompts and option texts of `instances`.
pub fn build_vocab<'a>(instances: impl IntoIterator<Item = &'a PuzzleInstance>, capacity: usize) -> Result<Vocab> {
    let mut texts = Vec::new();
    for p in instances {
        texts.push(render_prompt(&p.question, &p.options)?);
        texts.extend(p.options.iter().map(|o| render_option(o)));
    }
    Vocab::build(texts.iter().map(String::as_str), capacity)
}

/// Fraction of `items` whose prediction equals the gold answer.
pub fn evaluate_encoded(model: &PuzzleModel, items: &[EncodedPuzzle]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty instance list".into()));
    }
    let mut correct = 0usize;
    for x in items {
        if model.predict(x)? == x.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

pub fn evaluate<'a>(model: &PuzzleModel, instances: impl IntoIterator<Item = &'a PuzzleInstance>) -> Result<f64> {
    evaluate_encoded(model, &model.encode_all(instances)?)
}

/// Trains a fresh model on the train roots of `split`, selecting the epoch
/// with the best validation accuracy (earliest on ties).
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    instances: &[PuzzleInstance],
    split: &SplitSpec,
) -> Result<TrainOutcome> {
    train_with(model_cfg, train_cfg, instances, split, |_| {})
}

/// [`train`] with a callback after each main-run epoch.
pub fn train_with(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    instances: &[PuzzleInstance],
    split: &SplitSpec,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    let train_set = split.select(instances, Split::Train);
    let val_set = split.select(instances, Split::Val);
    if train_set.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }
    let vocab = build_vocab(train_set.iter().copied(), model_cfg.text.vocab_size)?;
    let mut model = PuzzleModel::new(model_cfg.clone(), vocab.clone())?;
    let mut trained_roots = BTreeSet::new();

    let mut pretrain_metrics = Vec::new();
    if train_cfg.pretrain_epochs > 0 {
        let cfg = ModelConfig {
            head: HeadKind::Matching,
            ..model_cfg.clone()
        };
        let mut matcher = PuzzleModel::new(cfg, vocab)?;
        let run = Run {
            cfg: train_cfg,
            epochs: train_cfg.pretrain_epochs,
            train_set: &train_set,
            val_set: &val_set,
            split,
        };
        (pretrain_metrics, _) = run.fit(&mut matcher, &mut trained_roots, &mut |_| {})?;
        copy_vision_tower(&matcher, &mut model)?;
    }

    let run = Run {
        cfg: train_cfg,
        epochs: train_cfg.epochs,
        train_set: &train_set,
        val_set: &val_set,
        split,
    };
    let (metrics, best_epoch) = run.fit(&mut model, &mut trained_roots, &mut on_epoch)?;
    Ok(TrainOutcome {
        model,
        metrics,
        pretrain_metrics,
        best_epoch,
        trained_roots,
    })
}

/// Overwrites every `vision.*` parameter of `dst` with the one in `src`.
pub fn copy_vision_tower(src: &PuzzleModel, dst: &mut PuzzleModel) -> Result<()> {
    for p in dst.params_mut().iter_mut().filter(|p| p.name.starts_with("vision.")) {
        let from = src
            .params()
            .by_name(&p.name)
            .ok_or_else(|| Error::Config(format!("source model has no parameter {}", p.name)))?;
        if from.tensor.shape() != p.tensor.shape() {
            return Err(Error::Config(format!(
                "{}: shape {:?} does not match {:?}",
                p.name,
                from.tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor.data_mut().copy_from_slice(from.tensor.data());
    }
    Ok(())
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    epochs: usize,
    train_set: &'a [&'a PuzzleInstance],
    val_set: &'a [&'a PuzzleInstance],
    split: &'a SplitSpec,
}

impl Run<'_> {
    /// Trains `model` in place and leaves it at its best-validation epoch.
    fn fit(
        &self,
        model: &mut PuzzleModel,
        trained_roots: &mut BTreeSet<u32>,
        on_epoch: &mut dyn FnMut(&EpochMetrics),
    ) -> Result<(Vec<EpochMetrics>, usize)> {
        let cfg = self.cfg;
        let mut train_x = model.encode_all(self.train_set.iter().copied())?;
        let val_x = model.encode_all(self.val_set.iter().copied())?;
        let mut opt = AdamW::new(model.params(), cfg.learning_rate, cfg.weight_decay, Some(cfg.grad_clip_norm));
        let mut metrics = Vec::with_capacity(self.epochs);
        let mut best: Option<(usize, f64, ParamStore)> = None;
        let mut order: Vec<usize> = (0..train_x.len()).collect();
        let mut step = 0usize;
        let total_steps = self.epochs * train_x.len().div_ceil(cfg.batch_size);

        for epoch in 1..=self.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64);
            order.sort_unstable();
            order.shuffle(&mut rng);
            if cfg.shuffle_options {
                for (x, p) in train_x.iter_mut().zip(self.train_set) {
                    let mut perm = [0, 1, 2, 3, 4];
                    perm.shuffle(&mut rng);
                    *x = model.encode(&p.with_option_order(perm)?)?;
                }
            }

            let mut loss_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                step += 1;
                let batch: Vec<&EncodedPuzzle> = chunk.iter().map(|&i| &train_x[i]).collect();
                for x in &batch {
                    if !self.split.train_roots.contains(&x.root_id) {
                        return Err(Error::Contract(format!("root {} leaked into a training batch", x.root_id)));
                    }
                    trained_roots.insert(x.root_id);
                }
                model.params_mut().zero_grad();
                let loss = model.accumulate_gradients(&batch, 1.0 / batch.len() as f64)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step, loss });
                }
                loss_sum += loss;
                opt.lr = cfg.learning_rate_at(step, total_steps);
                opt.step(model.params_mut())?;
                model.apply_precision();
            }
            model.params_mut().zero_grad();

            let m = EpochMetrics {
                epoch,
                train_loss: loss_sum / train_x.len() as f64,
                val_accuracy: evaluate_encoded(model, &val_x)?,
            };
            on_epoch(&m);
            if best.as_ref().is_none_or(|(_, acc, _)| m.val_accuracy > *acc) {
                best = Some((epoch, m.val_accuracy, model.params().clone()));
            }
            metrics.push(m);
        }

        let (best_epoch, _, params) = best.expect("at least one epoch");
        *model.params_mut() = params;
        Ok((metrics, best_epoch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{puzzle_split, synth_puzzles};
    use crate::encoders::EncoderConfig;
    use crate::fusion::{AlignDirection, PoolVariant};
    use crate::harness::AdamW;

    fn small(pool: PoolVariant) -> ModelConfig {
        let enc = EncoderConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            ..EncoderConfig::tiny()
        };
        ModelConfig {
            vision: enc.clone(),
            text: enc,
            ..ModelConfig::tiny(AlignDirection::TextToImage, pool, 3)
        }
    }

    fn dataset() -> (Vec<PuzzleInstance>, SplitSpec) {
        let data = synth_puzzles(1, 4, 6).unwrap();
        let roots: Vec<u32> = data.iter().map(|p| p.root_id).collect();
        let split = puzzle_split(&roots, 0).unwrap();
        (data, split)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn overfits_a_single_batch() {
        let data = synth_puzzles(2, 3, 3).unwrap();
        let batch_data = &data[..8];
        let cfg = ModelConfig::tiny(AlignDirection::TextToImage, PoolVariant::FirstToken, 0);
        let mut model = PuzzleModel::new(cfg.clone(), build_vocab(batch_data, cfg.text.vocab_size).unwrap()).unwrap();
        let xs = model.encode_all(batch_data).unwrap();
        let batch: Vec<&EncodedPuzzle> = xs.iter().collect();
        let mut opt = AdamW::new(model.params(), 1e-3, 0.0, Some(1.0));
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            model.params_mut().zero_grad();
            loss = model.accumulate_gradients(&batch, 1.0 / 8.0).unwrap();
            opt.step(model.params_mut()).unwrap();
            model.apply_precision();
        }
        model.params_mut().zero_grad();
        let mut t = crate::autodiff::Tape::new();
        let p = model.params().bind(&mut t);
        let final_loss: f64 = batch
            .iter()
            .map(|x| {
                let l = model.loss(&mut t, &p, x).unwrap();
                t.value(l).data()[0]
            })
            .sum::<f64>()
            / 8.0;
        assert!(final_loss < 0.05, "loss {final_loss} (last step {loss})");
    }

    #[test]
    fn vision_copy_touches_only_the_vision_tower() {
        let (data, _) = dataset();
        let vocab = build_vocab(&data, 512).unwrap();
        let src = PuzzleModel::new(
            ModelConfig {
                head: HeadKind::Matching,
                seed: 11,
                ..small(PoolVariant::AttnPool)
            },
            vocab.clone(),
        )
        .unwrap();
        let mut dst = PuzzleModel::new(small(PoolVariant::AttnPool), vocab.clone()).unwrap();
        let before = dst.params().clone();
        copy_vision_tower(&src, &mut dst).unwrap();
        let mut changed = 0;
        for (p, old) in dst.params().iter().zip(before.iter()) {
            if p.name.starts_with("vision.") {
                assert_eq!(p.tensor.data(), src.params().by_name(&p.name).unwrap().tensor.data());
                changed += usize::from(p.tensor.data() != old.tensor.data());
            } else {
                assert_eq!(p.tensor.data(), old.tensor.data(), "{}", p.name);
            }
        }
        assert!(changed > 0);

        let mut wide = small(PoolVariant::AttnPool);
        wide.vision.d_model = 32;
        let wide = PuzzleModel::new(wide, vocab).unwrap();
        assert!(matches!(copy_vision_tower(&wide, &mut dst), Err(Error::Config(_))));
    }

    #[test]
    fn pretraining_runs_before_the_main_epochs() {
        let (data, split) = dataset();
        let tc = TrainConfig {
            pretrain_epochs: 2,
            ..quick()
        };
        let out = train(&small(PoolVariant::FirstToken), &tc, &data, &split).unwrap();
        assert_eq!(out.pretrain_metrics.len(), 2);
        assert_eq!(out.metrics.len(), 3);
        assert!((1..=3).contains(&out.best_epoch));
        assert_eq!(&out.trained_roots, split.roots(Split::Train));
        let plain = train(&small(PoolVariant::FirstToken), &quick(), &data, &split).unwrap();
        assert!(plain.pretrain_metrics.is_empty());
        assert_ne!(out.metrics, plain.metrics);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (data, split) = dataset();
        let cfg = small(PoolVariant::AttnPool);
        let tc = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            ..quick()
        };
        let out = train(&cfg, &tc, &data, &split).unwrap();
        let vocab = build_vocab(split.select(&data, Split::Train), cfg.text.vocab_size).unwrap();
        let fresh = PuzzleModel::new(cfg, vocab).unwrap();
        assert!(out.model.params().same_values(fresh.params()));
    }

    #[test]
    fn runs_are_deterministic_and_leak_free() {
        let (data, split) = dataset();
        let tc = TrainConfig {
            shuffle_options: true,
            ..quick()
        };
        let a = train(&small(PoolVariant::FirstToken), &tc, &data, &split).unwrap();
        let b = train(&small(PoolVariant::FirstToken), &tc, &data, &split).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!(a.model.params().same_values(b.model.params()));
        assert_eq!(a.metrics.len(), 3);
        assert_eq!(&a.trained_roots, split.roots(Split::Train));
        let best = a.metrics.iter().map(|m| m.val_accuracy).fold(0.0, f64::max);
        assert_eq!(a.best_val_accuracy(), best);
        let val = split.select(&data, Split::Val);
        assert_eq!(evaluate(&a.model, val.iter().copied()).unwrap(), best);
    }

    #[test]
    fn diverging_loss_names_the_step() {
        let (data, split) = dataset();
        let tc = TrainConfig {
            learning_rate: 1e200,
            grad_clip_norm: 1e300,
            ..quick()
        };
        match train(&small(PoolVariant::FirstToken), &tc, &data, &split) {
            Err(Error::NonFiniteLoss { epoch, step, loss }) => {
                assert_eq!(epoch, 1);
                assert!(step >= 2);
                assert!(!loss.is_finite());
            }
            other => panic!("{:?}", other.map(|o| o.metrics)),
        }
    }

    #[test]
    fn bad_inputs_are_reported() {
        let (data, split) = dataset();
        let cfg = small(PoolVariant::FirstToken);
        let tc = TrainConfig { batch_size: 0, ..quick() };
        assert!(matches!(train(&cfg, &tc, &data, &split), Err(Error::Config(_))));
        let val_only: Vec<PuzzleInstance> = split.select(&data, Split::Val).into_iter().cloned().collect();
        assert!(matches!(train(&cfg, &quick(), &val_only, &split), Err(Error::Input(_))));
        let model = PuzzleModel::new(cfg, build_vocab(&data, 512).unwrap()).unwrap();
        assert!(matches!(evaluate(&model, &[]), Err(Error::Input(_))));
    }
}
