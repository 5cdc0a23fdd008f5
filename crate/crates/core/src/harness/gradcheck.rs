//! Finite-difference checks over every tape operation and the composed
//! model, shared by the `gradcheck` subcommand and the test suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{grad_check_many, Tape, Var};
use crate::data::synth_puzzles;
use crate::error::Result;
use crate::fusion::{AlignDirection, PoolVariant};
use crate::model::{ModelConfig, Precision, PuzzleModel};
use crate::nn::{attention, LN_EPS};
use crate::tensor::Tensor;

use super::train::build_vocab;

pub const GRADCHECK_EPS: f64 = 1e-6;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()).unwrap()
}

/// `Σ w ⊙ y` for a fixed random `w`, so every output coordinate carries a
/// generic weight.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(randn(&mut rng, t.shape(y)));
    let prod = t.mul(y, w)?;
    t.sum(prod)
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

fn ops() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |t, x| t.matmul(x[0], x[1])),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |t, x| t.matmul_nt(x[0], x[1])),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, x| t.add(x[0], x[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, x| t.mul(x[0], x[1])),
        ("add_row", vec![vec![3, 4], vec![4]], |t, x| t.add_row(x[0], x[1])),
        ("scale", vec![vec![3, 4]], |t, x| t.scale(x[0], -1.7)),
        ("mul_scalar", vec![vec![3, 4], vec![1]], |t, x| t.mul_scalar(x[0], x[1])),
        ("gelu", vec![vec![3, 4]], |t, x| t.gelu(x[0])),
        ("tanh", vec![vec![3, 4]], |t, x| t.tanh(x[0])),
        ("exp", vec![vec![3, 4]], |t, x| t.exp(x[0])),
        ("softmax_rows", vec![vec![3, 5]], |t, x| t.softmax_rows(x[0])),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |t, x| {
            t.layer_norm(x[0], x[1], x[2], LN_EPS)
        }),
        ("slice_cols", vec![vec![3, 6]], |t, x| t.slice_cols(x[0], 2, 3)),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], |t, x| t.concat_cols(x)),
        ("concat_rows", vec![vec![2, 4], vec![3, 4]], |t, x| t.concat_rows(x)),
        ("gather_rows", vec![vec![4, 3]], |t, x| t.gather_rows(x[0], &[2, 0, 2])),
        ("scatter_rows", vec![vec![2, 3]], |t, x| t.scatter_rows(x[0], &[3, 1], 5)),
        ("reshape", vec![vec![3, 4]], |t, x| t.reshape(x[0], &[2, 6])),
        ("sum", vec![vec![3, 4]], |t, x| t.sum(x[0])),
        ("cross_entropy", vec![vec![5]], |t, x| t.cross_entropy(x[0], 3)),
        ("normalize_rows", vec![vec![3, 4]], |t, x| t.normalize_rows(x[0])),
        ("attention", vec![vec![3, 8], vec![5, 8], vec![5, 8]], |t, x| {
            attention(t, x[0], x[1], x[2], Some(&[true, true, false, true, true]), 2)
        }),
    ]
}

/// Worst relative error for each differentiable operation, on random inputs.
pub fn op_gradchecks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ops()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, op))| {
            let xs: Vec<Tensor> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
            let proj_seed = seed ^ (i as u64 + 1);
            let err = grad_check_many(
                |t, v| {
                    let y = op(t, v)?;
                    project(t, y, proj_seed)
                },
                &xs,
                GRADCHECK_EPS,
            )?;
            Ok((name, err))
        })
        .collect()
}

/// The tiny-preset model configurations exercised by the full-model check:
/// every fusion variant plus the matching head, all in double precision.
pub fn gradcheck_configs(seed: u64) -> Vec<(String, ModelConfig)> {
    let mut out = Vec::new();
    for align in AlignDirection::ALL {
        for pool in PoolVariant::ALL {
            let mut cfg = ModelConfig::tiny(align, pool, seed);
            cfg.precision = Precision::F64;
            out.push((format!("classifier {align} {pool}"), cfg));
        }
    }
    let mut cfg = ModelConfig::tiny_matching(seed);
    cfg.precision = Precision::F64;
    out.push(("matching".to_string(), cfg));
    out
}

/// Worst relative error of the full model's gradient on a two-puzzle batch,
/// for each configuration of [`gradcheck_configs`].
pub fn model_gradchecks(seed: u64) -> Result<Vec<(String, f64)>> {
    let data = synth_puzzles(seed, 3, 1)?;
    let vocab = build_vocab(&data, 512)?;
    gradcheck_configs(seed)
        .into_iter()
        .map(|(name, cfg)| {
            let model = PuzzleModel::new(cfg, vocab.clone())?;
            let batch = model.encode_all(&data[..2])?;
            Ok((name, model.grad_check(&batch, GRADCHECK_EPS, seed)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for (name, err) in op_gradchecks(0).unwrap() {
            assert!(err < 1e-6, "{name}: {err:e}");
        }
    }
}
