use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay. Decay applies to matrices and
/// embeddings (rank ≥ 2) but not to biases, gains or the matching
/// temperature.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f64, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            lr,
            weight_decay,
            clip_norm,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients and returns the
    /// gradient norm measured before clipping. Parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<f64> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        let norm = global_grad_norm(params);
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.tensor.rank() >= 2 { self.lr * self.weight_decay } else { 0.0 };
            let grad = p.tensor.grad().map(|g| g.to_vec());
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]) * clip;
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                data[i] -= self.lr * update + decay * data[i];
            }
        }
        Ok(norm)
    }
}

/// L2 norm of all gradients in the store taken together.
pub fn global_grad_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBuilder;

    fn store() -> ParamStore {
        let mut s = ParamStore::default();
        let mut b = ParamBuilder::new(&mut s, 0);
        b.normal("w", &[2, 2], 1.0);
        b.constant("b", &[2], 0.5);
        s
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut s = store();
        let before: Vec<f64> = s.iter().flat_map(|p| p.tensor.data().to_vec()).collect();
        for p in s.iter_mut() {
            let g: Vec<f64> = (0..p.tensor.numel()).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect();
            p.tensor.accumulate_grad(&g);
        }
        let mut opt = AdamW::new(&s, 0.1, 0.0, None);
        opt.step(&mut s).unwrap();
        let after: Vec<f64> = s.iter().flat_map(|p| p.tensor.data().to_vec()).collect();
        for (i, (a, b)) in after.iter().zip(&before).enumerate() {
            let want = if i % 2 == 0 { -0.1 } else { 0.1 };
            assert!((a - b - want).abs() < 1e-6, "{i}: {}", a - b);
        }
    }

    #[test]
    fn decay_skips_vectors() {
        let mut s = store();
        let w0 = s.by_name("w").unwrap().tensor.data().to_vec();
        let mut opt = AdamW::new(&s, 0.5, 0.1, None);
        opt.step(&mut s).unwrap();
        let w1 = s.by_name("w").unwrap().tensor.data();
        for (a, b) in w1.iter().zip(&w0) {
            assert!((a - b * 0.95).abs() < 1e-15);
        }
        assert_eq!(s.by_name("b").unwrap().tensor.data(), &[0.5, 0.5]);
    }

    #[test]
    fn clipping_rescales_the_gradient() {
        let mut s = store();
        for p in s.iter_mut() {
            let n = p.tensor.numel();
            p.tensor.accumulate_grad(&vec![3.0; n]);
        }
        assert!((global_grad_norm(&s) - 6.0f64.sqrt() * 3.0).abs() < 1e-12);
        let (mut a, mut b) = (s.clone(), s.clone());
        for p in b.iter_mut() {
            p.tensor.zero_grad();
            let n = p.tensor.numel();
            p.tensor.accumulate_grad(&vec![3.0 / (6.0f64.sqrt() * 3.0); n]);
        }
        let mut oa = AdamW::new(&a, 0.01, 0.0, Some(1.0));
        let mut ob = AdamW::new(&b, 0.01, 0.0, None);
        let na = oa.step(&mut a).unwrap();
        ob.step(&mut b).unwrap();
        assert!(na > 1.0);
        for (pa, pb) in a.iter().zip(b.iter()) {
            assert!(pa.tensor.max_abs_diff(&pb.tensor) < 1e-12);
        }
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut s = store();
        for p in s.iter_mut() {
            let n = p.tensor.numel();
            p.tensor.accumulate_grad(&vec![1.0; n]);
        }
        let before = s.clone();
        let mut opt = AdamW::new(&s, 0.0, 0.01, Some(1.0));
        for _ in 0..5 {
            opt.step(&mut s).unwrap();
        }
        assert!(s.same_values(&before));
    }
}
