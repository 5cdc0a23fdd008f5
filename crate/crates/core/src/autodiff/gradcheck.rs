use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

/// `|a − b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, coordinate by coordinate, and returns the worst relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, xs| f(t, xs[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = xs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient").to_vec();
        for (i, a) in analytic.iter().enumerate() {
            let orig = xs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(*a, numeric));
        }
    }
    Ok(worst)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
