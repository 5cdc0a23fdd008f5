use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels::{gemm, Layout};

/// `sqrt(2/pi)` for the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient for the tanh form of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, s: f64 },
    MulScalar { x: Var, s: Var },
    Gelu { x: Var },
    Tanh { x: Var },
    Exp { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalized input, kept for the backward pass.
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols { x: Var, start: usize },
    ConcatCols { xs: Vec<Var> },
    ConcatRows { xs: Vec<Var> },
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { x: Var, rows: Vec<usize> },
    Reshape { x: Var },
    Sum { x: Var },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Tape::backward`] walks it once in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    attention: Vec<Var>,
}

/// Result of [`Tape::backward`]: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, present for every node that
    /// requires grad.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap();
    (shape.iter().product::<usize>() / d, d)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. It participates in backward iff the tensor was created
    /// with [`Tensor::with_grad`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(data, shape, Op::Leaf, requires_grad).unwrap()
    }

    /// Records a leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(data, shape, Op::Leaf, false).unwrap()
    }

    /// Records a copy of a trainable parameter as a gradient-tracking leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, true)
            .unwrap()
    }

    /// Remembers `weights` as an attention-probability matrix so tests can
    /// inspect every attention map produced during a forward pass.
    pub fn record_attention(&mut self, weights: Var) {
        self.attention.push(weights);
    }

    pub fn attention_maps(&self) -> impl Iterator<Item = &Tensor> {
        self.attention.iter().map(|v| self.value(*v))
    }

    fn mat(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat("matmul", a)?;
        let (k2, n) = self.mat("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::N, self.value(b).data(), Layout::N, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(out, vec![m, n], Op::MatMul { a, b }, rg)
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat("matmul_nt", a)?;
        let (n, k2) = self.mat("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("inner dimensions disagree: {:?} x {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::N, self.value(b).data(), Layout::T, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(out, vec![m, n], Op::MatMulNt { a, b }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, self.shape(a).to_vec(), Op::Add { a, b }, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, self.shape(a).to_vec(), Op::Mul { a, b }, rg)
    }

    /// Adds a `[d]` bias to every row of `x: [..., d]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(Error::dim(
                "add_row",
                format!("bias {:?} does not match last dim of {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let rg = self.rg(&[x, bias]);
        self.push(out, self.shape(x).to_vec(), Op::AddRow { x, bias }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * s).collect();
        let rg = self.rg(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::Scale { x, s }, rg)
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("mul_scalar", format!("scale must be scalar, got {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(x).data().iter().map(|v| v * sv).collect();
        let rg = self.rg(&[x, s]);
        self.push(out, self.shape(x).to_vec(), Op::MulScalar { x, s }, rg)
    }

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(sqrt(2/pi)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::Gelu { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let rg = self.rg(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::Tanh { x }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v.exp()).collect();
        let rg = self.rg(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::Exp { x }, rg)
    }

    /// Softmax over the last dimension, with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(x));
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::SoftmaxRows { x }, rg)
    }

    /// Normalizes each vector along the last dimension to zero mean and unit
    /// population variance, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{d}] for input {:?}",
                    self.shape(gamma),
                    self.shape(beta),
                    self.shape(x)
                ),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            self.shape(x).to_vec(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", format!("columns {start}..{} out of {n}", start + len)));
        }
        let xs = self.value(x).data();
        let out = (0..m).flat_map(|i| xs[i * n + start..i * n + start + len].iter().copied()).collect();
        let rg = self.rg(&[x]);
        self.push(out, vec![m, len], Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat_cols", "nothing to concatenate"));
        }
        let (m, _) = self.mat("concat_cols", xs[0])?;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let (mi, ni) = self.mat("concat_cols", v)?;
            if mi != m {
                return Err(Error::dim("concat_cols", format!("row counts differ: {m} vs {mi}")));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(xs);
        self.push(out, vec![m, total], Op::ConcatCols { xs: xs.to_vec() }, rg)
    }

    /// Stacks matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat_rows", "nothing to concatenate"));
        }
        let n = *self.shape(xs[0]).last().unwrap();
        let mut out = Vec::new();
        for &v in xs {
            let (_, ni) = self.value(v).dims2()?;
            if ni != n {
                return Err(Error::dim("concat_rows", format!("column counts differ: {n} vs {ni}")));
            }
            out.extend_from_slice(self.value(v).data());
        }
        let m = out.len() / n;
        let rg = self.rg(xs);
        self.push(out, vec![m, n], Op::ConcatRows { xs: xs.to_vec() }, rg)
    }

    /// Selects rows of `x` by index (repeats allowed). Doubles as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if rows.is_empty() {
            return Err(Error::dim("gather_rows", "no rows selected"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of {m}")));
        }
        let xs = self.value(x).data();
        let out = rows.iter().flat_map(|&r| xs[r * n..(r + 1) * n].iter().copied()).collect();
        let rg = self.rg(&[x]);
        self.push(out, vec![rows.len(), n], Op::GatherRows { x, rows: rows.to_vec() }, rg)
    }

    /// Places row `i` of `x` at row `rows[i]` of a zero `total×n` matrix.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let (m, n) = self.mat("scatter_rows", x)?;
        if rows.len() != m {
            return Err(Error::dim("scatter_rows", format!("{} targets for {m} rows", rows.len())));
        }
        let mut seen = vec![false; total];
        for &r in rows {
            if r >= total || std::mem::replace(&mut seen[r], true) {
                return Err(Error::dim("scatter_rows", format!("target row {r} invalid or repeated")));
            }
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; total * n];
        for (i, &r) in rows.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(&xs[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        self.push(out, vec![total, n], Op::ScatterRows { x, rows: rows.to_vec() }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).data().to_vec();
        let rg = self.rg(&[x]);
        self.push(out, shape.to_vec(), Op::Reshape { x }, rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![s], vec![1], Op::Sum { x }, rg)
    }

    /// `-log softmax(logits)[target]` via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (rows, n) = rows_cols(self.shape(logits));
        if rows != 1 {
            return Err(Error::dim(
                "cross_entropy",
                format!("expected a single row of logits, got {:?}", self.shape(logits)),
            ));
        }
        if target >= n {
            return Err(Error::Input(format!("target {target} out of range for {n} classes")));
        }
        let z = self.value(logits).data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        let rg = self.rg(&[logits]);
        self.push(vec![loss], vec![1], Op::CrossEntropy { logits, target, probs }, rg)
    }

    /// Scales each row to unit L2 norm; a zero row is an input error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(x));
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::new();
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Input("cannot normalize a zero-norm vector".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::NormalizeRows { x, norms }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every node that requires grad ends up with a gradient (zeros if the loss
    /// does not depend on it). Contributions from multiple consumers add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("loss {loss:?} is not on this tape")));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, g, Layout::N, self.value(*b).data(), Layout::T, 1.0, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, self.value(*a).data(), Layout::T, g, Layout::N, 1.0, gb);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[0];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, g, Layout::N, self.value(*b).data(), Layout::N, 1.0, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(n, m, k, g, Layout::T, self.value(*a).data(), Layout::N, 1.0, gb);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((s, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *s += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((s, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *s += gi * ai;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale { x, s } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (a, gi) in gx.iter_mut().zip(g) {
                        *a += s * gi;
                    }
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                if let Some(gx) = self.slot(grads, *x) {
                    for (a, gi) in gx.iter_mut().zip(g) {
                        *a += sv * gi;
                    }
                }
                let dot: f64 = self.value(*x).data().iter().zip(g).map(|(a, b)| a * b).sum();
                if let Some(gs) = self.slot(grads, *s) {
                    gs[0] += dot;
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += gi * gelu_grad(v);
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, gi), y) in gx.iter_mut().zip(g).zip(out) {
                        *a += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Exp { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, gi), y) in gx.iter_mut().zip(g).zip(out) {
                        *a += gi * y;
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((gxr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                let gamma_v = self.value(*gamma).data();
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gamma_v[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            gxr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).shape()[1];
                let len = node.value.shape()[1];
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, gr) in g.chunks(len).enumerate() {
                        add_into(&mut gx[i * n + start..i * n + start + len], gr);
                    }
                }
            }
            Op::ConcatCols { xs } => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &v in xs {
                    let w = self.value(v).shape()[1];
                    if let Some(gv) = self.slot(grads, v) {
                        for (i, gr) in gv.chunks_mut(w).enumerate() {
                            add_into(gr, &g[i * total + offset..i * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &v in xs {
                    let len = self.value(v).numel();
                    if let Some(gv) = self.slot(grads, v) {
                        add_into(gv, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = node.value.shape()[1];
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::ScatterRows { x, rows } => {
                let n = node.value.shape()[1];
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    for (j, (a, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *a += g[0] * (p - onehot);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, ((gxr, gr), yr)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_example_and_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(m(&[&[1.0, 2.0], &[3.0, 4.0]]).with_grad());
        let b = t.leaf(m(&[&[5.0, 6.0], &[7.0, 8.0]]).with_grad());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let s = t.sum(c).unwrap();
        let g = t.backward(s).unwrap();
        // d(sum AB)/dA = 1·Bᵀ, d/dB = Aᵀ·1
        assert_eq!(g.get(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.get(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0, 2.0, 3.0]]));
        let b = t.constant(m(&[&[1.0, 0.0, -1.0], &[2.0, 2.0, 2.0]]));
        let c = t.matmul_nt(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[-2.0, 12.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([2, 3]));
        match t.matmul(a, b) {
            Err(Error::Dimension { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("{other:?}"),
        }
        assert!(t.gather_rows(a, &[2]).is_err());
        assert!(t.scatter_rows(a, &[0, 0], 3).is_err());
        assert!(t.slice_cols(a, 2, 2).is_err());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full([2, 4], 3.0));
        let y = t.softmax_rows(x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_of_zero_logits_is_ln5() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::zeros([5]).with_grad());
        let l = t.cross_entropy(z, 2).unwrap();
        assert!((t.value(l).data()[0] - 5f64.ln()).abs() < 1e-15);
        let g = t.backward(l).unwrap();
        assert!(close(g.get(z).unwrap(), &[0.2, 0.2, -0.8, 0.2, 0.2], 1e-15));
        assert!(matches!(t.cross_entropy(z, 5), Err(Error::Input(_))));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.8411919906082768).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.15880800939172324).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_example() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0, 3.0, 4.0]]));
        let g = t.constant(Tensor::full([4], 1.0));
        let b = t.constant(Tensor::zeros([4]));
        let y = t.layer_norm(x, g, b, 0.0).unwrap();
        let s = 1.25f64.sqrt();
        assert!(close(t.value(y).data(), &[-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s], 1e-12));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![3.0]).unwrap().with_grad());
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap(), &[7.0]);
    }

    #[test]
    fn unused_leaves_get_zero_gradients_and_constants_none() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
        let unused = t.leaf(Tensor::vector(vec![5.0]).unwrap().with_grad());
        let c = t.constant(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap(), &[0.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_requires_a_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros([2]).with_grad());
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn scatter_then_gather_round_trips() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s = t.scatter_rows(x, &[3, 1], 4).unwrap();
        assert_eq!(t.value(s).data(), &[0.0, 0.0, 3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        let g = t.gather_rows(s, &[3, 1]).unwrap();
        assert_eq!(t.value(g).data(), t.value(x).data());
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 3]));
        assert!(matches!(t.normalize_rows(x), Err(Error::Input(_))));
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new([rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(x in (1usize..5, 1usize..7).prop_flat_map(|(r, c)| matrix(r, c))) {
            let mut t = Tape::new();
            let v = t.constant(x);
            let y = t.softmax_rows(v).unwrap();
            let (_, n) = t.value(y).dims2().unwrap();
            for row in t.value(y).data().chunks(n) {
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn layer_norm_rows_are_standardised(x in (1usize..5, 2usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
            let (_, n) = x.dims2().unwrap();
            let spread = x.data().chunks(n).all(|r| r.iter().any(|v| (v - r[0]).abs() > 1e-3));
            prop_assume!(spread);
            let mut t = Tape::new();
            let v = t.constant(x);
            let g = t.constant(Tensor::full([n], 1.0));
            let b = t.constant(Tensor::zeros([n]));
            let y = t.layer_norm(v, g, b, 1e-12).unwrap();
            for row in t.value(y).data().chunks(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 5)) {
            let mut t = Tape::new();
            let (a, b, c) = (t.constant(a), t.constant(b), t.constant(c));
            let ab = t.matmul(a, b).unwrap();
            let left = t.matmul(ab, c).unwrap();
            let bc = t.matmul(b, c).unwrap();
            let right = t.matmul(a, bc).unwrap();
            prop_assert!(t.value(left).max_abs_diff(t.value(right)) < 1e-9);
        }

        #[test]
        fn elementwise_ops_stay_finite(x in matrix(3, 4)) {
            let mut t = Tape::new();
            let v = t.leaf(x.with_grad());
            let a = t.gelu(v).unwrap();
            let b = t.tanh(a).unwrap();
            let c = t.exp(b).unwrap();
            let d = t.softmax_rows(c).unwrap();
            let s = t.sum(d).unwrap();
            let g = t.backward(s).unwrap();
            prop_assert!(t.value(d).is_finite());
            prop_assert!(g.get(v).unwrap().iter().all(|x| x.is_finite()));
        }

        #[test]
        fn cross_entropy_is_shift_invariant(z in proptest::collection::vec(-20.0f64..20.0, 5), shift in -50.0f64..50.0, k in 0usize..5) {
            let mut t = Tape::new();
            let a = t.constant(Tensor::vector(z.clone()).unwrap());
            let b = t.constant(Tensor::vector(z.iter().map(|v| v + shift).collect()).unwrap());
            let la = t.cross_entropy(a, k).unwrap();
            let lb = t.cross_entropy(b, k).unwrap();
            prop_assert!((t.value(la).data()[0] - t.value(lb).data()[0]).abs() < 1e-9);
            prop_assert!(t.value(la).data()[0] >= 0.0);
        }
    }
}
