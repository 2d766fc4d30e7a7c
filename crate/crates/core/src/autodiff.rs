//! Define-by-run reverse-mode differentiation over the small op set the
//! quantization pipeline needs.
//!
//! A [`Graph`] is an append-only tape. Every op checks its output for
//! non-finite values. [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients for every node that requires one. The fake-quantize
//! op uses a straight-through override instead of its true derivative.

use crate::error::{Error, Result};
use crate::quant;
use crate::tensor::{gemm, gemm_strided, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PiecewiseLinear {
    Relu,
    LeakyRelu(f64),
}

impl PiecewiseLinear {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Self::Relu => v.max(0.0),
            Self::LeakyRelu(slope) => {
                if v >= 0.0 {
                    v
                } else {
                    slope * v
                }
            }
        }
    }

    #[inline]
    fn slope(self, v: f64) -> f64 {
        match self {
            Self::Relu => f64::from(u8::from(v > 0.0)),
            Self::LeakyRelu(slope) => {
                if v >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCols(NodeId, NodeId),
    MulRows(NodeId, NodeId),
    Recip(NodeId),
    Scale(NodeId, f64),
    Normalize { x: NodeId, rstd: Vec<f64> },
    Gelu(NodeId),
    Piecewise(NodeId, PiecewiseLinear),
    Softmax(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    Gather { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    Mse { x: NodeId, target: Vec<f64> },
    Sum(NodeId),
    FakeQuant { x: NodeId, theta_min: NodeId, theta_max: NodeId, lo: f64, hi: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get(id.0)?.as_ref()?;
        Some(Tensor::new(&self.shapes[id.0], g.clone()).expect("gradient shape"))
    }

    pub fn slice(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0)?.as_deref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh())
}

#[inline]
fn gelu_grad(v: f64) -> f64 {
    let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v)
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::MulCols(a, b)
            | Op::MulRows(a, b) => vec![*a, *b],
            Op::Recip(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Piecewise(x, _)
            | Op::Softmax(x)
            | Op::Sum(x) => vec![*x],
            Op::Normalize { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Mse { x, .. } => vec![*x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::FakeQuant { x, theta_min, theta_max, .. } => vec![*x, *theta_min, *theta_max],
        }
    }

    /// Adds an input or parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if k != k2 {
            return Err(Error::Dimension(format!("matmul [{m}x{k}]·[{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ` with `a [m×k]`, `b [n×k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        if k != k2 {
            return Err(Error::Dimension(format!("matmul_nt [{m}x{k}]·[{n}x{k2}]ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm_strided(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            &mut out,
            false,
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), "matmul_nt")
    }

    fn same_shape(&self, a: NodeId, b: NodeId, name: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{name}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), "sub")
    }

    fn col_vector(&self, x: NodeId, v: NodeId, name: &str) -> Result<()> {
        if self.value(v).len() != self.value(x).cols() {
            return Err(Error::Dimension(format!(
                "{name}: vector of {} against {} columns",
                self.value(v).len(),
                self.value(x).cols()
            )));
        }
        Ok(())
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.col_vector(x, bias, "add_row")?;
        let vx = self.value(x);
        let b = self.value(bias).data();
        let cols = vx.cols();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + b[i % cols]).collect();
        let out = Tensor::new(vx.shape(), data)?;
        self.push(out, Op::AddRow(x, bias), "add_row")
    }

    /// `out[r, c] = x[r, c] * v[c]`
    pub fn mul_cols(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        self.col_vector(x, v, "mul_cols")?;
        let vx = self.value(x);
        let s = self.value(v).data();
        let cols = vx.cols();
        let data = vx.data().iter().enumerate().map(|(i, &e)| e * s[i % cols]).collect();
        let out = Tensor::new(vx.shape(), data)?;
        self.push(out, Op::MulCols(x, v), "mul_cols")
    }

    /// `out[r, c] = x[r, c] * v[r]`
    pub fn mul_rows(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if self.value(v).len() != vx.rows() {
            return Err(Error::Dimension(format!(
                "mul_rows: vector of {} against {} rows",
                self.value(v).len(),
                vx.rows()
            )));
        }
        let s = self.value(v).data();
        let cols = vx.cols();
        let data = vx.data().iter().enumerate().map(|(i, &e)| e * s[i / cols]).collect();
        let out = Tensor::new(vx.shape(), data)?;
        self.push(out, Op::MulRows(x, v), "mul_rows")
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|e| 1.0 / e);
        self.push(v, Op::Recip(x), "recip")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c), "scale")
    }

    /// Per-row `(x - mean) / sqrt(var + eps)` with population variance.
    pub fn normalize(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        if eps < 0.0 {
            return Err(Error::Contract("layer-norm epsilon must be non-negative".into()));
        }
        let vx = self.value(x);
        let d = vx.cols();
        let mut out = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            out.extend(row.iter().map(|v| (v - mean) * rs));
        }
        let out = Tensor::new(vx.shape(), out)?;
        self.push(out, Op::Normalize { x, rstd }, "normalize")
    }

    /// Full layer norm: normalization followed by the per-channel affine map.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let n = self.normalize(x, eps)?;
        let s = self.mul_cols(n, gamma)?;
        self.add_row(s, beta)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(gelu_scalar);
        self.push(v, Op::Gelu(x), "gelu")
    }

    pub fn piecewise_linear(&mut self, x: NodeId, kind: PiecewiseLinear) -> Result<NodeId> {
        let v = self.value(x).map(|e| kind.apply(e));
        self.push(v, Op::Piecewise(x, kind), "piecewise_linear")
    }

    /// Row softmax with a causal mask: row `i` attends columns `0..=i`.
    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = dims2(vx);
        if rows != cols {
            return Err(Error::Dimension("causal softmax expects a square score matrix".into()));
        }
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &vx.row(i)[..=i];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[i * cols + j] = e;
                z += e;
            }
            for o in &mut out[i * cols..=i * cols + i] {
                *o /= z;
            }
        }
        let out = Tensor::new(&[rows, cols], out)?;
        self.push(out, Op::Softmax(x), "causal_softmax")
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = dims2(vx);
        if len == 0 || start + len > cols {
            return Err(Error::Dimension(format!("slice_cols {start}+{len} of {cols}")));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let out = Tensor::new(&[rows, len], out)?;
        self.push(out, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(xs[0]).rows();
        if xs.iter().any(|&x| self.value(x).rows() != rows) {
            return Err(Error::Dimension("concat_cols row mismatch".into()));
        }
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let out = Tensor::new(&[rows, total], out)?;
        self.push(out, Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = dims2(vx);
        if len == 0 || start + len > rows {
            return Err(Error::Dimension(format!("slice_rows {start}+{len} of {rows}")));
        }
        let out = Tensor::new(&[len, cols], vx.data()[start * cols..(start + len) * cols].to_vec())?;
        self.push(out, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(xs[0]).cols();
        if xs.iter().any(|&x| self.value(x).cols() != cols) {
            return Err(Error::Dimension("concat_rows column mismatch".into()));
        }
        let mut out = Vec::new();
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        let rows = out.len() / cols;
        let out = Tensor::new(&[rows, cols], out)?;
        self.push(out, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let (rows, cols) = dims2(vt);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::Index(format!("row {i} of a {rows}-row table")));
            }
            out.extend_from_slice(vt.row(i));
        }
        let out = Tensor::new(&[ids.len(), cols], out)?;
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, "gather")
    }

    /// Mean next-token negative log-likelihood.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let (t, v) = dims2(vl);
        if targets.len() != t {
            return Err(Error::Dimension(format!("{} targets for {t} positions", targets.len())));
        }
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(Error::Index(format!("target {target} outside vocabulary of {v}")));
            }
            let row = vl.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lz = z.ln() + m;
            loss += lz - row[target];
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lz).exp();
            }
        }
        let out = Tensor::scalar(loss / t as f64);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, "cross_entropy")
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.value(x).shape() != target.shape() {
            return Err(Error::Dimension("mse shape mismatch".into()));
        }
        let vx = self.value(x);
        let n = vx.len() as f64;
        let loss = vx.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        self.push(Tensor::scalar(loss), Op::Mse { x, target: target.data().to_vec() }, "mse")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Fake quantization with range nodes `theta_min`, `theta_max` (scalars).
    /// Backward is straight-through: see [`quant::fake_quantize_backward`].
    pub fn fake_quantize(
        &mut self,
        x: NodeId,
        theta_min: NodeId,
        theta_max: NodeId,
        bits: u32,
    ) -> Result<NodeId> {
        let lo = self.value(theta_min).data()[0];
        let hi = self.value(theta_max).data()[0];
        let vx = self.value(x);
        let data = quant::quantize_slice(vx.data(), lo, hi, bits)?;
        let out = Tensor::new(vx.shape(), data)?;
        self.push(out, Op::FakeQuant { x, theta_min, theta_max, lo, hi }, "fake_quantize")
    }

    /// Fake quantization whose range is read off `x` (zero-inclusive min/max),
    /// treated as a constant by backward.
    pub fn fake_quantize_dynamic(&mut self, x: NodeId, bits: u32) -> Result<NodeId> {
        let (lo, hi) = quant::zero_inclusive_range(self.value(x).data());
        let tmin = self.constant(Tensor::scalar(lo))?;
        let tmax = self.constant(Tensor::scalar(hi))?;
        self.fake_quantize(x, tmin, tmax, bits)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        // Only keep gradients of nodes that actually require them.
        for (id, g) in grads.iter_mut().enumerate() {
            if !self.nodes[id].requires_grad {
                *g = None;
            }
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).cols();
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                // da = g · bᵀ
                self.accumulate(grads, *a, |da| {
                    gemm_strided(m, n, k, g, (n as isize, 1), vb, (1, n as isize), da, true)
                });
                // db = aᵀ · g
                self.accumulate(grads, *b, |db| {
                    gemm_strided(k, m, n, va, (1, k as isize), g, (n as isize, 1), db, true)
                });
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).rows();
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                // da = g · b
                self.accumulate(grads, *a, |da| gemm(m, n, k, g, vb, da, true));
                // db = gᵀ · a
                self.accumulate(grads, *b, |db| {
                    gemm_strided(n, m, k, g, (1, n as isize), va, (k as isize, 1), db, true)
                });
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    self.accumulate(grads, id, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::AddRow(x, bias) => {
                let cols = out.cols();
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *bias, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % cols] += gv;
                    }
                });
            }
            Op::MulCols(x, v) => {
                let cols = out.cols();
                let vx = self.value(*x).data();
                let vv = self.value(*v).data();
                self.accumulate(grads, *x, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i] += gv * vv[i % cols];
                    }
                });
                self.accumulate(grads, *v, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % cols] += gv * vx[i];
                    }
                });
            }
            Op::MulRows(x, v) => {
                let cols = out.cols();
                let vx = self.value(*x).data();
                let vv = self.value(*v).data();
                self.accumulate(grads, *x, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i] += gv * vv[i / cols];
                    }
                });
                self.accumulate(grads, *v, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i / cols] += gv * vx[i];
                    }
                });
            }
            Op::Recip(x) => {
                let o = out.data();
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * o[i] * o[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c));
            }
            Op::Normalize { x, rstd } => {
                let cols = out.cols();
                let y = out.data();
                self.accumulate(grads, *x, |d| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let mg = gr.iter().sum::<f64>() / cols as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            d[r * cols + c] += rs * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_grad(vx[i]);
                    }
                });
            }
            Op::Piecewise(x, kind) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * kind.slope(vx[i]);
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = out.cols();
                let p = out.data();
                self.accumulate(grads, *x, |d| {
                    for r in 0..out.rows() {
                        let pr = &p[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            d[r * cols + c] += pr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let len = out.cols();
                let cols = self.value(*x).cols();
                self.accumulate(grads, *x, |d| {
                    for r in 0..out.rows() {
                        for c in 0..len {
                            d[r * cols + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = out.cols();
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    self.accumulate(grads, x, |d| {
                        for r in 0..out.rows() {
                            for c in 0..w {
                                d[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = out.cols();
                self.accumulate(grads, *x, |d| {
                    let base = start * cols;
                    for (i, gv) in g.iter().enumerate() {
                        d[base + i] += gv;
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    self.accumulate(grads, x, |d| {
                        d.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, g)| *d += g)
                    });
                    offset += n;
                }
            }
            Op::Gather { table, ids } => {
                let cols = out.cols();
                self.accumulate(grads, *table, |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..cols {
                            d[i * cols + c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                self.accumulate(grads, *logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            d[r * v + c] += scale * (probs[r * v + c] - onehot);
                        }
                    }
                });
            }
            Op::Mse { x, target } => {
                let vx = self.value(*x).data();
                let scale = 2.0 * g[0] / vx.len() as f64;
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += scale * (vx[i] - target[i]);
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::FakeQuant { x, theta_min, theta_max, lo, hi } => {
                let (dx, dmin, dmax) = quant::route_ste(self.value(*x).data(), *lo, *hi, g);
                self.accumulate(grads, *x, |d| d.iter_mut().zip(&dx).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *theta_min, |d| d[0] += dmin);
                self.accumulate(grads, *theta_max, |d| d[0] += dmax);
            }
        }
    }
}
