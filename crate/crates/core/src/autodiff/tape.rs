use std::cell::RefCell;
use std::rc::Rc;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Epsilon added to the variance inside `layer_norm`; fixed by contract.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Recorded operation. Parent ids plus whatever metadata the backward rule
/// needs; values live on the nodes themselves.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    MinElem(NodeId, NodeId),
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    /// out[i,j] = sum_k a[i,k] * b[j,k]  (b used transposed)
    MatmulTb { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Conv2d { x: NodeId, w: NodeId, stride: usize, dims: ConvDims },
    AddChannelBias { x: NodeId, b: NodeId, batch: usize, channels: usize, hw: usize },
    AddRowBroadcast { x: NodeId, b: NodeId, rows: usize, cols: usize },
    BroadcastRows { b: NodeId, rows: usize, cols: usize },
    RowSum { x: NodeId, rows: usize, cols: usize },
    Sum(NodeId),
    Mean(NodeId),
    Softmax { x: NodeId, rows: usize, cols: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, rows: usize, cols: usize },
    RowL2Normalize { x: NodeId, rows: usize, cols: usize },
    RowLogSumExp { x: NodeId, rows: usize, cols: usize },
    GatherDiag { x: NodeId, n: usize },
    MaskedMean { x: NodeId, mask: Vec<bool>, count: usize },
    Reshape { x: NodeId },
    ConcatRows { parts: Vec<NodeId>, cols: usize },
    ConcatCols { a: NodeId, b: NodeId, rows: usize, a_cols: usize, b_cols: usize },
    SliceRows { x: NodeId, start: usize, len: usize, total_rows: usize, cols: usize },
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    param_name: Option<String>,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording tape for one forward pass. Rebuilt every step (define-by-run);
/// single-threaded by construction.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one node on a tape. Cheap to clone.
#[derive(Clone)]
pub struct Var {
    inner: Rc<RefCell<TapeInner>>,
    id: NodeId,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, op: Op, param_name: Option<String>) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { shape, values, grad: None, op, param_name });
        Var { inner: Rc::clone(&self.inner), id }
    }

    /// Constant leaf: gradients accumulate into it but it is not reported as
    /// a parameter.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, None)
    }

    /// Parameter leaf. The name shows up in diagnostics and in the
    /// structural parameter registry of the tape.
    pub fn param(&self, name: &str, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, Some(name.to_string()))
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.push(vec![1], vec![v], Op::Leaf, None)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of every parameter leaf registered on this tape, in recording
    /// order. Used by structural gradient-isolation assertions.
    pub fn param_names(&self) -> Vec<String> {
        self.inner
            .borrow()
            .nodes
            .iter()
            .filter_map(|n| n.param_name.clone())
            .collect()
    }
}

fn same_tape(a: &Var, b: &Var) -> Result<()> {
    if Rc::ptr_eq(&a.inner, &b.inner) {
        Ok(())
    } else {
        Err(Error::contract("operands recorded on different tapes"))
    }
}

impl Var {
    pub fn id(&self) -> NodeId {
        self.id
    }

    /// Handle to the tape this node lives on.
    pub fn tape(&self) -> Tape {
        Tape { inner: Rc::clone(&self.inner) }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().nodes[self.id].values.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().nodes[self.id].values.clone()
    }

    pub fn value(&self) -> Tensor {
        let inner = self.inner.borrow();
        let node = &inner.nodes[self.id];
        Tensor::new(node.shape.clone(), node.values.clone()).expect("node shape consistent")
    }

    /// Value of a one-element node.
    pub fn scalar_value(&self) -> f64 {
        let inner = self.inner.borrow();
        let node = &inner.nodes[self.id];
        debug_assert_eq!(node.values.len(), 1);
        node.values[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn is_param(&self) -> bool {
        self.inner.borrow().nodes[self.id].param_name.is_some()
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { shape, values, grad: None, op, param_name: None });
        Var { inner: Rc::clone(&self.inner), id }
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary_elementwise(
        &self,
        rhs: &Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<Var> {
        same_tape(self, rhs)?;
        let (ls, rs) = (self.shape(), rhs.shape());
        let (ln, rn) = (self.numel(), rhs.numel());
        if ls != rs && ln != 1 && rn != 1 {
            return Err(Error::shape(format!("{name}: shapes {ls:?} vs {rs:?}")));
        }
        let (a, b) = (self.data(), rhs.data());
        let out_shape = if ln == 1 && rn != 1 { rs } else { ls };
        let values = if ln == rn {
            a.iter().zip(&b).map(|(&x, &y)| f(x, y)).collect()
        } else if rn == 1 {
            a.iter().map(|&x| f(x, b[0])).collect()
        } else {
            b.iter().map(|&y| f(a[0], y)).collect()
        };
        Ok(self.push(out_shape, values, op(self.id, rhs.id)))
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        self.binary_elementwise(rhs, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        self.binary_elementwise(rhs, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        self.binary_elementwise(rhs, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, rhs: &Var) -> Result<Var> {
        if rhs.data().iter().any(|&y| y == 0.0) {
            return Err(Error::domain("div: zero divisor"));
        }
        self.binary_elementwise(rhs, "div", |x, y| x / y, Op::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let values = self.data().iter().map(|&x| x + c).collect();
        self.push(self.shape(), values, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let values = self.data().iter().map(|&x| x * c).collect();
        self.push(self.shape(), values, Op::MulScalar(self.id, c))
    }

    pub fn neg(&self) -> Var {
        self.mul_scalar(-1.0)
    }

    pub fn relu(&self) -> Var {
        let values = self.data().iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(), values, Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Var {
        let values = self.data().iter().map(|&x| x.tanh()).collect();
        self.push(self.shape(), values, Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Var {
        let values = self.data().iter().map(|&x| x.exp()).collect();
        self.push(self.shape(), values, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var> {
        let data = self.data();
        if data.iter().any(|&x| x <= 0.0) {
            return Err(Error::domain("log: non-positive input"));
        }
        let values = data.iter().map(|&x| x.ln()).collect();
        Ok(self.push(self.shape(), values, Op::Log(self.id)))
    }

    pub fn square(&self) -> Var {
        let values = self.data().iter().map(|&x| x * x).collect();
        self.push(self.shape(), values, Op::Square(self.id))
    }

    /// Elementwise clamp. Gradient passes through strictly inside (lo, hi)
    /// and is zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let values = self.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        self.push(self.shape(), values, Op::Clamp { x: self.id, lo, hi })
    }

    /// Elementwise minimum; the gradient flows to whichever operand is
    /// smaller (to the left one on ties).
    pub fn min_elem(&self, rhs: &Var) -> Result<Var> {
        same_tape(self, rhs)?;
        if self.shape() != rhs.shape() {
            return Err(Error::shape(format!(
                "min_elem: shapes {:?} vs {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let values = self
            .data()
            .iter()
            .zip(&rhs.data())
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        Ok(self.push(self.shape(), values, Op::MinElem(self.id, rhs.id)))
    }

    // ── linear algebra ──────────────────────────────────────────────

    fn dims_2d(&self, name: &str) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("{name}: expected 2-D tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        same_tape(self, rhs)?;
        let (m, k) = self.dims_2d("matmul lhs")?;
        let (k2, n) = rhs.dims_2d("matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner extents differ, lhs {:?} vs rhs {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.data(), &rhs.data(), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::Matmul { a: self.id, b: rhs.id, m, k, n }))
    }

    /// `self [m,k] @ rhs^T` where rhs is stored as `[n,k]`.
    pub fn matmul_tb(&self, rhs: &Var) -> Result<Var> {
        same_tape(self, rhs)?;
        let (m, k) = self.dims_2d("matmul_tb lhs")?;
        let (n, k2) = rhs.dims_2d("matmul_tb rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_tb: inner extents differ, lhs {:?} vs rhs {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_tb_acc(&self.data(), &rhs.data(), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatmulTb { a: self.id, b: rhs.id, m, k, n }))
    }

    /// Valid (unpadded) cross-correlation. `self` is `[C,H,W]` or
    /// `[B,C,H,W]`; `kernel` is `[C_out,C_in,kh,kw]`.
    pub fn conv2d(&self, kernel: &Var, stride: usize) -> Result<Var> {
        same_tape(self, kernel)?;
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be positive"));
        }
        let xs = self.shape();
        let (batch, c_in, h, w, batched) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2], false),
            4 => (xs[0], xs[1], xs[2], xs[3], true),
            _ => return Err(Error::shape(format!("conv2d: input must be 3-D or 4-D, got {xs:?}"))),
        };
        let ks = kernel.shape();
        if ks.len() != 4 {
            return Err(Error::shape(format!("conv2d: kernel must be 4-D, got {ks:?}")));
        }
        let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c_in {
            return Err(Error::shape(format!(
                "conv2d: kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if kh > h || kw > w {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        let h_out = (h - kh) / stride + 1;
        let w_out = (w - kw) / stride + 1;
        let dims = ConvDims { batch, c_in, h, w, c_out, kh, kw, h_out, w_out };

        let x = self.data();
        let wdat = kernel.data();
        let mut out = vec![0.0; batch * c_out * h_out * w_out];
        let mut cols = vec![0.0; h_out * w_out * c_in * kh * kw];
        for b in 0..batch {
            im2col(&x[b * c_in * h * w..], &mut cols, &dims, stride);
            // wdat [c_out, c_in*kh*kw] @ cols^T → [c_out, h_out*w_out]
            let out_b = &mut out[b * c_out * h_out * w_out..][..c_out * h_out * w_out];
            matmul_tb_acc(&wdat, &cols, out_b, c_out, c_in * kh * kw, h_out * w_out);
        }

        let out_shape = if batched {
            vec![batch, c_out, h_out, w_out]
        } else {
            vec![c_out, h_out, w_out]
        };
        Ok(self.push(out_shape, out, Op::Conv2d { x: self.id, w: kernel.id, stride, dims }))
    }

    /// Add a per-channel bias `[C]` to a `[C,H,W]` or `[B,C,H,W]` tensor.
    pub fn add_channel_bias(&self, bias: &Var) -> Result<Var> {
        same_tape(self, bias)?;
        let xs = self.shape();
        let (batch, channels, hw) = match xs.len() {
            3 => (1, xs[0], xs[1] * xs[2]),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            _ => {
                return Err(Error::shape(format!(
                    "add_channel_bias: input must be 3-D or 4-D, got {xs:?}"
                )))
            }
        };
        if bias.shape() != vec![channels] {
            return Err(Error::shape(format!(
                "add_channel_bias: bias {:?} vs {channels} channels",
                bias.shape()
            )));
        }
        let b = bias.data();
        let mut values = self.data();
        for bi in 0..batch {
            for c in 0..channels {
                let base = (bi * channels + c) * hw;
                for v in &mut values[base..base + hw] {
                    *v += b[c];
                }
            }
        }
        Ok(self.push(
            xs,
            values,
            Op::AddChannelBias { x: self.id, b: bias.id, batch, channels, hw },
        ))
    }

    /// Add a `[n]` bias to every row of a `[m,n]` matrix.
    pub fn add_row_broadcast(&self, bias: &Var) -> Result<Var> {
        same_tape(self, bias)?;
        let (rows, cols) = self.dims_2d("add_row_broadcast")?;
        if bias.shape() != vec![cols] {
            return Err(Error::shape(format!(
                "add_row_broadcast: bias {:?} vs {cols} columns",
                bias.shape()
            )));
        }
        let b = bias.data();
        let mut values = self.data();
        for r in 0..rows {
            for (v, &bv) in values[r * cols..(r + 1) * cols].iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(
            vec![rows, cols],
            values,
            Op::AddRowBroadcast { x: self.id, b: bias.id, rows, cols },
        ))
    }

    /// Tile a `[n]` vector into `[rows, n]`.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Var> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::shape(format!("broadcast_rows: expected 1-D, got {s:?}")));
        }
        let cols = s[0];
        let b = self.data();
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            values.extend_from_slice(&b);
        }
        Ok(self.push(vec![rows, cols], values, Op::BroadcastRows { b: self.id, rows, cols }))
    }

    /// Sum each row of `[m,n]` into `[m]`.
    pub fn row_sum(&self) -> Result<Var> {
        let (rows, cols) = self.dims_2d("row_sum")?;
        let x = self.data();
        let values = (0..rows).map(|r| x[r * cols..(r + 1) * cols].iter().sum()).collect();
        Ok(self.push(vec![rows], values, Op::RowSum { x: self.id, rows, cols }))
    }

    pub fn sum(&self) -> Var {
        let v: f64 = self.data().iter().sum();
        self.push(vec![1], vec![v], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var {
        let d = self.data();
        let v: f64 = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![1], vec![v], Op::Mean(self.id))
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&self) -> Result<Var> {
        let s = self.shape();
        let cols = *s.last().ok_or_else(|| Error::shape("softmax: rank-0 input"))?;
        let rows = self.numel() / cols;
        let x = self.data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("softmax: NaN input"));
        }
        let mut values = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut values[r * cols..(r + 1) * cols];
            let mut denom = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                denom += *o;
            }
            for o in out.iter_mut() {
                *o /= denom;
            }
        }
        Ok(self.push(s, values, Op::Softmax { x: self.id, rows, cols }))
    }

    /// Per-row layer normalization over the last axis followed by the
    /// learnable affine `gain ⊙ x̂ + bias`. Epsilon is fixed at 1e-5.
    pub fn layer_norm(&self, gain: &Var, bias: &Var) -> Result<Var> {
        same_tape(self, gain)?;
        same_tape(self, bias)?;
        let s = self.shape();
        let cols = *s.last().ok_or_else(|| Error::shape("layer_norm: rank-0 input"))?;
        if cols < 2 {
            return Err(Error::shape("layer_norm: normalized extent must be >= 2"));
        }
        let rows = self.numel() / cols;
        if gain.shape() != vec![cols] || bias.shape() != vec![cols] {
            return Err(Error::shape(format!(
                "layer_norm: gain {:?} / bias {:?} vs {cols} columns",
                gain.shape(),
                bias.shape()
            )));
        }
        let x = self.data();
        let g = gain.data();
        let b = bias.data();
        let mut values = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + LAYERNORM_EPS).sqrt();
            let out = &mut values[r * cols..(r + 1) * cols];
            for j in 0..cols {
                out[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        Ok(self.push(
            s,
            values,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, rows, cols },
        ))
    }

    /// Normalize each row of `[m,n]` to unit Euclidean norm.
    pub fn row_l2_normalize(&self) -> Result<Var> {
        let (rows, cols) = self.dims_2d("row_l2_normalize")?;
        let x = self.data();
        let mut values = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let norm = dot(row, row).sqrt();
            if norm == 0.0 {
                return Err(Error::numeric(format!("row_l2_normalize: zero-norm row {r}")));
            }
            for j in 0..cols {
                values[r * cols + j] = row[j] / norm;
            }
        }
        Ok(self.push(vec![rows, cols], values, Op::RowL2Normalize { x: self.id, rows, cols }))
    }

    /// Stable per-row log(sum(exp(x))) of `[m,n]`, producing `[m]`.
    pub fn row_log_sum_exp(&self) -> Result<Var> {
        let (rows, cols) = self.dims_2d("row_log_sum_exp")?;
        let x = self.data();
        let mut values = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            values[r] = max + s.ln();
        }
        Ok(self.push(vec![rows], values, Op::RowLogSumExp { x: self.id, rows, cols }))
    }

    /// Diagonal of a square matrix as `[n]`.
    pub fn gather_diag(&self) -> Result<Var> {
        let (rows, cols) = self.dims_2d("gather_diag")?;
        if rows != cols {
            return Err(Error::shape(format!("gather_diag: matrix not square: {rows}x{cols}")));
        }
        let x = self.data();
        let values = (0..rows).map(|i| x[i * cols + i]).collect();
        Ok(self.push(vec![rows], values, Op::GatherDiag { x: self.id, n: rows }))
    }

    /// Mean of the entries of a `[n]` vector selected by `mask`.
    pub fn masked_mean(&self, mask: &[bool]) -> Result<Var> {
        let s = self.shape();
        if s.len() != 1 || s[0] != mask.len() {
            return Err(Error::shape(format!(
                "masked_mean: vector {s:?} vs mask of {}",
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::contract("masked_mean: empty mask"));
        }
        let x = self.data();
        let v = x
            .iter()
            .zip(mask)
            .filter_map(|(&v, &m)| m.then_some(v))
            .sum::<f64>()
            / count as f64;
        Ok(self.push(vec![1], vec![v], Op::MaskedMean { x: self.id, mask: mask.to_vec(), count }))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "reshape: {:?} ({} values) to {shape:?} ({numel} values)",
                self.shape(),
                self.numel()
            )));
        }
        Ok(self.push(shape, self.data(), Op::Reshape { x: self.id }))
    }

    /// Stack 2-D parts with equal column counts along the row axis.
    pub fn concat_rows(parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_rows: no parts"))?;
        let (_, cols) = first.dims_2d("concat_rows")?;
        let mut values = Vec::new();
        let mut rows = 0;
        for p in parts {
            same_tape(first, p)?;
            let (m, c) = p.dims_2d("concat_rows")?;
            if c != cols {
                return Err(Error::shape(format!("concat_rows: {c} columns vs {cols}")));
            }
            rows += m;
            values.extend_from_slice(&p.data());
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.push(vec![rows, cols], values, Op::ConcatRows { parts: ids, cols }))
    }

    /// Concatenate two `[m,·]` matrices along the column axis.
    pub fn concat_cols(&self, rhs: &Var) -> Result<Var> {
        same_tape(self, rhs)?;
        let (m, a_cols) = self.dims_2d("concat_cols lhs")?;
        let (m2, b_cols) = rhs.dims_2d("concat_cols rhs")?;
        if m != m2 {
            return Err(Error::shape(format!("concat_cols: {m} rows vs {m2}")));
        }
        let a = self.data();
        let b = rhs.data();
        let mut values = Vec::with_capacity(m * (a_cols + b_cols));
        for r in 0..m {
            values.extend_from_slice(&a[r * a_cols..(r + 1) * a_cols]);
            values.extend_from_slice(&b[r * b_cols..(r + 1) * b_cols]);
        }
        Ok(self.push(
            vec![m, a_cols + b_cols],
            values,
            Op::ConcatCols { a: self.id, b: rhs.id, rows: m, a_cols, b_cols },
        ))
    }

    /// Rows `start..start+len` of a `[m,n]` matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims_2d("slice_rows")?;
        if start + len > rows {
            return Err(Error::shape(format!(
                "slice_rows: {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let values = self.data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(
            vec![len, cols],
            values,
            Op::SliceRows { x: self.id, start, len, total_rows: rows, cols },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Seeds the root with 1.0 and visits
    /// every recorded operation in exact reverse order; gradients accumulate
    /// additively, so calling twice doubles them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        // Per-sweep buffers: each backward() computes the full gradient of
        // this root, then folds it into the persistent per-node grads.
        let mut local: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        local[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let g = match local[id].clone() {
                Some(g) => g,
                None => continue,
            };
            backward_op(&inner.nodes, &mut local, id, &g);
        }
        for (node, contribution) in inner.nodes.iter_mut().zip(local) {
            if let Some(c) = contribution {
                match &mut node.grad {
                    Some(g) => {
                        for (gv, cv) in g.iter_mut().zip(&c) {
                            *gv += cv;
                        }
                    }
                    None => node.grad = Some(c),
                }
            }
        }
        Ok(())
    }
}

fn add_grad(local: &mut [Option<Vec<f64>>], id: NodeId, contribution: &[f64]) {
    match &mut local[id] {
        Some(g) => {
            for (gv, &c) in g.iter_mut().zip(contribution) {
                *gv += c;
            }
        }
        None => local[id] = Some(contribution.to_vec()),
    }
}

fn values(nodes: &[Node], id: NodeId) -> &[f64] {
    &nodes[id].values
}

#[allow(clippy::too_many_lines)]
fn backward_op(nodes: &[Node], local: &mut [Option<Vec<f64>>], out_id: NodeId, g: &[f64]) {
    match nodes[out_id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            backward_broadcast_pair(nodes, local, a, b, g, |_, _| (1.0, 1.0));
        }
        Op::Sub(a, b) => {
            backward_broadcast_pair(nodes, local, a, b, g, |_, _| (1.0, -1.0));
        }
        Op::Mul(a, b) => {
            backward_broadcast_pair(nodes, local, a, b, g, |x, y| (y, x));
        }
        Op::Div(a, b) => {
            backward_broadcast_pair(nodes, local, a, b, g, |x, y| (1.0 / y, -x / (y * y)));
        }
        Op::AddScalar(x) => add_grad(local, x, g),
        Op::MulScalar(x, c) => {
            let d: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
            add_grad(local, x, &d);
        }
        Op::Relu(x) => {
            let xv = values(nodes, x);
            let d: Vec<f64> = g.iter().zip(xv).map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 }).collect();
            add_grad(local, x, &d);
        }
        Op::Tanh(x) => {
            let yv = values(nodes, out_id);
            let d: Vec<f64> = g.iter().zip(yv).map(|(&gv, &y)| gv * (1.0 - y * y)).collect();
            add_grad(local, x, &d);
        }
        Op::Exp(x) => {
            let yv = values(nodes, out_id);
            let d: Vec<f64> = g.iter().zip(yv).map(|(&gv, &y)| gv * y).collect();
            add_grad(local, x, &d);
        }
        Op::Log(x) => {
            let xv = values(nodes, x);
            let d: Vec<f64> = g.iter().zip(xv).map(|(&gv, &v)| gv / v).collect();
            add_grad(local, x, &d);
        }
        Op::Square(x) => {
            let xv = values(nodes, x);
            let d: Vec<f64> = g.iter().zip(xv).map(|(&gv, &v)| gv * 2.0 * v).collect();
            add_grad(local, x, &d);
        }
        Op::Clamp { x, lo, hi } => {
            let xv = values(nodes, x);
            let d: Vec<f64> = g
                .iter()
                .zip(xv)
                .map(|(&gv, &v)| if v > lo && v < hi { gv } else { 0.0 })
                .collect();
            add_grad(local, x, &d);
        }
        Op::MinElem(a, b) => {
            let av = values(nodes, a);
            let bv = values(nodes, b);
            let mut da = vec![0.0; av.len()];
            let mut db = vec![0.0; bv.len()];
            for i in 0..av.len() {
                if av[i] <= bv[i] {
                    da[i] = g[i];
                } else {
                    db[i] = g[i];
                }
            }
            add_grad(local, a, &da);
            add_grad(local, b, &db);
        }
        Op::Matmul { a, b, m, k, n } => {
            let av = values(nodes, a);
            let bv = values(nodes, b);
            // dA += g @ B^T
            let mut da = vec![0.0; m * k];
            matmul_tb_acc(g, &bv, &mut da, m, n, k);
            add_grad(local, a, &da);
            // dB += A^T @ g
            let mut db = vec![0.0; k * n];
            matmul_ta_acc(&av, g, &mut db, m, k, n);
            add_grad(local, b, &db);
        }
        Op::MatmulTb { a, b, m, k, n } => {
            let av = values(nodes, a);
            let bv = values(nodes, b);
            // out = A @ B^T;  dA += g @ B, dB += g^T @ A
            let mut da = vec![0.0; m * k];
            matmul_acc(g, &bv, &mut da, m, n, k);
            add_grad(local, a, &da);
            let mut db = vec![0.0; n * k];
            matmul_ta_acc(g, &av, &mut db, m, n, k);
            add_grad(local, b, &db);
        }
        Op::Conv2d { x, w, stride, dims } => {
            let xv = values(nodes, x);
            let wv = values(nodes, w);
            let ck2 = dims.c_in * dims.kh * dims.kw;
            let hw_out = dims.h_out * dims.w_out;
            let mut dx = vec![0.0; xv.len()];
            let mut dw = vec![0.0; wv.len()];
            let mut cols = vec![0.0; hw_out * ck2];
            let mut dcols = vec![0.0; hw_out * ck2];
            for bi in 0..dims.batch {
                let g_b = &g[bi * dims.c_out * hw_out..][..dims.c_out * hw_out];
                im2col(&xv[bi * dims.c_in * dims.h * dims.w..], &mut cols, &dims, stride);
                // dW += g_b [c_out, hw_out] @ cols [hw_out, ck2]
                matmul_acc(g_b, &cols, &mut dw, dims.c_out, hw_out, ck2);
                // dcols = g_b^T @ W → [hw_out, ck2]
                dcols.iter_mut().for_each(|v| *v = 0.0);
                matmul_ta_acc(g_b, &wv, &mut dcols, dims.c_out, hw_out, ck2);
                col2im(
                    &dcols,
                    &mut dx[bi * dims.c_in * dims.h * dims.w..],
                    &dims,
                    stride,
                );
            }
            add_grad(local, x, &dx);
            add_grad(local, w, &dw);
        }
        Op::AddChannelBias { x, b, batch, channels, hw } => {
            add_grad(local, x, g);
            let mut db = vec![0.0; channels];
            for bi in 0..batch {
                for c in 0..channels {
                    let base = (bi * channels + c) * hw;
                    db[c] += g[base..base + hw].iter().sum::<f64>();
                }
            }
            add_grad(local, b, &db);
        }
        Op::AddRowBroadcast { x, b, rows, cols } => {
            add_grad(local, x, g);
            let mut db = vec![0.0; cols];
            for r in 0..rows {
                for (dbv, &gv) in db.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                    *dbv += gv;
                }
            }
            add_grad(local, b, &db);
        }
        Op::BroadcastRows { b, rows, cols } => {
            let mut db = vec![0.0; cols];
            for r in 0..rows {
                for (dbv, &gv) in db.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                    *dbv += gv;
                }
            }
            add_grad(local, b, &db);
        }
        Op::RowSum { x, rows, cols } => {
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                for v in &mut dx[r * cols..(r + 1) * cols] {
                    *v = g[r];
                }
            }
            add_grad(local, x, &dx);
        }
        Op::Sum(x) => {
            let n = nodes[x].values.len();
            let d = vec![g[0]; n];
            add_grad(local, x, &d);
        }
        Op::Mean(x) => {
            let n = nodes[x].values.len();
            let d = vec![g[0] / n as f64; n];
            add_grad(local, x, &d);
        }
        Op::Softmax { x, rows, cols } => {
            let yv = values(nodes, out_id);
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let y = &yv[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot_gy: f64 = dot(gr, y);
                for j in 0..cols {
                    dx[r * cols + j] = y[j] * (gr[j] - dot_gy);
                }
            }
            add_grad(local, x, &dx);
        }
        Op::LayerNorm { x, gain, bias, rows, cols } => {
            let xv = values(nodes, x);
            let gv = values(nodes, gain);
            let mut dx = vec![0.0; rows * cols];
            let mut dgain = vec![0.0; cols];
            let mut dbias = vec![0.0; cols];
            let n = cols as f64;
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv_std = 1.0 / (var + LAYERNORM_EPS).sqrt();
                // h = dL/dx̂; accumulate affine grads along the way
                let mut h = vec![0.0; cols];
                let mut h_mean = 0.0;
                let mut hx_mean = 0.0;
                for j in 0..cols {
                    let xhat = (row[j] - mean) * inv_std;
                    h[j] = gr[j] * gv[j];
                    h_mean += h[j];
                    hx_mean += h[j] * xhat;
                    dgain[j] += gr[j] * xhat;
                    dbias[j] += gr[j];
                }
                h_mean /= n;
                hx_mean /= n;
                for j in 0..cols {
                    let xhat = (row[j] - mean) * inv_std;
                    dx[r * cols + j] = inv_std * (h[j] - h_mean - xhat * hx_mean);
                }
            }
            add_grad(local, x, &dx);
            add_grad(local, gain, &dgain);
            add_grad(local, bias, &dbias);
        }
        Op::RowL2Normalize { x, rows, cols } => {
            let xv = values(nodes, x);
            let yv = values(nodes, out_id);
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let xr = &xv[r * cols..(r + 1) * cols];
                let yr = &yv[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let norm = dot(xr, xr).sqrt();
                let gy = dot(gr, yr);
                for j in 0..cols {
                    dx[r * cols + j] = (gr[j] - yr[j] * gy) / norm;
                }
            }
            add_grad(local, x, &dx);
        }
        Op::RowLogSumExp { x, rows, cols } => {
            let xv = values(nodes, x);
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                for j in 0..cols {
                    dx[r * cols + j] = g[r] * (row[j] - max).exp() / denom;
                }
            }
            add_grad(local, x, &dx);
        }
        Op::GatherDiag { x, n } => {
            let mut dx = vec![0.0; n * n];
            for i in 0..n {
                dx[i * n + i] = g[i];
            }
            add_grad(local, x, &dx);
        }
        Op::MaskedMean { x, ref mask, count } => {
            let n = mask.len();
            let mut dx = vec![0.0; n];
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    dx[i] = g[0] / count as f64;
                }
            }
            add_grad(local, x, &dx);
        }
        Op::Reshape { x } => add_grad(local, x, g),
        Op::ConcatRows { ref parts, cols } => {
            let mut offset = 0;
            for &p in parts {
                let rows = nodes[p].values.len() / cols;
                let d = g[offset..offset + rows * cols].to_vec();
                add_grad(local, p, &d);
                offset += rows * cols;
            }
        }
        Op::ConcatCols { a, b, rows, a_cols, b_cols } => {
            let mut da = vec![0.0; rows * a_cols];
            let mut db = vec![0.0; rows * b_cols];
            let w = a_cols + b_cols;
            for r in 0..rows {
                da[r * a_cols..(r + 1) * a_cols].copy_from_slice(&g[r * w..r * w + a_cols]);
                db[r * b_cols..(r + 1) * b_cols].copy_from_slice(&g[r * w + a_cols..(r + 1) * w]);
            }
            add_grad(local, a, &da);
            add_grad(local, b, &db);
        }
        Op::SliceRows { x, start, len, total_rows, cols } => {
            let mut dx = vec![0.0; total_rows * cols];
            dx[start * cols..(start + len) * cols].copy_from_slice(&g[..len * cols]);
            add_grad(local, x, &dx);
        }
    }
}

/// Shared backward for elementwise binary ops that may have one scalar
/// operand: `partials(x, y)` returns (∂out/∂x, ∂out/∂y) per element.
fn backward_broadcast_pair(
    nodes: &[Node],
    local: &mut [Option<Vec<f64>>],
    a: NodeId,
    b: NodeId,
    g: &[f64],
    partials: impl Fn(f64, f64) -> (f64, f64),
) {
    let av = values(nodes, a);
    let bv = values(nodes, b);
    let an = av.len();
    let bn = bv.len();
    let n = g.len();
    let mut da = vec![0.0; an];
    let mut db = vec![0.0; bn];
    for i in 0..n {
        let x = av[if an == 1 { 0 } else { i }];
        let y = bv[if bn == 1 { 0 } else { i }];
        let (px, py) = partials(x, y);
        da[if an == 1 { 0 } else { i }] += g[i] * px;
        db[if bn == 1 { 0 } else { i }] += g[i] * py;
    }
    add_grad(local, a, &da);
    add_grad(local, b, &db);
}

// ── kernels ─────────────────────────────────────────────────────────

/// Dot product with four independent accumulators: deterministic order,
/// vectorizes without reassociation.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s2) + (s1 + s3);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

/// out[m,n] += a[m,k] @ b[k,n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T
pub(crate) fn matmul_tb_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            out_row[j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n]
pub(crate) fn matmul_ta_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Unfold one `[C,H,W]` image into `[h_out*w_out, C*kh*kw]` patches.
fn im2col(x: &[f64], cols: &mut [f64], d: &ConvDims, stride: usize) {
    let ck2 = d.c_in * d.kh * d.kw;
    for oh in 0..d.h_out {
        for ow in 0..d.w_out {
            let patch = &mut cols[(oh * d.w_out + ow) * ck2..][..ck2];
            let mut idx = 0;
            for c in 0..d.c_in {
                for i in 0..d.kh {
                    let row_base = c * d.h * d.w + (oh * stride + i) * d.w + ow * stride;
                    patch[idx..idx + d.kw].copy_from_slice(&x[row_base..row_base + d.kw]);
                    idx += d.kw;
                }
            }
        }
    }
}

/// Scatter-add `[h_out*w_out, C*kh*kw]` patch gradients back into `[C,H,W]`.
fn col2im(dcols: &[f64], dx: &mut [f64], d: &ConvDims, stride: usize) {
    let ck2 = d.c_in * d.kh * d.kw;
    for oh in 0..d.h_out {
        for ow in 0..d.w_out {
            let patch = &dcols[(oh * d.w_out + ow) * ck2..][..ck2];
            let mut idx = 0;
            for c in 0..d.c_in {
                for i in 0..d.kh {
                    let row_base = c * d.h * d.w + (oh * stride + i) * d.w + ow * stride;
                    for j in 0..d.kw {
                        dx[row_base + j] += patch[idx + j];
                    }
                    idx += d.kw;
                }
            }
        }
    }
}
