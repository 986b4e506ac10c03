//! Operation tape: forward recording and reverse-mode gradient replay.
//!
//! Each training step builds a fresh tape. Nodes are replayed strictly in
//! reverse creation order with fixed inner loops, so gradient accumulation
//! is bitwise deterministic.

use crate::errors::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Epsilon used by layer normalization.
const LN_EPS: f64 = 1e-5;

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// An operation whose forward and backward rules live outside the tape
/// (used for losses with bespoke gradients, e.g. CTC).
pub trait CustomOp<F: Scalar>: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<F>]) -> Result<Tensor<F>>;
    /// One gradient buffer per input, `None` for inputs without gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_out: &[F],
    ) -> Vec<Option<Vec<F>>>;
}

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    Neg(Var),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Conv1dSame {
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    MaskRows {
        x: Var,
        fill: Var,
        rows: Vec<usize>,
    },
    CosSim(Var, Var),
    SumAll(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<F>>,
    },
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert a leaf value; gradients are produced for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes[v.0].value.scalar_value()
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any was produced.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, zeros when it was unreachable from the loss.
    pub fn grad_or_zero(&self, v: Var) -> Vec<F> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![F::zero(); self.nodes[v.0].value.numel()],
        }
    }

    // ---- elementwise and broadcast arithmetic ----

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    /// Broadcast-add a vector over the rows of a matrix-like tensor.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.value(v).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        let row = self.value(v).data();
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + row[i % d])
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a) || self.requires(v);
        Ok(self.push(Op::AddRow(a, v), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    /// Broadcast-multiply a vector over the rows of a matrix-like tensor.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.value(v).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        let row = self.value(v).data();
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * row[i % d])
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a) || self.requires(v);
        Ok(self.push(Op::MulRow(a, v), value, rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| -x).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a);
        self.push(Op::Neg(a), value, rg)
    }

    // ---- matrix products ----

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = Tensor::new(
            vec![m, n],
            matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n),
        )
        .unwrap();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul(a, b), value, rg))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![F::zero(); m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..m {
            for j in 0..n {
                let mut acc = F::zero();
                for l in 0..k {
                    acc = acc + da[i * k + l] * db[j * k + l];
                }
                out[i * n + j] = acc;
            }
        }
        let value = Tensor::new(vec![m, n], out).unwrap();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatmulNT(a, b), value, rg))
    }

    // ---- elementwise nonlinearities ----

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a);
        self.push(Op::Gelu(a), value, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| x.tanh()).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a);
        self.push(Op::Tanh(a), value, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| x.exp()).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a);
        self.push(Op::Exp(a), value, rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| x.ln()).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a);
        self.push(Op::Ln(a), value, rg)
    }

    // ---- row-wise reductions over the last axis ----

    pub fn softmax(&mut self, a: Var) -> Var {
        let last = self.value(a).last_dim().max(1);
        let mut data = vec![F::zero(); self.value(a).numel()];
        softmax_rows(self.value(a).data(), last, &mut data);
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a);
        self.push(Op::Softmax(a), value, rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let last = self.value(a).last_dim().max(1);
        let src = self.value(a).data();
        let mut data = vec![F::zero(); src.len()];
        for r in 0..src.len() / last {
            let row = &src[r * last..(r + 1) * last];
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for &x in row {
                sum = sum + (x - m).exp();
            }
            let lse = m + sum.ln();
            for (j, &x) in row.iter().enumerate() {
                data[r * last + j] = x - lse;
            }
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a);
        self.push(Op::LogSoftmax(a), value, rg)
    }

    /// Zero-mean unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let last = self.value(a).last_dim().max(1);
        let src = self.value(a).data();
        let mut data = vec![F::zero(); src.len()];
        let eps = F::cst(LN_EPS);
        let inv_n = F::one() / F::cst(last as f64);
        for r in 0..src.len() / last {
            let row = &src[r * last..(r + 1) * last];
            let mut mean = F::zero();
            for &x in row {
                mean = mean + x;
            }
            mean = mean * inv_n;
            let mut var = F::zero();
            for &x in row {
                var = var + (x - mean) * (x - mean);
            }
            var = var * inv_n;
            let inv_std = F::one() / (var + eps).sqrt();
            for (j, &x) in row.iter().enumerate() {
                data[r * last + j] = (x - mean) * inv_std;
            }
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.requires(a);
        self.push(Op::LayerNorm(a), value, rg)
    }

    // ---- convolutions (time-major: x is [t, channels]) ----

    /// Strided 1-D convolution without padding.
    /// `x: [t_in, c_in]`, `w: [c_out, c_in, k]`, `b: [c_out]` -> `[t_out, c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 2 || sw.len() != 3 || sx[1] != sw[1] || sx[0] < sw[2] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (t_in, c_in) = (sx[0], sx[1]);
        let (c_out, k) = (sw[0], sw[2]);
        let t_out = (t_in - k) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|v| self.value(v).data().to_vec());
        // repack weights as [k][c_in][c_out] so the innermost loop runs over
        // contiguous output channels
        let wk = repack_conv_weights(wd, c_out, c_in, k);
        let mut out = vec![F::zero(); t_out * c_out];
        match &bd {
            Some(bv) => {
                for t in 0..t_out {
                    out[t * c_out..(t + 1) * c_out].copy_from_slice(bv);
                }
            }
            None => {}
        }
        for t in 0..t_out {
            let base = t * stride;
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            for kk in 0..k {
                let xrow = &xd[(base + kk) * c_in..(base + kk + 1) * c_in];
                let wplane = &wk[kk * c_in * c_out..(kk + 1) * c_in * c_out];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv.is_zero() {
                        continue;
                    }
                    let wrow = &wplane[ci * c_out..(ci + 1) * c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o = *o + xv * wv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![t_out, c_out], out).unwrap();
        let rg =
            self.requires(x) || self.requires(w) || b.map(|v| self.requires(v)).unwrap_or(false);
        Ok(self.push(Op::Conv1d { x, w, b, stride }, value, rg))
    }

    /// Grouped 1-D convolution with same-length zero padding, stride 1.
    /// `x: [t, c]`, `w: [c_out, c/groups, k]`, `b: [c_out]` -> `[t, c_out]`.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 2
            || sw.len() != 3
            || groups == 0
            || sx[1] % groups != 0
            || sw[0] % groups != 0
            || sw[1] != sx[1] / groups
        {
            return Err(Error::ShapeMismatch {
                op: "conv1d_same",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (t_len, c_in) = (sx[0], sx[1]);
        let (c_out, cg_in, k) = (sw[0], sw[1], sw[2]);
        let cg_out = c_out / groups;
        let pad_left = k / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|v| self.value(v).data().to_vec());
        let mut out = vec![F::zero(); t_len * c_out];
        for t in 0..t_len {
            for oc in 0..c_out {
                let g = oc / cg_out;
                let mut acc = bd.as_ref().map_or(F::zero(), |bv| bv[oc]);
                for cl in 0..cg_in {
                    let ci = g * cg_in + cl;
                    let wbase = oc * cg_in * k + cl * k;
                    for kk in 0..k {
                        let ti = t as isize + kk as isize - pad_left as isize;
                        if ti >= 0 && (ti as usize) < t_len {
                            acc = acc + xd[ti as usize * c_in + ci] * wd[wbase + kk];
                        }
                    }
                }
                out[t * c_out + oc] = acc;
            }
        }
        let value = Tensor::new(vec![t_len, c_out], out).unwrap();
        let rg =
            self.requires(x) || self.requires(w) || b.map(|v| self.requires(v)).unwrap_or(false);
        Ok(self.push(Op::Conv1dSame { x, w, b, groups }, value, rg))
    }

    // ---- indexing ----

    /// Gather flat indices into a tensor of the given shape.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::MaskOutOfRange { index: bad, len: n });
        }
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: shape,
                rhs: vec![idx.len()],
            });
        }
        let xd = self.value(x).data();
        let data: Vec<F> = idx.iter().map(|&i| xd[i]).collect();
        let value = Tensor::new(shape, data).unwrap();
        let rg = self.requires(x);
        Ok(self.push(Op::Gather { x, idx }, value, rg))
    }

    /// Select rows of a `[t, d]` tensor.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let t = self.value(x).rows();
        let d = self.value(x).last_dim();
        if let Some(&bad) = rows.iter().find(|&&r| r >= t) {
            return Err(Error::MaskOutOfRange { index: bad, len: t });
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            data.extend_from_slice(&xd[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], data).unwrap();
        let rg = self.requires(x);
        Ok(self.push(Op::GatherRows { x, rows }, value, rg))
    }

    /// Columns `[start, start+len)` of a `[t, d]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).rows();
        let d = self.value(x).last_dim();
        if start + len > d {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![t, d],
                rhs: vec![start, len],
            });
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(t * len);
        for r in 0..t {
            data.extend_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let value = Tensor::new(vec![t, len], data).unwrap();
        let rg = self.requires(x);
        Ok(self.push(Op::SliceCols { x, start, len }, value, rg))
    }

    /// Concatenate `[t, d_i]` tensors along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols".into()));
        }
        let t = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != t || self.value(p).shape().len() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let dims: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let d_total: usize = dims.iter().sum();
        let mut data = Vec::with_capacity(t * d_total);
        for r in 0..t {
            for (&p, &d) in parts.iter().zip(&dims) {
                let pd = self.value(p).data();
                data.extend_from_slice(&pd[r * d..(r + 1) * d]);
            }
        }
        let value = Tensor::new(vec![t, d_total], data).unwrap();
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, rg))
    }

    /// Replace the given rows of `x` with the broadcast `fill` vector.
    pub fn mask_rows(&mut self, x: Var, rows: &[usize], fill: Var) -> Result<Var> {
        let t = self.value(x).rows();
        let d = self.value(x).last_dim();
        if self.value(fill).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "mask_rows",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(fill).shape().to_vec(),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= t) {
            return Err(Error::MaskOutOfRange { index: bad, len: t });
        }
        let mut data = self.value(x).data().to_vec();
        let fd = self.value(fill).data().to_vec();
        for &r in rows {
            data[r * d..(r + 1) * d].copy_from_slice(&fd);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        let rg = self.requires(x) || self.requires(fill);
        Ok(self.push(
            Op::MaskRows {
                x,
                fill,
                rows: rows.to_vec(),
            },
            value,
            rg,
        ))
    }

    // ---- similarity and reductions ----

    /// Pairwise cosine similarity over the last axis:
    /// `a: [n, d]`, `b: [m, d]` -> `[n, m]`. Errors on zero-norm rows.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "cosine_sim",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, d, m) = (sa[0], sa[1], sb[0]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let na = row_norms(da, n, d);
        let nb = row_norms(db, m, d);
        if na.iter().any(|x| x.is_zero()) {
            return Err(Error::ZeroNorm {
                what: "projected vector".into(),
            });
        }
        if nb.iter().any(|x| x.is_zero()) {
            return Err(Error::ZeroNorm {
                what: "codeword embedding".into(),
            });
        }
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                let mut dot = F::zero();
                for l in 0..d {
                    dot = dot + da[i * d + l] * db[j * d + l];
                }
                out[i * m + j] = dot / (na[i] * nb[j]);
            }
        }
        let value = Tensor::new(vec![n, m], out).unwrap();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::CosSim(a, b), value, rg))
    }

    /// Sum of all elements, producing a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = F::zero();
        for &x in self.value(a).data() {
            acc = acc + x;
        }
        let rg = self.requires(a);
        self.push(Op::SumAll(a), Tensor::scalar(acc), rg)
    }

    /// Record a custom operation.
    pub fn custom(&mut self, op: Box<dyn CustomOp<F>>, inputs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = op.forward(&tensors)?;
        let rg = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            value,
            rg,
        ))
    }

    // ---- reverse pass ----

    /// Populate gradients of every reachable `requires_grad` node w.r.t. a
    /// scalar loss. Accumulation order is fixed by node creation order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }
}

fn grad_buf<'g, F: Scalar>(
    nodes: &[Node<F>],
    grads: &'g mut [Option<Vec<F>>],
    v: Var,
) -> &'g mut Vec<F> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
}

#[allow(clippy::needless_range_loop)]
fn propagate<F: Scalar>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], i: usize, g: &[F]) {
    let requires = |v: Var| nodes[v.0].requires_grad;
    {
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if requires(a) {
                    add_into(grad_buf(nodes, grads, a), g);
                }
                if requires(b) {
                    add_into(grad_buf(nodes, grads, b), g);
                }
            }
            Op::AddRow(a, v) => {
                let (a, v) = (*a, *v);
                if requires(a) {
                    add_into(grad_buf(nodes, grads, a), g);
                }
                if requires(v) {
                    let d = nodes[v.0].value.numel();
                    let gb = grad_buf(nodes, grads, v);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % d] = gb[i % d] + gi;
                    }
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if requires(a) {
                    add_into(grad_buf(nodes, grads, a), g);
                }
                if requires(b) {
                    let gb = grad_buf(nodes, grads, b);
                    for (x, &gi) in gb.iter_mut().zip(g) {
                        *x = *x - gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if requires(a) {
                    let bv = nodes[b.0].value.data();
                    let ga = grad_buf(nodes, grads, a);
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i] = ga[i] + gi * bv[i];
                    }
                }
                if requires(b) {
                    let av = nodes[a.0].value.data();
                    let gb = grad_buf(nodes, grads, b);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i] = gb[i] + gi * av[i];
                    }
                }
            }
            Op::MulRow(a, v) => {
                let (a, v) = (*a, *v);
                let d = nodes[v.0].value.numel();
                if requires(a) {
                    let vv = nodes[v.0].value.data();
                    let ga = grad_buf(nodes, grads, a);
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i] = ga[i] + gi * vv[i % d];
                    }
                }
                if requires(v) {
                    let av = nodes[a.0].value.data();
                    let gv = grad_buf(nodes, grads, v);
                    for (i, &gi) in g.iter().enumerate() {
                        gv[i % d] = gv[i % d] + gi * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if requires(a) {
                    let ga = grad_buf(nodes, grads, a);
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x = *x + gi * c;
                    }
                }
            }
            Op::Neg(a) => {
                let a = *a;
                if requires(a) {
                    let ga = grad_buf(nodes, grads, a);
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x = *x - gi;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let m = nodes[a.0].value.shape()[0];
                let k = nodes[a.0].value.shape()[1];
                let n = nodes[b.0].value.shape()[1];
                if requires(a) {
                    // dA += G B^T
                    let bv = nodes[b.0].value.data();
                    let ga = grad_buf(nodes, grads, a);
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = F::zero();
                            for j in 0..n {
                                acc = acc + g[i * n + j] * bv[l * n + j];
                            }
                            ga[i * k + l] = ga[i * k + l] + acc;
                        }
                    }
                }
                if requires(b) {
                    // dB += A^T G
                    let av = nodes[a.0].value.data();
                    let gb = grad_buf(nodes, grads, b);
                    for i in 0..m {
                        for l in 0..k {
                            let a_il = av[i * k + l];
                            for j in 0..n {
                                gb[l * n + j] = gb[l * n + j] + a_il * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::MatmulNT(a, b) => {
                let (a, b) = (*a, *b);
                let m = nodes[a.0].value.shape()[0];
                let k = nodes[a.0].value.shape()[1];
                let n = nodes[b.0].value.shape()[0];
                if requires(a) {
                    // dA += G B
                    let bv = nodes[b.0].value.data();
                    let ga = grad_buf(nodes, grads, a);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for l in 0..k {
                                ga[i * k + l] = ga[i * k + l] + gij * bv[j * k + l];
                            }
                        }
                    }
                }
                if requires(b) {
                    // dB += G^T A
                    let av = nodes[a.0].value.data();
                    let gb = grad_buf(nodes, grads, b);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for l in 0..k {
                                gb[j * k + l] = gb[j * k + l] + gij * av[i * k + l];
                            }
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let a = *a;
                if requires(a) {
                    let av = nodes[a.0].value.data();
                    let ga = grad_buf(nodes, grads, a);
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i] = ga[i] + gi * gelu_deriv(av[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                let a = *a;
                if requires(a) {
                    let yv = nodes[i].value.data();
                    let ga = grad_buf(nodes, grads, a);
                    for (j, &gj) in g.iter().enumerate() {
                        ga[j] = ga[j] + gj * (F::one() - yv[j] * yv[j]);
                    }
                }
            }
            Op::Exp(a) => {
                let a = *a;
                if requires(a) {
                    let yv = nodes[i].value.data();
                    let ga = grad_buf(nodes, grads, a);
                    for (j, &gj) in g.iter().enumerate() {
                        ga[j] = ga[j] + gj * yv[j];
                    }
                }
            }
            Op::Ln(a) => {
                let a = *a;
                if requires(a) {
                    let av = nodes[a.0].value.data();
                    let ga = grad_buf(nodes, grads, a);
                    for (j, &gj) in g.iter().enumerate() {
                        ga[j] = ga[j] + gj / av[j];
                    }
                }
            }
            Op::Softmax(a) => {
                let a = *a;
                if requires(a) {
                    let yv = nodes[i].value.data();
                    let last = nodes[i].value.last_dim().max(1);
                    let ga = grad_buf(nodes, grads, a);
                    for r in 0..yv.len() / last {
                        let y = &yv[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let mut dot = F::zero();
                        for j in 0..last {
                            dot = dot + gr[j] * y[j];
                        }
                        for j in 0..last {
                            ga[r * last + j] = ga[r * last + j] + y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let a = *a;
                if requires(a) {
                    let yv = nodes[i].value.data();
                    let last = nodes[i].value.last_dim().max(1);
                    let ga = grad_buf(nodes, grads, a);
                    for r in 0..yv.len() / last {
                        let y = &yv[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let mut gsum = F::zero();
                        for j in 0..last {
                            gsum = gsum + gr[j];
                        }
                        for j in 0..last {
                            ga[r * last + j] = ga[r * last + j] + gr[j] - y[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm(a) => {
                let a = *a;
                if requires(a) {
                    let xv = nodes[a.0].value.data();
                    let yv = nodes[i].value.data();
                    let last = nodes[i].value.last_dim().max(1);
                    let eps = F::cst(LN_EPS);
                    let inv_n = F::one() / F::cst(last as f64);
                    let ga = grad_buf(nodes, grads, a);
                    for r in 0..yv.len() / last {
                        let x = &xv[r * last..(r + 1) * last];
                        let y = &yv[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let mut mean = F::zero();
                        for &xi in x {
                            mean = mean + xi;
                        }
                        mean = mean * inv_n;
                        let mut var = F::zero();
                        for &xi in x {
                            var = var + (xi - mean) * (xi - mean);
                        }
                        var = var * inv_n;
                        let inv_std = F::one() / (var + eps).sqrt();
                        let mut g_mean = F::zero();
                        let mut gy_mean = F::zero();
                        for j in 0..last {
                            g_mean = g_mean + gr[j];
                            gy_mean = gy_mean + gr[j] * y[j];
                        }
                        g_mean = g_mean * inv_n;
                        gy_mean = gy_mean * inv_n;
                        for j in 0..last {
                            let d = (gr[j] - g_mean - y[j] * gy_mean) * inv_std;
                            ga[r * last + j] = ga[r * last + j] + d;
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, stride } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                let sw = nodes[w.0].value.shape();
                let (c_out, c_in, k) = (sw[0], sw[1], sw[2]);
                let t_out = nodes[i].value.shape()[0];
                if requires(x) {
                    // dx[b+kk][ci] += sum_oc g[t][oc] * w[oc][ci][kk]
                    let wk = repack_conv_weights(nodes[w.0].value.data(), c_out, c_in, k);
                    let gx = grad_buf(nodes, grads, x);
                    for t in 0..t_out {
                        let base = t * stride;
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for kk in 0..k {
                            let wplane = &wk[kk * c_in * c_out..(kk + 1) * c_in * c_out];
                            let xrow = &mut gx[(base + kk) * c_in..(base + kk + 1) * c_in];
                            for (ci, gv) in xrow.iter_mut().enumerate() {
                                let wrow = &wplane[ci * c_out..(ci + 1) * c_out];
                                let mut acc = F::zero();
                                for (&gi, &wv) in grow.iter().zip(wrow) {
                                    acc = acc + gi * wv;
                                }
                                *gv = *gv + acc;
                            }
                        }
                    }
                }
                if requires(w) {
                    // accumulate in the repacked [k][c_in][c_out] layout,
                    // then scatter back to [c_out][c_in][k]
                    let xd = nodes[x.0].value.data();
                    let mut acc = vec![F::zero(); k * c_in * c_out];
                    for t in 0..t_out {
                        let base = t * stride;
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for kk in 0..k {
                            let xrow = &xd[(base + kk) * c_in..(base + kk + 1) * c_in];
                            let plane = &mut acc[kk * c_in * c_out..(kk + 1) * c_in * c_out];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                if xv.is_zero() {
                                    continue;
                                }
                                let arow = &mut plane[ci * c_out..(ci + 1) * c_out];
                                for (a, &gi) in arow.iter_mut().zip(grow) {
                                    *a = *a + xv * gi;
                                }
                            }
                        }
                    }
                    let gw = grad_buf(nodes, grads, w);
                    for oc in 0..c_out {
                        for ci in 0..c_in {
                            for kk in 0..k {
                                let idx = oc * c_in * k + ci * k + kk;
                                gw[idx] = gw[idx] + acc[kk * c_in * c_out + ci * c_out + oc];
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if requires(b) {
                        let gb = grad_buf(nodes, grads, b);
                        for t in 0..t_out {
                            for oc in 0..c_out {
                                gb[oc] = gb[oc] + g[t * c_out + oc];
                            }
                        }
                    }
                }
            }
            Op::Conv1dSame { x, w, b, groups } => {
                let (x, w, b, groups) = (*x, *w, *b, *groups);
                let sx = nodes[x.0].value.shape();
                let sw = nodes[w.0].value.shape();
                let (t_len, c_in) = (sx[0], sx[1]);
                let (c_out, cg_in, k) = (sw[0], sw[1], sw[2]);
                let cg_out = c_out / groups;
                let pad_left = (k / 2) as isize;
                if requires(x) {
                    let wd = nodes[w.0].value.data();
                    let gx = grad_buf(nodes, grads, x);
                    for t in 0..t_len {
                        for oc in 0..c_out {
                            let gto = g[t * c_out + oc];
                            let grp = oc / cg_out;
                            for cl in 0..cg_in {
                                let ci = grp * cg_in + cl;
                                let wbase = oc * cg_in * k + cl * k;
                                for kk in 0..k {
                                    let ti = t as isize + kk as isize - pad_left;
                                    if ti >= 0 && (ti as usize) < t_len {
                                        let xi = ti as usize * c_in + ci;
                                        gx[xi] = gx[xi] + gto * wd[wbase + kk];
                                    }
                                }
                            }
                        }
                    }
                }
                if requires(w) {
                    let xd = nodes[x.0].value.data();
                    let gw = grad_buf(nodes, grads, w);
                    for t in 0..t_len {
                        for oc in 0..c_out {
                            let gto = g[t * c_out + oc];
                            let grp = oc / cg_out;
                            for cl in 0..cg_in {
                                let ci = grp * cg_in + cl;
                                let wbase = oc * cg_in * k + cl * k;
                                for kk in 0..k {
                                    let ti = t as isize + kk as isize - pad_left;
                                    if ti >= 0 && (ti as usize) < t_len {
                                        gw[wbase + kk] =
                                            gw[wbase + kk] + gto * xd[ti as usize * c_in + ci];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if requires(b) {
                        let gb = grad_buf(nodes, grads, b);
                        for t in 0..t_len {
                            for oc in 0..c_out {
                                gb[oc] = gb[oc] + g[t * c_out + oc];
                            }
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let x = *x;
                if requires(x) {
                    let gx = grad_buf(nodes, grads, x);
                    for (j, &src) in idx.iter().enumerate() {
                        gx[src] = gx[src] + g[j];
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let x = *x;
                if requires(x) {
                    let d = nodes[x.0].value.last_dim();
                    let gx = grad_buf(nodes, grads, x);
                    for (j, &r) in rows.iter().enumerate() {
                        for l in 0..d {
                            gx[r * d + l] = gx[r * d + l] + g[j * d + l];
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                if requires(x) {
                    let d = nodes[x.0].value.last_dim();
                    let t = nodes[x.0].value.rows();
                    let gx = grad_buf(nodes, grads, x);
                    for r in 0..t {
                        for l in 0..len {
                            gx[r * d + start + l] = gx[r * d + start + l] + g[r * len + l];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let dims: Vec<usize> = parts
                    .iter()
                    .map(|&p| nodes[p.0].value.last_dim())
                    .collect();
                let d_total: usize = dims.iter().sum();
                let t = nodes[i].value.rows();
                let mut offset = 0;
                for (&p, &d) in parts.iter().zip(&dims) {
                    if requires(p) {
                        let gp = grad_buf(nodes, grads, p);
                        for r in 0..t {
                            for l in 0..d {
                                gp[r * d + l] = gp[r * d + l] + g[r * d_total + offset + l];
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::MaskRows { x, fill, rows } => {
                let (x, fill) = (*x, *fill);
                let d = nodes[fill.0].value.numel();
                let t = nodes[x.0].value.rows();
                if requires(x) {
                    let mut masked = vec![false; t];
                    for &r in &rows {
                        masked[r] = true;
                    }
                    let gx = grad_buf(nodes, grads, x);
                    for r in 0..t {
                        if !masked[r] {
                            for l in 0..d {
                                gx[r * d + l] = gx[r * d + l] + g[r * d + l];
                            }
                        }
                    }
                }
                if requires(fill) {
                    // A row masked several times still consumes one gradient share
                    // per listed index; MaskSpec de-duplicates beforehand.
                    let gf = grad_buf(nodes, grads, fill);
                    for &r in &rows {
                        for l in 0..d {
                            gf[l] = gf[l] + g[r * d + l];
                        }
                    }
                }
            }
            Op::CosSim(a, b) => {
                let (a, b) = (*a, *b);
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (n, d, m) = (sa[0], sa[1], sb[0]);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let yv = nodes[i].value.data();
                let na = row_norms(&av, n, d);
                let nb = row_norms(&bv, m, d);
                if requires(a) {
                    let ga = grad_buf(nodes, grads, a);
                    for r in 0..n {
                        for j in 0..m {
                            let gij = g[r * m + j];
                            if gij.is_zero() {
                                continue;
                            }
                            let y = yv[r * m + j];
                            let inv = F::one() / (na[r] * nb[j]);
                            let inv_a2 = F::one() / (na[r] * na[r]);
                            for l in 0..d {
                                let da = bv[j * d + l] * inv - av[r * d + l] * y * inv_a2;
                                ga[r * d + l] = ga[r * d + l] + gij * da;
                            }
                        }
                    }
                }
                if requires(b) {
                    let gb = grad_buf(nodes, grads, b);
                    for r in 0..n {
                        for j in 0..m {
                            let gij = g[r * m + j];
                            if gij.is_zero() {
                                continue;
                            }
                            let y = yv[r * m + j];
                            let inv = F::one() / (na[r] * nb[j]);
                            let inv_b2 = F::one() / (nb[j] * nb[j]);
                            for l in 0..d {
                                let db = av[r * d + l] * inv - bv[j * d + l] * y * inv_b2;
                                gb[j * d + l] = gb[j * d + l] + gij * db;
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let a = *a;
                if requires(a) {
                    let g0 = g[0];
                    let ga = grad_buf(nodes, grads, a);
                    for x in ga.iter_mut() {
                        *x = *x + g0;
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let tensors: Vec<&Tensor<F>> = inputs.iter().map(|&v| &nodes[v.0].value).collect();
                let contributions = op.backward(&tensors, &nodes[i].value, g);
                drop(tensors);
                for (&v, contrib) in inputs.iter().zip(contributions) {
                    if let Some(c) = contrib {
                        if requires(v) {
                            add_into(grad_buf(nodes, grads, v), &c);
                        }
                    }
                }
            }
        }
    }
}

// ---- shared kernels ----

fn zip_map<F: Scalar>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// `[c_out][c_in][k]` weights rearranged as `[k][c_in][c_out]` so output
/// channels are contiguous in the conv inner loops.
fn repack_conv_weights<F: Scalar>(wd: &[F], c_out: usize, c_in: usize, k: usize) -> Vec<F> {
    let mut wk = vec![F::zero(); k * c_in * c_out];
    for oc in 0..c_out {
        for ci in 0..c_in {
            for kk in 0..k {
                wk[kk * c_in * c_out + ci * c_out + oc] = wd[oc * c_in * k + ci * k + kk];
            }
        }
    }
    wk
}

fn row_norms<F: Scalar>(data: &[F], rows: usize, d: usize) -> Vec<F> {
    (0..rows)
        .map(|r| {
            let mut acc = F::zero();
            for l in 0..d {
                let x = data[r * d + l];
                acc = acc + x * x;
            }
            acc.sqrt()
        })
        .collect()
}

pub(crate) fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il.is_zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + a_il * brow[j];
            }
        }
    }
    out
}

/// Row-wise softmax with max subtraction over the last axis.
pub(crate) fn softmax_rows<F: Scalar>(src: &[F], last: usize, out: &mut [F]) {
    for r in 0..src.len() / last {
        let row = &src[r * last..(r + 1) * last];
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (j, &x) in row.iter().enumerate() {
            let e = (x - m).exp();
            out[r * last + j] = e;
            sum = sum + e;
        }
        for j in 0..last {
            out[r * last + j] = out[r * last + j] / sum;
        }
    }
}

fn gelu<F: Scalar>(x: F) -> F {
    let half = F::cst(0.5);
    let c = F::cst(GELU_SQRT_2_OVER_PI);
    let k = F::cst(GELU_CUBIC);
    let u = c * (x + k * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_deriv<F: Scalar>(x: F) -> F {
    let half = F::cst(0.5);
    let c = F::cst(GELU_SQRT_2_OVER_PI);
    let k = F::cst(GELU_CUBIC);
    let three = F::cst(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_scalar_product() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![1, 1], vec![2.0]));
        let b = tape.constant(t(vec![1, 1], vec![3.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[6.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2], vec![0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![3], vec![1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x);
        let out = tape.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12, "mean {mean}");
        let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_sum_softmax_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![4], vec![0.3, -1.2, 2.0, 0.5]), true);
        let s = tape.softmax(x);
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        for &g in tape.grad(x).unwrap() {
            assert!(g.abs() < 1e-14, "grad {g}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        let y = tape.exp(x);
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn shape_error_names_operation() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![2, 3], vec![0.0; 6]));
        let b = tape.constant(t(vec![2, 3], vec![0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn unreachable_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let orphan = tape.leaf(Tensor::scalar(5.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(orphan), None);
        assert_eq!(tape.grad_or_zero(orphan), vec![0.0]);
    }

    #[test]
    fn gather_scatter_round_trip_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![4], vec![1.0, 2.0, 3.0, 4.0]), true);
        // duplicate index accumulates
        let y = tape.gather(x, vec![1, 1, 3], vec![3]).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn conv1d_lengths() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![10, 1], vec![1.0; 10]));
        let w = tape.constant(t(vec![2, 1, 3], vec![0.5; 6]));
        let y = tape.conv1d(x, w, None, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 2]);
    }

    #[test]
    fn mask_rows_replaces_and_routes_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let fill = tape.leaf(t(vec![2], vec![9.0, 9.0]), true);
        let y = tape.mask_rows(x, &[1], fill).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 9.0, 9.0, 5.0, 6.0]);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(tape.grad(fill).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn mask_rows_empty_mask_means_unused_fill() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let fill = tape.leaf(t(vec![2], vec![9.0, 9.0]), true);
        let y = tape.mask_rows(x, &[], fill).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(fill).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_sim_zero_norm_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![1, 2], vec![0.0, 0.0]));
        let b = tape.constant(t(vec![1, 2], vec![1.0, 0.0]));
        assert!(matches!(
            tape.cosine_sim(a, b),
            Err(Error::ZeroNorm { .. })
        ));
    }
}
