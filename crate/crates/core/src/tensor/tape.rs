use super::linalg::{gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// `a[m,k] · b[n,k]ᵀ`
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    AddRow { a: Var, bias: Var },
    MulRow { a: Var, v: Var },
    ScaleRows { a: Var, factors: Vec<f64> },
    Relu { a: Var },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum { a: Var },
    MeanRows { a: Var },
    Reshape { a: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    GatherRows { a: Var, indices: Vec<usize> },
    PoolTokens { a: Var, w: usize, stride: usize },
    L2NormalizeRows { a: Var, norms: Vec<f64> },
    SoftCrossEntropy { logits: Var, target: Vec<f64>, probs: Vec<f64>, active: Vec<bool> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Sum { .. } => "sum",
            Op::MeanRows { .. } => "mean_rows",
            Op::Reshape { .. } => "reshape",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::PoolTokens { .. } => "pool_tokens",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
///
/// Nodes are only ever pushed, so every node's parents precede it and a
/// single reverse sweep visits each node exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn is_scalar_shape(t: &Tensor) -> bool {
    t.numel() == 1
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// First node whose value contains NaN or ±inf, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| n.value.data().iter().any(|x| !x.is_finite()))
            .map(|i| (i, self.nodes[i].op.name()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a[m,k] · b[n,k]ᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Transposed,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt { a, b, m, k, n }, rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        } else if is_scalar_shape(tb) {
            let y = tb.item();
            Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x, y)).collect())?
        } else if is_scalar_shape(ta) {
            let x = ta.item();
            Tensor::new(tb.shape(), tb.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        };
        Ok((value, self.rg(&[a, b])))
    }

    /// Elementwise sum; shapes must match or one side must be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }, rg))
    }

    /// Multiply by a fixed constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let v = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x * s).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale { a, s }, rg)
    }

    /// `a[r,c] + bias[c]` on every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.numel() != c || ta.shape().is_empty() {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let v = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(v, Op::AddRow { a, bias }, rg))
    }

    /// `a[r,c] ⊙ v[c]` on every row.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(v));
        let c = ta.cols();
        if tv.numel() != c || ta.shape().is_empty() {
            return Err(Error::shape("mul_row", ta.shape(), tv.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, s) in row.iter_mut().zip(tv.data()) {
                *x *= s;
            }
        }
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, v]);
        Ok(self.push(out, Op::MulRow { a, v }, rg))
    }

    /// Scale row `r` of `a` by the constant `factors[r]`. No gradient flows
    /// into the factors.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = dims2(ta);
        if factors.len() != r || ta.shape().len() != 2 {
            return Err(Error::shape("scale_rows", ta.shape(), &[factors.len()]));
        }
        let mut data = ta.data().to_vec();
        for (row, f) in data.chunks_mut(c).zip(&factors) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::ScaleRows { a, factors }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu { a }, rg)
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| gelu_parts(x).0).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| sigmoid(x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid { a }, rg)
    }

    /// Softmax over the last axis, stabilized by per-slice max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let v = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax { a }, rg)
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != c || b.numel() != c {
            return Err(Error::shape("layer_norm", t.shape(), g.shape()));
        }
        let rows = t.numel() / c;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Batch normalization of `x[B,c]` with batch statistics (biased
    /// variance). Returns the output and the per-feature batch mean and
    /// biased variance so callers can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let t = self.value(x);
        let (rows, c) = dims2(t);
        let (g, b) = (self.value(gain), self.value(bias));
        if t.shape().len() != 2 || g.numel() != c || b.numel() != c || rows == 0 {
            return Err(Error::shape("batch_norm", t.shape(), g.shape()));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in t.data().chunks(c) {
            for j in 0..c {
                mean[j] += row[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for row in t.data().chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; t.numel()];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            for j in 0..c {
                let xh = (t.data()[r * c + j] - mean[j]) * rstd[j];
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        let var_out = self.push(v, Op::BatchNorm { x, gain, bias, xhat, rstd }, rg);
        Ok((var_out, mean, var))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Column means of `a[r,c]`, giving `[c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = dims2(t);
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::vector(out), Op::MeanRows { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape { a }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims2(t);
        if t.shape().len() != 2 || start + len > r {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{} out of {r} rows",
                start + len
            )));
        }
        let v = Tensor::new(&[len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SliceRows { a, start }, rg))
    }

    /// Row `r` of a matrix as a vector `[c]`.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let s = self.slice_rows(a, r, 1)?;
        let c = self.value(s).cols();
        self.reshape(s, &[c])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims2(t);
        if t.shape().len() != 2 || start + len > c {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in t.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::new(&[r, len], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SliceCols { a, start }, rg))
    }

    /// Stack parts along rows. A 1-D part `[c]` counts as one row.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(p) => self.value(*p).cols(),
            None => return Err(Error::Contract("concat_rows of nothing".into())),
        };
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c || t.shape().len() > 2 {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / c;
        let v = Tensor::new(&[rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Join parts side by side. All parts must share a row count; if every
    /// part is 1-D the result is 1-D.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(p) => self.value(*p),
            None => return Err(Error::Contract("concat_cols of nothing".into())),
        };
        let rows = first.rows();
        let all_vectors = parts.iter().all(|p| self.value(*p).shape().len() == 1);
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows || t.shape().len() > 2 {
                return Err(Error::shape("concat_cols", first.shape(), t.shape()));
            }
            total += t.cols();
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            let c = t.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let shape = if all_vectors {
            vec![total]
        } else {
            vec![rows, total]
        };
        let v = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    /// Copy rows `indices` of `a[r,c]` in order. Indices must be distinct
    /// and in range.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims2(t);
        let mut seen = vec![false; r];
        for &i in indices {
            if i >= r {
                return Err(Error::Contract(format!("gather index {i} out of range 0..{r}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("gather index {i} repeated")));
            }
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(&[indices.len(), c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::GatherRows { a, indices: indices.to_vec() }, rg))
    }

    /// Average-pool the patch rows of a token matrix `[(h·w+1), c]` on their
    /// `h×w` grid with a `stride×stride` window; row 0 (cls) passes through.
    pub fn pool_tokens(&mut self, a: Var, h: usize, w: usize, stride: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims2(t);
        if r != h * w + 1 {
            return Err(Error::Dimension(format!(
                "pool_tokens: {r} rows do not match a {h}x{w} grid plus cls"
            )));
        }
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Dimension(format!(
                "pool_tokens: grid {h}x{w} not divisible by stride {stride}"
            )));
        }
        if stride == 1 {
            let v = t.clone();
            let rg = self.rg(&[a]);
            return Ok(self.push(v, Op::PoolTokens { a, w, stride }, rg));
        }
        let (ho, wo) = (h / stride, w / stride);
        let inv = 1.0 / (stride * stride) as f64;
        let mut data = vec![0.0; (ho * wo + 1) * c];
        data[..c].copy_from_slice(t.row(0));
        for i in 0..ho {
            for j in 0..wo {
                let out = &mut data[(1 + i * wo + j) * c..(2 + i * wo + j) * c];
                for di in 0..stride {
                    for dj in 0..stride {
                        let src = t.row(1 + (i * stride + di) * w + j * stride + dj);
                        for (o, x) in out.iter_mut().zip(src) {
                            *o += x * inv;
                        }
                    }
                }
            }
        }
        let v = Tensor::new(&[ho * wo + 1, c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::PoolTokens { a, w, stride }, rg))
    }

    /// Divide each row by its Euclidean norm. Zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut data = t.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Contract(format!("row {i} has zero norm")));
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let v = Tensor::new(t.shape(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::L2NormalizeRows { a, norms }, rg))
    }

    /// `-Σ_t target[t] · log softmax(logits)[t]` for a single logit vector.
    /// Log-probabilities are clamped below at `ln(1e-12)`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != target.len() {
            return Err(Error::shape("soft_cross_entropy", t.shape(), &[target.len()]));
        }
        let z = t.data();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let floor = 1e-12f64.ln();
        let mut loss = 0.0;
        let mut active = Vec::with_capacity(z.len());
        let mut probs = Vec::with_capacity(z.len());
        for (zi, ti) in z.iter().zip(target) {
            let lp = zi - lse;
            probs.push(lp.exp());
            active.push(lp > floor);
            loss -= ti * lp.max(floor);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                target: target.to_vec(),
                probs,
                active,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        self.backward_from(loss, vec![1.0])
    }

    /// Vector-Jacobian product: propagate `seed` (shaped like `output`).
    pub fn backward_with_seed(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.value(output).numel() != seed.numel() {
            return Err(Error::shape("backward_with_seed", self.value(output).shape(), seed.shape()));
        }
        self.backward_from(output, seed.data().to_vec())
    }

    fn backward_from(&self, output: Var, seed: Vec<f64>) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed);
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bd = self.value(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    gemm(m, n, k, g, Layout::Normal, bd, Layout::Transposed, da, true);
                }
                let ad = self.value(*a).data();
                if let Some(db) = self.acc(grads, *b) {
                    gemm(k, m, n, ad, Layout::Transposed, g, Layout::Normal, db, true);
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bd = self.value(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    gemm(m, n, k, g, Layout::Normal, bd, Layout::Normal, da, true);
                }
                let ad = self.value(*a).data();
                if let Some(db) = self.acc(grads, *b) {
                    gemm(n, m, k, g, Layout::Transposed, ad, Layout::Normal, db, true);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if let Some(da) = self.acc(grads, *a) {
                    accumulate_broadcast(da, g, 1.0);
                }
                if let Some(db) = self.acc(grads, *b) {
                    accumulate_broadcast(db, g, sign);
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(da) = self.acc(grads, *a) {
                    mul_grad(da, g, tb.data());
                }
                if let Some(db) = self.acc(grads, *b) {
                    mul_grad(db, g, ta.data());
                }
            }
            Op::Scale { a, s } => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += s * gi);
                }
            }
            Op::AddRow { a, bias } => {
                let c = out.cols();
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::MulRow { a, v } => {
                let c = out.cols();
                let (ta, tv) = (self.value(*a), self.value(*v));
                if let Some(da) = self.acc(grads, *a) {
                    for (drow, grow) in da.chunks_mut(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            drow[j] += grow[j] * tv.data()[j];
                        }
                    }
                }
                if let Some(dv) = self.acc(grads, *v) {
                    for (arow, grow) in ta.data().chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            dv[j] += grow[j] * arow[j];
                        }
                    }
                }
            }
            Op::ScaleRows { a, factors } => {
                let c = out.cols();
                if let Some(da) = self.acc(grads, *a) {
                    for ((drow, grow), f) in da.chunks_mut(c).zip(g.chunks(c)).zip(factors) {
                        drow.iter_mut().zip(grow).for_each(|(d, gi)| *d += gi * f);
                    }
                }
            }
            Op::Gelu { a } => {
                let ta = self.value(*a);
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, gi), x) in da.iter_mut().zip(g).zip(ta.data()) {
                        *d += gi * gelu_parts(*x).1;
                    }
                }
            }
            Op::Relu { a } => {
                let ta = self.value(*a);
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, gi), x) in da.iter_mut().zip(g).zip(ta.data()) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { a } => {
                let c = out.cols();
                if let Some(da) = self.acc(grads, *a) {
                    for ((drow, grow), yrow) in
                        da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = out.cols();
                let gv = self.value(*gain).data();
                if let Some(dg) = self.acc(grads, *gain) {
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for grow in g.chunks(c) {
                        db.iter_mut().zip(grow).for_each(|(d, gi)| *d += gi);
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; c];
                    for (r, ((drow, grow), xrow)) in
                        dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate()
                    {
                        for j in 0..c {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            drow[j] += rstd[r] * (dxhat[j] - m1 - xrow[j] * m2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gain, bias, xhat, rstd } => {
                let c = out.cols();
                let rows = out.rows();
                let gv = self.value(*gain).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * xrow[j];
                    }
                }
                if let Some(dg) = self.acc(grads, *gain) {
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if let Some(db) = self.acc(grads, *bias) {
                    db.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let nb = rows as f64;
                    for ((drow, grow), xrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            let m1 = gv[j] * sum_g[j] / nb;
                            let m2 = gv[j] * sum_gx[j] / nb;
                            drow[j] += rstd[j] * (gv[j] * grow[j] - m1 - xrow[j] * m2);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanRows { a } => {
                let ta = self.value(*a);
                let (r, c) = dims2(ta);
                if let Some(da) = self.acc(grads, *a) {
                    for drow in da.chunks_mut(c) {
                        for j in 0..c {
                            drow[j] += g[j] / r as f64;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::SliceRows { a, start } => {
                let c = out.cols();
                if let Some(da) = self.acc(grads, *a) {
                    da[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gi)| *d += gi);
                }
            }
            Op::SliceCols { a, start } => {
                let len = out.cols();
                let c = self.value(*a).cols();
                if let Some(da) = self.acc(grads, *a) {
                    for (drow, grow) in da.chunks_mut(c).zip(g.chunks(len)) {
                        drow[*start..start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(dp) = self.acc(grads, *p) {
                        dp.iter_mut().zip(&g[off..off + len]).for_each(|(d, gi)| *d += gi);
                    }
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if let Some(dp) = self.acc(grads, *p) {
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + c];
                            dp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, gi)| *d += gi);
                        }
                    }
                    off += c;
                }
            }
            Op::GatherRows { a, indices } => {
                let c = out.cols();
                if let Some(da) = self.acc(grads, *a) {
                    for (k, &i) in indices.iter().enumerate() {
                        da[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::PoolTokens { a, w, stride } => {
                let (w, s) = (*w, *stride);
                let c = out.cols();
                if let Some(da) = self.acc(grads, *a) {
                    if s == 1 {
                        da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                        return;
                    }
                    let wo = w / s;
                    let inv = 1.0 / (s * s) as f64;
                    for j in 0..c {
                        da[j] += g[j];
                    }
                    let rows_out = out.rows() - 1;
                    for o in 0..rows_out {
                        let (i, jj) = (o / wo, o % wo);
                        let grow = &g[(1 + o) * c..(2 + o) * c];
                        for di in 0..s {
                            for dj in 0..s {
                                let src = 1 + (i * s + di) * w + jj * s + dj;
                                da[src * c..(src + 1) * c]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(d, gi)| *d += gi * inv);
                            }
                        }
                    }
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                let c = out.cols();
                if let Some(da) = self.acc(grads, *a) {
                    for (((drow, grow), yrow), n) in da
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(out.data().chunks(c))
                        .zip(norms)
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            drow[j] += (grow[j] - yrow[j] * dot) / n;
                        }
                    }
                }
            }
            Op::SoftCrossEntropy { logits, target, probs, active } => {
                let mass: f64 = target
                    .iter()
                    .zip(active)
                    .filter(|(_, a)| **a)
                    .map(|(t, _)| t)
                    .sum();
                if let Some(dz) = self.acc(grads, *logits) {
                    for j in 0..dz.len() {
                        let own = if active[j] { target[j] } else { 0.0 };
                        dz[j] += g[0] * (probs[j] * mass - own);
                    }
                }
            }
        }
    }
}

fn accumulate_broadcast(dst: &mut [f64], g: &[f64], sign: f64) {
    if dst.len() == g.len() {
        dst.iter_mut().zip(g).for_each(|(d, gi)| *d += sign * gi);
    } else {
        dst[0] += sign * g.iter().sum::<f64>();
    }
}

fn mul_grad(dst: &mut [f64], g: &[f64], other: &[f64]) {
    match (dst.len() == g.len(), other.len() == g.len()) {
        (true, true) => {
            for ((d, gi), o) in dst.iter_mut().zip(g).zip(other) {
                *d += gi * o;
            }
        }
        (true, false) => {
            let o = other[0];
            dst.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * o);
        }
        (false, _) => {
            dst[0] += g.iter().zip(other).map(|(gi, o)| gi * o).sum::<f64>();
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

const GELU_K: f64 = 0.044715;

/// `(gelu(x), gelu'(x))` for the tanh approximation.
fn gelu_parts(x: f64) -> (f64, f64) {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_K * x * x * x);
    let th = u.tanh();
    let du = c * (1.0 + 3.0 * GELU_K * x * x);
    (0.5 * x * (1.0 + th), 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
}
