//! Operation tape for reverse-mode differentiation.
//!
//! A forward pass records every operation on a [`Tape`]; `backward` replays
//! the records in reverse, accumulating adjoints. One tape corresponds to
//! one forward pass and is not shared across passes.

use crate::error::{MaeError, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeId(usize);

enum Op<S> {
    Leaf,
    Matmul { a: TapeId, b: TapeId },
    Add { a: TapeId, b: TapeId },
    Sub { a: TapeId, b: TapeId },
    Mul { a: TapeId, b: TapeId },
    Scale { a: TapeId, factor: S },
    AddBias { a: TapeId, bias: TapeId },
    Transpose { a: TapeId },
    Reshape { a: TapeId },
    GatherRows { a: TapeId, indices: Vec<usize> },
    ScatterRows { a: TapeId, indices: Vec<usize> },
    TileRows { a: TapeId },
    ConcatRows { a: TapeId, b: TapeId },
    ConcatCols { a: TapeId, b: TapeId },
    SliceCols { a: TapeId, start: usize },
    Gelu { a: TapeId },
    SoftmaxRows { a: TapeId },
    LayerNorm { a: TapeId, gamma: TapeId, beta: TapeId, eps: S },
    MeanAll { a: TapeId },
    SumAll { a: TapeId },
    MeanOverAxis { a: TapeId, axis: usize },
    CrossEntropyMean { logits: TapeId, labels: Vec<usize> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records a single forward pass and computes adjoints for it.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Registers an input value. It participates in `backward` iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor<S>) -> TapeId {
        let needs_grad = value.requires_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> TapeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: TapeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. the given node, if the
    /// node participated.
    pub fn grad(&self, id: TapeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> TapeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        TapeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TapeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn require_rank2(&self, op: &'static str, id: TapeId) -> Result<(usize, usize)> {
        let shape = self.value(id).shape();
        if shape.len() != 2 {
            return Err(MaeError::Dimension {
                op,
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        Ok((shape[0], shape[1]))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// Matrix product `[m,k]·[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (m, k) = self.require_rank2("matmul", a)?;
        let (kb, n) = self.require_rank2("matmul", b)?;
        if k != kb {
            return Err(MaeError::Dimension {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(value, Op::Matmul { a, b }, needs))
    }

    pub fn transpose(&mut self, a: TapeId) -> Result<TapeId> {
        let (m, n) = self.require_rank2("transpose", a)?;
        let data = transpose_raw(self.value(a).data(), m, n);
        let needs = self.needs(a);
        let value = Tensor::from_vec(vec![n, m], data)?;
        Ok(self.push(value, Op::Transpose { a }, needs))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TapeId,
        b: TapeId,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<TapeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(MaeError::Dimension {
                op: op_name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Multiply every element by a scalar constant.
    pub fn scale(&mut self, a: TapeId, factor: S) -> TapeId {
        let data: Vec<S> = self.value(a).data().iter().map(|&x| x * factor).collect();
        let needs = self.needs(a);
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data).unwrap();
        self.push(value, Op::Scale { a, factor }, needs)
    }

    /// Adds a rank-1 bias over the last axis.
    pub fn add_bias(&mut self, a: TapeId, bias: TapeId) -> Result<TapeId> {
        let shape = self.value(a).shape().to_vec();
        let d = *shape.last().unwrap();
        let bias_shape = self.value(bias).shape();
        if bias_shape != [d] {
            return Err(MaeError::Dimension {
                op: "add_bias",
                lhs: shape,
                rhs: bias_shape.to_vec(),
            });
        }
        let bias_data = self.value(bias).data().to_vec();
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias_data[i % d])
            .collect();
        let needs = self.needs(a) || self.needs(bias);
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.push(value, Op::AddBias { a, bias }, needs))
    }

    pub fn gelu(&mut self, a: TapeId) -> TapeId {
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| gelu_value(x))
            .collect();
        let needs = self.needs(a);
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data).unwrap();
        self.push(value, Op::Gelu { a }, needs)
    }

    // ── Shape ────────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: TapeId, shape: Vec<usize>) -> Result<TapeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(MaeError::Dimension {
                op: "reshape",
                lhs: self.value(a).shape().to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(a).data().to_vec();
        let needs = self.needs(a);
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.push(value, Op::Reshape { a }, needs))
    }

    /// Selects rows of a rank-2 tensor; duplicate indices are allowed.
    pub fn gather_rows(&mut self, a: TapeId, indices: &[usize]) -> Result<TapeId> {
        let (rows, cols) = self.require_rank2("gather_rows", a)?;
        for &i in indices {
            if i >= rows {
                return Err(MaeError::IndexOutOfRange {
                    index: i,
                    len: rows,
                });
            }
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(a);
        let value = Tensor::from_vec(vec![indices.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Places row `i` of the input at row `indices[i]` of a zero-initialized
    /// `[rows, cols]` output. Indices must be unique and in range.
    pub fn scatter_rows(&mut self, a: TapeId, indices: &[usize], rows: usize) -> Result<TapeId> {
        let (in_rows, cols) = self.require_rank2("scatter_rows", a)?;
        if indices.len() != in_rows {
            return Err(MaeError::Contract(format!(
                "scatter_rows: {} indices for {} input rows",
                indices.len(),
                in_rows
            )));
        }
        let mut seen = vec![false; rows];
        for &i in indices {
            if i >= rows {
                return Err(MaeError::IndexOutOfRange {
                    index: i,
                    len: rows,
                });
            }
            if seen[i] {
                return Err(MaeError::Contract(format!(
                    "scatter_rows: duplicate target row {i}"
                )));
            }
            seen[i] = true;
        }
        let src = self.value(a).data();
        let mut data = vec![S::zero(); rows * cols];
        for (r, &i) in indices.iter().enumerate() {
            data[i * cols..(i + 1) * cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let needs = self.needs(a);
        let value = Tensor::from_vec(vec![rows, cols], data)?;
        Ok(self.push(
            value,
            Op::ScatterRows {
                a,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Repeats a `[1,k]` row `count` times.
    pub fn tile_rows(&mut self, a: TapeId, count: usize) -> Result<TapeId> {
        let (rows, cols) = self.require_rank2("tile_rows", a)?;
        if rows != 1 || count == 0 {
            return Err(MaeError::Contract(format!(
                "tile_rows expects a [1,k] input and count >= 1, got [{rows},{cols}] x {count}"
            )));
        }
        let src = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(count * cols);
        for _ in 0..count {
            data.extend_from_slice(&src);
        }
        let needs = self.needs(a);
        let value = Tensor::from_vec(vec![count, cols], data)?;
        Ok(self.push(value, Op::TileRows { a }, needs))
    }

    pub fn concat_rows(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (ra, ca) = self.require_rank2("concat_rows", a)?;
        let (rb, cb) = self.require_rank2("concat_rows", b)?;
        if ca != cb {
            return Err(MaeError::Dimension {
                op: "concat_rows",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_vec(vec![ra + rb, ca], data)?;
        Ok(self.push(value, Op::ConcatRows { a, b }, needs))
    }

    pub fn concat_cols(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (ra, ca) = self.require_rank2("concat_cols", a)?;
        let (rb, cb) = self.require_rank2("concat_cols", b)?;
        if ra != rb {
            return Err(MaeError::Dimension {
                op: "concat_cols",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_vec(vec![ra, ca + cb], data)?;
        Ok(self.push(value, Op::ConcatCols { a, b }, needs))
    }

    pub fn slice_cols(&mut self, a: TapeId, start: usize, len: usize) -> Result<TapeId> {
        let (rows, cols) = self.require_rank2("slice_cols", a)?;
        if start + len > cols || len == 0 {
            return Err(MaeError::Contract(format!(
                "slice_cols: [{start}, {}) out of {cols} columns",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(a);
        let value = Tensor::from_vec(vec![rows, len], data)?;
        Ok(self.push(value, Op::SliceCols { a, start }, needs))
    }

    // ── Normalization and reductions ─────────────────────────────────

    /// Row-wise softmax with max subtraction for overflow safety.
    pub fn softmax_rows(&mut self, a: TapeId) -> TapeId {
        let shape = self.value(a).shape().to_vec();
        let n = *shape.last().unwrap();
        let src = self.value(a).data();
        let mut data = vec![S::zero(); src.len()];
        for (row_out, row_in) in data.chunks_mut(n).zip(src.chunks(n)) {
            let max = row_in.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut sum = S::zero();
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                let e = (v - max).exp();
                *o = e;
                sum = sum + e;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        let needs = self.needs(a);
        let value = Tensor::from_vec(shape, data).unwrap();
        self.push(value, Op::SoftmaxRows { a }, needs)
    }

    /// Normalizes the last axis to mean 0 / variance 1, then applies the
    /// affine transform `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, a: TapeId, gamma: TapeId, beta: TapeId, eps: S) -> Result<TapeId> {
        let shape = self.value(a).shape().to_vec();
        let d = *shape.last().unwrap();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(MaeError::Dimension {
                op: "layer_norm",
                lhs: shape,
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let src = self.value(a).data();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut data = vec![S::zero(); src.len()];
        let inv_d = S::one() / S::from_f64c(d as f64);
        for (row_out, row_in) in data.chunks_mut(d).zip(src.chunks(d)) {
            let mut mean = S::zero();
            for &v in row_in {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = S::zero();
            for &v in row_in {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let inv_std = S::one() / (var + eps).sqrt();
            for ((o, &v), (&gv, &bv)) in row_out.iter_mut().zip(row_in).zip(g.iter().zip(&b)) {
                *o = (v - mean) * inv_std * gv + bv;
            }
        }
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::LayerNorm { a, gamma, beta, eps }, needs))
    }

    /// Mean of all elements; returns a rank-1 singleton.
    pub fn mean_all(&mut self, a: TapeId) -> TapeId {
        let src = self.value(a).data();
        let mut sum = S::zero();
        for &v in src {
            sum = sum + v;
        }
        let mean = sum / S::from_f64c(src.len() as f64);
        let needs = self.needs(a);
        self.push(Tensor::scalar(mean), Op::MeanAll { a }, needs)
    }

    /// Sum of all elements; returns a rank-1 singleton.
    pub fn sum_all(&mut self, a: TapeId) -> TapeId {
        let src = self.value(a).data();
        let mut sum = S::zero();
        for &v in src {
            sum = sum + v;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(sum), Op::SumAll { a }, needs)
    }

    /// Mean over one axis of a rank-2 tensor, keeping the axis with extent 1.
    pub fn mean_over_axis(&mut self, a: TapeId, axis: usize) -> Result<TapeId> {
        let (rows, cols) = self.require_rank2("mean_over_axis", a)?;
        if axis > 1 {
            return Err(MaeError::Contract(format!(
                "mean_over_axis: axis {axis} for a rank-2 tensor"
            )));
        }
        let src = self.value(a).data();
        let value = if axis == 0 {
            let inv = S::one() / S::from_f64c(rows as f64);
            let mut out = vec![S::zero(); cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c] = out[c] + src[r * cols + c];
                }
            }
            for o in out.iter_mut() {
                *o = *o * inv;
            }
            Tensor::from_vec(vec![1, cols], out)?
        } else {
            let inv = S::one() / S::from_f64c(cols as f64);
            let mut out = vec![S::zero(); rows];
            for r in 0..rows {
                let mut sum = S::zero();
                for c in 0..cols {
                    sum = sum + src[r * cols + c];
                }
                out[r] = sum * inv;
            }
            Tensor::from_vec(vec![rows, 1], out)?
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::MeanOverAxis { a, axis }, needs))
    }

    /// Mean softmax cross-entropy of `[b,c]` logits against class indices.
    pub fn cross_entropy_mean(&mut self, logits: TapeId, labels: &[usize]) -> Result<TapeId> {
        let (rows, cols) = self.require_rank2("cross_entropy_mean", logits)?;
        if labels.len() != rows {
            return Err(MaeError::Contract(format!(
                "cross_entropy_mean: {} labels for {} rows",
                labels.len(),
                rows
            )));
        }
        for &l in labels {
            if l >= cols {
                return Err(MaeError::IndexOutOfRange {
                    index: l,
                    len: cols,
                });
            }
        }
        let src = self.value(logits).data();
        let mut total = S::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut sum_exp = S::zero();
            for &v in row {
                sum_exp = sum_exp + (v - max).exp();
            }
            total = total - (row[label] - max - sum_exp.ln());
        }
        let mean = total / S::from_f64c(rows as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Populates gradients for every `requires_grad` leaf reachable from a
    /// scalar loss. Visits each recorded operation exactly once, in reverse
    /// order, with fixed-order accumulation.
    pub fn backward(&mut self, loss: TapeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(MaeError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::filled(
            self.value(loss).shape().to_vec(),
            S::one(),
        ));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = self.grads[i].clone() else {
                continue;
            };
            let g = grad.data();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let m = self.value(a).rows();
                    let k = self.value(a).cols();
                    let n = self.value(b).cols();
                    if self.needs(a) {
                        let bt = transpose_raw(self.value(b).data(), k, n);
                        let da = matmul_raw(g, &bt, m, n, k);
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let at = transpose_raw(self.value(a).data(), m, k);
                        let db = matmul_raw(&at, g, k, m, n);
                        self.accumulate(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate_if(a, g);
                    self.accumulate_if(b, g);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate_if(a, g);
                    if self.needs(b) {
                        let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                        self.accumulate(b, &neg);
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let da: Vec<S> = g
                            .iter()
                            .zip(self.value(b).data())
                            .map(|(&gv, &bv)| gv * bv)
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let db: Vec<S> = g
                            .iter()
                            .zip(self.value(a).data())
                            .map(|(&gv, &av)| gv * av)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Scale { a, factor } => {
                    let (a, factor) = (*a, *factor);
                    let da: Vec<S> = g.iter().map(|&gv| gv * factor).collect();
                    self.accumulate(a, &da);
                }
                Op::AddBias { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    self.accumulate_if(a, g);
                    if self.needs(bias) {
                        let d = self.value(bias).numel();
                        let mut db = vec![S::zero(); d];
                        for (j, &gv) in g.iter().enumerate() {
                            db[j % d] = db[j % d] + gv;
                        }
                        self.accumulate(bias, &db);
                    }
                }
                Op::Transpose { a } => {
                    let a = *a;
                    let (m, n) = (self.value(a).rows(), self.value(a).cols());
                    // grad has shape [n, m]; transpose it back to [m, n]
                    let da = transpose_raw(g, n, m);
                    self.accumulate(a, &da);
                }
                Op::Reshape { a } => {
                    let a = *a;
                    self.accumulate(a, g);
                }
                Op::GatherRows { a, indices } => {
                    let a = *a;
                    let cols = self.value(a).cols();
                    let mut da = vec![S::zero(); self.value(a).numel()];
                    for (r, &i) in indices.clone().iter().enumerate() {
                        for c in 0..cols {
                            da[i * cols + c] = da[i * cols + c] + g[r * cols + c];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::ScatterRows { a, indices } => {
                    let a = *a;
                    let cols = self.value(a).cols();
                    let mut da = Vec::with_capacity(indices.len() * cols);
                    for &i in indices.clone().iter() {
                        da.extend_from_slice(&g[i * cols..(i + 1) * cols]);
                    }
                    self.accumulate(a, &da);
                }
                Op::TileRows { a } => {
                    let a = *a;
                    let cols = self.value(a).cols();
                    let mut da = vec![S::zero(); cols];
                    for row in g.chunks(cols) {
                        for (o, &gv) in da.iter_mut().zip(row) {
                            *o = *o + gv;
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::ConcatRows { a, b } => {
                    let (a, b) = (*a, *b);
                    let na = self.value(a).numel();
                    if self.needs(a) {
                        self.accumulate(a, &g[..na].to_vec());
                    }
                    if self.needs(b) {
                        self.accumulate(b, &g[na..].to_vec());
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (a, b) = (*a, *b);
                    let (rows, ca) = (self.value(a).rows(), self.value(a).cols());
                    let cb = self.value(b).cols();
                    if self.needs(a) {
                        let mut da = Vec::with_capacity(rows * ca);
                        for r in 0..rows {
                            da.extend_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                        }
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = Vec::with_capacity(rows * cb);
                        for r in 0..rows {
                            db.extend_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::SliceCols { a, start } => {
                    let (a, start) = (*a, *start);
                    let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
                    let len = g.len() / rows;
                    let mut da = vec![S::zero(); rows * cols];
                    for r in 0..rows {
                        da[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.accumulate(a, &da);
                }
                Op::Gelu { a } => {
                    let a = *a;
                    let da: Vec<S> = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| gv * gelu_derivative(x))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::SoftmaxRows { a } => {
                    let a = *a;
                    let out = self.nodes[i].value.data();
                    let n = *self.nodes[i].value.shape().last().unwrap();
                    let mut da = vec![S::zero(); out.len()];
                    for ((drow, srow), grow) in
                        da.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n))
                    {
                        let mut dot = S::zero();
                        for (&sv, &gv) in srow.iter().zip(grow) {
                            dot = dot + sv * gv;
                        }
                        for ((o, &sv), &gv) in drow.iter_mut().zip(srow).zip(grow) {
                            *o = sv * (gv - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LayerNorm { a, gamma, beta, eps } => {
                    let (a, gamma, beta, eps) = (*a, *gamma, *beta, *eps);
                    let src = self.value(a).data();
                    let gm = self.value(gamma).data().to_vec();
                    let d = self.value(gamma).numel();
                    let inv_d = S::one() / S::from_f64c(d as f64);
                    let mut da = vec![S::zero(); src.len()];
                    let mut dgamma = vec![S::zero(); d];
                    let mut dbeta = vec![S::zero(); d];
                    for (row_idx, (row, grow)) in src.chunks(d).zip(g.chunks(d)).enumerate() {
                        let mut mean = S::zero();
                        for &v in row {
                            mean = mean + v;
                        }
                        mean = mean * inv_d;
                        let mut var = S::zero();
                        for &v in row {
                            let c = v - mean;
                            var = var + c * c;
                        }
                        var = var * inv_d;
                        let inv_std = S::one() / (var + eps).sqrt();

                        let xhat: Vec<S> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let mut dxhat = vec![S::zero(); d];
                        for j in 0..d {
                            dgamma[j] = dgamma[j] + grow[j] * xhat[j];
                            dbeta[j] = dbeta[j] + grow[j];
                            dxhat[j] = grow[j] * gm[j];
                        }
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for j in 0..d {
                            sum_dxhat = sum_dxhat + dxhat[j];
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
                        }
                        let d_s = S::from_f64c(d as f64);
                        for j in 0..d {
                            da[row_idx * d + j] = inv_std * inv_d
                                * (d_s * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate_if(a, &da);
                    self.accumulate_if(gamma, &dgamma);
                    self.accumulate_if(beta, &dbeta);
                }
                Op::MeanAll { a } => {
                    let a = *a;
                    let n = self.value(a).numel();
                    let gv = g[0] / S::from_f64c(n as f64);
                    let da = vec![gv; n];
                    self.accumulate(a, &da);
                }
                Op::SumAll { a } => {
                    let a = *a;
                    let da = vec![g[0]; self.value(a).numel()];
                    self.accumulate(a, &da);
                }
                Op::MeanOverAxis { a, axis } => {
                    let (a, axis) = (*a, *axis);
                    let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
                    let mut da = vec![S::zero(); rows * cols];
                    if axis == 0 {
                        let inv = S::one() / S::from_f64c(rows as f64);
                        for r in 0..rows {
                            for c in 0..cols {
                                da[r * cols + c] = g[c] * inv;
                            }
                        }
                    } else {
                        let inv = S::one() / S::from_f64c(cols as f64);
                        for r in 0..rows {
                            for c in 0..cols {
                                da[r * cols + c] = g[r] * inv;
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::CrossEntropyMean { logits, labels } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let (rows, cols) = (self.value(logits).rows(), self.value(logits).cols());
                    let src = self.value(logits).data();
                    let scale = g[0] / S::from_f64c(rows as f64);
                    let mut da = vec![S::zero(); rows * cols];
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &src[r * cols..(r + 1) * cols];
                        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
                        let mut sum_exp = S::zero();
                        for &v in row {
                            sum_exp = sum_exp + (v - max).exp();
                        }
                        for c in 0..cols {
                            let p = (row[c] - max).exp() / sum_exp;
                            let target = if c == label { S::one() } else { S::zero() };
                            da[r * cols + c] = (p - target) * scale;
                        }
                    }
                    self.accumulate(logits, &da);
                }
            }
        }
        Ok(())
    }

    fn accumulate_if(&mut self, id: TapeId, contribution: &[S]) {
        if self.needs(id) {
            self.accumulate(id, contribution);
        }
    }

    fn accumulate(&mut self, id: TapeId, contribution: &[S]) {
        debug_assert_eq!(contribution.len(), self.nodes[id.0].value.numel());
        let slot = &mut self.grads[id.0];
        match slot {
            Some(existing) => {
                for (o, &c) in existing.data_mut().iter_mut().zip(contribution) {
                    *o = *o + c;
                }
            }
            None => {
                let shape = self.nodes[id.0].value.shape().to_vec();
                *slot = Some(Tensor::from_vec(shape, contribution.to_vec()).unwrap());
            }
        }
    }
}

/// Row-major matrix multiply with a fixed accumulation order.
fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Tanh-approximated GELU.
fn gelu_value<S: Scalar>(x: S) -> S {
    let c = S::from_f64c((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64c(0.044715);
    let half = S::from_f64c(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::from_f64c((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64c(0.044715);
    let half = S::from_f64c(0.5);
    let three = S::from_f64c(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    let d_inner = c * (S::one() + three * k * x * x);
    half * (S::one() + t) + half * x * sech2 * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckConfig};

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t64(
            &[3, 3],
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let x = tape.constant(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t64(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 5]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = t64(&[2, 3], &[0.5, -1.0, 2.0, 0.3, 0.7, -0.2]).with_grad();
        let b = t64(&[3, 2], &[1.0, 0.5, -0.5, 0.25, 2.0, -1.5]).with_grad();
        let cfg = GradCheckConfig {
            rel_tol: 1e-6,
            ..GradCheckConfig::default()
        };
        check_gradients(&cfg, &[a, b], |tape, ids| {
            let c = tape.matmul(ids[0], ids[1])?;
            Ok(tape.sum_all(c))
        })
        .unwrap();
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 4], &[3.0; 4]));
        let gamma = tape.constant(Tensor::filled(vec![4], 1.0));
        let beta = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, gamma, beta, 1e-6).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 2], &[0.0, 2.0]));
        let gamma = tape.constant(Tensor::filled(vec![2], 1.0));
        let beta = tape.constant(Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-6 && (out[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = t64(&[2, 3], &[0.1, -0.4, 0.9, 1.2, 0.0, -0.7]).with_grad();
        let gamma = t64(&[3], &[1.1, 0.9, 1.3]).with_grad();
        let beta = t64(&[3], &[0.05, -0.02, 0.1]).with_grad();
        let cfg = GradCheckConfig {
            rel_tol: 1e-5,
            ..GradCheckConfig::default()
        };
        check_gradients(&cfg, &[x, gamma, beta], |tape, ids| {
            let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-6)?;
            // square the output so the gradient is not constant
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 4], &[1.5; 4]));
        let y = tape.softmax_rows(x);
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 2], &[0.0, 3.0f64.ln()]));
        let y = tape.softmax_rows(x);
        let out = tape.value(y).data();
        assert!((out[0] - 0.25).abs() < 1e-12 && (out[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        // exactly representable values keep the shifted inputs exact
        let base = [0.0, 1.0, 2.0, 3.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 4.0).collect();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[1, 4], &base));
        let b = tape.constant(t64(&[1, 4], &shifted));
        let ya = tape.softmax_rows(a);
        let yb = tape.softmax_rows(b);
        assert_eq!(tape.value(ya).data(), tape.value(yb).data());
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = t64(&[2, 4], &[0.3, -0.9, 1.4, 0.2, 2.0, -1.0, 0.5, 0.0]).with_grad();
        let w = t64(&[2, 4], &[1.0, -2.0, 0.5, 3.0, -1.0, 0.25, 2.0, -0.5]);
        check_gradients(&GradCheckConfig::default(), &[x], move |tape, ids| {
            let s = tape.softmax_rows(ids[0]);
            let wc = tape.constant(w.clone());
            let weighted = tape.mul(s, wc)?;
            Ok(tape.sum_all(weighted))
        })
        .unwrap();
    }

    #[test]
    fn gelu_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1], &[0.0]));
        let y = tape.gelu(x);
        assert_eq!(tape.value(y).data()[0], 0.0);
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let x = t64(&[5], &[-2.0, -0.5, 0.0, 0.5, 2.0]).with_grad();
        check_gradients(&GradCheckConfig::default(), &[x], |tape, ids| {
            let y = tape.gelu(ids[0]);
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
    }

    #[test]
    fn gather_all_rows_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.gather_rows(x, &[0, 1, 2]).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn scatter_then_gather_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let scattered = tape.scatter_rows(x, &[3, 1], 5).unwrap();
        let back = tape.gather_rows(scattered, &[3, 1]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn gather_index_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![3, 2]));
        let err = tape.gather_rows(x, &[0, 3]).unwrap_err();
        assert!(matches!(err, MaeError::IndexOutOfRange { index: 3, len: 3 }));
    }

    #[test]
    fn scatter_duplicate_target_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 2]));
        let err = tape.scatter_rows(x, &[1, 1], 4).unwrap_err();
        assert!(matches!(err, MaeError::Contract(_)));
    }

    #[test]
    fn gather_scatter_gradients_match_finite_differences() {
        let x = t64(&[4, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).with_grad();
        check_gradients(&GradCheckConfig::default(), &[x], |tape, ids| {
            // duplicate gather index exercises adjoint accumulation
            let gathered = tape.gather_rows(ids[0], &[2, 0, 2])?;
            let scattered = tape.scatter_rows(gathered, &[1, 4, 0], 6)?;
            let sq = tape.mul(scattered, scattered)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
    }

    #[test]
    fn concat_slice_tile_gradients_match_finite_differences() {
        let a = t64(&[2, 3], &[0.3, -0.1, 0.8, 0.2, 0.9, -0.4]).with_grad();
        let b = t64(&[2, 2], &[1.0, -0.5, 0.25, 0.75]).with_grad();
        let m = t64(&[1, 5], &[0.1, 0.2, 0.3, 0.4, 0.5]).with_grad();
        check_gradients(&GradCheckConfig::default(), &[a, b, m], |tape, ids| {
            let wide = tape.concat_cols(ids[0], ids[1])?;
            let tiled = tape.tile_rows(ids[2], 2)?;
            let sum = tape.add(wide, tiled)?;
            let stacked = tape.concat_rows(sum, tiled)?;
            let sliced = tape.slice_cols(stacked, 1, 3)?;
            let sq = tape.mul(sliced, sliced)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
    }

    #[test]
    fn bias_mean_axis_gradients_match_finite_differences() {
        let x = t64(&[3, 2], &[0.5, 1.5, -0.5, 2.0, 0.0, -1.0]).with_grad();
        let bias = t64(&[2], &[0.25, -0.75]).with_grad();
        check_gradients(&GradCheckConfig::default(), &[x, bias], |tape, ids| {
            let shifted = tape.add_bias(ids[0], ids[1])?;
            let pooled = tape.mean_over_axis(shifted, 0)?;
            let sq = tape.mul(pooled, pooled)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = t64(&[3, 4], &[2.0, 1.0, 0.1, -0.5, 0.0, 0.2, 0.4, 0.6, -1.0, 2.5, 0.3, 0.9])
            .with_grad();
        check_gradients(&GradCheckConfig::default(), &[logits], |tape, ids| {
            tape.cross_entropy_mean(ids[0], &[0, 3, 1])
        })
        .unwrap();
    }

    #[test]
    fn transpose_reshape_scale_gradients_match_finite_differences() {
        let x = t64(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).with_grad();
        check_gradients(&GradCheckConfig::default(), &[x], |tape, ids| {
            let t = tape.transpose(ids[0])?;
            let r = tape.reshape(t, vec![2, 3])?;
            let s = tape.scale(r, 2.5);
            let sq = tape.mul(s, s)?;
            Ok(tape.mean_all(sq))
        })
        .unwrap();
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_half_sum_of_squares_is_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let sum = tape.sum_all(sq);
        let loss = tape.scale(sum, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]).with_grad());
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, MaeError::Contract(_)));
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let a = tape.leaf(
                Tensor::from_vec(vec![3, 3], (0..9).map(|i| (i as f32) * 0.37 - 1.1).collect())
                    .unwrap()
                    .with_grad(),
            );
            let b = tape.leaf(
                Tensor::from_vec(vec![3, 3], (0..9).map(|i| (i as f32) * -0.21 + 0.4).collect())
                    .unwrap()
                    .with_grad(),
            );
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(c);
            let loss = tape.mean_all(s);
            tape.backward(loss).unwrap();
            (
                tape.value(loss).data().to_vec(),
                tape.grad(a).unwrap().data().to_vec(),
                tape.grad(b).unwrap().data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
