//! Wengert-list reverse-mode differentiation.
//!
//! Every forward primitive appends one node holding its value and whatever it
//! needs for the backward rule. Nodes are only ever appended, so the list is
//! topologically ordered and one reverse sweep visits each node once.

use rand::Rng;

use super::kernels::{self, dot};
use super::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a trainable parameter inside a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which key positions a query position may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    Full,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Positions before `boundary` and positions from `boundary` on form two
    /// groups that cannot see each other.
    BlockDiagonal { boundary: usize },
}

impl AttnMask {
    #[inline]
    fn allows(self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal => j <= i,
            AttnMask::BlockDiagonal { boundary } => (i < boundary) == (j < boundary),
        }
    }
}

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat(Var, Var),
    Slice {
        src: Var,
        start: usize,
    },
    Transpose(Var),
    MaskedFill {
        src: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
    Dropout {
        src: Var,
        mask: Vec<T>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
        drop: Option<Vec<T>>,
    },
    Nll {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    SoftNll {
        logits: Var,
        soft: Vec<T>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    SqErr {
        a: Var,
        b: Var,
        scale: T,
    },
    Consumed,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. a leaf. `None` when the leaf does not
    /// require gradients or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter leaf reached by the loss.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, idx)| self.grads[idx].as_ref().map(|g| (id, g)))
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a one-element tensor.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf whose gradient is reported under `id` by [`Gradients::param_grads`].
    pub fn param(&mut self, value: Tensor<T>, id: ParamId, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: Some(id) }, requires_grad)
    }

    /// Same value, no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let t = &self.nodes[v.0].value;
        if t.rank() != 2 {
            return Err(TensorError::invalid(
                op,
                format!("expected a matrix, got shape {:?}", t.shape()),
            ));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul_bt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_bt")?;
        if k != k2 {
            return Err(mismatch("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op_name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let tr = self.value(row);
        let n = ta.cols();
        if tr.numel() != n {
            return Err(mismatch("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (o, &r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = self.matrix_dims(table, "embedding")?;
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::invalid(
                    "embedding",
                    format!("id {id} outside table of {vocab} rows"),
                ));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks `a` above `b` along the sequence (row) axis.
    pub fn concat_seq(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ra, ca) = self.matrix_dims(a, "concat_seq")?;
        let (rb, cb) = self.matrix_dims(b, "concat_seq")?;
        if ca != cb {
            return Err(mismatch("concat_seq", self.shape(a), self.shape(b)));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ra + rb, ca], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Rows `start..start + len`.
    pub fn slice_seq(&mut self, src: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.matrix_dims(src, "slice_seq")?;
        if start + len > r {
            return Err(TensorError::invalid(
                "slice_seq",
                format!("rows {start}..{} out of {r}", start + len),
            ));
        }
        let data = self.value(src).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        let rg = self.rg(src);
        Ok(self.push(value, Op::Slice { src, start }, rg))
    }

    /// Splits rows at `boundary` into `(head, tail)`.
    pub fn split_seq(&mut self, src: Var, boundary: usize) -> Result<(Var, Var), TensorError> {
        let (r, _) = self.matrix_dims(src, "split_seq")?;
        if boundary > r {
            return Err(TensorError::invalid(
                "split_seq",
                format!("boundary {boundary} beyond {r} rows"),
            ));
        }
        let head = self.slice_seq(src, 0, boundary)?;
        let tail = self.slice_seq(src, boundary, r - boundary)?;
        Ok((head, tail))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Replaces entries where `mask` is true by `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: T) -> Result<Var, TensorError> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(mismatch("masked_fill", t.shape(), &[mask.len()]));
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::MaskedFill {
                src: a,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(TensorError::EmptyAxis { op: "sum" });
        }
        let s = t.data().iter().copied().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(TensorError::EmptyAxis { op: "mean" });
        }
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.numel() as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Inverted dropout. `p == 0` returns `a` unchanged without recording.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("rate {p} not in [0,1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let t = self.value(a);
        let mask: Vec<T> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Dropout { src: a, mask }, rg))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax_last" });
        }
        let c = t.cols();
        if c == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax_last" });
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Normalizes every row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let t = self.value(x);
        let c = t.cols();
        if c == 0 || t.rank() == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(mismatch("layer_norm", t.shape(), self.value(gain).shape()));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = t.numel() / c;
        let inv_c = T::of(1.0 / c as f64);
        let mut xhat = vec![T::zero(); t.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mu) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Width-3, stride-2 convolution over the sequence axis with one zero row
    /// of padding on each side. `kernel` is `[3, d_in, d_out]`; the output has
    /// `ceil(L/2)` rows.
    pub fn conv1d_stride2(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var, TensorError> {
        let (len, d_in) = self.matrix_dims(x, "conv1d_stride2")?;
        if len == 0 {
            return Err(TensorError::invalid("conv1d_stride2", "empty sequence"));
        }
        let ks = self.value(kernel).shape().to_vec();
        if ks.len() != 3 || ks[0] != 3 || ks[1] != d_in {
            return Err(mismatch("conv1d_stride2", self.shape(x), &ks));
        }
        let d_out = ks[2];
        if self.value(bias).numel() != d_out {
            return Err(mismatch("conv1d_stride2", &ks, self.shape(bias)));
        }
        let out_len = len.div_ceil(2);
        let xs = self.value(x).data();
        let w = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); out_len * d_out];
        for i in 0..out_len {
            let orow = &mut out[i * d_out..(i + 1) * d_out];
            orow.copy_from_slice(b);
            for tap in 0..3 {
                let Some(src) = (2 * i + tap).checked_sub(1).filter(|&s| s < len) else {
                    continue;
                };
                let xrow = &xs[src * d_in..(src + 1) * d_in];
                let wt = &w[tap * d_in * d_out..(tap + 1) * d_in * d_out];
                kernels::matmul_acc(xrow, wt, orow, 1, d_in, d_out);
            }
        }
        let value = Tensor::new(vec![out_len, d_out], out)?;
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(value, Op::Conv1d { x, kernel, bias }, rg))
    }

    /// Multi-head scaled dot-product attention over already projected
    /// `q[Lq×d]`, `k[Lk×d]`, `v[Lk×d]`.
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
        attn_dropout: Option<(f64, &mut R)>,
    ) -> Result<Var, TensorError> {
        let (lq, d) = self.matrix_dims(q, "attention")?;
        let (lk, dk) = self.matrix_dims(k, "attention")?;
        let (lv, dv) = self.matrix_dims(v, "attention")?;
        if d != dk || d != dv || lk != lv {
            return Err(mismatch("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::invalid(
                "attention",
                format!("width {d} not divisible into {heads} heads"),
            ));
        }
        if mask != AttnMask::Full && lq != lk {
            return Err(mismatch("attention", self.shape(q), self.shape(k)));
        }
        if lk == 0 {
            return Err(TensorError::EmptyAxis { op: "attention" });
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * lq * lk];
        let mut out = vec![T::zero(); lq * d];

        let mut drop = None;
        if let Some((p, rng)) = attn_dropout {
            if p > 0.0 {
                let keep = T::of(1.0 / (1.0 - p));
                drop = Some(
                    (0..probs.len())
                        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                        .collect::<Vec<T>>(),
                );
            }
        }

        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &qd[i * d + off..i * d + off + dh];
                let prow = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let mut max = T::neg_infinity();
                for (j, p) in prow.iter_mut().enumerate() {
                    if mask.allows(i, j) {
                        let s = dot(qi, &kd[j * d + off..j * d + off + dh]) * scale;
                        *p = s;
                        max = max.max(s);
                    }
                }
                let mut sum = T::zero();
                for (j, p) in prow.iter_mut().enumerate() {
                    if mask.allows(i, j) {
                        *p = (*p - max).exp();
                        sum += *p;
                    }
                }
                let inv = T::one() / sum;
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, p) in prow.iter_mut().enumerate() {
                    if mask.allows(i, j) {
                        *p *= inv;
                        let w = match &drop {
                            Some(m) => *p * m[(h * lq + i) * lk + j],
                            None => *p,
                        };
                        kernels::axpy(w, &vd[j * d + off..j * d + off + dh], orow);
                    }
                }
            }
        }
        let value = Tensor::new(vec![lq, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                drop,
            },
            rg,
        ))
    }

    /// `Σ_t weight[t] · −log softmax(logits[t])[target[t]]`.
    ///
    /// Rows with zero weight contribute nothing and receive no gradient.
    pub fn weighted_nll(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
    ) -> Result<Var, TensorError> {
        let (rows, vocab) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != rows || weights.len() != rows {
            return Err(mismatch("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("target {bad} outside vocabulary of {vocab}"),
            ));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * vocab];
        let mut lp = vec![T::zero(); vocab];
        let mut loss = T::zero();
        for r in 0..rows {
            if weights[r] == T::zero() {
                continue;
            }
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            kernels::log_softmax_row(&ld[r * vocab..(r + 1) * vocab], &mut lp, prow);
            loss -= weights[r] * lp[targets[r]];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ_t weight[t] · −Σ_v soft[t,v] · log softmax(logits[t])[v]`.
    ///
    /// `soft` is a plain tensor, so nothing upstream of it can receive gradient.
    pub fn weighted_soft_nll(
        &mut self,
        logits: Var,
        soft: &Tensor<T>,
        weights: &[T],
    ) -> Result<Var, TensorError> {
        let (rows, vocab) = self.matrix_dims(logits, "soft_cross_entropy")?;
        if soft.shape() != self.shape(logits) || weights.len() != rows {
            return Err(mismatch("soft_cross_entropy", self.shape(logits), soft.shape()));
        }
        if soft.data().iter().any(|&q| q < T::zero() || !q.is_finite()) {
            return Err(TensorError::invalid(
                "soft_cross_entropy",
                "soft targets must be finite and nonnegative",
            ));
        }
        let tol = T::of(1e-6).max(T::epsilon().sqrt());
        for r in 0..rows {
            let s: T = soft.row(r).iter().copied().sum();
            if (s - T::one()).abs() > tol {
                return Err(TensorError::invalid(
                    "soft_cross_entropy",
                    format!("soft-target row {r} sums to {s}"),
                ));
            }
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * vocab];
        let mut lp = vec![T::zero(); vocab];
        let mut loss = T::zero();
        for r in 0..rows {
            if weights[r] == T::zero() {
                continue;
            }
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            kernels::log_softmax_row(&ld[r * vocab..(r + 1) * vocab], &mut lp, prow);
            let ce: T = soft.row(r).iter().zip(&lp).map(|(&q, &l)| q * l).sum();
            loss -= weights[r] * ce;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftNll {
                logits,
                soft: soft.data().to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `scale · Σ (a − b)²`
    pub fn squared_error(&mut self, a: Var, b: Var, scale: T) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mse", ta.shape(), tb.shape()));
        }
        let s: T = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s * scale), Op::SqErr { a, b, scale }, rg))
    }

    /// Runs the reverse sweep from a one-element `loss`.
    ///
    /// Saved forward state is released afterwards; values stay readable but a
    /// second call is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.done {
            return Err(TensorError::AlreadyBackpropagated);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Consumed);
            self.backprop_node(idx, &op, &g, &mut grads);
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf { .. }) {
                node.op = Op::Consumed;
            }
        }

        let mut params = Vec::new();
        let mut out = Vec::with_capacity(n);
        for (i, (node, g)) in self.nodes.iter().zip(grads).enumerate() {
            match (&node.op, g) {
                (Op::Leaf { param }, Some(g)) => {
                    if let Some(id) = param {
                        params.push((*id, i));
                    }
                    out.push(Some(Tensor::new(node.value.shape().to_vec(), g)?));
                }
                _ => out.push(None),
            }
        }
        Ok(Gradients { grads: out, params })
    }

    fn backprop_node(&self, idx: usize, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
                f(slot);
            }
        };
        match op {
            Op::Leaf { .. } | Op::Consumed => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                acc(*a, &mut |ga| kernels::matmul_bt_acc(g, val(*b), ga, m, n, k));
                acc(*b, &mut |gb| kernels::matmul_at_acc(val(*a), g, gb, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[0];
                acc(*a, &mut |ga| kernels::matmul_acc(g, val(*b), ga, m, n, k));
                acc(*b, &mut |gb| kernels::matmul_at_acc(g, val(*a), gb, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| kernels::axpy(T::one(), g, ga));
                acc(*b, &mut |gb| kernels::axpy(T::one(), g, gb));
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| kernels::axpy(T::one(), g, ga));
                let n = nodes[row.0].value.numel();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n.max(1)) {
                        kernels::axpy(T::one(), chunk, gr);
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| kernels::axpy(*c, g, ga)),
            Op::Gelu(a) => acc(*a, &mut |ga| {
                for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                    *o += gv * kernels::gelu_grad(x);
                }
            }),
            Op::Embedding { table, ids } => {
                let d = shp(*table)[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(T::one(), &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::Concat(a, b) => {
                let na = nodes[a.0].value.numel();
                acc(*a, &mut |ga| kernels::axpy(T::one(), &g[..na], ga));
                acc(*b, &mut |gb| kernels::axpy(T::one(), &g[na..], gb));
            }
            Op::Slice { src, start } => {
                let c = shp(*src)[1];
                acc(*src, &mut |gs| {
                    kernels::axpy(T::one(), g, &mut gs[start * c..start * c + g.len()])
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (shp(*a)[0], shp(*a)[1]);
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::MaskedFill { src, mask } => acc(*src, &mut |gs| {
                for ((o, &gv), &m) in gs.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *o += gv;
                    }
                }
            }),
            Op::Sum(a) => acc(*a, &mut |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = T::of(nodes[a.0].value.numel() as f64);
                acc(*a, &mut |ga| {
                    for o in ga.iter_mut() {
                        *o += g[0] / n;
                    }
                })
            }
            Op::Dropout { src, mask } => acc(*src, &mut |gs| {
                for ((o, &gv), &m) in gs.iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            }),
            Op::Softmax(a) => {
                let y = nodes[idx].value.data();
                let c = nodes[idx].value.cols();
                acc(*a, &mut |ga| {
                    for ((orow, grow), yrow) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = dot(grow, yrow);
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = nodes[x.0].value.cols();
                let gn = val(*gain);
                let inv_c = T::of(1.0 / c as f64);
                acc(*x, &mut |gx| {
                    let mut dxh = vec![T::zero(); c];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxh[j] = grow[j] * gn[j];
                        }
                        let m1 = dxh.iter().copied().sum::<T>() * inv_c;
                        let m2 = dot(&dxh, xh) * inv_c;
                        for j in 0..c {
                            gx[r * c + j] += rs * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (grow, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for grow in g.chunks(c) {
                        kernels::axpy(T::one(), grow, gb);
                    }
                });
            }
            Op::Conv1d { x, kernel, bias } => {
                let (len, d_in) = (shp(*x)[0], shp(*x)[1]);
                let d_out = shp(*kernel)[2];
                let out_len = len.div_ceil(2);
                let taps = |i: usize, tap: usize| (2 * i + tap).checked_sub(1).filter(|&s| s < len);
                acc(*x, &mut |gx| {
                    let w = val(*kernel);
                    for i in 0..out_len {
                        let grow = &g[i * d_out..(i + 1) * d_out];
                        for tap in 0..3 {
                            if let Some(src) = taps(i, tap) {
                                let wt = &w[tap * d_in * d_out..(tap + 1) * d_in * d_out];
                                kernels::matmul_bt_acc(grow, wt, &mut gx[src * d_in..(src + 1) * d_in], 1, d_out, d_in);
                            }
                        }
                    }
                });
                acc(*kernel, &mut |gw| {
                    let xs = val(*x);
                    for i in 0..out_len {
                        let grow = &g[i * d_out..(i + 1) * d_out];
                        for tap in 0..3 {
                            if let Some(src) = taps(i, tap) {
                                let gwt = &mut gw[tap * d_in * d_out..(tap + 1) * d_in * d_out];
                                kernels::matmul_at_acc(&xs[src * d_in..(src + 1) * d_in], grow, gwt, 1, d_in, d_out);
                            }
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for grow in g.chunks(d_out) {
                        kernels::axpy(T::one(), grow, gb);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                drop,
            } => {
                let (lq, d) = (shp(*q)[0], shp(*q)[1]);
                let lk = shp(*k)[0];
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut gq = vec![T::zero(); lq * d];
                let mut gk = vec![T::zero(); lk * d];
                let mut gv = vec![T::zero(); lk * d];
                let mut dp = vec![T::zero(); lk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..lq {
                        let prow = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                        let go = &g[i * d + off..i * d + off + dh];
                        let mut s = T::zero();
                        for j in 0..lk {
                            if prow[j] == T::zero() {
                                dp[j] = T::zero();
                                continue;
                            }
                            let m = drop.as_ref().map_or(T::one(), |m| m[(h * lq + i) * lk + j]);
                            kernels::axpy(prow[j] * m, go, &mut gv[j * d + off..j * d + off + dh]);
                            dp[j] = dot(go, &vd[j * d + off..j * d + off + dh]) * m;
                            s += prow[j] * dp[j];
                        }
                        for j in 0..lk {
                            if prow[j] == T::zero() {
                                continue;
                            }
                            let ds = prow[j] * (dp[j] - s) * scale;
                            kernels::axpy(ds, &kd[j * d + off..j * d + off + dh], &mut gq[i * d + off..i * d + off + dh]);
                            kernels::axpy(ds, &qd[i * d + off..i * d + off + dh], &mut gk[j * d + off..j * d + off + dh]);
                        }
                    }
                }
                acc(*q, &mut |o| kernels::axpy(T::one(), &gq, o));
                acc(*k, &mut |o| kernels::axpy(T::one(), &gk, o));
                acc(*v, &mut |o| kernels::axpy(T::one(), &gv, o));
            }
            Op::Nll {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = shp(*logits)[1];
                acc(*logits, &mut |gl| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let c = g[0] * w;
                        let prow = &probs[r * vocab..(r + 1) * vocab];
                        kernels::axpy(c, prow, &mut gl[r * vocab..(r + 1) * vocab]);
                        gl[r * vocab + t] -= c;
                    }
                });
            }
            Op::SoftNll {
                logits,
                soft,
                weights,
                probs,
            } => {
                let vocab = shp(*logits)[1];
                acc(*logits, &mut |gl| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let c = g[0] * w;
                        let q = &soft[r * vocab..(r + 1) * vocab];
                        let mass: T = q.iter().copied().sum();
                        let prow = &probs[r * vocab..(r + 1) * vocab];
                        let grow = &mut gl[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            grow[j] += c * (mass * prow[j] - q[j]);
                        }
                    }
                });
            }
            Op::SqErr { a, b, scale } => {
                let two = T::of(2.0) * *scale * g[0];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += two * (x - y);
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= two * (x - y);
                    }
                });
            }
        }
    }
}
