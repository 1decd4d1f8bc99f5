//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a dynamic tape: every operation appends a node holding the
//! forward value and enough information to run its local gradient rule.
//! [`Graph::backward`] consumes the tape, walks it in reverse creation order
//! (which is a reverse topological order by construction) and accumulates
//! gradients into every `requires_grad` leaf exactly once.
//!
//! The op set is deliberately small: just what a pre-norm transformer with a
//! per-position sigmoid head needs. There is no broadcasting beyond bias-add
//! and scalar ops.

mod kernels;

pub mod gradcheck;

use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("id {id} out of range for table with {rows} rows")]
    IndexOutOfRange { id: usize, rows: usize },
    #[error("{op} requires a non-empty shape with positive dimensions")]
    EmptyShape { op: &'static str },
    #[error("data length {len} does not match shape product {numel}")]
    DataLength { len: usize, numel: usize },
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
}

/// Handle to a node in one [`Graph`]. Ids are not valid across graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// A dense tensor value recorded on the tape.
#[derive(Clone, Debug)]
pub struct Tensor<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<S>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Attention mask over a length-`t` sequence; entry `(i, j)` says whether
/// query position `i` may attend to key position `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    t: usize,
    kind: MaskKind,
}

#[derive(Clone, Debug, PartialEq)]
enum MaskKind {
    Causal,
    Full,
    Explicit(Vec<bool>),
}

impl AttentionMask {
    /// Lower-triangular mask: position `i` sees `j <= i`.
    pub fn causal(t: usize) -> Self {
        AttentionMask {
            t,
            kind: MaskKind::Causal,
        }
    }

    /// Bidirectional mask: everything visible.
    pub fn full(t: usize) -> Self {
        AttentionMask {
            t,
            kind: MaskKind::Full,
        }
    }

    /// Arbitrary mask from a row-major `t x t` boolean table.
    pub fn explicit(t: usize, allowed: Vec<bool>) -> Result<Self, TensorError> {
        if allowed.len() != t * t {
            return Err(TensorError::DataLength {
                len: allowed.len(),
                numel: t * t,
            });
        }
        Ok(AttentionMask {
            t,
            kind: MaskKind::Explicit(allowed),
        })
    }

    pub fn seq_len(&self) -> usize {
        self.t
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        match &self.kind {
            MaskKind::Causal => j <= i,
            MaskKind::Full => true,
            MaskKind::Explicit(v) => v[i * self.t + j],
        }
    }
}

/// Recorded operations. Payloads carry what the gradient rule needs.
#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: S },
    BiasAdd { x: TensorId, b: TensorId },
    Sigmoid { x: TensorId },
    Gelu { x: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: S },
    Embedding { table: TensorId, ids: Vec<usize> },
    AttnScores { q: TensorId, k: TensorId, n_heads: usize },
    MaskedSoftmaxRows { x: TensorId, mask: AttentionMask },
    AttnContext { probs: TensorId, v: TensorId, n_heads: usize },
    SliceRows { x: TensorId, start: usize },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    BceWithLogits { logits: TensorId, targets: Vec<S>, weights: Vec<S> },
}

/// Gradients produced by one backward pass, indexed by [`TensorId`].
pub struct Gradients<S: Scalar> {
    slots: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: TensorId) -> Option<&[S]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Vec<S>> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}

/// Dynamic computation tape. Single-threaded recording; freed by `backward`.
pub struct Graph<S: Scalar> {
    tensors: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            tensors: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    /// True when every value of `id` is finite.
    pub fn is_finite(&self, id: TensorId) -> bool {
        self.tensors[id.0].data.iter().all(|v| v.is_finite())
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool, op: Op<S>) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = TensorId(self.tensors.len());
        self.tensors.push(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad,
            grad: None,
        });
        self.ops.push(op);
        id
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.tensors[id.0].requires_grad)
    }

    fn validate_shape(shape: &[usize], op: &'static str) -> Result<(), TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::EmptyShape { op });
        }
        Ok(())
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn leaf(
        &mut self,
        data: Vec<S>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        self.leaf_shared(Arc::new(data), shape, requires_grad)
    }

    /// Leaf over shared storage; lets model parameters join a tape without a copy.
    pub fn leaf_shared(
        &mut self,
        data: Arc<Vec<S>>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        Self::validate_shape(shape, "leaf")?;
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength {
                len: data.len(),
                numel,
            });
        }
        let id = TensorId(self.tensors.len());
        self.tensors.push(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: None,
        });
        self.ops.push(Op::Leaf);
        Ok(id)
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, data: Vec<S>, shape: &[usize]) -> Result<TensorId, TensorError> {
        self.leaf(data, shape, false)
    }

    // ── Ops ─────────────────────────────────────────────────────────

    /// `a[m x k] @ b[k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(self.data(a), self.data(b), m, k, n, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, vec![m, n], rg, Op::MatMul { a, b }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, shape, rg, Op::Add { a, b }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, shape, rg, Op::Mul { a, b }))
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, x: TensorId, c: S) -> TensorId {
        let out: Vec<S> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.tensors[x.0].requires_grad;
        self.push(out, shape, rg, Op::Scale { x, c })
    }

    /// `x[r x d] + b[d]`, broadcast over rows.
    pub fn bias_add(&mut self, x: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                detail: format!("{sx:?} + {sb:?}"),
            });
        }
        let d = sx[1];
        let bv = self.data(b);
        let out: Vec<S> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % d])
            .collect();
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(out, sx, rg, Op::BiasAdd { x, b }))
    }

    /// Elementwise logistic function, stable over the full float range.
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let out: Vec<S> = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.tensors[x.0].requires_grad;
        self.push(out, shape, rg, Op::Sigmoid { x })
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<S> = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.tensors[x.0].requires_grad;
        self.push(out, shape, rg, Op::Gelu { x })
    }

    /// Normalize the last axis to zero mean / unit variance, then apply
    /// `gain` and `bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: S,
    ) -> Result<TensorId, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or(TensorError::EmptyShape { op: "layer_norm" })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    sx,
                    self.shape(gain),
                    self.shape(bias)
                ),
            });
        }
        if eps <= S::zero() {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: "eps must be positive".to_string(),
            });
        }
        let mut out = vec![S::zero(); self.data(x).len()];
        kernels::layer_norm(self.data(x), self.data(gain), self.data(bias), d, eps, &mut out);
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(out, sx, rg, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Gather rows of `table` by id; backward scatter-adds into the table.
    pub fn embedding_lookup(
        &mut self,
        table: TensorId,
        ids: &[usize],
    ) -> Result<TensorId, TensorError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_lookup",
                detail: format!("table shape {st:?}"),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::EmptyShape {
                op: "embedding_lookup",
            });
        }
        let (rows, d) = (st[0], st[1]);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { id, rows });
            }
        }
        let data = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        let rg = self.tensors[table.0].requires_grad;
        Ok(self.push(
            out,
            vec![ids.len(), d],
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-head scaled dot-product scores: `q[T x d], k[T x d] -> [h x T x T]`
    /// with each head's scores divided by `sqrt(d / h)`.
    pub fn attn_scores(
        &mut self,
        q: TensorId,
        k: TensorId,
        n_heads: usize,
    ) -> Result<TensorId, TensorError> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        if sq.len() != 2 || sq != sk {
            return Err(TensorError::ShapeMismatch {
                op: "attn_scores",
                detail: format!("q {sq:?}, k {sk:?}"),
            });
        }
        let (t, d) = (sq[0], sq[1]);
        if n_heads == 0 || d % n_heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attn_scores",
                detail: format!("d_model {d} not divisible by n_heads {n_heads}"),
            });
        }
        let mut out = vec![S::zero(); n_heads * t * t];
        kernels::attn_scores(self.data(q), self.data(k), t, d, n_heads, &mut out);
        let rg = self.any_grad(&[q, k]);
        Ok(self.push(out, vec![n_heads, t, t], rg, Op::AttnScores { q, k, n_heads }))
    }

    /// Softmax over the last axis of `[... x T x T]` scores with masked
    /// entries forced to exactly zero. Errors on a fully masked row.
    pub fn masked_softmax_rows(
        &mut self,
        x: TensorId,
        mask: &AttentionMask,
    ) -> Result<TensorId, TensorError> {
        let sx = self.shape(x).to_vec();
        let t = mask.seq_len();
        let nd = sx.len();
        if nd < 2 || sx[nd - 1] != t || sx[nd - 2] != t {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax_rows",
                detail: format!("scores {sx:?} vs mask {t}x{t}"),
            });
        }
        let batch: usize = sx[..nd - 2].iter().product::<usize>().max(1);
        let mut out = vec![S::zero(); self.data(x).len()];
        kernels::masked_softmax_rows(self.data(x), batch, t, mask, &mut out)?;
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push(
            out,
            sx,
            rg,
            Op::MaskedSoftmaxRows {
                x,
                mask: mask.clone(),
            },
        ))
    }

    /// Per-head convex combination of value rows:
    /// `probs[h x T x T], v[T x d] -> [T x d]`, heads concatenated.
    pub fn attn_context(
        &mut self,
        probs: TensorId,
        v: TensorId,
        n_heads: usize,
    ) -> Result<TensorId, TensorError> {
        let sp = self.shape(probs).to_vec();
        let sv = self.shape(v).to_vec();
        if sp.len() != 3 || sv.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "attn_context",
                detail: format!("probs {sp:?}, v {sv:?}"),
            });
        }
        let (h, t, d) = (sp[0], sp[1], sv[1]);
        if h != n_heads || sp[2] != t || sv[0] != t || d % n_heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attn_context",
                detail: format!("probs {sp:?}, v {sv:?}, n_heads {n_heads}"),
            });
        }
        let mut out = vec![S::zero(); t * d];
        kernels::attn_context(self.data(probs), self.data(v), t, d, n_heads, &mut out);
        let rg = self.any_grad(&[probs, v]);
        Ok(self.push(out, vec![t, d], rg, Op::AttnContext { probs, v, n_heads }))
    }

    /// Contiguous row slice of a 2-D tensor.
    pub fn slice_rows(
        &mut self,
        x: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || start + len > sx[0] || len == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("{sx:?} rows {start}..{}", start + len),
            });
        }
        let d = sx[1];
        let out = self.data(x)[start * d..(start + len) * d].to_vec();
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push(out, vec![len, d], rg, Op::SliceRows { x, start }))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: S = self.data(x).iter().copied().sum();
        let rg = self.tensors[x.0].requires_grad;
        self.push(vec![s], vec![1], rg, Op::SumAll { x })
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = S::from_f64(self.data(x).len() as f64);
        let s: S = self.data(x).iter().copied().sum();
        let rg = self.tensors[x.0].requires_grad;
        self.push(vec![s / n], vec![1], rg, Op::MeanAll { x })
    }

    /// Mean weighted binary cross-entropy over a `[T x C]` logit matrix
    /// against one fixed C-vector of targets, computed in log space:
    /// `L = (1 / (T*C)) * sum_{t,c} w_c * (y_c*softplus(-x) + (1-y_c)*softplus(x))`.
    pub fn bce_with_logits(
        &mut self,
        logits: TensorId,
        targets: &[S],
        weights: &[S],
    ) -> Result<TensorId, TensorError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || targets.len() != sl[1] || weights.len() != sl[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!(
                    "logits {sl:?}, targets {}, weights {}",
                    targets.len(),
                    weights.len()
                ),
            });
        }
        if self
            .data(logits)
            .iter()
            .chain(targets.iter())
            .any(|v| !v.is_finite())
        {
            return Err(TensorError::NonFinite {
                op: "bce_with_logits",
            });
        }
        let (t, c) = (sl[0], sl[1]);
        let loss = kernels::bce_with_logits(self.data(logits), targets, weights, t, c);
        let rg = self.tensors[logits.0].requires_grad;
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar `loss`. Consumes the tape, so a second
    /// backward without a fresh forward is impossible by construction.
    pub fn backward(mut self, loss: TensorId) -> Result<Gradients<S>, TensorError> {
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape != [1] {
            return Err(TensorError::NonScalarLoss { shape: loss_shape });
        }
        let n = self.tensors.len();
        let mut slots: Vec<Option<Vec<S>>> = vec![None; n];
        slots[loss.0] = Some(vec![S::one()]);

        for i in (0..n).rev() {
            if !self.tensors[i].requires_grad {
                continue;
            }
            let grad = match slots[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            match op {
                Op::Leaf => {
                    slots[i] = Some(grad);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.tensors[a.0].shape[0], self.tensors[a.0].shape[1]);
                    let nn = self.tensors[b.0].shape[1];
                    if self.tensors[a.0].requires_grad {
                        let da = kernels::matmul_grad_a(&grad, &self.tensors[b.0].data, m, k, nn);
                        accumulate(&mut slots, a, da, m * k);
                    }
                    if self.tensors[b.0].requires_grad {
                        let db = kernels::matmul_grad_b(&grad, &self.tensors[a.0].data, m, k, nn);
                        accumulate(&mut slots, b, db, k * nn);
                    }
                }
                Op::Add { a, b } => {
                    for id in [a, b] {
                        if self.tensors[id.0].requires_grad {
                            let g = grad.clone();
                            let len = self.tensors[id.0].data.len();
                            accumulate(&mut slots, id, g, len);
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.tensors[a.0].requires_grad {
                        let da: Vec<S> = grad
                            .iter()
                            .zip(self.tensors[b.0].data.iter())
                            .map(|(&g, &v)| g * v)
                            .collect();
                        let len = self.tensors[a.0].data.len();
                        accumulate(&mut slots, a, da, len);
                    }
                    if self.tensors[b.0].requires_grad {
                        let db: Vec<S> = grad
                            .iter()
                            .zip(self.tensors[a.0].data.iter())
                            .map(|(&g, &v)| g * v)
                            .collect();
                        let len = self.tensors[b.0].data.len();
                        accumulate(&mut slots, b, db, len);
                    }
                }
                Op::Scale { x, c } => {
                    if self.tensors[x.0].requires_grad {
                        let dx: Vec<S> = grad.iter().map(|&g| g * c).collect();
                        let len = self.tensors[x.0].data.len();
                        accumulate(&mut slots, x, dx, len);
                    }
                }
                Op::BiasAdd { x, b } => {
                    let d = self.tensors[b.0].shape[0];
                    if self.tensors[x.0].requires_grad {
                        let g = grad.clone();
                        let len = self.tensors[x.0].data.len();
                        accumulate(&mut slots, x, g, len);
                    }
                    if self.tensors[b.0].requires_grad {
                        let mut db = vec![S::zero(); d];
                        for (i, &g) in grad.iter().enumerate() {
                            db[i % d] += g;
                        }
                        accumulate(&mut slots, b, db, d);
                    }
                }
                Op::Sigmoid { x } => {
                    if self.tensors[x.0].requires_grad {
                        let out = &self.tensors[i].data;
                        let dx: Vec<S> = grad
                            .iter()
                            .zip(out.iter())
                            .map(|(&g, &s)| g * s * (S::one() - s))
                            .collect();
                        let len = self.tensors[x.0].data.len();
                        accumulate(&mut slots, x, dx, len);
                    }
                }
                Op::Gelu { x } => {
                    if self.tensors[x.0].requires_grad {
                        let dx: Vec<S> = grad
                            .iter()
                            .zip(self.tensors[x.0].data.iter())
                            .map(|(&g, &v)| g * kernels::gelu_grad(v))
                            .collect();
                        let len = self.tensors[x.0].data.len();
                        accumulate(&mut slots, x, dx, len);
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = self.tensors[gain.0].shape[0];
                    let (dx, dgain, dbias) = kernels::layer_norm_grad(
                        &grad,
                        &self.tensors[x.0].data,
                        &self.tensors[gain.0].data,
                        d,
                        eps,
                    );
                    if self.tensors[x.0].requires_grad {
                        let len = self.tensors[x.0].data.len();
                        accumulate(&mut slots, x, dx, len);
                    }
                    if self.tensors[gain.0].requires_grad {
                        accumulate(&mut slots, gain, dgain, d);
                    }
                    if self.tensors[bias.0].requires_grad {
                        accumulate(&mut slots, bias, dbias, d);
                    }
                }
                Op::Embedding { table, ids } => {
                    if self.tensors[table.0].requires_grad {
                        let d = self.tensors[table.0].shape[1];
                        let rows = self.tensors[table.0].shape[0];
                        let mut dt = vec![S::zero(); rows * d];
                        for (pos, &id) in ids.iter().enumerate() {
                            for u in 0..d {
                                dt[id * d + u] += grad[pos * d + u];
                            }
                        }
                        accumulate(&mut slots, table, dt, rows * d);
                    }
                }
                Op::AttnScores { q, k, n_heads } => {
                    let (t, d) = (self.tensors[q.0].shape[0], self.tensors[q.0].shape[1]);
                    if self.tensors[q.0].requires_grad {
                        let dq = kernels::attn_scores_grad_q(
                            &grad,
                            &self.tensors[k.0].data,
                            t,
                            d,
                            n_heads,
                        );
                        accumulate(&mut slots, q, dq, t * d);
                    }
                    if self.tensors[k.0].requires_grad {
                        let dk = kernels::attn_scores_grad_k(
                            &grad,
                            &self.tensors[q.0].data,
                            t,
                            d,
                            n_heads,
                        );
                        accumulate(&mut slots, k, dk, t * d);
                    }
                }
                Op::MaskedSoftmaxRows { x, mask } => {
                    if self.tensors[x.0].requires_grad {
                        let t = mask.seq_len();
                        let batch = self.tensors[i].data.len() / (t * t);
                        let dx =
                            kernels::softmax_rows_grad(&grad, &self.tensors[i].data, batch, t);
                        let len = self.tensors[x.0].data.len();
                        accumulate(&mut slots, x, dx, len);
                    }
                }
                Op::AttnContext { probs, v, n_heads } => {
                    let (t, d) = (self.tensors[v.0].shape[0], self.tensors[v.0].shape[1]);
                    if self.tensors[probs.0].requires_grad {
                        let dp = kernels::attn_context_grad_probs(
                            &grad,
                            &self.tensors[v.0].data,
                            t,
                            d,
                            n_heads,
                        );
                        accumulate(&mut slots, probs, dp, n_heads * t * t);
                    }
                    if self.tensors[v.0].requires_grad {
                        let dv = kernels::attn_context_grad_v(
                            &grad,
                            &self.tensors[probs.0].data,
                            t,
                            d,
                            n_heads,
                        );
                        accumulate(&mut slots, v, dv, t * d);
                    }
                }
                Op::SliceRows { x, start } => {
                    if self.tensors[x.0].requires_grad {
                        let d = self.tensors[x.0].shape[1];
                        let len = self.tensors[x.0].data.len();
                        let mut dx = vec![S::zero(); len];
                        dx[start * d..start * d + grad.len()].copy_from_slice(&grad);
                        accumulate(&mut slots, x, dx, len);
                    }
                }
                Op::SumAll { x } => {
                    if self.tensors[x.0].requires_grad {
                        let len = self.tensors[x.0].data.len();
                        let dx = vec![grad[0]; len];
                        accumulate(&mut slots, x, dx, len);
                    }
                }
                Op::MeanAll { x } => {
                    if self.tensors[x.0].requires_grad {
                        let len = self.tensors[x.0].data.len();
                        let g = grad[0] / S::from_f64(len as f64);
                        accumulate(&mut slots, x, vec![g; len], len);
                    }
                }
                Op::BceWithLogits {
                    logits,
                    targets,
                    weights,
                } => {
                    if self.tensors[logits.0].requires_grad {
                        let c = targets.len();
                        let t = self.tensors[logits.0].shape[0];
                        let dl = kernels::bce_with_logits_grad(
                            grad[0],
                            &self.tensors[logits.0].data,
                            &targets,
                            &weights,
                            t,
                            c,
                        );
                        accumulate(&mut slots, logits, dl, t * c);
                    }
                }
            }
        }

        // Keep only leaf gradients; intermediate slots were consumed above.
        Ok(Gradients { slots })
    }
}

/// Numerically stable logistic function on plain scalars.
#[inline]
pub fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    kernels::sigmoid(v)
}

/// `ln(1 + e^x)` on plain scalars, without overflow.
#[inline]
pub fn softplus_scalar<S: Scalar>(v: S) -> S {
    kernels::softplus(v)
}

/// Accumulate `contribution` into the gradient slot for `id`.
fn accumulate<S: Scalar>(
    slots: &mut [Option<Vec<S>>],
    id: TensorId,
    contribution: Vec<S>,
    len: usize,
) {
    debug_assert_eq!(contribution.len(), len);
    match &mut slots[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => {
            *slot = Some(contribution);
        }
    }
}

#[cfg(test)]
mod tests;
