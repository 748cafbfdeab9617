//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op as a node holding its forward value and the
//! data its gradient rule needs. Nodes can only reference earlier nodes, so
//! the tape is always in topological order and backward is a single reverse
//! sweep.

use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Label value excluded from cross-entropy.
pub const IGNORE_INDEX: i64 = -100;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys each query may attend to, per batch row.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionMask {
    /// Every token sees every token.
    Full { batch: usize, len: usize },
    /// Tokens see tokens with the same non-zero segment id. Segment 0 marks
    /// padding, which sees only itself.
    Segments {
        batch: usize,
        len: usize,
        ids: Vec<u32>,
    },
    /// Explicit `[batch, len, len]` visibility.
    Dense {
        batch: usize,
        len: usize,
        visible: Vec<bool>,
    },
}

impl AttentionMask {
    pub fn full(batch: usize, len: usize) -> Self {
        AttentionMask::Full { batch, len }
    }

    pub fn segments(batch: usize, len: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != batch * len {
            return Err(Error::Dimension {
                op: "attention_mask",
                left: vec![batch, len],
                right: vec![ids.len()],
            });
        }
        Ok(AttentionMask::Segments { batch, len, ids })
    }

    /// Rejects masks where some query has no visible key.
    pub fn dense(batch: usize, len: usize, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != batch * len * len {
            return Err(Error::Dimension {
                op: "attention_mask",
                left: vec![batch, len, len],
                right: vec![visible.len()],
            });
        }
        for (r, row) in visible.chunks(len).enumerate() {
            if !row.iter().any(|&v| v) {
                return Err(Error::contract(format!(
                    "query {} of batch row {} has no visible key",
                    r % len,
                    r / len
                )));
            }
        }
        Ok(AttentionMask::Dense {
            batch,
            len,
            visible,
        })
    }

    pub fn batch(&self) -> usize {
        match self {
            AttentionMask::Full { batch, .. }
            | AttentionMask::Segments { batch, .. }
            | AttentionMask::Dense { batch, .. } => *batch,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AttentionMask::Full { len, .. }
            | AttentionMask::Segments { len, .. }
            | AttentionMask::Dense { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        match self {
            AttentionMask::Full { .. } => true,
            AttentionMask::Segments { len, ids, .. } => {
                let si = ids[b * len + i];
                i == j || (si != 0 && si == ids[b * len + j])
            }
            AttentionMask::Dense { len, visible, .. } => visible[(b * len + i) * len + j],
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    AddBias { a: Var, bias: Var },
    Silu { a: Var },
    Softmax { a: Var },
    Sum { a: Var },
    RmsNorm { x: Var, gamma: Var, inv_rms: Vec<T> },
    Rope { x: Var, cos: Vec<T>, sin: Vec<T> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var },
    Attention { q: Var, k: Var, v: Var, probs: Vec<T>, scale: T },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<i64>, probs: Vec<T>, count: usize },
    SelectRows { a: Var, rows: Vec<usize> },
    PickLast { a: Var, index: usize },
    Reshape { a: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Build it op by op, then call [`Graph::backward`]
/// once on a scalar node.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        tensor.clear_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient regardless of the tensor's flag.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let mut t = tensor.clone();
        t.clear_grad();
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the loss w.r.t. a leaf, available after backward.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grad(v)?;
        let mut t = Tensor::from_vec(self.value(v).shape(), g.to_vec()).ok()?;
        t.set_requires_grad(false);
        Some(t)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::contract(format!("variable {} does not belong to this graph", v.0)));
        }
        if self.backward_done {
            return Err(Error::State("graph already consumed by backward".into()));
        }
        Ok(())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn make(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        Tensor::from_vec(&shape, data).expect("op produced consistent shape")
    }

    /// Matrix product. `a` may carry leading batch dimensions, which are
    /// flattened into rows: `[.., k] · [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.nodes[a.0].value.numel() / k;
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Self::make(shape, out), Op::MatMul { a, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Self::make(self.shape(a).to_vec(), out), Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Self::make(self.shape(a).to_vec(), out), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.check(a)?;
        let out = self.data(a).iter().map(|&x| x * factor).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Self::make(self.shape(a).to_vec(), out), Op::Scale { a, factor }, rg))
    }

    /// Adds a `[n]` bias to every row of `[.., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.check(a)?;
        self.check(bias)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Dimension {
                op: "add_bias",
                left: sa,
                right: sb,
            });
        }
        let n = sb[0];
        let bd = self.data(bias);
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % n])
            .collect();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Self::make(sa, out), Op::AddBias { a, bias }, rg))
    }

    /// `z · sigmoid(z)` elementwise.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.data(a).iter().map(|&z| z * kernels::sigmoid(z)).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Self::make(self.shape(a).to_vec(), out), Op::Silu { a }, rg))
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        let n = shape[shape.len() - 1];
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Self::make(shape, out), Op::Softmax { a }, rg))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let total = self.data(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(total), Op::Sum { a }, rg))
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ gamma` per row of the last dimension.
    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(gamma).to_vec());
        let d = sx[sx.len() - 1];
        if sg != [d] {
            return Err(Error::Dimension {
                op: "rmsnorm",
                left: sx,
                right: sg,
            });
        }
        let xd = self.data(x);
        let gd = self.data(gamma);
        let rows = xd.len() / d;
        let mut out = Vec::with_capacity(xd.len());
        let mut inv_rms = Vec::with_capacity(rows);
        let dn = T::of(d as f64);
        for row in xd.chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(gd).map(|(&v, &g)| v * r * g));
        }
        let rg = self.rg(&[x, gamma]);
        Ok(self.push(Self::make(sx, out), Op::RmsNorm { x, gamma, inv_rms }, rg))
    }

    /// Rotary position embedding on `[B, H, L, head_dim]` with one position
    /// per `(batch row, token)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64) -> Result<Var> {
        let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
        self.rope_at(x, &pos, theta)
    }

    /// [`Graph::rope`] with real-valued positions.
    pub fn rope_at(&mut self, x: Var, positions: &[f64], theta: f64) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension {
                op: "rope",
                left: s,
                right: vec![],
            });
        }
        let (b, h, l, hd) = (s[0], s[1], s[2], s[3]);
        if hd % 2 != 0 {
            return Err(Error::config(format!("rotary embedding needs an even head_dim, got {hd}")));
        }
        if positions.len() != b * l {
            return Err(Error::Dimension {
                op: "rope",
                left: vec![b, l],
                right: vec![positions.len()],
            });
        }
        if positions.iter().any(|&p| p < 0.0) {
            return Err(Error::contract("rotary positions must be non-negative"));
        }
        let (cos, sin) = kernels::rope_tables::<T>(positions, hd, theta);
        let half = hd / 2;
        let mut out = self.data(x).to_vec();
        for bi in 0..b {
            for hi in 0..h {
                for li in 0..l {
                    let off = ((bi * h + hi) * l + li) * hd;
                    let t = (bi * l + li) * half;
                    kernels::rotate_pairs(&mut out[off..off + hd], &cos[t..t + half], &sin[t..t + half], false);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Self::make(s, out), Op::Rope { x, cos, sin }, rg))
    }

    /// `[B, L, H·hd] -> [B, H, L, hd]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::Dimension {
                op: "split_heads",
                left: s,
                right: vec![heads],
            });
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let hd = d / heads;
        let out = permute_heads(self.data(x), b, l, heads, hd, true);
        let rg = self.rg(&[x]);
        Ok(self.push(Self::make(vec![b, heads, l, hd], out), Op::SplitHeads { x, heads }, rg))
    }

    /// `[B, H, L, hd] -> [B, L, H·hd]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension {
                op: "merge_heads",
                left: s,
                right: vec![],
            });
        }
        let (b, h, l, hd) = (s[0], s[1], s[2], s[3]);
        let out = permute_heads(self.data(x), b, l, h, hd, false);
        let rg = self.rg(&[x]);
        Ok(self.push(Self::make(vec![b, l, h * hd], out), Op::MergeHeads { x }, rg))
    }

    /// Scaled dot-product attention over `[B, H, L, hd]` inputs. Invisible
    /// pairs get [`Real::masked_logit`] before the softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Var> {
        self.check(q)?;
        self.check(k)?;
        self.check(v)?;
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let s = self.shape(q).to_vec();
        if s.len() != 4 || mask.batch() != s[0] || mask.len() != s[2] {
            return Err(Error::Dimension {
                op: "attention",
                left: s,
                right: vec![mask.batch(), mask.len()],
            });
        }
        let (b, h, l, hd) = (s[0], s[1], s[2], s[3]);
        let scale = T::one() / T::of(hd as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); b * h * l * l];
        let mut out = vec![T::zero(); b * h * l * hd];
        let neg = T::masked_logit();
        for bi in 0..b {
            for hi in 0..h {
                let base = (bi * h + hi) * l;
                for i in 0..l {
                    let qi = &qd[(base + i) * hd..(base + i + 1) * hd];
                    let prow = &mut probs[(base + i) * l..(base + i + 1) * l];
                    for (j, p) in prow.iter_mut().enumerate() {
                        *p = if mask.visible(bi, i, j) {
                            kernels::dot(qi, &kd[(base + j) * hd..(base + j + 1) * hd]) * scale
                        } else {
                            neg
                        };
                    }
                    kernels::softmax_in_place(prow);
                    let orow = &mut out[(base + i) * hd..(base + i + 1) * hd];
                    for (j, &p) in prow.iter().enumerate() {
                        if p == T::zero() {
                            continue;
                        }
                        let vj = &vd[(base + j) * hd..(base + j + 1) * hd];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(Self::make(s, out), Op::Attention { q, k, v, probs, scale }, rg))
    }

    /// Row lookup: `table[V, d]` indexed by `ids` shaped `ids_shape`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        self.check(table)?;
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Dimension {
                op: "embedding",
                left: st,
                right: ids_shape.to_vec(),
            });
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::input(format!("token id {bad} out of range for vocab size {vocab}")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(
            Self::make(shape, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy over rows of `logits[.., V]` whose label is not
    /// [`IGNORE_INDEX`].
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape(logits).to_vec();
        let vocab = s[s.len() - 1];
        let rows = self.nodes[logits.0].value.numel() / vocab;
        if labels.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: s,
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&y| y != IGNORE_INDEX && (y < 0 || y as usize >= vocab))
        {
            return Err(Error::input(format!("label {bad} outside [0, {vocab})")));
        }
        let count = labels.iter().filter(|&&y| y != IGNORE_INDEX).count();
        if count == 0 {
            return Err(Error::contract("cross-entropy needs at least one labeled position"));
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            if y == IGNORE_INDEX {
                continue;
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            total += lse - row[y as usize];
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            prow.copy_from_slice(row);
            kernels::softmax_in_place(prow);
        }
        let loss = total / T::of(count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Gathers rows of `a` viewed as `[N, d]`.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        let d = s[s.len() - 1];
        let n = self.nodes[a.0].value.numel() / d;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::contract(format!("row selection out of range for {n} rows")));
        }
        let ad = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&ad[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Self::make(vec![rows.len(), d], out),
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Picks one coordinate of the last dimension: `[.., n] -> [..]`.
    pub fn pick_last(&mut self, a: Var, index: usize) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        let n = s[s.len() - 1];
        if index >= n {
            return Err(Error::contract(format!("index {index} out of range for last dim {n}")));
        }
        let out: Vec<T> = self.data(a).chunks(n).map(|row| row[index]).collect();
        let mut shape = s[..s.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Self::make(shape, out), Op::PickLast { a, index }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Leaf gradients stay readable through [`Graph::grad`]. A graph can be
    /// differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already called on this graph".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss variable does not belong to this graph"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (var, delta) in self.vjp(idx, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn vjp(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.nodes[a.0].value.numel() / k;
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, kernels::matmul_bt(g, self.data(*b), m, n, k)));
                }
                if wants(*b) {
                    out.push((*b, kernels::matmul_at(self.data(*a), g, m, k, n)));
                }
                out
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(bd).map(|(&gi, &y)| gi * y).collect()),
                    (*b, g.iter().zip(ad).map(|(&gi, &x)| gi * x).collect()),
                ]
            }
            Op::Scale { a, factor } => vec![(*a, g.iter().map(|&gi| gi * *factor).collect())],
            Op::AddBias { a, bias } => {
                let n = self.shape(*bias)[0];
                let mut gb = vec![T::zero(); n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(acc, &x)| *acc += x);
                }
                vec![(*a, g.to_vec()), (*bias, gb)]
            }
            Op::Silu { a } => {
                let ga = self
                    .data(*a)
                    .iter()
                    .zip(g)
                    .map(|(&z, &gi)| {
                        let s = kernels::sigmoid(z);
                        gi * s * (T::one() + z * (T::one() - s))
                    })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let n = node.value.shape()[node.value.shape().len() - 1];
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let inner = kernels::dot(yr, gr);
                    ga.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - inner)));
                }
                vec![(*a, ga)]
            }
            Op::Sum { a } => vec![(*a, vec![g[0]; self.nodes[a.0].value.numel()])],
            Op::RmsNorm { x, gamma, inv_rms } => {
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let d = gd.len();
                let dn = T::of(d as f64);
                let mut gx = Vec::with_capacity(xd.len());
                let mut gg = vec![T::zero(); d];
                for ((xr, gr), &r) in xd.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                    let mut proj = T::zero();
                    for k in 0..d {
                        proj += gr[k] * gd[k] * xr[k];
                        gg[k] += gr[k] * xr[k] * r;
                    }
                    let c = r * r * r * proj / dn;
                    gx.extend((0..d).map(|k| r * gr[k] * gd[k] - c * xr[k]));
                }
                vec![(*x, gx), (*gamma, gg)]
            }
            Op::Rope { x, cos, sin } => {
                let s = self.shape(*x);
                let (b, h, l, hd) = (s[0], s[1], s[2], s[3]);
                let half = hd / 2;
                let mut gx = g.to_vec();
                for bi in 0..b {
                    for hi in 0..h {
                        for li in 0..l {
                            let off = ((bi * h + hi) * l + li) * hd;
                            let t = (bi * l + li) * half;
                            kernels::rotate_pairs(&mut gx[off..off + hd], &cos[t..t + half], &sin[t..t + half], true);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                let (b, l, d) = (s[0], s[1], s[2]);
                vec![(*x, permute_heads(g, b, l, *heads, d / heads, false))]
            }
            Op::MergeHeads { x } => {
                let s = self.shape(*x);
                vec![(*x, permute_heads(g, s[0], s[2], s[1], s[3], true))]
            }
            Op::Attention { q, k, v, probs, scale } => {
                let s = self.shape(*q);
                let (b, h, l, hd) = (s[0], s[1], s[2], s[3]);
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut gq = vec![T::zero(); qd.len()];
                let mut gk = vec![T::zero(); kd.len()];
                let mut gv = vec![T::zero(); vd.len()];
                let mut dp = vec![T::zero(); l];
                for bh in 0..b * h {
                    let base = bh * l;
                    for i in 0..l {
                        let prow = &probs[(base + i) * l..(base + i + 1) * l];
                        let gi = &g[(base + i) * hd..(base + i + 1) * hd];
                        let mut inner = T::zero();
                        for j in 0..l {
                            let p = prow[j];
                            if p == T::zero() {
                                dp[j] = T::zero();
                                continue;
                            }
                            let vj = &vd[(base + j) * hd..(base + j + 1) * hd];
                            dp[j] = kernels::dot(gi, vj);
                            inner += p * dp[j];
                            let gvj = &mut gv[(base + j) * hd..(base + j + 1) * hd];
                            for (acc, &x) in gvj.iter_mut().zip(gi) {
                                *acc += p * x;
                            }
                        }
                        let qi = &qd[(base + i) * hd..(base + i + 1) * hd];
                        for j in 0..l {
                            let p = prow[j];
                            if p == T::zero() {
                                continue;
                            }
                            let ds = p * (dp[j] - inner) * *scale;
                            let kj = &kd[(base + j) * hd..(base + j + 1) * hd];
                            let gqi = &mut gq[(base + i) * hd..(base + i + 1) * hd];
                            for (acc, &x) in gqi.iter_mut().zip(kj) {
                                *acc += ds * x;
                            }
                            let gkj = &mut gk[(base + j) * hd..(base + j + 1) * hd];
                            for (acc, &x) in gkj.iter_mut().zip(qi) {
                                *acc += ds * x;
                            }
                        }
                    }
                }
                vec![(*q, gq), (*k, gk), (*v, gv)]
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![T::zero(); self.nodes[table.0].value.numel()];
                for (n, &i) in ids.iter().enumerate() {
                    let row = &mut gt[i * d..(i + 1) * d];
                    row.iter_mut().zip(&g[n * d..(n + 1) * d]).for_each(|(a, &x)| *a += x);
                }
                vec![(*table, gt)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let s = self.shape(*logits);
                let vocab = s[s.len() - 1];
                let scale = g[0] / T::of(*count as f64);
                let mut gl = vec![T::zero(); probs.len()];
                for (r, &y) in labels.iter().enumerate() {
                    if y == IGNORE_INDEX {
                        continue;
                    }
                    let row = &mut gl[r * vocab..(r + 1) * vocab];
                    for (dst, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *dst = p * scale;
                    }
                    row[y as usize] -= scale;
                }
                vec![(*logits, gl)]
            }
            Op::SelectRows { a, rows } => {
                let d = node.value.shape()[1];
                let mut ga = vec![T::zero(); self.nodes[a.0].value.numel()];
                for (n, &r) in rows.iter().enumerate() {
                    ga[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[n * d..(n + 1) * d])
                        .for_each(|(acc, &x)| *acc += x);
                }
                vec![(*a, ga)]
            }
            Op::PickLast { a, index } => {
                let s = self.shape(*a);
                let n = s[s.len() - 1];
                let mut ga = vec![T::zero(); self.nodes[a.0].value.numel()];
                for (r, &gi) in g.iter().enumerate() {
                    ga[r * n + index] = gi;
                }
                vec![(*a, ga)]
            }
            Op::Reshape { a } => vec![(*a, g.to_vec())],
        }
    }
}

/// Moves between `[B, L, H, hd]` (token-major) and `[B, H, L, hd]`
/// (head-major) layouts.
fn permute_heads<T: Real>(src: &[T], b: usize, l: usize, h: usize, hd: usize, to_heads: bool) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for li in 0..l {
            for hi in 0..h {
                let tok = ((bi * l + li) * h + hi) * hd;
                let head = ((bi * h + hi) * l + li) * hd;
                let (from, to) = if to_heads { (tok, head) } else { (head, tok) };
                out[to..to + hd].copy_from_slice(&src[from..from + hd]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let r = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(r).data(), &[5.0, 6.0, 7.0, 8.0]);
        let r = g.matmul(a, b).unwrap();
        assert_eq!(g.value(r).data(), &[19.0, 22.0, 43.0, 50.0]);
        let r = g.matmul(z, b).unwrap();
        assert!(g.value(r).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[0.0; 4]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
        let x = g.constant(t(&[1], &[123.4]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);
        let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = g.softmax_rows(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 5.0]).requiring_grad());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[3.0]).requiring_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        // d/dx sum(x·W) = row sums of W, broadcast over rows of x.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).requiring_grad());
        let w = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]));
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, 3.5, 6.0, 3.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).requiring_grad());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn dense_mask_rejects_blind_query() {
        let vis = vec![true, false, false, false];
        assert!(matches!(AttentionMask::dense(1, 2, vis), Err(Error::Contract(_))));
    }

    #[test]
    fn segment_padding_sees_only_itself() {
        let m = AttentionMask::segments(1, 3, vec![1, 0, 0]).unwrap();
        assert!(m.visible(0, 1, 1));
        assert!(!m.visible(0, 1, 2));
        assert!(!m.visible(0, 0, 1));
    }

    #[test]
    fn cross_entropy_needs_labels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            g.cross_entropy(x, &[IGNORE_INDEX, IGNORE_INDEX]),
            Err(Error::Contract(_))
        ));
        let l = g.cross_entropy(x, &[1, IGNORE_INDEX]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
    }
}
