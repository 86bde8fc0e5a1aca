//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed, not copied, and are deduplicated by address so a tensor used
//! several times accumulates a single gradient. Ops panic on shape
//! mismatches; callers validate user-facing shapes before recording.

use std::borrow::Cow;
use std::collections::HashMap;
use std::mem::size_of;

use crate::tensor::{add_matmul_at_b, dot, lit, matmul, matmul_a_bt, softmax_masked, Mat, Scalar};

pub type NodeId = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Mask applied to attention logits.
#[derive(Clone, Debug, Default)]
pub struct AttnMask {
    /// Keys whose flag is false are never attended to.
    pub keys: Option<Vec<bool>>,
    /// Query `i` may not attend to key `i`.
    pub exclude_diagonal: bool,
}

impl AttnMask {
    #[inline]
    fn allows(&self, query: usize, key: usize) -> bool {
        if self.exclude_diagonal && query == key {
            return false;
        }
        self.keys.as_ref().is_none_or(|k| k[key])
    }
}

enum Op<T> {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Gelu { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, stats: Vec<T> },
    Gather { table: NodeId, ids: Vec<usize> },
    MaskRows { x: NodeId, keep: Vec<bool> },
    Dropout { x: NodeId, scale: Vec<T> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<T> },
    MeanAttnWeights { q: NodeId, k: NodeId, heads: usize, probs: Vec<T> },
    RowsMax { x: NodeId, argmax: Vec<usize> },
    RowsMean { x: NodeId, start: usize, end: usize },
    RowsAttentive { x: NodeId, v: NodeId, start: usize, weights: Vec<T> },
    LayerMix { xs: Vec<NodeId>, row: usize, w: NodeId, weights: Vec<T> },
    Row { x: NodeId, row: usize },
    ConcatCols { a: NodeId, b: NodeId },
    StackRows { xs: Vec<NodeId> },
    ConvexMix { weights: NodeId, h: NodeId },
    CrossEntropy { scores: NodeId, gold: usize, probs: Vec<T> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Mat<T>>,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Mat<T>> {
        self.grads.get(id).and_then(Option::as_ref)
    }
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    params: HashMap<*const Mat<T>, NodeId>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id].value
    }

    /// Registers a borrowed parameter; repeated calls return the same node.
    pub fn param(&mut self, p: &'a Mat<T>) -> NodeId {
        let key = p as *const Mat<T>;
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(p),
            op: Op::Leaf,
        });
        let id = self.nodes.len() - 1;
        self.params.insert(key, id);
        id
    }

    /// Registers a constant input.
    pub fn input(&mut self, m: Mat<T>) -> NodeId {
        self.push(m, Op::Leaf)
    }

    pub fn param_node(&self, p: &Mat<T>) -> Option<NodeId> {
        self.params.get(&(p as *const Mat<T>)).copied()
    }

    /// Bytes held by activations and backward caches. Borrowed parameters
    /// are not counted.
    pub fn activation_bytes(&self) -> usize {
        let floats: usize = self
            .nodes
            .iter()
            .map(|n| {
                let own = match n.value {
                    Cow::Owned(ref m) => m.len(),
                    Cow::Borrowed(_) => 0,
                };
                let cache = match &n.op {
                    Op::LayerNorm { stats, .. } => stats.len(),
                    Op::Dropout { scale, .. } => scale.len(),
                    Op::Attention { probs, .. } | Op::MeanAttnWeights { probs, .. } => probs.len(),
                    Op::RowsAttentive { weights, .. } | Op::LayerMix { weights, .. } => {
                        weights.len()
                    }
                    Op::CrossEntropy { probs, .. } => probs.len(),
                    _ => 0,
                };
                own + cache
            })
            .sum();
        floats * size_of::<T>()
    }

    /// Argmax rows chosen by every max-pooling op, in recording order.
    /// Two passes share a differentiable region iff their signatures match.
    pub fn max_pool_signature(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .flat_map(|n| match &n.op {
                Op::RowsMax { argmax, .. } => argmax.clone(),
                _ => Vec::new(),
            })
            .collect()
    }

    /// Per-head attention probabilities of an attention node, laid out
    /// `[head][query][key]`.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id].op {
            Op::Attention { probs, .. } | Op::MeanAttnWeights { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---- recorded operations ----

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let mut y = matmul(self.value(x), self.value(w));
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.len(), y.cols(), "linear bias width");
            for r in 0..y.rows() {
                for (o, &bv) in y.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = matmul(self.value(a), self.value(b));
        self.push(y, Op::MatMul { a, b })
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Mat<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Mat::from_vec(va.rows(), va.cols(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.zip_with(a, b, |x, y| x + y);
        self.push(y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.zip_with(a, b, |x, y| x - y);
        self.push(y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.zip_with(a, b, |x, y| x * y);
        self.push(y, Op::Mul { a, b })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.tanh());
        self.push(y, Op::Tanh { x })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (c, a, half) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5));
        let y = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.push(y, Op::Gelu { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let d = xv.cols();
        assert_eq!(g.len(), d, "layer norm gain width");
        assert_eq!(b.len(), d, "layer norm bias width");
        let inv_d = T::one() / lit::<T>(d as f64);
        let eps = lit::<T>(eps);
        let mut y = Mat::zeros(xv.rows(), d);
        let mut stats = Vec::with_capacity(2 * xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for (c, o) in y.row_mut(r).iter_mut().enumerate() {
                *o = (row[c] - mean) * rstd * g.data()[c] + b.data()[c];
            }
            stats.push(mean);
            stats.push(rstd);
        }
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
        )
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut y = Mat::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            y.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            y,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: NodeId, keep: &[bool]) -> NodeId {
        let mut y = self.value(x).clone();
        assert_eq!(keep.len(), y.rows(), "row mask length");
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                y.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
            }
        }
        self.push(
            y,
            Op::MaskRows {
                x,
                keep: keep.to_vec(),
            },
        )
    }

    /// Multiplies by a precomputed inverted-dropout scale (0 or 1/(1-p)).
    pub fn dropout(&mut self, x: NodeId, scale: Vec<T>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(scale.len(), xv.len(), "dropout mask length");
        let data = xv.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let y = Mat::from_vec(xv.rows(), xv.cols(), data).expect("shape preserved");
        self.push(y, Op::Dropout { x, scale })
    }

    fn head_probs(&self, q: NodeId, k: NodeId, heads: usize, mask: &AttnMask) -> Vec<T> {
        let (qv, kv) = (self.value(q), self.value(k));
        assert_eq!(qv.cols(), kv.cols(), "query/key width");
        assert_eq!(qv.cols() % heads, 0, "width divisible by heads");
        let (m, s, dh) = (qv.rows(), kv.rows(), qv.cols() / heads);
        if let Some(keys) = &mask.keys {
            assert_eq!(keys.len(), s, "key mask length");
        }
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * m * s];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..m {
                let qi = &qv.row(i)[cols.clone()];
                let out = &mut probs[(h * m + i) * s..(h * m + i + 1) * s];
                for (j, o) in out.iter_mut().enumerate() {
                    *o = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                }
                softmax_masked(out, |j| mask.allows(i, j));
            }
        }
        probs
    }

    /// Multi-head scaled dot-product attention; `q` is `m×d`, `k` and `v`
    /// are `s×d`, the result is `m×d` with heads occupying column blocks.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: &AttnMask) -> NodeId {
        let probs = self.head_probs(q, k, heads, mask);
        let vv = self.value(v);
        let m = self.value(q).rows();
        let (s, d) = (vv.rows(), vv.cols());
        assert_eq!(self.value(k).rows(), s, "keys and values count");
        let dh = d / heads;
        let mut y = Mat::zeros(m, d);
        for h in 0..heads {
            for i in 0..m {
                let p = &probs[(h * m + i) * s..(h * m + i + 1) * s];
                let out = &mut y.row_mut(i)[h * dh..(h + 1) * dh];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == T::zero() {
                        continue;
                    }
                    for (o, &x) in out.iter_mut().zip(&vv.row(j)[h * dh..(h + 1) * dh]) {
                        *o += pj * x;
                    }
                }
            }
        }
        self.push(
            y,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Attention weights averaged over heads, `m×s`.
    pub fn mean_attention_weights(&mut self, q: NodeId, k: NodeId, heads: usize, mask: &AttnMask) -> NodeId {
        let probs = self.head_probs(q, k, heads, mask);
        let (m, s) = (self.value(q).rows(), self.value(k).rows());
        let inv_h = T::one() / lit::<T>(heads as f64);
        let mut y = Mat::zeros(m, s);
        for h in 0..heads {
            for (o, &p) in y.data_mut().iter_mut().zip(&probs[h * m * s..(h + 1) * m * s]) {
                *o += p;
            }
        }
        y.scale(inv_h);
        self.push(y, Op::MeanAttnWeights { q, k, heads, probs })
    }

    /// Elementwise maximum over rows `start..end`; ties resolve to the lowest row.
    pub fn rows_max(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start < end && end <= xv.rows(), "non-empty row range");
        let mut best = xv.row(start).to_vec();
        let mut argmax = vec![start; xv.cols()];
        for r in start + 1..end {
            for (c, &v) in xv.row(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    argmax[c] = r;
                }
            }
        }
        self.push(Mat::row_vector(best), Op::RowsMax { x, argmax })
    }

    pub fn rows_mean(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start < end && end <= xv.rows(), "non-empty row range");
        let mut acc = vec![T::zero(); xv.cols()];
        for r in start..end {
            for (a, &v) in acc.iter_mut().zip(xv.row(r)) {
                *a += v;
            }
        }
        let count = lit::<T>((end - start) as f64);
        acc.iter_mut().for_each(|a| *a = *a / count);
        self.push(Mat::row_vector(acc), Op::RowsMean { x, start, end })
    }

    /// `Σ_t softmax_t(⟨x_t, v⟩) x_t` over rows `start..end`.
    pub fn rows_attentive(&mut self, x: NodeId, v: NodeId, start: usize, end: usize) -> NodeId {
        let (xv, vv) = (self.value(x), self.value(v));
        assert!(start < end && end <= xv.rows(), "non-empty row range");
        assert_eq!(vv.len(), xv.cols(), "attention vector width");
        let mut weights: Vec<T> = (start..end).map(|r| dot(xv.row(r), vv.data())).collect();
        softmax_masked(&mut weights, |_| true);
        let mut acc = vec![T::zero(); xv.cols()];
        for (r, &w) in (start..end).zip(&weights) {
            for (a, &val) in acc.iter_mut().zip(xv.row(r)) {
                *a += w * val;
            }
        }
        self.push(
            Mat::row_vector(acc),
            Op::RowsAttentive {
                x,
                v,
                start,
                weights,
            },
        )
    }

    /// `Σ_ℓ softmax(w)_ℓ · xs[ℓ][row]`.
    pub fn layer_mix(&mut self, xs: &[NodeId], row: usize, w: NodeId) -> NodeId {
        let wv = self.value(w);
        assert_eq!(wv.len(), xs.len(), "layer weight count");
        let mut weights = wv.data().to_vec();
        softmax_masked(&mut weights, |_| true);
        let d = self.value(xs[0]).cols();
        let mut acc = vec![T::zero(); d];
        for (&x, &a) in xs.iter().zip(&weights) {
            for (o, &val) in acc.iter_mut().zip(self.value(x).row(row)) {
                *o += a * val;
            }
        }
        self.push(
            Mat::row_vector(acc),
            Op::LayerMix {
                xs: xs.to_vec(),
                row,
                w,
                weights,
            },
        )
    }

    pub fn row(&mut self, x: NodeId, row: usize) -> NodeId {
        let y = Mat::row_vector(self.value(x).row(row).to_vec());
        self.push(y, Op::Row { x, row })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat row counts");
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let y = Mat::from_vec(va.rows(), va.cols() + vb.cols(), data).expect("concat shape");
        self.push(y, Op::ConcatCols { a, b })
    }

    /// Stacks single-row nodes into a matrix.
    pub fn stack_rows(&mut self, xs: &[NodeId]) -> NodeId {
        let d = self.value(xs[0]).cols();
        let mut data = Vec::with_capacity(xs.len() * d);
        for &x in xs {
            let v = self.value(x);
            assert_eq!(v.shape(), (1, d), "stacked rows must be 1xd");
            data.extend_from_slice(v.data());
        }
        let y = Mat::from_vec(xs.len(), d, data).expect("stack shape");
        self.push(y, Op::StackRows { xs: xs.to_vec() })
    }

    /// `c_i = h_i + Σ_j w_ij (h_j − h_i)`: the `w`-weighted combination of the
    /// rows of `h` when each row of `w` sums to one, written as an offset from
    /// `h_i` so that equal rows reproduce `h_i` exactly.
    pub fn convex_mix(&mut self, weights: NodeId, h: NodeId) -> NodeId {
        let (wv, hv) = (self.value(weights), self.value(h));
        assert_eq!(wv.rows(), hv.rows(), "mix weight rows");
        assert_eq!(wv.cols(), hv.rows(), "mix weight cols");
        let mut y = hv.clone();
        for i in 0..hv.rows() {
            let hi = hv.row(i);
            let out = y.row_mut(i);
            for j in 0..hv.rows() {
                let w = wv.get(i, j);
                if w == T::zero() {
                    continue;
                }
                for ((o, &hj), &hii) in out.iter_mut().zip(hv.row(j)).zip(hi) {
                    *o += w * (hj - hii);
                }
            }
        }
        self.push(y, Op::ConvexMix { weights, h })
    }

    /// `−log softmax(scores)[gold]` over all entries of `scores`; returns a 1×1 node.
    pub fn cross_entropy(&mut self, scores: NodeId, gold: usize) -> NodeId {
        let mut probs = self.value(scores).data().to_vec();
        assert!(gold < probs.len(), "gold index in range");
        let max = probs.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + probs.iter().map(|&s| (s - max).exp()).sum::<T>().ln();
        let loss = lse - probs[gold];
        softmax_masked(&mut probs, |_| true);
        self.push(
            Mat::row_vector(vec![loss]),
            Op::CrossEntropy {
                scores,
                gold,
                probs,
            },
        )
    }

    // ---- backward ----

    /// Back-propagates from a 1×1 node.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Mat::filled(1, 1, T::one()));
        for id in (0..=root).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backward_node(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Gradients { grads }
    }

    fn backward_node(&self, id: NodeId, dy: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let y = self.value(id);
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let dx = matmul_a_bt(dy, self.value(*w));
                acc(grads, self, *x).add_assign(&dx);
                add_matmul_at_b(acc(grads, self, *w), self.value(*x), dy);
                if let Some(b) = b {
                    let db = acc(grads, self, *b);
                    for r in 0..dy.rows() {
                        for (o, &g) in db.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let da = matmul_a_bt(dy, self.value(*b));
                acc(grads, self, *a).add_assign(&da);
                add_matmul_at_b(acc(grads, self, *b), self.value(*a), dy);
            }
            Op::Add { a, b } => {
                acc(grads, self, *a).add_assign(dy);
                acc(grads, self, *b).add_assign(dy);
            }
            Op::Sub { a, b } => {
                acc(grads, self, *a).add_assign(dy);
                let db = acc(grads, self, *b);
                for (o, &g) in db.data_mut().iter_mut().zip(dy.data()) {
                    *o -= g;
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                zip_acc(acc(grads, self, *a), dy, &vb, |g, v| g * v);
                zip_acc(acc(grads, self, *b), dy, &va, |g, v| g * v);
            }
            Op::Sigmoid { x } => {
                zip_acc(acc(grads, self, *x), dy, y, |g, s| g * s * (T::one() - s));
            }
            Op::Tanh { x } => {
                zip_acc(acc(grads, self, *x), dy, y, |g, t| g * (T::one() - t * t));
            }
            Op::Gelu { x } => {
                let (c, a, half) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5));
                let three = lit::<T>(3.0);
                let xv = self.value(*x).clone();
                zip_acc(acc(grads, self, *x), dy, &xv, |g, v| {
                    let t = (c * (v + a * v * v * v)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                    g * (half * (T::one() + t) + half * v * dt)
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let xv = self.value(*x);
                let g = self.value(*gain).data().to_vec();
                let d = xv.cols();
                let inv_d = T::one() / lit::<T>(d as f64);
                let mut dx = Mat::zeros(xv.rows(), d);
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..xv.rows() {
                    let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                    let dyr = dy.row(r);
                    for c in 0..d {
                        xhat[c] = (xv.get(r, c) - mean) * rstd;
                        dxhat[c] = dyr[c] * g[c];
                        dg[c] += dyr[c] * xhat[c];
                        db[c] += dyr[c];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                    let m2 = dot(&dxhat, &xhat) * inv_d;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = rstd * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                acc(grads, self, *x).add_assign(&dx);
                add_slice(acc(grads, self, *gain).data_mut(), &dg);
                add_slice(acc(grads, self, *bias).data_mut(), &db);
            }
            Op::Gather { table, ids } => {
                let dt = acc(grads, self, *table);
                for (r, &i) in ids.iter().enumerate() {
                    add_slice(dt.row_mut(i), dy.row(r));
                }
            }
            Op::MaskRows { x, keep } => {
                let dx = acc(grads, self, *x);
                for (r, &k) in keep.iter().enumerate() {
                    if k {
                        add_slice(dx.row_mut(r), dy.row(r));
                    }
                }
            }
            Op::Dropout { x, scale } => {
                let dx = acc(grads, self, *x);
                for ((o, &g), &s) in dx.data_mut().iter_mut().zip(dy.data()).zip(scale) {
                    *o += g * s;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (m, s, d) = (qv.rows(), kv.rows(), qv.cols());
                let dh = d / heads;
                let mut dprobs = vec![T::zero(); probs.len()];
                let mut dv = Mat::zeros(s, d);
                for h in 0..*heads {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..m {
                        let base = (h * m + i) * s;
                        let g = &dy.row(i)[cols.clone()];
                        for j in 0..s {
                            let p = probs[base + j];
                            if p == T::zero() {
                                continue;
                            }
                            dprobs[base + j] = dot(g, &vv.row(j)[cols.clone()]);
                            for (o, &gv) in dv.row_mut(j)[cols.clone()].iter_mut().zip(g) {
                                *o += p * gv;
                            }
                        }
                    }
                }
                acc(grads, self, *v).add_assign(&dv);
                self.softmax_qk_backward(*q, *k, *heads, probs, &dprobs, grads);
            }
            Op::MeanAttnWeights { q, k, heads, probs } => {
                let inv_h = T::one() / lit::<T>(*heads as f64);
                let ms = dy.len();
                let mut dprobs = vec![T::zero(); probs.len()];
                for h in 0..*heads {
                    for (o, &g) in dprobs[h * ms..(h + 1) * ms].iter_mut().zip(dy.data()) {
                        *o = g * inv_h;
                    }
                }
                self.softmax_qk_backward(*q, *k, *heads, probs, &dprobs, grads);
            }
            Op::RowsMax { x, argmax, .. } => {
                let dx = acc(grads, self, *x);
                for (c, &r) in argmax.iter().enumerate() {
                    let cur = dx.get(r, c);
                    dx.set(r, c, cur + dy.data()[c]);
                }
            }
            Op::RowsMean { x, start, end } => {
                let inv = T::one() / lit::<T>((end - start) as f64);
                let dx = acc(grads, self, *x);
                for r in *start..*end {
                    for (o, &g) in dx.row_mut(r).iter_mut().zip(dy.data()) {
                        *o += g * inv;
                    }
                }
            }
            Op::RowsAttentive {
                x,
                v,
                start,
                weights,
            } => {
                let xv = self.value(*x).clone();
                let vv = self.value(*v).data().to_vec();
                let g: Vec<T> = (0..weights.len())
                    .map(|t| dot(dy.data(), xv.row(start + t)))
                    .collect();
                let mean_g: T = weights.iter().zip(&g).map(|(&w, &gt)| w * gt).sum();
                let dlogit: Vec<T> = weights
                    .iter()
                    .zip(&g)
                    .map(|(&w, &gt)| w * (gt - mean_g))
                    .collect();
                let dx = acc(grads, self, *x);
                for t in 0..weights.len() {
                    for ((o, &gy), &vc) in dx.row_mut(start + t).iter_mut().zip(dy.data()).zip(&vv) {
                        *o += weights[t] * gy + dlogit[t] * vc;
                    }
                }
                let dv = acc(grads, self, *v);
                for (t, &dl) in dlogit.iter().enumerate() {
                    for (o, &xc) in dv.data_mut().iter_mut().zip(xv.row(start + t)) {
                        *o += dl * xc;
                    }
                }
            }
            Op::LayerMix {
                xs,
                row,
                w,
                weights,
            } => {
                let g: Vec<T> = xs
                    .iter()
                    .map(|&x| dot(dy.data(), self.value(x).row(*row)))
                    .collect();
                let mean_g: T = weights.iter().zip(&g).map(|(&a, &gl)| a * gl).sum();
                for (&x, &a) in xs.iter().zip(weights) {
                    let dx = acc(grads, self, x);
                    for (o, &gy) in dx.row_mut(*row).iter_mut().zip(dy.data()) {
                        *o += a * gy;
                    }
                }
                let dw = acc(grads, self, *w);
                for ((o, &a), &gl) in dw.data_mut().iter_mut().zip(weights).zip(&g) {
                    *o += a * (gl - mean_g);
                }
            }
            Op::Row { x, row } => {
                add_slice(acc(grads, self, *x).row_mut(*row), dy.data());
            }
            Op::ConcatCols { a, b } => {
                let ca = self.value(*a).cols();
                for r in 0..dy.rows() {
                    let (ga, gb) = dy.row(r).split_at(ca);
                    add_slice(acc(grads, self, *a).row_mut(r), ga);
                    add_slice(acc(grads, self, *b).row_mut(r), gb);
                }
            }
            Op::StackRows { xs } => {
                for (r, &x) in xs.iter().enumerate() {
                    add_slice(acc(grads, self, x).data_mut(), dy.row(r));
                }
            }
            Op::ConvexMix { weights, h } => {
                let (wv, hv) = (self.value(*weights).clone(), self.value(*h).clone());
                let n = hv.rows();
                let mut dw = Mat::zeros(n, n);
                let mut dh = dy.clone();
                for i in 0..n {
                    let gi = dy.row(i);
                    let mut row_sum = T::zero();
                    for j in 0..n {
                        let w = wv.get(i, j);
                        let diff: T = gi
                            .iter()
                            .zip(hv.row(j).iter().zip(hv.row(i)))
                            .map(|(&g, (&hj, &hi))| g * (hj - hi))
                            .sum();
                        dw.set(i, j, diff);
                        if w == T::zero() {
                            continue;
                        }
                        row_sum += w;
                        for (o, &g) in dh.row_mut(j).iter_mut().zip(gi) {
                            *o += w * g;
                        }
                    }
                    for (o, &g) in dh.row_mut(i).iter_mut().zip(gi) {
                        *o -= row_sum * g;
                    }
                }
                acc(grads, self, *weights).add_assign(&dw);
                acc(grads, self, *h).add_assign(&dh);
            }
            Op::CrossEntropy {
                scores,
                gold,
                probs,
            } => {
                let g = dy.data()[0];
                let ds = acc(grads, self, *scores);
                for (i, (o, &p)) in ds.data_mut().iter_mut().zip(probs).enumerate() {
                    let target = if i == *gold { T::one() } else { T::zero() };
                    *o += g * (p - target);
                }
            }
        }
    }

    /// Shared softmax-and-projection backward for both attention ops.
    fn softmax_qk_backward(
        &self,
        q: NodeId,
        k: NodeId,
        heads: usize,
        probs: &[T],
        dprobs: &[T],
        grads: &mut [Option<Mat<T>>],
    ) {
        let (qv, kv) = (self.value(q), self.value(k));
        let (m, s, d) = (qv.rows(), kv.rows(), qv.cols());
        let dh = d / heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let mut dq = Mat::zeros(m, d);
        let mut dk = Mat::zeros(s, d);
        let mut dscore = vec![T::zero(); s];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..m {
                let base = (h * m + i) * s;
                let p = &probs[base..base + s];
                let dp = &dprobs[base..base + s];
                let inner: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
                for j in 0..s {
                    dscore[j] = p[j] * (dp[j] - inner) * scale;
                }
                for (j, &ds) in dscore.iter().enumerate() {
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &kv.row(j)[cols.clone()];
                    for (o, &kc) in dq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                        *o += ds * kc;
                    }
                    let qi = &qv.row(i)[cols.clone()];
                    for (o, &qc) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                        *o += ds * qc;
                    }
                }
            }
        }
        acc(grads, self, q).add_assign(&dq);
        acc(grads, self, k).add_assign(&dk);
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn acc<'g, T: Scalar>(grads: &'g mut [Option<Mat<T>>], tape: &Tape<'_, T>, id: NodeId) -> &'g mut Mat<T> {
    let (r, c) = tape.value(id).shape();
    grads[id].get_or_insert_with(|| Mat::zeros(r, c))
}

fn add_slice<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

fn zip_acc<T: Scalar>(dst: &mut Mat<T>, dy: &Mat<T>, other: &Mat<T>, f: impl Fn(T, T) -> T) {
    for ((o, &g), &v) in dst.data_mut().iter_mut().zip(dy.data()).zip(other.data()) {
        *o += f(g, v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(loss)/d(input) for a scalar-valued graph.
    fn check(build: impl Fn(&mut Tape<'_, f64>, &[NodeId]) -> NodeId, inputs: &[Mat<f64>]) {
        let eval = |ins: &[Mat<f64>]| {
            let mut t = Tape::new();
            let ids: Vec<_> = ins.iter().map(|m| t.input(m.clone())).collect();
            let out = build(&mut t, &ids);
            t.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|m| tape.input(m.clone())).collect();
        let out = build(&mut tape, &ids);
        let grads = tape.backward(out);
        let eps = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            for e in 0..m.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[e] += eps;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[e] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let analytic = grads.get(ids[k]).map_or(0.0, |g| g.data()[e]);
                assert!(
                    (numeric - analytic).abs() < 1e-7 * (1.0 + numeric.abs()),
                    "input {k} elem {e}: numeric {numeric} analytic {analytic}"
                );
            }
        }
    }

    fn m(rows: usize, cols: usize, seed: f64) -> Mat<f64> {
        let data = (0..rows * cols)
            .map(|i| ((i as f64 + 1.0) * 1.618 + seed).sin())
            .collect();
        Mat::from_vec(rows, cols, data).unwrap()
    }

    /// Reduces any node to a scalar through a fixed random projection and
    /// cross-entropy so every output entry receives a distinct gradient.
    fn reduce(t: &mut Tape<'_, f64>, x: NodeId) -> NodeId {
        let c = t.value(x).cols();
        let proj = t.input(m(c, 3, 9.0));
        let y = t.matmul(x, proj);
        let (yr, _) = t.value(y).shape();
        let rows: Vec<NodeId> = (0..yr).map(|i| t.row(y, i)).collect();
        let mut total = rows[0];
        for &row in &rows[1..] {
            total = t.add(total, row);
        }
        t.cross_entropy(total, 1)
    }

    #[test]
    fn linear_layer_norm_gelu_tanh_sigmoid() {
        check(
            |t, ids| {
                let y = t.linear(ids[0], ids[1], Some(ids[2]));
                let y = t.layer_norm(y, ids[3], ids[4], 1e-6);
                let y = t.gelu(y);
                let a = t.tanh(y);
                let b = t.sigmoid(y);
                let y = t.mul(a, b);
                let y = t.sub(y, a);
                reduce(t, y)
            },
            &[m(3, 4, 0.0), m(4, 5, 1.0), m(1, 5, 2.0), m(1, 5, 3.0), m(1, 5, 4.0)],
        );
    }

    #[test]
    fn attention_with_masks() {
        let mask = AttnMask {
            keys: Some(vec![true, false, true, true]),
            exclude_diagonal: false,
        };
        check(
            |t, ids| {
                let y = t.attention(ids[0], ids[1], ids[2], 2, &mask);
                reduce(t, y)
            },
            &[m(3, 4, 0.3), m(4, 4, 1.3), m(4, 4, 2.3)],
        );
        let diag = AttnMask {
            keys: None,
            exclude_diagonal: true,
        };
        check(
            |t, ids| {
                let w = t.mean_attention_weights(ids[0], ids[1], 2, &diag);
                let c = t.convex_mix(w, ids[2]);
                reduce(t, c)
            },
            &[m(3, 4, 0.7), m(3, 4, 1.7), m(3, 4, 2.7)],
        );
    }

    #[test]
    fn pooling_ops() {
        check(
            |t, ids| {
                let a = t.rows_max(ids[0], 1, 4);
                let b = t.rows_mean(ids[0], 0, 3);
                let c = t.rows_attentive(ids[0], ids[1], 1, 5);
                let l0 = t.gather(ids[0], &[0, 2]);
                let l1 = t.gather(ids[0], &[3, 1]);
                let d = t.layer_mix(&[l0, l1], 1, ids[2]);
                let ab = t.concat_cols(a, b);
                let cd = t.concat_cols(c, d);
                let s = t.stack_rows(&[ab, cd]);
                let s = t.mask_rows(s, &[true, true]);
                reduce(t, s)
            },
            &[m(5, 3, 0.5), m(1, 3, 1.5), m(1, 2, 2.5)],
        );
    }

    #[test]
    fn shared_param_accumulates_once() {
        let w = m(2, 2, 0.0);
        let mut t = Tape::new();
        let a = t.param(&w);
        let b = t.param(&w);
        assert_eq!(a, b);
        let s = t.add(a, b);
        let r = t.row(s, 0);
        let loss = t.cross_entropy(r, 0);
        let g = t.backward(loss);
        let gw = g.get(a).unwrap();
        let mut p = vec![2.0 * w.get(0, 0), 2.0 * w.get(0, 1)];
        crate::tensor::softmax(&mut p);
        assert!((gw.data()[0] - 2.0 * (p[0] - 1.0)).abs() < 1e-15);
        assert!((gw.data()[1] - 2.0 * p[1]).abs() < 1e-15);
        assert!(gw.data()[2] == 0.0 && gw.data()[3] == 0.0);
    }

    #[test]
    fn rows_max_breaks_ties_low() {
        let x = Mat::from_rows(&[vec![1.0f64, 5.0], vec![1.0, 5.0]]).unwrap();
        let mut t = Tape::new();
        let id = t.input(x);
        t.rows_max(id, 0, 2);
        assert_eq!(t.max_pool_signature(), vec![0, 0]);
    }
}
