//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! created after their inputs, so reverse creation order is a valid
//! topological order for the backward sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm_acc, transpose};
use super::{ParamId, ParamStore, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Mean {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Sum(Var),
    Concat(Vec<Var>),
    Transpose(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
        /// Unfolded input, `[C*kh*kw, H'*W']`.
        col: Vec<f64>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    /// Accumulated gradient, kept for leaves that require it.
    grad: Option<Vec<f64>>,
}

/// A computation graph for one forward/backward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, t: &Tensor, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.into(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    /// Evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), rng: None }
    }

    /// Training mode with a seeded dropout stream.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            grad: requires_grad.then(|| vec![0.0; value.len()]),
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, false, None)
    }

    /// Free leaf whose gradient is tracked (useful for checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(t, true, None)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.leaf(store.get(id).value.clone(), true, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Accumulated gradients of all parameter leaves, in creation order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    /// Adds this graph's parameter gradients into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            add_into(&mut store.get_mut(id).grad, g);
        }
    }

    /// Dense per-parameter gradients aligned with the store's ids.
    pub fn collect_param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        for (id, g) in self.param_grads() {
            add_into(&mut out[id.0], g);
        }
        out
    }

    // ---- operations ----

    /// `a @ b` with `b` two-dimensional; leading axes of `a` are batched.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() < 2 || tb.rank() != 2 || ta.last_dim() != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (k, n) = (tb.shape()[0], tb.shape()[1]);
        let m = ta.len() / k;
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, ta.data(), tb.data(), m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape and
    /// is then broadcast over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() > ta.rank() || ta.shape()[ta.rank() - tb.rank()..] != *tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let bl = tb.len().max(1);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % bl])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_fn(ta.shape().to_vec(), |i| ta.data()[i] * factor);
        self.push(t, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_fn(ta.shape().to_vec(), |i| ta.data()[i].max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    /// Softmax over the last axis (row max subtracted first).
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.rank() == 0 {
            return Err(invalid("softmax", ta, "needs at least one axis"));
        }
        let d = ta.last_dim();
        let mut out = ta.data().to_vec();
        if d > 0 {
            for row in out.chunks_exact_mut(d) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Normalizes each last-axis row to zero mean and unit population
    /// variance, then applies `gain` and `bias` (both of last-axis length).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tx.rank() == 0 || tg.shape() != [d] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.len() / d.max(1);
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Inverted dropout; the identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", self.value(x), format!("rate {p} outside [0, 1)")));
        }
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let n = self.nodes[x.0].value.len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let t = Tensor::from_fn(tx.shape().to_vec(), |i| tx.data()[i] * mask[i]);
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if axis >= tx.rank() || tx.shape()[axis] == 0 {
            return Err(invalid("mean", tx, format!("cannot average over axis {axis}")));
        }
        let outer: usize = tx.shape()[..axis].iter().product();
        let axis_len = tx.shape()[axis];
        let inner: usize = tx.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                let src = &tx.data()[(o * axis_len + a) * inner..][..inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        out.iter_mut().for_each(|v| *v /= axis_len as f64);
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Mean {
                x,
                outer,
                axis_len,
                inner,
            },
            &[x],
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or(TensorError::EmptyConcat)?);
        if first.rank() == 0 {
            return Err(invalid("concat", first, "needs at least one axis"));
        }
        let lead = &first.shape()[..first.rank() - 1];
        let rows: usize = lead.iter().product();
        for p in &parts[1..] {
            let t = self.value(*p);
            if t.rank() != first.rank() || &t.shape()[..t.rank() - 1] != lead {
                return Err(mismatch("concat", first, t));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(invalid("transpose", tx, "needs two axes"));
        }
        let r = tx.rank();
        let (m, n) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        let batches = tx.len() / (m * n).max(1);
        let mut out = vec![0.0; tx.len()];
        for b in 0..batches {
            let (src, dst) = (&tx.data()[b * m * n..], &mut out[b * m * n..]);
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if tx.rank() == 0 || start + len > d {
            return Err(invalid("slice_last", tx, format!("range {start}..{} out of bounds", start + len)));
        }
        let rows = tx.len() / d.max(1);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::SliceLast { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.len() {
            return Err(invalid("reshape", tx, format!("cannot view as {shape:?}")));
        }
        let t = tx.reshaped(shape.to_vec());
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Stride-1 2-D convolution (cross-correlation) with zero padding.
    /// `x: [C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]` → `[O, H', W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 3 || tw.rank() != 4 || tw.shape()[1] != tx.shape()[0] {
            return Err(mismatch("conv2d", tx, tw));
        }
        let (c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (o, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        if tb.shape() != [o] {
            return Err(mismatch("conv2d", tw, tb));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(invalid("conv2d", tx, "input smaller than kernel"));
        }
        let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let plane = oh * ow;
        let q_len = c * kh * kw;
        let mut col = vec![0.0; q_len * plane];
        for ic in 0..c {
            let src = &tx.data()[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let q = (ic * kh + ky) * kw + kx;
                    let dst = &mut col[q * plane..(q + 1) * plane];
                    conv_tap(dst, src, (h, wd), (oh, ow), (ky, kx), pad, |o, s| *o = s);
                }
            }
        }
        let mut out = vec![0.0; o * plane];
        for (oc, row) in out.chunks_exact_mut(plane).enumerate() {
            row.fill(tb.data()[oc]);
        }
        gemm_acc(&mut out, tw.data(), &col, o, q_len, plane);
        let t = Tensor::new(vec![o, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, pad, col }, &[x, w, b]))
    }

    /// 2×2 max pooling with stride 2 on `[C, H, W]`; odd trailing rows and
    /// columns are dropped.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.rank() != 3 || tx.shape()[1] < 2 || tx.shape()[2] < 2 {
            return Err(invalid("max_pool2d", tx, "needs [C, H>=2, W>=2]"));
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                        if tx.data()[idx] > best.0 {
                            best = (tx.data()[idx], idx);
                        }
                    }
                    let o = (ch * oh + y) * ow + xx;
                    out[o] = best.0;
                    argmax[o] = best.1;
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(t, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// via log-sum-exp. `logits: [B, N]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != labels.len() || labels.is_empty() {
            return Err(invalid("cross_entropy", tl, format!("{} labels", labels.len())));
        }
        let n = tl.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes: n });
        }
        let mut probs = vec![0.0; tl.len()];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = tl.row(b);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            for j in 0..n {
                probs[b * n + j] = (row[j] - lse).exp();
            }
        }
        let t = Tensor::scalar(loss / labels.len() as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- backward ----

    /// Accumulates `d loss / d leaf` into every gradient-tracking leaf.
    /// Calling it again without rebuilding the graph adds the gradient again.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if let Some(acc) = self.nodes[i].grad.as_mut() {
                    add_into(acc, &g);
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.wants(v) {
                let n = self.nodes[v.0].value.len();
                f(adj[v.0].get_or_insert_with(|| vec![0.0; n]));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.len() / k;
                send(*a, &mut |da| {
                    let bt = transpose(tb.data(), k, n);
                    gemm_acc(da, g, &bt, m, n, k);
                });
                send(*b, &mut |db| {
                    let at = transpose(ta.data(), m, k);
                    gemm_acc(db, &at, g, k, m, n);
                });
            }
            Op::Add(a, b) => {
                send(*a, &mut |da| add_into(da, g));
                let bl = self.value(*b).len().max(1);
                send(*b, &mut |db| {
                    for (j, gv) in g.iter().enumerate() {
                        db[j % bl] += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                send(*a, &mut |da| {
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += gv * y;
                    }
                });
                send(*b, &mut |db| {
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(a, f) => send(*a, &mut |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv * f;
                }
            }),
            Op::Relu(a) => {
                let ta = self.value(*a);
                send(*a, &mut |da| {
                    for ((d, gv), x) in da.iter_mut().zip(g).zip(ta.data()) {
                        if *x > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let dlen = y.last_dim().max(1);
                send(*a, &mut |da| {
                    for ((drow, grow), yrow) in da
                        .chunks_exact_mut(dlen)
                        .zip(g.chunks_exact(dlen))
                        .zip(y.data().chunks_exact(dlen))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let gd = self.value(*gain).data();
                send(*gain, &mut |dg| {
                    for (j, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        dg[j % d] += gv * h;
                    }
                });
                send(*bias, &mut |db| {
                    for (j, gv) in g.iter().enumerate() {
                        db[j % d] += gv;
                    }
                });
                send(*x, &mut |dx| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] +=
                                inv / d as f64 * (d as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => send(*x, &mut |dx| {
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }),
            Op::Mean {
                x,
                outer,
                axis_len,
                inner,
            } => send(*x, &mut |dx| {
                let scale = 1.0 / *axis_len as f64;
                for o in 0..*outer {
                    let grow = &g[o * inner..(o + 1) * inner];
                    for a in 0..*axis_len {
                        let dst = &mut dx[(o * axis_len + a) * inner..][..*inner];
                        for (d, gv) in dst.iter_mut().zip(grow) {
                            *d += gv * scale;
                        }
                    }
                }
            }),
            Op::Sum(x) => send(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.len() / total.max(1);
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    send(*p, &mut |dp| {
                        for r in 0..rows {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                let batches = node.value.len() / (m * n).max(1);
                send(*x, &mut |dx| {
                    for b in 0..batches {
                        for i in 0..m {
                            for j in 0..n {
                                dx[b * m * n + j * m + i] += g[b * m * n + i * n + j];
                            }
                        }
                    }
                });
            }
            Op::SliceLast { x, start } => {
                let d = self.value(*x).last_dim();
                let len = node.value.last_dim();
                send(*x, &mut |dx| {
                    for (r, grow) in g.chunks_exact(len.max(1)).enumerate() {
                        add_into(&mut dx[r * d + start..r * d + start + len], grow);
                    }
                });
            }
            Op::Reshape(x) => send(*x, &mut |dx| add_into(dx, g)),
            Op::Conv2d { x, w, b, pad, col } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (o, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                let plane = oh * ow;
                let q_len = c * kh * kw;
                send(*b, &mut |db| {
                    for (oc, d) in db.iter_mut().enumerate() {
                        *d += g[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
                    }
                });
                send(*w, &mut |dw| {
                    let col_t = transpose(col, q_len, plane);
                    gemm_acc(dw, g, &col_t, o, plane, q_len);
                });
                send(*x, &mut |dx| {
                    let w_t = transpose(tw.data(), o, q_len);
                    let mut dcol = vec![0.0; q_len * plane];
                    gemm_acc(&mut dcol, &w_t, g, q_len, o, plane);
                    for ic in 0..c {
                        let dst = &mut dx[ic * h * wd..(ic + 1) * h * wd];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let q = (ic * kh + ky) * kw + kx;
                                let src = &dcol[q * plane..(q + 1) * plane];
                                conv_tap_back(src, dst, (h, wd), (oh, ow), (ky, kx), *pad, 1.0);
                            }
                        }
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => send(*x, &mut |dx| {
                for (gv, &idx) in g.iter().zip(argmax) {
                    dx[idx] += gv;
                }
            }),
            Op::CrossEntropy { logits, labels, probs } => {
                let n = self.value(*logits).last_dim();
                let scale = g[0] / labels.len() as f64;
                send(*logits, &mut |dl| {
                    for (b, &label) in labels.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dl[b * n + j] += scale * (probs[b * n + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for a kernel tap `k` such
/// that `out + k - pad` lands inside `0..len`.
fn tap_range(k: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

/// Calls `f(out, src)` for every output cell covered by one kernel tap.
fn conv_tap(
    out: &mut [f64],
    src: &[f64],
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    (ky, kx): (usize, usize),
    pad: usize,
    mut f: impl FnMut(&mut f64, f64),
) {
    let (y0, y1) = tap_range(ky, pad, h, oh);
    let (x0, x1) = tap_range(kx, pad, w, ow);
    for y in y0..y1 {
        let sy = y + ky - pad;
        let orow = &mut out[y * ow + x0..y * ow + x1];
        let srow = &src[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
        for (o, s) in orow.iter_mut().zip(srow) {
            f(o, *s);
        }
    }
}

fn conv_tap_back(
    gp: &[f64],
    dst: &mut [f64],
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    (ky, kx): (usize, usize),
    pad: usize,
    wv: f64,
) {
    let (y0, y1) = tap_range(ky, pad, h, oh);
    let (x0, x1) = tap_range(kx, pad, w, ow);
    for y in y0..y1 {
        let sy = y + ky - pad;
        let grow = &gp[y * ow + x0..y * ow + x1];
        let drow = &mut dst[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
        for (d, gv) in drow.iter_mut().zip(grow) {
            *d += wv * gv;
        }
    }
}
