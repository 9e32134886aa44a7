use rand_chacha::ChaCha8Rng;

use super::real::gemm;
use super::{Real, Tensor};
use crate::error::TensorError;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Max(usize, usize),
    Min(usize, usize),
    AddBcast { x: usize, y: usize },
    MulScalarVar { x: usize, s: usize },
    Scale { x: usize, c: T },
    Shift(usize),
    Neg(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    ClampMax { x: usize, c: T },
    Sum(usize),
    Mean(usize),
    ReduceAxis { x: usize, outer: usize, len: usize, inner: usize, mean: bool },
    MaskedMeanRows { x: usize, lens: Vec<usize>, t: usize, d: usize },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    MaskedSoftmax { x: usize, valid: Vec<usize>, w: usize },
    LogSoftmaxMasked { x: usize, keep: Vec<bool>, w: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, d: usize, xhat: Vec<T>, rstd: Vec<T> },
    Reshape(usize),
    Permute { x: usize, in_shape: Vec<usize>, axes: Vec<usize> },
    GatherRows { x: usize, idx: Vec<Option<usize>>, w: usize },
    ConcatRows { a: usize, b: usize, split: usize },
    Dropout { x: usize, mask: Vec<T> },
    L2Normalize { x: usize, norms: Vec<T>, w: usize },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Tape of recorded operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the tape is always a valid
/// topological order; [`Graph::backward`] walks it strictly in reverse.
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    grad_enabled: bool,
    pub(crate) dropout_rng: Option<ChaCha8Rng>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Evaluation-mode graph that records gradients.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true, dropout_rng: None, backward_done: false }
    }

    /// Evaluation-mode graph that keeps no gradient bookkeeping.
    pub fn inference() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    /// Training-mode graph: dropout is active and draws from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Graph { dropout_rng: Some(rng), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest distance of any recorded piecewise op from its switch point:
    /// `|x|` for ReLU and abs, `|a - b|` for elementwise max and min, `|x - c|`
    /// for clamps. Infinite when the tape holds none. Finite differences are
    /// only meaningful when the probe step stays well inside this margin.
    pub fn kink_distance(&self) -> f64 {
        let val = |i: usize| self.nodes[i].value.data();
        let mut best = f64::INFINITY;
        let mut see = |d: T| best = best.min(d.abs().to_f64().unwrap_or(f64::INFINITY));
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) | Op::Abs(x) => val(x).iter().for_each(|&v| see(v)),
                Op::Max(a, b) | Op::Min(a, b) => val(a).iter().zip(val(b)).for_each(|(&x, &y)| see(x - y)),
                Op::ClampMax { x, c } => val(x).iter().for_each(|&v| see(v - c)),
                _ => {}
            }
        }
        best
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Allows another call to [`Graph::backward`] on the same tape.
    pub fn reset_grads(&mut self) {
        self.backward_done = false;
    }

    /// Back-propagates from a single-element `loss`.
    ///
    /// Every trainable leaf reachable from `loss` receives its full gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.backward_done {
            return Err(TensorError::Contract("backward called twice without reset_grads".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!("backward root must be scalar, got shape {:?}", self.nodes[loss.0].value.shape())));
        }
        self.backward_done = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backward_node(id, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let y = nodes[id].value.data();
        let val = |i: usize| nodes[i].value.data();
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[i].requires_grad {
                return;
            }
            let buf = grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.numel()]);
            f(buf);
        };
        let zip = |dst: &mut [T], f: &dyn Fn(usize) -> T| {
            for (i, d) in dst.iter_mut().enumerate() {
                *d += f(i);
            }
        };

        match &nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                acc(a, &mut |da| gemm(m, n, k, g, false, val(b), true, T::one(), da));
                acc(b, &mut |db| gemm(k, m, n, val(a), true, g, false, T::one(), db));
            }
            &Op::Bmm { a, b, batch, m, k, n, trans_b } => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |da| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        // dA = G * op(B)^T
                        gemm(m, n, k, gi, false, bi, !trans_b, T::one(), dai);
                    }
                });
                acc(b, &mut |db| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // B stored [n, k]: dB = G^T * A
                            gemm(n, m, k, gi, true, ai, false, T::one(), dbi);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, T::one(), dbi);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| zip(d, &|i| g[i]));
                acc(b, &mut |d| zip(d, &|i| g[i]));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| zip(d, &|i| g[i]));
                acc(b, &mut |d| zip(d, &|i| -g[i]));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |d| zip(d, &|i| g[i] * bv[i]));
                acc(b, &mut |d| zip(d, &|i| g[i] * av[i]));
            }
            &Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |d| zip(d, &|i| g[i] / bv[i]));
                acc(b, &mut |d| zip(d, &|i| -g[i] * av[i] / (bv[i] * bv[i])));
            }
            &Op::Max(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |d| zip(d, &|i| if av[i] >= bv[i] { g[i] } else { T::zero() }));
                acc(b, &mut |d| zip(d, &|i| if av[i] >= bv[i] { T::zero() } else { g[i] }));
            }
            &Op::Min(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |d| zip(d, &|i| if av[i] <= bv[i] { g[i] } else { T::zero() }));
                acc(b, &mut |d| zip(d, &|i| if av[i] <= bv[i] { T::zero() } else { g[i] }));
            }
            &Op::AddBcast { x, y } => {
                acc(x, &mut |d| zip(d, &|i| g[i]));
                acc(y, &mut |d| {
                    let p = d.len();
                    for (i, &gi) in g.iter().enumerate() {
                        d[i % p] += gi;
                    }
                });
            }
            &Op::MulScalarVar { x, s } => {
                let (xv, sv) = (val(x), val(s)[0]);
                acc(x, &mut |d| zip(d, &|i| g[i] * sv));
                acc(s, &mut |d| {
                    let mut t = T::zero();
                    for (gi, xi) in g.iter().zip(xv) {
                        t += *gi * *xi;
                    }
                    d[0] += t;
                });
            }
            &Op::Scale { x, c } => acc(x, &mut |d| zip(d, &|i| g[i] * c)),
            &Op::Shift(x) => acc(x, &mut |d| zip(d, &|i| g[i])),
            &Op::Neg(x) => acc(x, &mut |d| zip(d, &|i| -g[i])),
            &Op::Abs(x) => {
                let xv = val(x);
                acc(x, &mut |d| {
                    zip(d, &|i| {
                        if xv[i] > T::zero() {
                            g[i]
                        } else if xv[i] < T::zero() {
                            -g[i]
                        } else {
                            T::zero()
                        }
                    })
                });
            }
            &Op::Relu(x) => {
                let xv = val(x);
                acc(x, &mut |d| zip(d, &|i| if xv[i] > T::zero() { g[i] } else { T::zero() }));
            }
            &Op::Sigmoid(x) => acc(x, &mut |d| zip(d, &|i| g[i] * y[i] * (T::one() - y[i]))),
            &Op::Exp(x) => acc(x, &mut |d| zip(d, &|i| g[i] * y[i])),
            &Op::Ln(x) => {
                let xv = val(x);
                acc(x, &mut |d| zip(d, &|i| g[i] / xv[i]));
            }
            &Op::Softplus(x) => {
                let xv = val(x);
                acc(x, &mut |d| zip(d, &|i| g[i] * sigmoid(xv[i])));
            }
            &Op::ClampMax { x, c } => {
                let xv = val(x);
                acc(x, &mut |d| zip(d, &|i| if xv[i] < c { g[i] } else { T::zero() }));
            }
            &Op::Sum(x) => acc(x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            &Op::Mean(x) => acc(x, &mut |d| {
                let s = g[0] / T::from_usize(d.len()).unwrap();
                d.iter_mut().for_each(|v| *v += s);
            }),
            &Op::ReduceAxis { x, outer, len, inner, mean } => acc(x, &mut |d| {
                let scale = if mean { T::one() / T::from_usize(len).unwrap() } else { T::one() };
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            d[base + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }),
            Op::MaskedMeanRows { x, lens, t, d: w } => acc(*x, &mut |d| {
                for (b, &len) in lens.iter().enumerate() {
                    let inv = T::one() / T::from_usize(len).unwrap();
                    for r in 0..len {
                        let base = (b * t + r) * w;
                        for j in 0..*w {
                            d[base + j] += g[b * w + j] * inv;
                        }
                    }
                }
            }),
            &Op::Softmax { x, outer, len, inner } => acc(x, &mut |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut dot = T::zero();
                        for l in 0..len {
                            dot += g[at(l)] * y[at(l)];
                        }
                        for l in 0..len {
                            d[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }),
            Op::MaskedSoftmax { x, valid, w } => acc(*x, &mut |d| {
                for (r, &v) in valid.iter().enumerate() {
                    let base = r * w;
                    let mut dot = T::zero();
                    for j in 0..v {
                        dot += g[base + j] * y[base + j];
                    }
                    for j in 0..v {
                        d[base + j] += y[base + j] * (g[base + j] - dot);
                    }
                }
            }),
            Op::LogSoftmaxMasked { x, keep, w } => acc(*x, &mut |d| {
                for r in 0..keep.len() / w {
                    let base = r * w;
                    let mut gs = T::zero();
                    for j in 0..*w {
                        if keep[base + j] {
                            gs += g[base + j];
                        }
                    }
                    for j in 0..*w {
                        if keep[base + j] {
                            d[base + j] += g[base + j] - y[base + j].exp() * gs;
                        }
                    }
                }
            }),
            Op::LayerNorm { x, gain, bias, d: w, xhat, rstd } => {
                let w = *w;
                let rows = xhat.len() / w;
                let gv = val(*gain);
                acc(*x, &mut |dx| {
                    let wt = T::from_usize(w).unwrap();
                    for r in 0..rows {
                        let base = r * w;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..w {
                            let dxh = g[base + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat[base + j];
                        }
                        m1 /= wt;
                        m2 /= wt;
                        for j in 0..w {
                            let dxh = g[base + j] * gv[j];
                            dx[base + j] += rstd[r] * (dxh - m1 - xhat[base + j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for r in 0..rows {
                        for j in 0..w {
                            dg[j] += g[r * w + j] * xhat[r * w + j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for r in 0..rows {
                        for j in 0..w {
                            db[j] += g[r * w + j];
                        }
                    }
                });
            }
            &Op::Reshape(x) => acc(x, &mut |d| zip(d, &|i| g[i])),
            Op::Permute { x, in_shape, axes } => acc(*x, &mut |d| {
                let map = permute_index_map(in_shape, axes);
                for (o, &src) in map.iter().enumerate() {
                    d[src] += g[o];
                }
            }),
            Op::GatherRows { x, idx, w } => acc(*x, &mut |d| {
                for (o, src) in idx.iter().enumerate() {
                    if let Some(s) = *src {
                        for j in 0..*w {
                            d[s * w + j] += g[o * w + j];
                        }
                    }
                }
            }),
            &Op::ConcatRows { a, b, split } => {
                acc(a, &mut |d| zip(d, &|i| g[i]));
                acc(b, &mut |d| zip(d, &|i| g[split + i]));
            }
            Op::Dropout { x, mask } => acc(*x, &mut |d| zip(d, &|i| g[i] * mask[i])),
            Op::L2Normalize { x, norms, w } => acc(*x, &mut |d| {
                for (r, &nrm) in norms.iter().enumerate() {
                    let base = r * w;
                    let mut dot = T::zero();
                    for j in 0..*w {
                        dot += g[base + j] * y[base + j];
                    }
                    for j in 0..*w {
                        d[base + j] += (g[base + j] - y[base + j] * dot) / nrm;
                    }
                }
            }),
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// For each output position of a permutation, the flat input index it reads.
pub(crate) fn permute_index_map(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    if rank == 0 {
        map.push(0);
        return map;
    }
    if total == 0 {
        return map;
    }
    // Odometer over the outer axes; the innermost axis is a strided run.
    let (inner_len, inner_stride) = (out_shape[rank - 1], strides[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let mut offset = 0usize;
    for _ in 0..total / inner_len {
        map.extend((0..inner_len).map(|j| offset + j * inner_stride));
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the loss.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.to_vec()))
    }
}
