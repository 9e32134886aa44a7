use rand::Rng;

use super::graph::{permute_index_map, sigmoid, Op};
use super::real::gemm;
use super::{Graph, Real, Tensor, Var};
use crate::error::TensorError;

type R = Result<Var, TensorError>;

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// `(outer, len, inner)` split of `shape` around `axis`.
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::shape(op, format!("axis {} out of range for {:?}", axis, shape)));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl<T: Real> Graph<T> {
    /// `[..., k] x [k, n] -> [..., n]`; leading axes are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> R {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(TensorError::shape("matmul", format!("{:?} x {:?}", ash, bsh)));
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = ash[..ash.len() - 1].iter().product();
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let mut shape = ash;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a, b])
    }

    /// Batched product `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> R {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = ash.len() == 3 && bsh.len() == 3 && ash[0] == bsh[0] && if trans_b { ash[2] == bsh[2] } else { ash[2] == bsh[1] };
        if !ok {
            return Err(TensorError::shape("bmm", format!("{:?} x {:?} (trans_b={})", ash, bsh, trans_b)));
        }
        let (batch, m, k) = (ash[0], ash[1], ash[2]);
        let n = if trans_b { bsh[1] } else { bsh[2] };
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let op = Op::Bmm { a: a.0, b: b.0, batch, m, k, n, trans_b };
        self.push("bmm", Tensor::new([batch, m, n], out)?, op, &[a, b])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> R {
        same_shape(self, name, a, b)?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, Tensor::new(shape, out)?, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> R {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> R {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> R {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> R {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> R {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Max(a.0, b.0))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> R {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Min(a.0, b.0))
    }

    /// Adds `y` whose shape is a trailing suffix of `x`'s shape (bias rows, positional tables).
    pub fn add_bcast(&mut self, x: Var, y: Var) -> R {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(TensorError::shape("add_bcast", format!("{:?} + {:?}", xs, ys)));
        }
        let yv = self.value(y).data();
        let p = yv.len();
        let out: Vec<T> = self.value(x).data().iter().enumerate().map(|(i, &v)| v + yv[i % p]).collect();
        let shape = xs.to_vec();
        self.push("add_bcast", Tensor::new(shape, out)?, Op::AddBcast { x: x.0, y: y.0 }, &[x, y])
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> R {
        if self.value(s).numel() != 1 {
            return Err(TensorError::shape("mul_scalar", format!("scale shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * sv);
        self.push("mul_scalar", t, Op::MulScalarVar { x: x.0, s: s.0 }, &[x, s])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> R {
        let t = self.value(x).map(f);
        self.push(name, t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: T) -> R {
        self.unary("scale", x, |v| v * c, Op::Scale { x: x.0, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> R {
        self.unary("add_scalar", x, |v| v + c, Op::Shift(x.0))
    }

    pub fn neg(&mut self, x: Var) -> R {
        self.unary("neg", x, |v| -v, Op::Neg(x.0))
    }

    pub fn abs(&mut self, x: Var) -> R {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x.0))
    }

    pub fn relu(&mut self, x: Var) -> R {
        self.unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> R {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn exp(&mut self, x: Var) -> R {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x.0))
    }

    pub fn ln(&mut self, x: Var) -> R {
        self.unary("ln", x, |v| v.ln(), Op::Ln(x.0))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> R {
        self.unary("softplus", x, |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p(), Op::Softplus(x.0))
    }

    pub fn clamp_max(&mut self, x: Var, c: T) -> R {
        self.unary("clamp_max", x, |v| v.min(c), Op::ClampMax { x: x.0, c })
    }

    pub fn sum(&mut self, x: Var) -> R {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x.0), &[x])
    }

    pub fn mean(&mut self, x: Var) -> R {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::EmptyReduction { op: "mean" });
        }
        let s: T = self.value(x).data().iter().copied().sum();
        let m = s / T::from_usize(n).unwrap();
        self.push("mean", Tensor::scalar(m), Op::Mean(x.0), &[x])
    }

    fn reduce_axis(&mut self, name: &'static str, x: Var, axis: usize, mean: bool) -> R {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(name, &shape, axis)?;
        if len == 0 {
            return Err(TensorError::EmptyReduction { op: name });
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv[base + i];
                }
            }
        }
        if mean {
            let inv = T::one() / T::from_usize(len).unwrap();
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let op = Op::ReduceAxis { x: x.0, outer, len, inner, mean };
        self.push(name, Tensor::new(oshape, out)?, op, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> R {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> R {
        self.reduce_axis("reduce_mean", x, axis, true)
    }

    /// Mean over the first `lens[b]` rows of each `[T, d]` slab of a `[B, T, d]` tensor.
    pub fn masked_mean_rows(&mut self, x: Var, lens: &[usize]) -> R {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != lens.len() || lens.iter().any(|&l| l > shape[1]) {
            return Err(TensorError::shape("masked_mean_rows", format!("{:?} with lens {:?}", shape, lens)));
        }
        if lens.contains(&0) {
            return Err(TensorError::EmptyReduction { op: "masked_mean_rows" });
        }
        let (t, d) = (shape[1], shape[2]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); lens.len() * d];
        for (b, &len) in lens.iter().enumerate() {
            let o = &mut out[b * d..(b + 1) * d];
            for r in 0..len {
                let row = &xv[(b * t + r) * d..(b * t + r + 1) * d];
                for (acc, &v) in o.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let inv = T::one() / T::from_usize(len).unwrap();
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let op = Op::MaskedMeanRows { x: x.0, lens: lens.to_vec(), t, d };
        self.push("masked_mean_rows", Tensor::new([lens.len(), d], out)?, op, &[x])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> R {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split("softmax", &shape, axis)?;
        if len == 0 {
            return Err(TensorError::EmptyReduction { op: "softmax" });
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(xv[at(l)]);
                }
                let mut z = T::zero();
                for l in 0..len {
                    let e = (xv[at(l)] - mx).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let op = Op::Softmax { x: x.0, outer, len, inner };
        self.push("softmax", Tensor::new(shape, out)?, op, &[x])
    }

    /// Last-axis softmax where row `r` only normalises over its first `valid[r]` entries.
    /// Entries past the valid prefix are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, valid: &[usize]) -> R {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or(TensorError::shape("masked_softmax", "scalar input"))?;
        let rows = self.value(x).numel().checked_div(w).unwrap_or(0);
        if valid.len() != rows || valid.iter().any(|&v| v > w) {
            return Err(TensorError::shape("masked_softmax", format!("{} rows, {} masks", rows, valid.len())));
        }
        if valid.contains(&0) {
            return Err(TensorError::EmptyReduction { op: "masked_softmax" });
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for (r, &v) in valid.iter().enumerate() {
            let row = &xv[r * w..r * w + v];
            let o = &mut out[r * w..r * w + v];
            let mx = row.iter().fold(T::neg_infinity(), |m, &e| m.max(e));
            let mut z = T::zero();
            for (oe, &e) in o.iter_mut().zip(row) {
                *oe = (e - mx).exp();
                z += *oe;
            }
            o.iter_mut().for_each(|e| *e /= z);
        }
        let op = Op::MaskedSoftmax { x: x.0, valid: valid.to_vec(), w };
        self.push("masked_softmax", Tensor::new(shape, out)?, op, &[x])
    }

    /// Last-axis log-softmax over the entries flagged in `keep`; dropped entries output 0
    /// and receive no gradient.
    pub fn log_softmax_masked(&mut self, x: Var, keep: &[bool]) -> R {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or(TensorError::shape("log_softmax", "scalar input"))?;
        if keep.len() != self.value(x).numel() {
            return Err(TensorError::shape("log_softmax", "mask length"));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..(xv.len() / w.max(1)) {
            let base = r * w;
            let kept = (0..w).filter(|&j| keep[base + j]);
            let mx = kept.clone().fold(T::neg_infinity(), |m, j| m.max(xv[base + j]));
            if mx == T::neg_infinity() {
                return Err(TensorError::EmptyReduction { op: "log_softmax" });
            }
            let z: T = kept.clone().map(|j| (xv[base + j] - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in kept {
                out[base + j] = xv[base + j] - lse;
            }
        }
        let op = Op::LogSoftmaxMasked { x: x.0, keep: keep.to_vec(), w };
        self.push("log_softmax", Tensor::new(shape, out)?, op, &[x])
    }

    /// Per-row normalisation over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> R {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::shape("layer_norm", "scalar input"))?;
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("{:?} with gain {:?} bias {:?}", shape, self.shape(gain), self.shape(bias)),
            ));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let dt = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let op = Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, d, xhat, rstd };
        self.push("layer_norm", Tensor::new(shape, out)?, op, &[x, gain, bias])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> R {
        let t = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(x.0), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> R {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if axes.len() != in_shape.len() || axes.iter().any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::shape("permute", format!("axes {:?} for {:?}", axes, in_shape)));
        }
        let map = permute_index_map(&in_shape, axes);
        let xv = self.value(x).data();
        let out: Vec<T> = map.iter().map(|&s| xv[s]).collect();
        let oshape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let op = Op::Permute { x: x.0, in_shape, axes: axes.to_vec() };
        self.push("permute", Tensor::new(oshape, out)?, op, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> R {
        if self.shape(x).len() != 2 {
            return Err(TensorError::shape("transpose", format!("{:?}", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    /// Picks rows (of the last-axis width) from `x`; `None` yields a zero row.
    /// The result has shape `out_shape`, whose last extent must equal the row width.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>], out_shape: &[usize]) -> R {
        let w = *self.shape(x).last().ok_or(TensorError::shape("gather_rows", "scalar input"))?;
        let rows = self.value(x).numel().checked_div(w).unwrap_or(0);
        if out_shape.last() != Some(&w) || out_shape.iter().product::<usize>() != idx.len() * w {
            return Err(TensorError::shape("gather_rows", format!("out {:?} for {} rows of {}", out_shape, idx.len(), w)));
        }
        if idx.iter().flatten().any(|&i| i >= rows) {
            return Err(TensorError::shape("gather_rows", "row index out of range"));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); idx.len() * w];
        for (o, src) in idx.iter().enumerate() {
            if let Some(s) = *src {
                out[o * w..(o + 1) * w].copy_from_slice(&xv[s * w..(s + 1) * w]);
            }
        }
        let op = Op::GatherRows { x: x.0, idx: idx.to_vec(), w };
        self.push("gather_rows", Tensor::new(out_shape.to_vec(), out)?, op, &[x])
    }

    /// Stacks `[F, d]` on top of `[S, d]` giving `[F + S, d]`.
    pub fn concat_time(&mut self, a: Var, b: Var) -> R {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[1] {
            return Err(TensorError::shape("concat_time", format!("{:?} ++ {:?}", ash, bsh)));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b).data());
        let split = self.value(a).numel();
        let op = Op::ConcatRows { a: a.0, b: b.0, split };
        self.push("concat_time", Tensor::new([ash[0] + bsh[0], ash[1]], out)?, op, &[a, b])
    }

    /// Inverted dropout; the identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> R {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let xv = self.value(x).data();
        let out: Vec<T> = xv.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push("dropout", Tensor::new(shape, out)?, Op::Dropout { x: x.0, mask }, &[x])
    }

    /// Scales each last-axis row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> R {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or(TensorError::shape("l2_normalize", "scalar input"))?;
        let xv = self.value(x).data();
        let rows = xv.len().checked_div(w).unwrap_or(0);
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * w..(r + 1) * w];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(nrm > T::lit(1e-12)) {
                return Err(TensorError::Degenerate);
            }
            for j in 0..w {
                out[r * w + j] = row[j] / nrm;
            }
            norms.push(nrm);
        }
        let op = Op::L2Normalize { x: x.0, norms, w };
        self.push("l2_normalize", Tensor::new(shape, out)?, op, &[x])
    }
}
