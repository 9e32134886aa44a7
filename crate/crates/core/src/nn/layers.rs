use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::TensorError;

use super::params::{Bound, Init, ParamId, ParamStore, Scheme};

type R = Result<Var, TensorError>;

pub const LN_EPS: f64 = 1e-5;

/// Fully connected layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, scheme: Scheme) -> Self {
        let weight = store.add(format!("{name}.weight"), &[in_dim, out_dim], Init::Weight { scheme, fan_in: in_dim, fan_out: out_dim });
        let bias = store.add(format!("{name}.bias"), &[out_dim], Init::Zeros);
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> R {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add_bcast(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        LayerNorm { gain: store.add(format!("{name}.gain"), &[d], Init::Ones), bias: store.add(format!("{name}.bias"), &[d], Init::Zeros) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> R {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), T::lit(LN_EPS))
    }
}

/// Multi-head scaled dot-product attention over padded `[B, T, d]` batches.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, scheme: Scheme) -> Result<Self, TensorError> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(TensorError::shape("mha", format!("width {d} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, scheme),
            k: Linear::new(store, &format!("{name}.k"), d, d, scheme),
            v: Linear::new(store, &format!("{name}.v"), d, d, scheme),
            o: Linear::new(store, &format!("{name}.o"), d, d, scheme),
            heads,
            d,
        })
    }

    /// `[B, T, d] -> [B*H, T, d/H]`
    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var) -> R {
        let (b, t) = (g.shape(x)[0], g.shape(x)[1]);
        let dh = self.d / self.heads;
        let x = g.reshape(x, &[b, t, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, t, dh])
    }

    /// Attention output and the `[B*H, Tq, Tk]` weight tensor.
    ///
    /// Keys past `key_lens[b]` in batch item `b` receive zero weight.
    pub fn forward_with_weights<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        key_lens: &[usize],
    ) -> Result<(Var, Var), TensorError> {
        let (qs, ks) = (g.shape(q_in).to_vec(), g.shape(k_in).to_vec());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.d || ks[2] != self.d || g.shape(v_in) != ks {
            return Err(TensorError::shape("mha", format!("q {:?} k {:?} v {:?}", qs, ks, g.shape(v_in))));
        }
        if key_lens.len() != qs[0] {
            return Err(TensorError::shape("mha", "one key length per batch item"));
        }
        if key_lens.contains(&0) {
            return Err(TensorError::EmptyReduction { op: "mha: empty key set" });
        }
        let (b, tq) = (qs[0], qs[1]);
        let dh = self.d / self.heads;
        let q = self.q.forward(g, p, q_in)?;
        let k = self.k.forward(g, p, k_in)?;
        let v = self.v.forward(g, p, v_in)?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()))?;
        let valid: Vec<usize> = key_lens.iter().flat_map(|&l| std::iter::repeat_n(l, self.heads * tq)).collect();
        let attn = g.masked_softmax(scores, &valid)?;
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.reshape(ctx, &[b, self.heads, tq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, tq, self.d])?;
        Ok((self.o.forward(g, p, ctx)?, attn))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, q: Var, k: Var, v: Var, key_lens: &[usize]) -> R {
        Ok(self.forward_with_weights(g, p, q, k, v, key_lens)?.0)
    }
}

/// Position-wise `Linear(d, 4d) -> ReLU -> Linear(4d, d)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, scheme: Scheme) -> Self {
        FeedForward {
            l1: Linear::new(store, &format!("{name}.l1"), d, 4 * d, scheme),
            l2: Linear::new(store, &format!("{name}.l2"), 4 * d, d, scheme),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> R {
        let h = self.l1.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.l2.forward(g, p, h)
    }
}

/// Post-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        dropout: f64,
        scheme: Scheme,
    ) -> Result<Self, TensorError> {
        Ok(EncoderBlock {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, scheme)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, scheme),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            dropout,
        })
    }

    /// `x <- LN(x + Drop(MHA(x, x, x))); x <- LN(x + Drop(FFN(x)))` over `[B, T, d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, lens: &[usize]) -> R {
        let a = self.attn.forward(g, p, x, x, x, lens)?;
        let a = g.dropout(a, self.dropout)?;
        let x = g.add(x, a)?;
        let x = self.ln1.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, x)?;
        let f = g.dropout(f, self.dropout)?;
        let x = g.add(x, f)?;
        self.ln2.forward(g, p, x)
    }
}

/// Cross-attention block with no self-attention sublayer.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub dropout: f64,
}

impl DecoderBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        dropout: f64,
        scheme: Scheme,
    ) -> Result<Self, TensorError> {
        Ok(DecoderBlock {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, scheme)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, scheme),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            dropout,
        })
    }

    /// `x <- LN(q + Drop(MHA(q, mem + pos, mem))); x <- LN(x + Drop(FFN(x)))`.
    ///
    /// `query` is `[B, Tq, d]`, `memory` is `[B, Tm, d]`; `memory_pos`, when
    /// given, is added to the keys only.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query: Var,
        memory: Var,
        memory_pos: Option<Var>,
        memory_lens: &[usize],
    ) -> R {
        let keys = match memory_pos {
            Some(pos) => g.add(memory, pos)?,
            None => memory,
        };
        let a = self.attn.forward(g, p, query, keys, memory, memory_lens)?;
        let a = g.dropout(a, self.dropout)?;
        let x = g.add(query, a)?;
        let x = self.ln1.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, x)?;
        let f = g.dropout(f, self.dropout)?;
        let x = g.add(x, f)?;
        self.ln2.forward(g, p, x)
    }
}

/// `FC(d,d) -> ReLU -> FC(d,d) -> ReLU -> FC(d,out) -> sigmoid`.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl MlpHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, out: usize, scheme: Scheme) -> Self {
        MlpHead {
            l1: Linear::new(store, &format!("{name}.l1"), d, d, scheme),
            l2: Linear::new(store, &format!("{name}.l2"), d, d, scheme),
            l3: Linear::new(store, &format!("{name}.l3"), d, out, scheme),
        }
    }

    /// Each output lies strictly inside `(0, 1)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> R {
        let h = self.l1.forward(g, p, x)?;
        let h = g.relu(h)?;
        let h = self.l2.forward(g, p, h)?;
        let h = g.relu(h)?;
        let h = self.l3.forward(g, p, h)?;
        g.sigmoid(h)
    }
}

/// Sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(...)`.
pub fn sinusoidal_pe<T: Real>(n: usize, d: usize) -> Result<Tensor<T>, TensorError> {
    if !d.is_multiple_of(2) {
        return Err(TensorError::shape("sinusoidal_pe", format!("odd width {d}")));
    }
    let mut data = vec![T::zero(); n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = T::lit(angle.sin());
            data[pos * d + 2 * i + 1] = T::lit(angle.cos());
        }
    }
    Tensor::new([n, d], data)
}
