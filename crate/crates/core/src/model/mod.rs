//! The grounding network: unimodal enhancement, video-to-music matching,
//! cross-modal fusion, and single-query moment decoding.

mod config;

pub use config::{Enhancement, LossMode, MatchingMode, ModelConfig, Phi0Source, PredictMode};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result, TensorError};
use crate::nn::{sinusoidal_pe, Bound, DecoderBlock, EncoderBlock, Init, Linear, MlpHead, ParamId, ParamStore, Scheme};

type R = std::result::Result<Var, TensorError>;

/// Initial value of the learnable log inverse temperature, `ln(1 / 0.07)`.
pub const LOGIT_SCALE_INIT: f64 = 2.659_260_036_932_778;
/// Upper bound on the inverse temperature.
pub const LOGIT_SCALE_MAX: f64 = 100.0;

/// Matching score and normalised moment for one (video, track) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingOutput {
    pub p_s: f64,
    pub p_c: f64,
    pub p_w: f64,
}

/// A padded `[B, T, w]` batch of token sequences with per-item valid lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch<T> {
    pub data: Tensor<T>,
    pub lens: Vec<usize>,
}

impl<T: Real> SeqBatch<T> {
    /// Stacks `[n_i, w]` sequences, zero-padding each to the longest.
    pub fn from_sequences(seqs: &[&Tensor<T>]) -> std::result::Result<Self, TensorError> {
        let Some(first) = seqs.first() else {
            return Err(TensorError::EmptyReduction { op: "seq_batch" });
        };
        if first.rank() != 2 {
            return Err(TensorError::shape("seq_batch", format!("{:?}", first.shape())));
        }
        let w = first.shape()[1];
        if let Some(bad) = seqs.iter().find(|s| s.rank() != 2 || s.shape()[1] != w) {
            return Err(TensorError::shape("seq_batch", format!("{:?} vs width {w}", bad.shape())));
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.shape()[0]).collect();
        if lens.contains(&0) {
            return Err(TensorError::EmptyReduction { op: "seq_batch" });
        }
        let t = *lens.iter().max().unwrap();
        let mut data = vec![T::zero(); seqs.len() * t * w];
        for (b, s) in seqs.iter().enumerate() {
            data[b * t * w..b * t * w + s.numel()].copy_from_slice(s.data());
        }
        Ok(SeqBatch { data: Tensor::new([seqs.len(), t, w], data)?, lens })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }
}

/// Enhanced tokens for a batch, `[B, T, d]` with valid lengths.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub tokens: Var,
    pub lens: Vec<usize>,
}

/// Similarity matrices between every video and every track in a batch.
#[derive(Clone, Debug)]
pub struct Similarity {
    /// The individual cosine terms, `[Bv, Bm]` each: one per contrastive loss term.
    pub parts: Vec<Var>,
    /// The matching score `p_s`, `[Bv, Bm]`.
    pub score: Var,
}

/// Decoder outputs for a batch of aligned (video, track) pairs.
#[derive(Clone, Debug)]
pub struct Detection {
    /// Normalised centres, `[B, Q]`.
    pub center: Var,
    /// Normalised widths, `[B, Q]`.
    pub width: Var,
    /// Confidence logits, `[B, Q]`, present when there are several query tokens.
    pub confidence: Option<Var>,
    /// Head outputs after each earlier decoder layer, when auxiliary supervision is on.
    pub intermediate: Vec<(Var, Var)>,
}

impl Detection {
    /// Per item, the `(p_c, p_w)` of the most confident query token.
    pub fn select<T: Real>(&self, g: &Graph<T>) -> Vec<(f64, f64)> {
        let c = g.value(self.center);
        let w = g.value(self.width);
        let (b, q) = (c.shape()[0], c.shape()[1]);
        (0..b)
            .map(|i| {
                let k = match self.confidence {
                    Some(conf) => argmax(g.value(conf).row(i)),
                    None => 0,
                };
                let at = i * q + k;
                (c.data()[at].to_f64().unwrap(), w.data()[at].to_f64().unwrap())
            })
            .collect()
    }
}

fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
enum Enhancer {
    None,
    Sa(Vec<EncoderBlock>),
    Mlp(Linear, Linear),
}

/// Single-head attention pooling with the video embedding as query.
#[derive(Clone, Debug)]
pub struct XPool {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub d: usize,
}

impl XPool {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let lin = |store: &mut ParamStore<T>, s: &str| Linear::new(store, &format!("{name}.{s}"), d, d, Scheme::Kaiming);
        XPool { q: lin(store, "q"), k: lin(store, "k"), v: lin(store, "v"), o: lin(store, "o"), d }
    }

    fn inv_sqrt_d<T: Real>(&self) -> T {
        T::lit(1.0 / (self.d as f64).sqrt())
    }

    /// Pools `segs[b]` with query `h_v[b]`: `[B, d]`, `[B, S, d]` -> `[B, d]`.
    pub fn aligned<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h_v: Var, segs: Var, lens: &[usize]) -> R {
        let b = g.shape(h_v)[0];
        let q = self.q.forward(g, p, h_v)?;
        let q = g.reshape(q, &[b, 1, self.d])?;
        let k = self.k.forward(g, p, segs)?;
        let v = self.v.forward(g, p, segs)?;
        let s = g.bmm(q, k, true)?;
        let s = g.scale(s, self.inv_sqrt_d())?;
        let a = g.masked_softmax(s, lens)?;
        let ctx = g.bmm(a, v, false)?;
        let ctx = g.reshape(ctx, &[b, self.d])?;
        self.o.forward(g, p, ctx)
    }

    /// Pools every track for every video: `[Bv, d]`, `[Bm, S, d]` -> `[Bv, Bm, d]`.
    pub fn all_pairs<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h_v: Var, segs: Var, lens: &[usize]) -> R {
        let bv = g.shape(h_v)[0];
        let (bm, s) = (g.shape(segs)[0], g.shape(segs)[1]);
        let q = self.q.forward(g, p, h_v)?;
        let k = self.k.forward(g, p, segs)?;
        let v = self.v.forward(g, p, segs)?;
        let k = g.reshape(k, &[bm * s, self.d])?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.reshape(scores, &[bv, bm, s])?;
        let scores = g.scale(scores, self.inv_sqrt_d())?;
        let valid: Vec<usize> = (0..bv).flat_map(|_| lens.iter().copied()).collect();
        let a = g.masked_softmax(scores, &valid)?;
        let a = g.permute(a, &[1, 0, 2])?;
        let ctx = g.bmm(a, v, false)?;
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        self.o.forward(g, p, ctx)
    }
}

/// Row-wise cosine similarity of two equally shaped tensors, over the last axis.
pub fn cosine_rows<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> R {
    let an = g.l2_normalize(a)?;
    let bn = g.l2_normalize(b)?;
    let prod = g.mul(an, bn)?;
    let axis = g.shape(prod).len() - 1;
    g.sum_axis(prod, axis)
}

/// Cosine similarity between every row of `a: [Bv, d]` and every row of `b: [Bm, d]`.
pub fn cosine_matrix<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> R {
    let an = g.l2_normalize(a)?;
    let bn = g.l2_normalize(b)?;
    let bt = g.transpose(bn)?;
    g.matmul(an, bt)
}

/// `cs(h_v[i], c[i, j])` for `h_v: [Bv, d]` and per-pair track embeddings `c: [Bv, Bm, d]`.
fn cosine_pairs<T: Real>(g: &mut Graph<T>, h_v: Var, c: Var) -> R {
    let (bv, d) = (g.shape(h_v)[0], g.shape(h_v)[1]);
    let bm = g.shape(c)[1];
    let hn = g.l2_normalize(h_v)?;
    let hn = g.reshape(hn, &[bv, d, 1])?;
    let cn = g.l2_normalize(c)?;
    let s = g.bmm(cn, hn, false)?;
    g.reshape(s, &[bv, bm])
}

/// Column `j` of `x: [B, Q, n]` as `[B, Q]`.
fn column<T: Real>(g: &mut Graph<T>, x: Var, j: usize) -> R {
    let (b, q, n) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
    let flat = g.reshape(x, &[b * q, n])?;
    let t = g.transpose(flat)?;
    let c = g.gather_rows(t, &[Some(j)], &[1, b * q])?;
    g.reshape(c, &[b, q])
}

/// The grounding network. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Made {
    cfg: ModelConfig,
    video_proj: Linear,
    music_proj: Linear,
    video_enh: Enhancer,
    music_enh: Enhancer,
    xpool: Option<XPool>,
    fusion: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    query_pos: ParamId,
    head: MlpHead,
    confidence: Option<Linear>,
    logit_scale: ParamId,
}

impl Made {
    /// Registers every parameter in `store`; names and order depend only on `cfg`.
    pub fn new<T: Real>(cfg: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let enhancer = |store: &mut ParamStore<T>, name: &str| -> Result<Enhancer> {
            Ok(match cfg.enhancement {
                Enhancement::None => Enhancer::None,
                Enhancement::Sa => Enhancer::Sa(
                    (0..cfg.enc_sa_layers)
                        .map(|i| EncoderBlock::new(store, &format!("{name}.sa{i}"), d, cfg.heads, cfg.dropout, Scheme::Kaiming))
                        .collect::<std::result::Result<_, _>>()?,
                ),
                Enhancement::Mlp => Enhancer::Mlp(
                    Linear::new(store, &format!("{name}.mlp1"), d, d, Scheme::Kaiming),
                    Linear::new(store, &format!("{name}.mlp2"), d, d, Scheme::Kaiming),
                ),
            })
        };
        let video_proj = Linear::new(store, "video.proj", cfg.video_dim, d, Scheme::Kaiming);
        let video_enh = enhancer(store, "video")?;
        let music_proj = Linear::new(store, "music.proj", cfg.music_dim, d, Scheme::Kaiming);
        let music_enh = enhancer(store, "music")?;
        let xpool = cfg.uses_xpool().then(|| XPool::new(store, "xpool", d));
        let fusion = (0..cfg.fusion_sa_layers)
            .map(|i| EncoderBlock::new(store, &format!("fusion.sa{i}"), d, cfg.heads, cfg.dropout, Scheme::Kaiming))
            .collect::<std::result::Result<_, _>>()?;
        let decoder = (0..cfg.decoder_ca_layers)
            .map(|i| DecoderBlock::new(store, &format!("decoder.ca{i}"), d, cfg.heads, cfg.dropout, Scheme::Xavier))
            .collect::<std::result::Result<_, _>>()?;
        let q = cfg.query_tokens;
        let query_pos = store.add("decoder.query_pos", &[q, d], Init::Weight { scheme: Scheme::Xavier, fan_in: d, fan_out: q });
        let out = match cfg.predict {
            PredictMode::CenterWidth => 2,
            PredictMode::CenterOnly => 1,
        };
        let head = MlpHead::new(store, "head", d, out, Scheme::Xavier);
        let confidence = (q > 1).then(|| Linear::new(store, "head.confidence", d, 1, Scheme::Xavier));
        let logit_scale = store.add("logit_scale", &[], Init::Const(LOGIT_SCALE_INIT));
        Ok(Made { cfg, video_proj, music_proj, video_enh, music_enh, xpool, fusion, decoder, query_pos, head, confidence, logit_scale })
    }

    /// Builds the model with a freshly initialised store.
    pub fn init<T: Real>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Made::new(cfg, &mut store)?;
        store.initialize(seed);
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Inverse temperature `min(exp(logit_scale), 100)` as a scalar graph node.
    pub fn inverse_temperature<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> R {
        let s = g.exp(p.var(self.logit_scale))?;
        g.clamp_max(s, T::lit(LOGIT_SCALE_MAX))
    }

    fn enhance<T: Real>(&self, g: &mut Graph<T>, p: &Bound, enh: &Enhancer, x: Var, lens: &[usize]) -> R {
        match enh {
            Enhancer::None => Ok(x),
            Enhancer::Sa(blocks) => {
                let pe = g.constant(sinusoidal_pe(g.shape(x)[1], self.cfg.d)?);
                let mut x = x;
                for blk in blocks {
                    let xin = g.add_bcast(x, pe)?;
                    x = blk.forward(g, p, xin, lens)?;
                }
                Ok(x)
            }
            Enhancer::Mlp(l1, l2) => {
                let h = l1.forward(g, p, x)?;
                let h = g.relu(h)?;
                l2.forward(g, p, h)
            }
        }
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, x: Var, lens: &[usize], width: usize, what: &str) -> Result<()> {
        let sh = g.shape(x);
        if sh.len() != 3 || sh[2] != width || sh[0] != lens.len() {
            return Err(Error::Data(format!("{what} tokens {:?}: expected [B, T, {width}]", sh)));
        }
        if lens.iter().any(|&l| l == 0 || l > sh[1]) {
            return Err(Error::Data(format!("{what} lengths {:?} invalid for {:?}", lens, sh)));
        }
        Ok(())
    }

    /// Projects `[B, F, video_dim]` frame tokens to `[B, F, d]` and enhances them.
    pub fn enhance_video<T: Real>(&self, g: &mut Graph<T>, p: &Bound, frames: Var, lens: &[usize]) -> Result<Encoded> {
        self.check_input(g, frames, lens, self.cfg.video_dim, "video")?;
        let x = self.video_proj.forward(g, p, frames)?;
        let tokens = self.enhance(g, p, &self.video_enh, x, lens)?;
        Ok(Encoded { tokens, lens: lens.to_vec() })
    }

    /// Projects `[B, S, music_dim]` segment tokens to `[B, S, d]` and enhances them.
    pub fn enhance_music<T: Real>(&self, g: &mut Graph<T>, p: &Bound, segs: Var, lens: &[usize]) -> Result<Encoded> {
        self.check_input(g, segs, lens, self.cfg.music_dim, "music")?;
        let x = self.music_proj.forward(g, p, segs)?;
        let tokens = self.enhance(g, p, &self.music_enh, x, lens)?;
        Ok(Encoded { tokens, lens: lens.to_vec() })
    }

    /// Feeds a padded batch through [`Made::enhance_video`].
    pub fn encode_videos<T: Real>(&self, g: &mut Graph<T>, p: &Bound, batch: &SeqBatch<T>) -> Result<Encoded> {
        let x = g.constant(batch.data.clone());
        self.enhance_video(g, p, x, &batch.lens)
    }

    /// Feeds a padded batch through [`Made::enhance_music`].
    pub fn encode_music<T: Real>(&self, g: &mut Graph<T>, p: &Bound, batch: &SeqBatch<T>) -> Result<Encoded> {
        let x = g.constant(batch.data.clone());
        self.enhance_music(g, p, x, &batch.lens)
    }

    /// Mean over the valid tokens, `[B, d]`.
    pub fn pool<T: Real>(&self, g: &mut Graph<T>, e: &Encoded) -> R {
        g.masked_mean_rows(e.tokens, &e.lens)
    }

    fn xpool(&self) -> Result<&XPool> {
        self.xpool.as_ref().ok_or_else(|| Error::Config("attention pooling is disabled by matching_mode".into()))
    }

    /// Attention-pooled track embedding for each aligned pair, `[B, d]`.
    pub fn xpool_aligned<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h_v: Var, music: &Encoded) -> Result<Var> {
        Ok(self.xpool()?.aligned(g, p, h_v, music.tokens, &music.lens)?)
    }

    /// Combines precomputed similarity terms into the configured score.
    ///
    /// `sim0` compares against the mean-pooled track, `sim1` against the
    /// attention-pooled one, `sim_add` against their sum.
    fn combine<T: Real>(&self, g: &mut Graph<T>, sim0: Option<Var>, sim1: Option<Var>, sim_add: Option<Var>) -> Result<Similarity> {
        let missing = || Error::Config("similarity term missing for matching_mode".into());
        Ok(match self.cfg.matching_mode {
            MatchingMode::Both => {
                let (a, b) = (sim0.ok_or_else(missing)?, sim1.ok_or_else(missing)?);
                let score = g.add(a, b)?;
                let parts = match self.cfg.loss_mode {
                    LossMode::Joint => vec![a, b],
                    LossMode::Single => vec![score],
                };
                Similarity { parts, score }
            }
            MatchingMode::MeanOnly => {
                let a = sim0.ok_or_else(missing)?;
                Similarity { parts: vec![a], score: a }
            }
            MatchingMode::XpoolOnly => {
                let b = sim1.ok_or_else(missing)?;
                Similarity { parts: vec![b], score: b }
            }
            MatchingMode::FeatureAdd => {
                let c = sim_add.ok_or_else(missing)?;
                Similarity { parts: vec![c], score: c }
            }
        })
    }

    /// Scores given pooled embeddings. `h1` is `[Bv, Bm, d]`, or `None` in mean-only mode.
    pub fn score_embeddings<T: Real>(&self, g: &mut Graph<T>, h_v: Var, h0: Var, h1: Option<Var>) -> Result<Similarity> {
        let mode = self.cfg.matching_mode;
        let sim0 = match mode {
            MatchingMode::Both | MatchingMode::MeanOnly => Some(cosine_matrix(g, h_v, h0)?),
            _ => None,
        };
        let sim1 = match (mode, h1) {
            (MatchingMode::Both | MatchingMode::XpoolOnly, Some(h1)) => Some(cosine_pairs(g, h_v, h1)?),
            _ => None,
        };
        let sim_add = match (mode, h1) {
            (MatchingMode::FeatureAdd, Some(h1)) => {
                let sum = g.add_bcast(h1, h0)?;
                Some(cosine_pairs(g, h_v, sum)?)
            }
            _ => None,
        };
        self.combine(g, sim0, sim1, sim_add)
    }

    /// Matching scores between every video and every track of two batches, `[Bv, Bm]`.
    pub fn similarity<T: Real>(&self, g: &mut Graph<T>, p: &Bound, video: &Encoded, music: &Encoded) -> Result<Similarity> {
        let h_v = self.pool(g, video)?;
        let h0 = self.pool(g, music)?;
        let h1 = match &self.xpool {
            Some(xp) => Some(xp.all_pairs(g, p, h_v, music.tokens, &music.lens)?),
            None => None,
        };
        self.score_embeddings(g, h_v, h0, h1)
    }

    /// Matching score of each aligned (video, track) pair, `[B]`.
    pub fn pair_scores<T: Real>(&self, g: &mut Graph<T>, p: &Bound, video: &Encoded, music: &Encoded) -> Result<Var> {
        let h_v = self.pool(g, video)?;
        let h0 = self.pool(g, music)?;
        let h1 = match &self.xpool {
            Some(xp) => Some(xp.aligned(g, p, h_v, music.tokens, &music.lens)?),
            None => None,
        };
        let mode = self.cfg.matching_mode;
        let sim0 = match mode {
            MatchingMode::Both | MatchingMode::MeanOnly => Some(cosine_rows(g, h_v, h0)?),
            _ => None,
        };
        let sim1 = match (mode, h1) {
            (MatchingMode::Both | MatchingMode::XpoolOnly, Some(h1)) => Some(cosine_rows(g, h_v, h1)?),
            _ => None,
        };
        let sim_add = match (mode, h1) {
            (MatchingMode::FeatureAdd, Some(h1)) => {
                let sum = g.add(h0, h1)?;
                Some(cosine_rows(g, h_v, sum)?)
            }
            _ => None,
        };
        Ok(self.combine(g, sim0, sim1, sim_add)?.score)
    }

    /// Row layout of the fused `[video ⓒ music]` sequence for each batch item.
    fn fusion_layout(fv: usize, fm: usize, vl: &[usize], ml: &[usize]) -> (Vec<Option<usize>>, Vec<usize>, usize) {
        let b = vl.len();
        let lens: Vec<usize> = vl.iter().zip(ml).map(|(a, c)| a + c).collect();
        let tc = *lens.iter().max().unwrap_or(&0);
        let mut idx = Vec::with_capacity(b * tc);
        for i in 0..b {
            for t in 0..tc {
                idx.push(if t < vl[i] {
                    Some(i * fv + t)
                } else if t < lens[i] {
                    Some(b * fv + i * fm + (t - vl[i]))
                } else {
                    None
                });
            }
        }
        (idx, lens, tc)
    }

    /// Localises the moment for each aligned (video, track) pair.
    ///
    /// `video_widths[b]` is the normalised duration of video `b`; it is the
    /// predicted width when the model only regresses centres.
    pub fn detect<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        video: &Encoded,
        music: &Encoded,
        video_widths: &[f64],
    ) -> Result<Detection> {
        let b = video.lens.len();
        if music.lens.len() != b || video_widths.len() != b {
            return Err(Error::Data("detect: batch sizes differ".into()));
        }
        let d = self.cfg.d;
        let (fv, fm) = (g.shape(video.tokens)[1], g.shape(music.tokens)[1]);
        let pe_v: Tensor<T> = sinusoidal_pe(fv, d)?;
        let pe_m: Tensor<T> = sinusoidal_pe(fm, d)?;
        let pv = g.constant(pe_v.clone());
        let pm = g.constant(pe_m.clone());
        let v = g.add_bcast(video.tokens, pv)?;
        let m = g.add_bcast(music.tokens, pm)?;
        let v = g.reshape(v, &[b * fv, d])?;
        let m = g.reshape(m, &[b * fm, d])?;
        let cat = g.concat_time(v, m)?;
        let (idx, lens_c, tc) = Self::fusion_layout(fv, fm, &video.lens, &music.lens);
        let mut x = g.gather_rows(cat, &idx, &[b, tc, d])?;

        let mut pos = vec![T::zero(); b * tc * d];
        for i in 0..b {
            for t in 0..lens_c[i] {
                let src = if t < video.lens[i] { pe_v.row(t) } else { pe_m.row(t - video.lens[i]) };
                pos[(i * tc + t) * d..(i * tc + t + 1) * d].copy_from_slice(src);
            }
        }
        let pos = g.constant(Tensor::new([b, tc, d], pos)?);

        for blk in &self.fusion {
            x = blk.forward(g, p, x, &lens_c)?;
        }
        let memory = x;

        let phi0 = match self.cfg.phi0_source {
            Phi0Source::Video => self.pool(g, video)?,
            Phi0Source::Zero => g.constant(Tensor::zeros([b, d])),
            Phi0Source::MusicMean => self.pool(g, music)?,
            Phi0Source::MusicXpool => {
                let h_v = self.pool(g, video)?;
                self.xpool_aligned(g, p, h_v, music)?
            }
        };
        let q = self.cfg.query_tokens;
        let rep: Vec<Option<usize>> = (0..b).flat_map(|i| std::iter::repeat_n(Some(i), q)).collect();
        let mut phi = g.gather_rows(phi0, &rep, &[b, q, d])?;
        let query_pos = p.var(self.query_pos);

        let mut intermediate = Vec::new();
        let last = self.decoder.len() - 1;
        for (k, blk) in self.decoder.iter().enumerate() {
            let query = g.add_bcast(phi, query_pos)?;
            phi = blk.forward(g, p, query, memory, Some(pos), &lens_c)?;
            if self.cfg.aux_loss && k < last {
                intermediate.push(self.moment_head(g, p, phi, video_widths)?);
            }
        }
        let (center, width) = self.moment_head(g, p, phi, video_widths)?;
        let confidence = match &self.confidence {
            Some(lin) => {
                let c = lin.forward(g, p, phi)?;
                Some(g.reshape(c, &[b, q])?)
            }
            None => None,
        };
        Ok(Detection { center, width, confidence, intermediate })
    }

    fn moment_head<T: Real>(&self, g: &mut Graph<T>, p: &Bound, phi: Var, video_widths: &[f64]) -> Result<(Var, Var)> {
        let (b, q) = (g.shape(phi)[0], g.shape(phi)[1]);
        let y = self.head.forward(g, p, phi)?;
        let center = column(g, y, 0)?;
        let width = match self.cfg.predict {
            PredictMode::CenterWidth => column(g, y, 1)?,
            PredictMode::CenterOnly => {
                let w = Tensor::from_fn([b, q], |i| T::lit(video_widths[i / q]));
                g.constant(w)
            }
        };
        Ok((center, width))
    }

    /// Scores and localises one (video, track) pair in inference mode.
    ///
    /// `video_width` is the video duration divided by the dataset normaliser.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        video: &Tensor<T>,
        music: &Tensor<T>,
        video_width: f64,
    ) -> Result<GroundingOutput> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let vb = SeqBatch::from_sequences(&[video])?;
        let mb = SeqBatch::from_sequences(&[music])?;
        let ve = self.encode_videos(&mut g, &p, &vb)?;
        let me = self.encode_music(&mut g, &p, &mb)?;
        let s = self.pair_scores(&mut g, &p, &ve, &me)?;
        let det = self.detect(&mut g, &p, &ve, &me, &[video_width])?;
        let (p_c, p_w) = det.select(&g)[0];
        Ok(GroundingOutput { p_s: g.value(s).data()[0].to_f64().unwrap(), p_c, p_w })
    }
}
