//! Batched inference, evaluation and single-query prediction.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use crate::autodiff::{Graph, Tensor};
use crate::data::{denormalize_moment, FeatureStore, Manifest, TokenSequence};
use crate::error::{Error, Result};
use crate::metrics::{rank_candidates, EvalMode, EvalReport, GroundTruth, RankedEntry, RankedPrediction};
use crate::model::{Encoded, Made, SeqBatch};
use crate::nn::ParamStore;

/// Items per inference graph.
pub const INFERENCE_CHUNK: usize = 32;

/// Inference-mode access to a network and its weights.
#[derive(Clone, Copy, Debug)]
pub struct Inference<'a> {
    pub model: &'a Made,
    pub params: &'a ParamStore<f32>,
    pub d_max: f64,
}

/// Scores and normalised moment for one (video, track) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairOutput {
    pub p_s: f64,
    pub p_c: f64,
    pub p_w: f64,
}

fn constant_batch(g: &mut Graph<f32>, seqs: &[&Tensor<f32>]) -> Result<Encoded> {
    let b = SeqBatch::from_sequences(seqs)?;
    Ok(Encoded { tokens: g.constant(b.data), lens: b.lens })
}

fn unpad(g: &Graph<f32>, e: &Encoded) -> Result<Vec<Tensor<f32>>> {
    let t = g.value(e.tokens);
    let (steps, d) = (t.shape()[1], t.shape()[2]);
    e.lens.iter().enumerate().map(|(i, &len)| Ok(t.slice_rows(i, 1)?.reshape([steps, d])?.slice_rows(0, len)?)).collect()
}

fn check_width(seq: &TokenSequence, want: usize, what: &str) -> Result<()> {
    if seq.width() != want {
        return Err(Error::Data(format!("{what} features have width {}, the checkpoint expects {want}", seq.width())));
    }
    Ok(())
}

impl Inference<'_> {
    /// Enhanced video tokens, one `[F, d]` tensor per input.
    pub fn encode_videos(&self, seqs: &[&TokenSequence]) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::inference();
            let p = self.params.bind(&mut g);
            for s in chunk {
                check_width(s, self.model.config().video_dim, "video")?;
            }
            let raw: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.tokens).collect();
            let e = self.model.encode_videos(&mut g, &p, &SeqBatch::from_sequences(&raw)?)?;
            out.extend(unpad(&g, &e)?);
        }
        Ok(out)
    }

    /// Enhanced music tokens, one `[S, d]` tensor per input.
    pub fn encode_tracks(&self, seqs: &[&TokenSequence]) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::inference();
            let p = self.params.bind(&mut g);
            for s in chunk {
                check_width(s, self.model.config().music_dim, "music")?;
            }
            let raw: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.tokens).collect();
            let e = self.model.encode_music(&mut g, &p, &SeqBatch::from_sequences(&raw)?)?;
            out.extend(unpad(&g, &e)?);
        }
        Ok(out)
    }

    /// `p_s` for every (video, track) combination, indexed `[video][track]`.
    pub fn score_matrix(&self, videos: &[Tensor<f32>], tracks: &[Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::with_capacity(tracks.len()); videos.len()];
        for (vc, vchunk) in videos.chunks(INFERENCE_CHUNK).enumerate() {
            for tchunk in tracks.chunks(INFERENCE_CHUNK) {
                let mut g = Graph::inference();
                let p = self.params.bind(&mut g);
                let ve = constant_batch(&mut g, &vchunk.iter().collect::<Vec<_>>())?;
                let me = constant_batch(&mut g, &tchunk.iter().collect::<Vec<_>>())?;
                let sim = self.model.similarity(&mut g, &p, &ve, &me)?;
                let s = g.value(sim.score);
                for i in 0..vchunk.len() {
                    out[vc * INFERENCE_CHUNK + i].extend(s.row(i).iter().map(|&x| f64::from(x)));
                }
            }
        }
        Ok(out)
    }

    /// Score and moment of aligned pairs `(video tokens, track tokens, normalised video width)`.
    pub fn pairs(&self, pairs: &[(&Tensor<f32>, &Tensor<f32>, f64)]) -> Result<Vec<PairOutput>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::inference();
            let p = self.params.bind(&mut g);
            let ve = constant_batch(&mut g, &chunk.iter().map(|c| c.0).collect::<Vec<_>>())?;
            let me = constant_batch(&mut g, &chunk.iter().map(|c| c.1).collect::<Vec<_>>())?;
            let widths: Vec<f64> = chunk.iter().map(|c| c.2).collect();
            let s = self.model.pair_scores(&mut g, &p, &ve, &me)?;
            let det = self.model.detect(&mut g, &p, &ve, &me, &widths)?;
            let scores = g.value(s).data();
            out.extend(det.select(&g).into_iter().zip(scores).map(|((p_c, p_w), &p_s)| PairOutput { p_s: f64::from(p_s), p_c, p_w }));
        }
        Ok(out)
    }
}

/// A report together with the prediction records it was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<RankedPrediction>,
}

impl Evaluation {
    /// Prediction file contents: one JSON record per line.
    pub fn predictions_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for p in &self.predictions {
            s.push_str(&serde_json::to_string(p)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn report_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.report)? + "\n")
    }
}

/// Evaluates a manifest split.
///
/// In single-music mode only ground-truth pairs are scored. In music-set mode
/// every query is scored against every candidate and moments are detected on
/// the `detect_top` best-ranked tracks.
pub fn evaluate_with(
    inf: Inference<'_>,
    manifest: &Manifest,
    features: &FeatureStore,
    mode: EvalMode,
    detect_top: usize,
) -> Result<Evaluation> {
    if manifest.entries.is_empty() {
        return Err(Error::Data(format!("split {} has no queries", manifest.split)));
    }
    if detect_top == 0 {
        return Err(Error::Config("detect_top must be >= 1".into()));
    }
    let entries = &manifest.entries;
    let video_seqs = entries.iter().map(|e| features.video(&e.video_id)).collect::<Result<Vec<_>>>()?;
    let videos = inf.encode_videos(&video_seqs)?;
    let widths: Vec<f64> = entries.iter().map(|e| e.video_duration / inf.d_max).collect();
    let gts: Vec<GroundTruth> =
        entries.iter().map(|e| GroundTruth { query_id: e.video_id.clone(), track_id: e.track_id.clone(), moment: e.moment() }).collect();

    match mode {
        EvalMode::Smg => {
            let track_seqs = entries.iter().map(|e| features.track(&e.track_id)).collect::<Result<Vec<_>>>()?;
            let tracks = inf.encode_tracks(&track_seqs)?;
            let pairs: Vec<_> = (0..entries.len()).map(|i| (&videos[i], &tracks[i], widths[i])).collect();
            let outs = inf.pairs(&pairs)?;
            let mut moments = Vec::with_capacity(outs.len());
            let mut predictions = Vec::with_capacity(outs.len());
            for (e, o) in entries.iter().zip(&outs) {
                let m = denormalize_moment(o.p_c, o.p_w, inf.d_max, e.track_duration)?;
                moments.push(m);
                predictions.push(RankedPrediction {
                    query_id: e.video_id.clone(),
                    ranked: vec![RankedEntry { track_id: e.track_id.clone(), p_s: o.p_s, moment: Some(m) }],
                });
            }
            Ok(Evaluation { report: EvalReport::single_music(&gts, &moments)?, predictions })
        }
        EvalMode::Msg => {
            let cands = &manifest.candidate_tracks;
            if cands.is_empty() {
                return Err(Error::Data(format!("split {} has an empty candidate set", manifest.split)));
            }
            let track_seqs = cands.iter().map(|t| features.track(t)).collect::<Result<Vec<_>>>()?;
            let tracks = inf.encode_tracks(&track_seqs)?;
            let scores = inf.score_matrix(&videos, &tracks)?;

            // Per query: candidate order, then the (query, candidate) pairs to localise.
            let mut orders = Vec::with_capacity(entries.len());
            let mut wanted: BTreeSet<(usize, usize)> = BTreeSet::new();
            for (q, e) in entries.iter().enumerate() {
                let ranked = rank_candidates(
                    cands.iter().zip(&scores[q]).map(|(t, &p_s)| RankedEntry { track_id: t.clone(), p_s, moment: None }).collect(),
                );
                let index_of = |id: &str| cands.iter().position(|c| c == id);
                for r in ranked.iter().take(detect_top) {
                    wanted.insert((q, index_of(&r.track_id).unwrap()));
                }
                let gt =
                    index_of(&e.track_id).ok_or_else(|| Error::Data(format!("{}: track {} is not a candidate", e.video_id, e.track_id)))?;
                wanted.insert((q, gt));
                orders.push((ranked, gt));
            }
            let wanted: Vec<(usize, usize)> = wanted.into_iter().collect();
            let pairs: Vec<_> = wanted.iter().map(|&(q, t)| (&videos[q], &tracks[t], widths[q])).collect();
            let outs = inf.pairs(&pairs)?;
            let mut found = std::collections::HashMap::new();
            for (&(q, t), o) in wanted.iter().zip(&outs) {
                let m = denormalize_moment(o.p_c, o.p_w, inf.d_max, f64::from(track_seqs[t].duration_sec))?;
                found.insert((q, t), m);
            }

            let mut predictions = Vec::with_capacity(entries.len());
            let mut smg = Vec::with_capacity(entries.len());
            for (q, ((mut ranked, gt), e)) in orders.into_iter().zip(entries).enumerate() {
                for r in ranked.iter_mut().take(detect_top) {
                    let t = cands.iter().position(|c| *c == r.track_id).unwrap();
                    r.moment = Some(found[&(q, t)]);
                }
                smg.push(found[&(q, gt)]);
                predictions.push(RankedPrediction { query_id: e.video_id.clone(), ranked });
            }
            Ok(Evaluation { report: EvalReport::music_set(&predictions, &gts, &smg)?, predictions })
        }
    }
}

/// Evaluates a checkpoint, normalising with its training-time `d_max`.
pub fn evaluate(ckpt: &Checkpoint, manifest: &Manifest, features: &FeatureStore, mode: EvalMode, detect_top: usize) -> Result<Evaluation> {
    let model = ckpt.model()?;
    let inf = Inference { model: &model, params: &ckpt.params, d_max: ckpt.d_max };
    evaluate_with(inf, manifest, features, mode, detect_top)
}

/// Ranks `tracks` for one query video and localises a moment on each.
pub fn predict(ckpt: &Checkpoint, query_id: &str, video: &TokenSequence, tracks: &[(String, TokenSequence)]) -> Result<RankedPrediction> {
    if tracks.is_empty() {
        return Err(Error::Data("predict needs at least one candidate track".into()));
    }
    let mut seen = BTreeSet::new();
    if let Some((id, _)) = tracks.iter().find(|(id, _)| !seen.insert(id)) {
        return Err(Error::Data(format!("duplicate candidate track {id}")));
    }
    // Canonical order, so the output cannot depend on how candidates were listed.
    let mut tracks: Vec<&(String, TokenSequence)> = tracks.iter().collect();
    tracks.sort_by(|a, b| a.0.cmp(&b.0));
    let model = ckpt.model()?;
    let inf = Inference { model: &model, params: &ckpt.params, d_max: ckpt.d_max };
    let v = inf.encode_videos(&[video])?.remove(0);
    let encoded = inf.encode_tracks(&tracks.iter().map(|t| &t.1).collect::<Vec<_>>())?;
    let width = f64::from(video.duration_sec) / ckpt.d_max;
    let pairs: Vec<_> = encoded.iter().map(|t| (&v, t, width)).collect();
    let outs = inf.pairs(&pairs)?;
    let entries = tracks
        .iter()
        .zip(&outs)
        .map(|(&(id, seq), o)| {
            let m = denormalize_moment(o.p_c, o.p_w, ckpt.d_max, f64::from(seq.duration_sec))?;
            Ok(RankedEntry { track_id: id.clone(), p_s: o.p_s, moment: Some(m) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedPrediction { query_id: query_id.to_string(), ranked: rank_candidates(entries) })
}
