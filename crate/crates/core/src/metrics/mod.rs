//! Temporal IoU, retrieval recall, and moment recall over ranked predictions.
//!
//! Intervals are `(start_sec, end_sec)`. Recall figures are percentages;
//! mIoU is a unit fraction.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IoU threshold for moment recall; a moment counts only when IoU strictly exceeds it.
pub const MOMENT_IOU_THRESHOLD: f64 = 0.7;
pub const RECALL_KS: [usize; 3] = [1, 5, 10];
pub const MOMENT_RECALL_KS: [usize; 3] = [1, 10, 100];

pub fn iou_1d(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    if !(a.1 >= a.0 && b.1 >= b.0) {
        return Err(Error::Data(format!("malformed interval {a:?} or {b:?}")));
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// Mean IoU between aligned prediction and ground-truth lists.
pub fn miou(preds: &[(f64, f64)], gts: &[(f64, f64)]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Data(format!("{} predictions for {} queries", preds.len(), gts.len())));
    }
    if gts.is_empty() {
        return Err(Error::Data("no queries to evaluate".into()));
    }
    let mut sum = 0.0;
    for (&p, &g) in preds.iter().zip(gts) {
        sum += iou_1d(p, g)?;
    }
    Ok(sum / gts.len() as f64)
}

/// One ranked candidate: serialised as `[track_id, p_s, start_sec, end_sec]`.
///
/// The moment is absent for tracks ranked below the detection cut-off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(String, f64, Option<f64>, Option<f64>)", into = "(String, f64, Option<f64>, Option<f64>)")]
pub struct RankedEntry {
    pub track_id: String,
    pub p_s: f64,
    pub moment: Option<(f64, f64)>,
}

impl From<(String, f64, Option<f64>, Option<f64>)> for RankedEntry {
    fn from((track_id, p_s, s, e): (String, f64, Option<f64>, Option<f64>)) -> Self {
        let moment = s.zip(e);
        RankedEntry { track_id, p_s, moment }
    }
}

impl From<RankedEntry> for (String, f64, Option<f64>, Option<f64>) {
    fn from(r: RankedEntry) -> Self {
        (r.track_id, r.p_s, r.moment.map(|m| m.0), r.moment.map(|m| m.1))
    }
}

/// One line of the prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub query_id: String,
    pub ranked: Vec<RankedEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub query_id: String,
    pub track_id: String,
    pub moment: (f64, f64),
}

/// Orders by descending score, breaking ties by ascending track id.
pub fn rank_order(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.p_s.total_cmp(&a.p_s).then_with(|| a.track_id.cmp(&b.track_id))
}

/// Sorts candidates into ranking order.
pub fn rank_candidates(mut entries: Vec<RankedEntry>) -> Vec<RankedEntry> {
    entries.sort_by(rank_order);
    entries
}

/// The first `k` (track, moment) pairs in rank order; shorter when there are fewer candidates.
pub fn topk_postprocess(pred: &RankedPrediction, k: usize) -> Result<Vec<(&str, (f64, f64))>> {
    pred.ranked
        .iter()
        .take(k)
        .map(|e| {
            e.moment
                .map(|m| (e.track_id.as_str(), m))
                .ok_or_else(|| Error::Data(format!("{}: no moment for ranked track {}", pred.query_id, e.track_id)))
        })
        .collect()
}

fn check_aligned(preds: &[RankedPrediction], gts: &[GroundTruth], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Data(format!("{} predictions for {} queries", preds.len(), gts.len())));
    }
    if gts.is_empty() {
        return Err(Error::Data("no queries to evaluate".into()));
    }
    if let Some((p, g)) = preds.iter().zip(gts).find(|(p, g)| p.query_id != g.query_id) {
        return Err(Error::Data(format!("query order mismatch: {} vs {}", p.query_id, g.query_id)));
    }
    Ok(())
}

/// Zero-based rank of the ground-truth track.
pub fn gt_rank(pred: &RankedPrediction, gt: &GroundTruth) -> Result<usize> {
    pred.ranked
        .iter()
        .position(|e| e.track_id == gt.track_id)
        .ok_or_else(|| Error::Data(format!("{}: ground-truth track {} not among candidates", gt.query_id, gt.track_id)))
}

/// Percentage of queries whose ground-truth track ranks in the top `k`.
pub fn recall_at_k(preds: &[RankedPrediction], gts: &[GroundTruth], k: usize) -> Result<f64> {
    check_aligned(preds, gts, k)?;
    let mut hits = 0;
    for (p, g) in preds.iter().zip(gts) {
        if gt_rank(p, g)? < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / gts.len() as f64)
}

/// Percentage of queries whose ground-truth track ranks in the top `k` with
/// a moment whose IoU against the ground truth exceeds `threshold`.
pub fn moment_recall_at_k(preds: &[RankedPrediction], gts: &[GroundTruth], k: usize, threshold: f64) -> Result<f64> {
    check_aligned(preds, gts, k)?;
    let mut hits = 0;
    for (p, g) in preds.iter().zip(gts) {
        let r = gt_rank(p, g)?;
        if r >= k {
            continue;
        }
        let top = topk_postprocess(p, k)?;
        if iou_1d(top[r].1, g.moment)? > threshold {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / gts.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Single-music grounding: localise within the paired track only.
    Smg,
    /// Music-set grounding: rank every candidate, then localise.
    Msg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub track_id: String,
    /// IoU of the moment predicted on the ground-truth track.
    pub iou: f64,
    /// Zero-based rank of the ground-truth track, in music-set mode.
    pub gt_rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub queries: usize,
    pub candidates: usize,
    pub miou: f64,
    /// `R@k` in percent.
    pub recall: BTreeMap<usize, f64>,
    /// `MoR@k` in percent; `None` when `k` exceeds the number of tracks with detected moments.
    pub moment_recall: BTreeMap<usize, Option<f64>>,
    pub per_query: Vec<QueryResult>,
}

impl EvalReport {
    /// Report for ground-truth pairs only; `moments[i]` was predicted on query `i`'s own track.
    pub fn single_music(gts: &[GroundTruth], moments: &[(f64, f64)]) -> Result<Self> {
        let gt_moments: Vec<(f64, f64)> = gts.iter().map(|g| g.moment).collect();
        let miou = miou(moments, &gt_moments)?;
        let per_query = gts
            .iter()
            .zip(moments)
            .map(|(g, &m)| {
                Ok(QueryResult { query_id: g.query_id.clone(), track_id: g.track_id.clone(), iou: iou_1d(m, g.moment)?, gt_rank: None })
            })
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            mode: EvalMode::Smg,
            queries: gts.len(),
            candidates: 1,
            miou,
            recall: BTreeMap::new(),
            moment_recall: BTreeMap::new(),
            per_query,
        })
    }

    /// Full report over ranked predictions, plus the single-music mIoU from `smg_moments`.
    pub fn music_set(preds: &[RankedPrediction], gts: &[GroundTruth], smg_moments: &[(f64, f64)]) -> Result<Self> {
        let smg = EvalReport::single_music(gts, smg_moments)?;
        let candidates = preds.iter().map(|p| p.ranked.len()).min().unwrap_or(0);
        if candidates == 0 {
            return Err(Error::Data("empty candidate set".into()));
        }
        let detected = preds.iter().map(|p| p.ranked.iter().take_while(|e| e.moment.is_some()).count()).min().unwrap_or(0);
        let mut recall = BTreeMap::new();
        for k in RECALL_KS {
            recall.insert(k, recall_at_k(preds, gts, k)?);
        }
        let mut moment_recall = BTreeMap::new();
        for k in MOMENT_RECALL_KS {
            let v = if k.min(candidates) <= detected { Some(moment_recall_at_k(preds, gts, k, MOMENT_IOU_THRESHOLD)?) } else { None };
            moment_recall.insert(k, v);
        }
        let mut per_query = smg.per_query;
        for (q, (p, g)) in per_query.iter_mut().zip(preds.iter().zip(gts)) {
            q.gt_rank = Some(gt_rank(p, g)?);
        }
        Ok(EvalReport { mode: EvalMode::Msg, queries: gts.len(), candidates, miou: smg.miou, recall, moment_recall, per_query })
    }
}
