//! Contrastive matching loss and interval regression loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result, TensorError};
use crate::model::Detection;

type R = std::result::Result<Var, TensorError>;

pub const LAMBDA_L1: f64 = 10.0;
pub const LAMBDA_GIOU: f64 = 1.0;

/// How in-batch negatives that share the positive's track are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DuplicatePolicy {
    /// Drop them from the softmax denominator.
    #[default]
    MaskSameTrack,
    None,
}

/// Per-entry keep mask for a `B x B` logit matrix given each item's track key.
fn keep_mask(track_keys: Option<&[usize]>, b: usize) -> Vec<bool> {
    (0..b * b)
        .map(|at| {
            let (i, j) = (at / b, at % b);
            match track_keys {
                Some(k) => i == j || k[i] != k[j],
                None => true,
            }
        })
        .collect()
}

/// Symmetric InfoNCE over a `B x B` similarity matrix whose diagonal holds the positives.
///
/// `scale` is the single-element inverse temperature. With `track_keys`,
/// off-diagonal entries whose track equals the row's (or column's) positive
/// track are removed from the denominator.
pub fn info_nce<T: Real>(g: &mut Graph<T>, sim: Var, scale: Var, track_keys: Option<&[usize]>) -> Result<Var> {
    let sh = g.shape(sim).to_vec();
    if sh.len() != 2 || sh[0] != sh[1] {
        return Err(TensorError::shape("info_nce", format!("{:?} is not square", sh)).into());
    }
    let b = sh[0];
    if b == 0 {
        return Err(TensorError::EmptyReduction { op: "info_nce" }.into());
    }
    if track_keys.is_some_and(|k| k.len() != b) {
        return Err(TensorError::shape("info_nce", "one track key per row").into());
    }
    let keep = keep_mask(track_keys, b);
    let eye = g.constant(Tensor::from_fn([b, b], |at| if at / b == at % b { T::one() } else { T::zero() }));
    let logits = g.mul_scalar(sim, scale)?;
    let mut total = None;
    for x in [logits, g.transpose(logits)?] {
        let lsm = g.log_softmax_masked(x, &keep)?;
        let diag = g.mul(lsm, eye)?;
        let s = g.sum(diag)?;
        let term = g.scale(s, T::lit(-1.0 / b as f64))?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(g.scale(total.unwrap(), T::lit(0.5))?)
}

/// Sum of one InfoNCE term per similarity matrix.
///
/// Pass both cosine matrices for the joint objective, or their sum alone for
/// the single-term variant.
pub fn matching_loss<T: Real>(g: &mut Graph<T>, sims: &[Var], scale: Var, track_keys: Option<&[usize]>) -> Result<Var> {
    let Some((&first, rest)) = sims.split_first() else {
        return Err(Error::Config("matching_loss needs at least one similarity".into()));
    };
    let mut total = info_nce(g, first, scale, track_keys)?;
    for &s in rest {
        if g.shape(s) != g.shape(first) {
            return Err(TensorError::shape("matching_loss", format!("{:?} vs {:?}", g.shape(s), g.shape(first))).into());
        }
        let t = info_nce(g, s, scale, track_keys)?;
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Generalised IoU of two `(center, width)` intervals.
pub fn giou_1d(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    if !(a.1 > 0.0 && b.1 > 0.0) {
        return Err(Error::Data(format!("non-positive width in giou: {} / {}", a.1, b.1)));
    }
    let (s1, e1) = (a.0 - a.1 / 2.0, a.0 + a.1 / 2.0);
    let (s2, e2) = (b.0 - b.1 / 2.0, b.0 + b.1 / 2.0);
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    let union = a.1 + b.1 - inter;
    let hull = e1.max(e2) - s1.min(s2);
    Ok(inter / union - (hull - union) / hull)
}

/// Elementwise generalised IoU for equally shaped centre/width tensors.
pub fn giou_1d_graph<T: Real>(g: &mut Graph<T>, pc: Var, pw: Var, tc: Var, tw: Var) -> R {
    let half_p = g.scale(pw, T::lit(0.5))?;
    let half_t = g.scale(tw, T::lit(0.5))?;
    let s1 = g.sub(pc, half_p)?;
    let e1 = g.add(pc, half_p)?;
    let s2 = g.sub(tc, half_t)?;
    let e2 = g.add(tc, half_t)?;
    let lo = g.maximum(s1, s2)?;
    let hi = g.minimum(e1, e2)?;
    let gap = g.sub(hi, lo)?;
    let inter = g.relu(gap)?;
    let widths = g.add(pw, tw)?;
    let union = g.sub(widths, inter)?;
    let hull_hi = g.maximum(e1, e2)?;
    let hull_lo = g.minimum(s1, s2)?;
    let hull = g.sub(hull_hi, hull_lo)?;
    let iou = g.div(inter, union)?;
    let slack = g.sub(hull, union)?;
    let penalty = g.div(slack, hull)?;
    g.sub(iou, penalty)
}

/// `λ_L1 (|p_c - y_c| + |p_w - y_w|) + λ_gIoU (1 - gIoU)` for one prediction.
pub fn detection_loss_value(pred: (f64, f64), target: (f64, f64)) -> Result<f64> {
    let l1 = (pred.0 - target.0).abs() + (pred.1 - target.1).abs();
    Ok(LAMBDA_L1 * l1 + LAMBDA_GIOU * (1.0 - giou_1d(pred, target)?))
}

/// Batch mean of the detection loss; `pc`, `pw` are `[B]` and `targets` holds `(y_c, y_w)`.
pub fn detection_loss<T: Real>(g: &mut Graph<T>, pc: Var, pw: Var, targets: &[(f64, f64)]) -> R {
    let b = targets.len();
    if g.shape(pc) != [b] || g.shape(pw) != [b] {
        return Err(TensorError::shape("detection_loss", format!("{:?} / {:?} for {b} targets", g.shape(pc), g.shape(pw))));
    }
    let tc = g.constant(Tensor::from_fn([b], |i| T::lit(targets[i].0)));
    let tw = g.constant(Tensor::from_fn([b], |i| T::lit(targets[i].1)));
    let dc = g.sub(pc, tc)?;
    let dc = g.abs(dc)?;
    let dw = g.sub(pw, tw)?;
    let dw = g.abs(dw)?;
    let l1 = g.add(dc, dw)?;
    let l1 = g.scale(l1, T::lit(LAMBDA_L1))?;
    let giou = giou_1d_graph(g, pc, pw, tc, tw)?;
    let gl = g.neg(giou)?;
    let gl = g.add_scalar(gl, T::one())?;
    let gl = g.scale(gl, T::lit(LAMBDA_GIOU))?;
    let per = g.add(l1, gl)?;
    g.mean(per)
}

/// Index of the query token whose prediction has the lowest detection loss, per item.
pub fn assign_tokens<T: Real>(g: &Graph<T>, center: Var, width: Var, targets: &[(f64, f64)]) -> Result<Vec<usize>> {
    let (c, w) = (g.value(center), g.value(width));
    let q = c.shape()[1];
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut best = (0, f64::INFINITY);
            for k in 0..q {
                let at = i * q + k;
                let pred = (c.data()[at].to_f64().unwrap(), w.data()[at].to_f64().unwrap());
                let l = detection_loss_value(pred, t)?;
                if l < best.1 {
                    best = (k, l);
                }
            }
            Ok(best.0)
        })
        .collect()
}

fn pick<T: Real>(g: &mut Graph<T>, x: Var, chosen: &[usize]) -> R {
    let (b, q) = (g.shape(x)[0], g.shape(x)[1]);
    let flat = g.reshape(x, &[b * q, 1])?;
    let idx: Vec<Option<usize>> = chosen.iter().enumerate().map(|(i, &k)| Some(i * q + k)).collect();
    let out = g.gather_rows(flat, &idx, &[b, 1])?;
    g.reshape(out, &[b])
}

/// Mean binary cross-entropy of confidence logits against a one-hot assignment.
fn confidence_loss<T: Real>(g: &mut Graph<T>, logits: Var, chosen: &[usize]) -> R {
    let q = g.shape(logits)[1];
    // softplus(-x) for the assigned token, softplus(x) for the rest.
    let sign = Tensor::from_fn(g.shape(logits).to_vec(), |at| if chosen[at / q] == at % q { -T::one() } else { T::one() });
    let sign = g.constant(sign);
    let z = g.mul(logits, sign)?;
    let sp = g.softplus(z)?;
    g.mean(sp)
}

/// Detection objective for the decoder outputs, including confidence and
/// intermediate-layer terms when present. Each item is supervised through
/// the query token that best matches its target.
pub fn detection_objective<T: Real>(g: &mut Graph<T>, det: &Detection, targets: &[(f64, f64)]) -> Result<Var> {
    let chosen = assign_tokens(g, det.center, det.width, targets)?;
    let pc = pick(g, det.center, &chosen)?;
    let pw = pick(g, det.width, &chosen)?;
    let mut total = detection_loss(g, pc, pw, targets)?;
    if let Some(conf) = det.confidence {
        let cl = confidence_loss(g, conf, &chosen)?;
        total = g.add(total, cl)?;
    }
    for &(c, w) in &det.intermediate {
        let chosen = assign_tokens(g, c, w, targets)?;
        let pc = pick(g, c, &chosen)?;
        let pw = pick(g, w, &chosen)?;
        let l = detection_loss(g, pc, pw, targets)?;
        total = g.add(total, l)?;
    }
    Ok(total)
}

/// Unit-weight sum of the matching and detection objectives.
pub fn total_loss<T: Real>(g: &mut Graph<T>, matching: Var, detection: Var) -> R {
    g.add(matching, detection)
}

#[cfg(test)]
mod tests;
