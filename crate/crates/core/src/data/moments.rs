use crate::error::{Error, Result};

/// Shortest moment, in seconds, that [`denormalize_moment`] will emit.
pub const MIN_WIDTH_SEC: f64 = 0.5;

/// `(start, width)` in seconds to `(center, width)` in units of `d_max`.
pub fn normalize_moment(start_sec: f64, width_sec: f64, d_max: f64) -> Result<(f64, f64)> {
    if !(d_max > 0.0) {
        return Err(Error::Data(format!("d_max {d_max} must be positive")));
    }
    if !(width_sec > 0.0) || start_sec < 0.0 || start_sec + width_sec > d_max {
        return Err(Error::Data(format!("moment ({start_sec}, {width_sec}) lies outside [0, {d_max}]")));
    }
    Ok(((start_sec + width_sec / 2.0) / d_max, width_sec / d_max))
}

/// Normalised `(center, width)` to a `(start, end)` interval in seconds within the track.
///
/// The interval is clamped to `[0, track_duration]` and widened to at least
/// [`MIN_WIDTH_SEC`] (or the whole track, if shorter).
pub fn denormalize_moment(p_c: f64, p_w: f64, d_max: f64, track_duration: f64) -> Result<(f64, f64)> {
    if !(d_max > 0.0 && track_duration > 0.0) || !p_c.is_finite() || !p_w.is_finite() {
        return Err(Error::Data(format!("cannot denormalise ({p_c}, {p_w}) with d_max {d_max}")));
    }
    let mut s = ((p_c - p_w / 2.0) * d_max).clamp(0.0, track_duration);
    let mut e = ((p_c + p_w / 2.0) * d_max).clamp(0.0, track_duration);
    if e - s < MIN_WIDTH_SEC {
        let w = MIN_WIDTH_SEC.min(track_duration);
        let mid = (s + e) / 2.0;
        s = (mid - w / 2.0).clamp(0.0, track_duration - w);
        e = s + w;
    }
    Ok((s, e))
}
