//! The planted signal is recoverable: inverting the known lifts and matching
//! latents localises ground-truth moments almost perfectly.

use mgsv::autodiff::Tensor;
use mgsv::data::{synth_generate, SynthConfig};
use mgsv::metrics::miou;

/// Least-squares latents `z` with `z * lift ~ rows`, via the normal equations.
fn invert(rows: &[f32], n: usize, lift: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (l, w) = (lift.shape()[0], lift.shape()[1]);
    let mut gram = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            gram[i * l + j] = lift.row(i).iter().zip(lift.row(j)).map(|(a, b)| a * b).sum();
        }
    }
    (0..n)
        .map(|r| {
            let x = &rows[r * w..(r + 1) * w];
            let rhs: Vec<f64> = (0..l).map(|i| lift.row(i).iter().zip(x).map(|(a, &b)| a * f64::from(b)).sum()).collect();
            solve(gram.clone(), rhs, l)
        })
        .collect()
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap();
        for k in 0..n {
            a.swap(c * n + k, p * n + k);
        }
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r * n + c] / a[c * n + c];
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    x
}

#[test]
fn nearest_segment_oracle_localises_moments() {
    let cfg = SynthConfig { n_tracks: 20, videos_per_track: 10, noise_sigma: 0.1, ..SynthConfig::default() };
    let ds = synth_generate(&cfg).unwrap();
    let (hop, win) = (cfg.segment_hop as usize, cfg.segment_window as usize);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for e in ds.train.entries.iter().chain(&ds.val.entries).chain(&ds.test.entries) {
        let v = ds.features.video(&e.video_id).unwrap();
        let (f, w) = (v.len(), v.width());
        let mean: Vec<f32> = (0..w).map(|c| (0..f).map(|r| v.tokens.data()[r * w + c]).sum::<f32>() / f as f32).collect();
        let z = &invert(&mean, 1, &ds.truth.video_lift)[0];
        let t = ds.features.track(&e.track_id).unwrap();
        let segs = invert(t.tokens.data(), t.len(), &ds.truth.music_lift);

        let vdur = e.video_duration as usize;
        let mut best = (f64::INFINITY, 0usize);
        for start in (0..=(e.track_duration as usize - vdur)).step_by(hop) {
            let (j, last) = (start / hop, (start + vdur - win) / hop);
            let dist: f64 = (0..z.len())
                .map(|k| {
                    let m = (j..=last).map(|i| segs[i][k]).sum::<f64>() / (last - j + 1) as f64;
                    (m - z[k]).powi(2)
                })
                .sum();
            if dist < best.0 {
                best = (dist, start);
            }
        }
        preds.push((best.1 as f64, (best.1 + vdur) as f64));
        gts.push(e.moment());
    }
    let m = miou(&preds, &gts).unwrap();
    assert!(m > 0.9, "oracle mIoU {m}");
}
