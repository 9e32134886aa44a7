//! Planted-correlation synthetic dataset.
//!
//! Every track owns a base latent; each of its segments adds a sinusoidal
//! code of its position, shared by all tracks. Music tokens lift segment
//! latents through a fixed random map; video frames lift the mean latent of
//! the segments inside the ground-truth moment through another. The lifts are
//! shared dataset-wide, so both which track a video belongs to and where its
//! moment lies are recoverable from the features.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, FeatureStore};
use super::features::{TokenSequence, MUSIC_DIM, VIDEO_DIM};
use super::manifest::{Manifest, ManifestEntry};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Bumped whenever the generator's sampling order changes.
pub const SYNTH_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_tracks: usize,
    pub videos_per_track: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    /// Inclusive range of whole-second track durations.
    pub track_duration: (u32, u32),
    /// Inclusive range of whole-second video durations; the moment width equals the video duration.
    pub video_duration: (u32, u32),
    pub segment_window: u32,
    pub segment_hop: u32,
    pub frame_rate: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_tracks: 100,
            videos_per_track: 20,
            latent_dim: 32,
            noise_sigma: 0.1,
            track_duration: (60, 180),
            video_duration: (10, 30),
            segment_window: 10,
            segment_hop: 5,
            frame_rate: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_tracks == 0 || self.videos_per_track == 0 || self.latent_dim == 0 {
            return fail("n_tracks, videos_per_track and latent_dim must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and non-negative");
        }
        if self.segment_window == 0 || self.segment_hop == 0 || self.frame_rate == 0 {
            return fail("segment_window, segment_hop and frame_rate must be positive");
        }
        let (t0, t1) = self.track_duration;
        let (v0, v1) = self.video_duration;
        if t0 > t1 || v0 > v1 {
            return fail("empty duration range");
        }
        if v0 < self.segment_window {
            return fail("videos shorter than one segment window cannot cover a segment");
        }
        if v1 > t0 {
            return fail("the longest video must fit in the shortest track");
        }
        Ok(())
    }

    /// Segments per track: `floor((duration - window) / hop) + 1`.
    pub fn segment_count(&self, duration: u32) -> usize {
        if duration < self.segment_window {
            return 1;
        }
        ((duration - self.segment_window) / self.segment_hop) as usize + 1
    }
}

/// The hidden generative quantities, kept for oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    /// `[latent_dim, 512]`.
    pub video_lift: Tensor<f64>,
    /// `[latent_dim, 768]`.
    pub music_lift: Tensor<f64>,
    /// Per track, `[segments, latent_dim]`.
    pub segment_latents: Vec<Tensor<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub features: FeatureStore,
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
    pub truth: SynthTruth,
}

impl SynthDataset {
    /// Writes features and manifests under `root` and returns the opened dataset.
    pub fn write(&self, root: &Path) -> Result<Dataset> {
        self.features.write(root)?;
        let ds = Dataset { root: root.to_path_buf(), train: self.train.clone(), val: self.val.clone(), test: self.test.clone() };
        ds.write_manifests()?;
        std::fs::write(root.join("synth.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(ds)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `x [n, l] * lift [l, w]`.
fn lift_rows(x: &[f64], n: usize, lift: &Tensor<f64>) -> Vec<f64> {
    let (l, w) = (lift.shape()[0], lift.shape()[1]);
    let mut out = vec![0.0; n * w];
    for r in 0..n {
        for k in 0..l {
            let a = x[r * l + k];
            for (o, &b) in out[r * w..(r + 1) * w].iter_mut().zip(lift.row(k)) {
                *o += a * b;
            }
        }
    }
    out
}

/// Tiles `clean` over `n` rows of width `w`, adds Gaussian noise, and rounds to `f32`.
fn noisy(clean: &[f64], w: usize, n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let data = (0..n * w).map(|i| (clean[i % clean.len()] + sigma * normal(rng)) as f32).collect();
    Tensor::new([n, w], data).expect("shape matches data")
}

/// Sinusoidal code for segment `pos`, shared by every track; scaled to unit
/// variance per component so position and track identity weigh alike.
fn position_code(pos: usize, k: usize, l: usize) -> f64 {
    let freq = 10_000f64.powf(-((k / 2 * 2) as f64) / l as f64);
    let a = pos as f64 * freq;
    std::f64::consts::SQRT_2 * if k.is_multiple_of(2) { a.sin() } else { a.cos() }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = cfg.latent_dim;
    let scale = 1.0 / (l as f64).sqrt();
    let video_lift = Tensor::from_fn([l, VIDEO_DIM], |_| scale * normal(&mut rng));
    let music_lift = Tensor::from_fn([l, MUSIC_DIM], |_| scale * normal(&mut rng));

    let mut features = FeatureStore::default();
    let mut segment_latents = Vec::with_capacity(cfg.n_tracks);
    let mut track_ids = Vec::with_capacity(cfg.n_tracks);
    let mut track_durs = Vec::with_capacity(cfg.n_tracks);
    for t in 0..cfg.n_tracks {
        let dur = rng.random_range(cfg.track_duration.0..=cfg.track_duration.1);
        let s = cfg.segment_count(dur);
        let base: Vec<f64> = (0..l).map(|_| normal(&mut rng)).collect();
        let lat: Vec<f64> = (0..s * l).map(|i| base[i % l] + position_code(i / l, i % l, l)).collect();
        let tokens = noisy(&lift_rows(&lat, s, &music_lift), MUSIC_DIM, s, cfg.noise_sigma, &mut rng);
        let id = format!("m{t:04}");
        features.insert_track(id.clone(), TokenSequence::new(tokens, dur as f32)?)?;
        segment_latents.push(Tensor::new([s, l], lat)?);
        track_ids.push(id);
        track_durs.push(dur);
    }

    let mut entries = Vec::with_capacity(cfg.n_tracks * cfg.videos_per_track);
    for t in 0..cfg.n_tracks {
        for _ in 0..cfg.videos_per_track {
            let vdur = rng.random_range(cfg.video_duration.0..=cfg.video_duration.1);
            let slots = (track_durs[t] - vdur) / cfg.segment_hop;
            let j = rng.random_range(0..=slots);
            let start = j * cfg.segment_hop;
            // Segments lying entirely inside [start, start + vdur].
            let last = (start + vdur - cfg.segment_window) / cfg.segment_hop;
            let lat = &segment_latents[t];
            let mut mean = vec![0.0; l];
            for i in j..=last {
                for (m, &v) in mean.iter_mut().zip(lat.row(i as usize)) {
                    *m += v;
                }
            }
            let count = (last - j + 1) as f64;
            mean.iter_mut().for_each(|m| *m /= count);
            let frames = (vdur * cfg.frame_rate) as usize;
            let tokens = noisy(&lift_rows(&mean, 1, &video_lift), VIDEO_DIM, frames, cfg.noise_sigma, &mut rng);
            let id = format!("v{:05}", entries.len());
            features.insert_video(id.clone(), TokenSequence::new(tokens, vdur as f32)?)?;
            entries.push(ManifestEntry {
                video_id: id,
                track_id: track_ids[t].clone(),
                moment_start_sec: start as f64,
                moment_width_sec: vdur as f64,
                video_duration: vdur as f64,
                track_duration: track_durs[t] as f64,
            });
        }
    }

    let n = entries.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let d_max = *track_durs.iter().max().unwrap() as f64;
    let split = |name: &str, idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        let m = Manifest {
            split: name.into(),
            d_max,
            candidate_tracks: track_ids.clone(),
            entries: idx.iter().map(|&i| entries[i].clone()).collect(),
        };
        m.validate().map(|_| m)
    };
    Ok(SynthDataset {
        config: cfg.clone(),
        train: split("train", &order[..n_train])?,
        val: split("val", &order[n_train..n_train + n_val])?,
        test: split("test", &order[n_train + n_val..])?,
        features,
        truth: SynthTruth { video_lift, music_lift, segment_latents },
    })
}
