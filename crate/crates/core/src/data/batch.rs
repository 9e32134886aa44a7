use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::FeatureStore;
use super::manifest::ManifestEntry;
use super::moments::normalize_moment;
use crate::error::{Error, Result};
use crate::model::SeqBatch;

/// Shuffled index batches covering `0..n` exactly once, keyed by `(seed, epoch)`.
///
/// A trailing batch of one item is merged into its predecessor so every
/// contrastive batch has a negative.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size {batch_size} must be at least 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    Ok(batches)
}

/// Model-ready tensors and targets for one batch of manifest entries.
#[derive(Clone, Debug)]
pub struct Batch {
    pub video: SeqBatch<f32>,
    pub music: SeqBatch<f32>,
    /// Normalised `(center, width)` per item.
    pub targets: Vec<(f64, f64)>,
    /// Video duration over `d_max`, per item.
    pub video_widths: Vec<f64>,
    /// Equal keys mark items that share a track.
    pub track_keys: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

pub fn assemble(entries: &[&ManifestEntry], features: &FeatureStore, d_max: f64) -> Result<Batch> {
    let mut videos = Vec::with_capacity(entries.len());
    let mut tracks = Vec::with_capacity(entries.len());
    let mut targets = Vec::with_capacity(entries.len());
    let mut widths = Vec::with_capacity(entries.len());
    let mut keys = Vec::with_capacity(entries.len());
    let mut key_of: HashMap<&str, usize> = HashMap::new();
    for e in entries {
        videos.push(&features.video(&e.video_id)?.tokens);
        tracks.push(&features.track(&e.track_id)?.tokens);
        targets.push(normalize_moment(e.moment_start_sec, e.moment_width_sec, d_max)?);
        widths.push(e.video_duration / d_max);
        let next = key_of.len();
        keys.push(*key_of.entry(e.track_id.as_str()).or_insert(next));
    }
    Ok(Batch {
        video: SeqBatch::from_sequences(&videos)?,
        music: SeqBatch::from_sequences(&tracks)?,
        targets,
        video_widths: widths,
        track_keys: keys,
    })
}
