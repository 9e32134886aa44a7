//! Feature files, manifests, moment normalisation, batching, and the
//! synthetic dataset generator.

mod batch;
mod dataset;
mod features;
mod manifest;
mod moments;
mod synth;

pub use batch::{assemble, make_batches, Batch};
pub use dataset::{manifest_path, track_path, video_path, Dataset, FeatureStore, SPLITS};
pub use features::{
    decode_features, encode_features, read_features, write_features, TokenSequence, DTYPE_F32, FORMAT_VERSION, HEADER_LEN, MAGIC,
    MUSIC_DIM, VIDEO_DIM,
};
pub use manifest::{check_disjoint, Manifest, ManifestEntry};
pub use moments::{denormalize_moment, normalize_moment, MIN_WIDTH_SEC};
pub use synth::{synth_generate, SynthConfig, SynthDataset, SynthTruth, SYNTH_VERSION};
