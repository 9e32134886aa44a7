//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifests/{train,val,test}.jsonl
//! <root>/videos/<video_id>.feat
//! <root>/tracks/<track_id>.feat
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::features::{read_features, write_features, TokenSequence, MUSIC_DIM, VIDEO_DIM};
use super::manifest::{check_disjoint, Manifest};
use crate::error::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn checked_id(id: &str) -> Result<&str> {
    let ok = !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\']);
    if ok {
        Ok(id)
    } else {
        Err(Error::Data(format!("id {id:?} is not a valid file stem")))
    }
}

pub fn manifest_path(root: &Path, split: &str) -> PathBuf {
    root.join("manifests").join(format!("{split}.jsonl"))
}

pub fn video_path(root: &Path, id: &str) -> Result<PathBuf> {
    Ok(root.join("videos").join(format!("{}.feat", checked_id(id)?)))
}

pub fn track_path(root: &Path, id: &str) -> Result<PathBuf> {
    Ok(root.join("tracks").join(format!("{}.feat", checked_id(id)?)))
}

/// In-memory video and track features keyed by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    pub videos: BTreeMap<String, TokenSequence>,
    pub tracks: BTreeMap<String, TokenSequence>,
}

impl FeatureStore {
    pub fn video(&self, id: &str) -> Result<&TokenSequence> {
        self.videos.get(id).ok_or_else(|| Error::Data(format!("no features for video {id}")))
    }

    pub fn track(&self, id: &str) -> Result<&TokenSequence> {
        self.tracks.get(id).ok_or_else(|| Error::Data(format!("no features for track {id}")))
    }

    pub fn insert_video(&mut self, id: String, seq: TokenSequence) -> Result<()> {
        if seq.width() != VIDEO_DIM {
            return Err(Error::Data(format!("video {id}: width {} != {VIDEO_DIM}", seq.width())));
        }
        self.videos.insert(id, seq);
        Ok(())
    }

    pub fn insert_track(&mut self, id: String, seq: TokenSequence) -> Result<()> {
        if seq.width() != MUSIC_DIM {
            return Err(Error::Data(format!("track {id}: width {} != {MUSIC_DIM}", seq.width())));
        }
        self.tracks.insert(id, seq);
        Ok(())
    }

    /// Reads every video and candidate track referenced by `manifests`.
    pub fn load(root: &Path, manifests: &[&Manifest]) -> Result<Self> {
        let mut store = FeatureStore::default();
        for m in manifests {
            for e in &m.entries {
                if !store.videos.contains_key(&e.video_id) {
                    let seq = read_features(&video_path(root, &e.video_id)?)?;
                    store.insert_video(e.video_id.clone(), seq)?;
                }
            }
            for t in &m.candidate_tracks {
                if !store.tracks.contains_key(t) {
                    let seq = read_features(&track_path(root, t)?)?;
                    store.insert_track(t.clone(), seq)?;
                }
            }
        }
        Ok(store)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        for (id, seq) in &self.videos {
            write_features(&video_path(root, id)?, seq)?;
        }
        for (id, seq) in &self.tracks {
            write_features(&track_path(root, id)?, seq)?;
        }
        Ok(())
    }
}

/// The three splits of a dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let read = |s: &str| {
            let path = manifest_path(root, s);
            Manifest::read(&path).map_err(|e| match e {
                Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
                Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
                other => other,
            })
        };
        let ds = Dataset { root: root.to_path_buf(), train: read("train")?, val: read("val")?, test: read("test")? };
        check_disjoint(&[&ds.train, &ds.val, &ds.test])?;
        Ok(ds)
    }

    pub fn split(&self, name: &str) -> Result<&Manifest> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }

    pub fn write_manifests(&self) -> Result<()> {
        for (name, m) in SPLITS.iter().zip([&self.train, &self.val, &self.test]) {
            m.write(&manifest_path(&self.root, name))?;
        }
        Ok(())
    }
}
