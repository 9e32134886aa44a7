//! Line-delimited JSON manifests: one header record, then one record per pair.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack for float round-off when checking a moment against its track.
const BOUND_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    pub track_id: String,
    pub moment_start_sec: f64,
    pub moment_width_sec: f64,
    pub video_duration: f64,
    pub track_duration: f64,
}

impl ManifestEntry {
    pub fn moment(&self) -> (f64, f64) {
        (self.moment_start_sec, self.moment_start_sec + self.moment_width_sec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Data(format!("entry {}/{}: {m}", self.video_id, self.track_id)));
        let finite = [self.moment_start_sec, self.moment_width_sec, self.video_duration, self.track_duration].iter().all(|v| v.is_finite());
        if !finite {
            return fail("non-finite field");
        }
        if self.video_id.is_empty() || self.track_id.is_empty() {
            return fail("empty id");
        }
        if !(self.video_duration > 0.0 && self.track_duration > 0.0) {
            return fail("durations must be positive");
        }
        if self.moment_start_sec < 0.0 {
            return fail("moment starts before the track");
        }
        if !(self.moment_width_sec > 0.0) {
            return fail("moment width must be positive");
        }
        if self.moment_start_sec + self.moment_width_sec > self.track_duration + BOUND_EPS {
            return fail("moment ends after the track");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header { split: String, d_max: f64, candidate_tracks: Vec<String> },
    Entry(ManifestEntry),
}

/// The pairs of one split, its candidate track list, and the moment normaliser.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub split: String,
    pub d_max: f64,
    pub candidate_tracks: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return Err(Error::Data(format!("{}: d_max {} must be positive", self.split, self.d_max)));
        }
        let candidates: HashSet<&str> = self.candidate_tracks.iter().map(String::as_str).collect();
        if candidates.len() != self.candidate_tracks.len() {
            return Err(Error::Data(format!("{}: duplicate candidate track", self.split)));
        }
        let mut videos = HashSet::new();
        for e in &self.entries {
            e.validate()?;
            if e.track_duration > self.d_max + BOUND_EPS {
                return Err(Error::Data(format!(
                    "{}: track {} lasts {} s, above d_max {}",
                    self.split, e.track_id, e.track_duration, self.d_max
                )));
            }
            if !videos.insert(e.video_id.as_str()) {
                return Err(Error::Data(format!("{}: video {} listed twice", self.split, e.video_id)));
            }
            if !candidates.contains(e.track_id.as_str()) {
                return Err(Error::Data(format!("{}: track {} missing from candidates", self.split, e.track_id)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let header = Record::Header { split: self.split.clone(), d_max: self.d_max, candidate_tracks: self.candidate_tracks.clone() };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(&Record::Entry(e.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses and validates a manifest.
    pub fn from_reader(r: impl BufRead) -> Result<Self> {
        let mut header = None;
        let mut entries = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Data(format!("manifest line {}: {e}", n + 1)))?;
            match rec {
                Record::Header { split, d_max, candidate_tracks } => {
                    if header.is_some() || !entries.is_empty() {
                        return Err(Error::Data(format!("manifest line {}: header must come first, once", n + 1)));
                    }
                    header = Some((split, d_max, candidate_tracks));
                }
                Record::Entry(e) => {
                    if header.is_none() {
                        return Err(Error::Data("manifest has no header record".into()));
                    }
                    entries.push(e);
                }
            }
        }
        let (split, d_max, candidate_tracks) = header.ok_or_else(|| Error::Data("empty manifest".into()))?;
        let m = Manifest { split, d_max, candidate_tracks, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)?;
        Manifest::from_reader(BufReader::new(f))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }
}

/// Rejects manifests that share a query video.
pub fn check_disjoint(splits: &[&Manifest]) -> Result<()> {
    let mut seen: HashSet<&str> = HashSet::new();
    for m in splits {
        for e in &m.entries {
            if !seen.insert(&e.video_id) {
                return Err(Error::Data(format!("video {} appears in more than one split", e.video_id)));
            }
        }
    }
    Ok(())
}
