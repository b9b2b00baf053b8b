//! Tracklet catalogs, clip sampling and identity-balanced batching.

mod layouts;
pub mod matfile;
mod sampling;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use layouts::{assign_cross_camera_split, scan_dataset, scan_dataset_with, ScanOptions};
pub use sampling::{
    pk_batch_stream, sample_training_clip, split_inference_clips, BatchSpec, Clip, PkBatches,
};
pub use synthetic::{generate_synthetic, SynthConfig, SynthSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::validation(format!("unknown split {other:?}"))),
        }
    }
}

/// On-disk dataset conventions understood by [`scan_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    Mars,
    Prid2011,
    IlidsVid,
    Synthetic,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::Mars => "mars",
            Layout::Prid2011 => "prid2011",
            Layout::IlidsVid => "ilids-vid",
            Layout::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mars" => Ok(Layout::Mars),
            "prid2011" | "prid" | "prid-2011" => Ok(Layout::Prid2011),
            "ilids-vid" | "ilidsvid" | "ilids" => Ok(Layout::IlidsVid),
            "synthetic" => Ok(Layout::Synthetic),
            other => Err(Error::validation(format!("unknown dataset layout {other:?}"))),
        }
    }
}

/// One person, one camera, one ordered run of frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackletRecord {
    pub person_id: i64,
    pub camera_id: i64,
    /// Ordinal of the tracklet among those of the same person and camera.
    pub tracklet: u32,
    pub split: Split,
    pub frame_paths: Vec<PathBuf>,
}

impl TrackletRecord {
    pub fn len(&self) -> usize {
        self.frame_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_paths.is_empty()
    }

    pub fn key(&self) -> (i64, i64, u32) {
        (self.person_id, self.camera_id, self.tracklet)
    }
}

/// Immutable catalog of the tracklets of one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrackletIndex {
    layout: Layout,
    records: Vec<TrackletRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    layout: Layout,
}

const MANIFEST_FORMAT: &str = "reid-tracklet-manifest";

impl TrackletIndex {
    /// Builds an index, checking that every tracklet has frames and that
    /// (person, camera, tracklet) keys are unique.
    pub fn new(layout: Layout, records: Vec<TrackletRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.frame_paths.is_empty() {
                return Err(Error::validation(format!(
                    "tracklet (id {}, cam {}, #{}) has no frames",
                    r.person_id, r.camera_id, r.tracklet
                )));
            }
            if !seen.insert(r.key()) {
                return Err(Error::validation(format!(
                    "duplicate tracklet (id {}, cam {}, #{})",
                    r.person_id, r.camera_id, r.tracklet
                )));
            }
        }
        Ok(Self { layout, records })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn records(&self) -> &[TrackletRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &TrackletRecord)> + '_ {
        self.records
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.split == split)
    }

    /// Sorted distinct person ids in a split.
    pub fn identities(&self, split: Split) -> Vec<i64> {
        self.split(split)
            .map(|(_, r)| r.person_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Record positions grouped by person id, restricted to one split.
    pub fn by_identity(&self, split: Split) -> BTreeMap<i64, Vec<usize>> {
        let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.split(split) {
            groups.entry(r.person_id).or_default().push(i);
        }
        groups
    }

    /// Copy of this index with splits reassigned (cross-camera protocols).
    pub fn with_records(&self, records: Vec<TrackletRecord>) -> Result<Self> {
        Self::new(self.layout, records)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            layout: self.layout,
        };
        let io = |e| Error::io(path, e);
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let bad = |n: usize, e: &dyn fmt::Display| {
            Error::validation(format!("{}:{}: {e}", path.display(), n))
        };
        let header: ManifestHeader = match lines.next() {
            Some(line) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&line).map_err(|e| bad(1, &e))?
            }
            None => return Err(bad(1, &"empty manifest")),
        };
        if header.format != MANIFEST_FORMAT || header.version != 1 {
            return Err(bad(1, &"unrecognized manifest header"));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| bad(n + 2, &e))?);
        }
        Self::new(header.layout, records)
    }
}
