//! Directory conventions for the supported datasets.
//!
//! * `synthetic`: `root/<id>/<cam>/<tracklet>/<frame>.png`, all tracklets train.
//! * `mars`: `root/bbox_{train,test}/<id>/<name>.jpg` plus `root/info/` holding
//!   `{train,test}_name.txt`, `tracks_{train,test}_info.mat` and `query_IDX.mat`
//!   (`.csv`/`.txt` numeric tables are accepted in place of the `.mat` files).
//!   Fixed split: test tracks named by `query_IDX` are queries, the rest gallery.
//! * `prid2011`: `root/[multi_shot/]cam_{a,b}/person_NNNN/*.png`; only persons
//!   1..=200 appear in both views and are kept.
//! * `ilids-vid`: `root/[i-LIDS-VID/][sequences/]cam{1,2}/personNNN/*.png`.
//!
//! PRID2011 and iLIDS-VID get a seeded half/half identity split: train ids
//! keep both cameras, test ids put the first camera in query and the second
//! in gallery.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::matfile::{self, Matrix};
use super::{Layout, Split, TrackletIndex, TrackletRecord};
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOptions {
    /// Decode every frame header and fail on unreadable images.
    pub verify_images: bool,
    /// Which seeded identity split to use for cross-camera datasets.
    pub split_index: usize,
    pub split_seed: u64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            verify_images: true,
            split_index: 0,
            split_seed: 0,
        }
    }
}

pub fn scan_dataset(root: &Path, layout: Layout) -> Result<TrackletIndex> {
    scan_dataset_with(root, layout, &ScanOptions::default())
}

pub fn scan_dataset_with(root: &Path, layout: Layout, opts: &ScanOptions) -> Result<TrackletIndex> {
    let meta = std::fs::metadata(root).map_err(|e| Error::io(root, e))?;
    if !meta.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotADirectory, "dataset root is not a directory"),
        ));
    }
    let mut records = match layout {
        Layout::Synthetic => scan_synthetic(root)?,
        Layout::Mars => scan_mars(root)?,
        Layout::Prid2011 => scan_prid(root)?,
        Layout::IlidsVid => scan_ilids(root)?,
    };
    if matches!(layout, Layout::Prid2011 | Layout::IlidsVid) {
        assign_cross_camera_split(&mut records, opts.split_index, opts.split_seed);
    }
    records.sort_by_key(|r| r.key());
    if opts.verify_images {
        verify_frames(&records)?;
    }
    TrackletIndex::new(layout, records)
}

/// Seeded half/half identity split. Identities are shuffled with a stream
/// keyed by `(split_seed, split_index)`; the first half train, the rest test.
/// Test tracklets from the lowest camera id become queries, the others gallery.
pub fn assign_cross_camera_split(records: &mut [TrackletRecord], split_index: usize, split_seed: u64) {
    let mut ids: Vec<i64> = records
        .iter()
        .map(|r| r.person_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = seed::rng_for(split_seed, &[0x5011_7000, split_index as u64]);
    ids.shuffle(&mut rng);
    let train: BTreeSet<i64> = ids[..ids.len() / 2].iter().copied().collect();
    let probe_cam = records.iter().map(|r| r.camera_id).min().unwrap_or(0);
    for r in records.iter_mut() {
        r.split = if train.contains(&r.person_id) {
            Split::Train
        } else if r.camera_id == probe_cam {
            Split::Query
        } else {
            Split::Gallery
        };
    }
}

fn verify_frames(records: &[TrackletRecord]) -> Result<()> {
    use rayon::prelude::*;
    records
        .par_iter()
        .flat_map(|r| r.frame_paths.par_iter())
        .try_for_each(|p| match image::image_dimensions(p) {
            Ok((w, h)) if w > 0 && h > 0 => Ok(()),
            Ok(_) => Err(Error::validation(format!("zero-sized image {}", p.display()))),
            Err(e) => Err(Error::validation(format!("unreadable image {}: {e}", p.display()))),
        })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

fn trailing_number(p: &Path) -> Option<u64> {
    let stem = p.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// Image files of a tracklet directory in temporal order.
fn frames_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    frames.sort_by(|a, b| (trailing_number(a), a).cmp(&(trailing_number(b), b)));
    if frames.is_empty() {
        return Err(Error::validation(format!(
            "tracklet directory {} contains no frames",
            dir.display()
        )));
    }
    Ok(frames)
}

fn numeric_dir_name(p: &Path) -> Result<i64> {
    p.file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.parse::<i64>().ok())
        .ok_or_else(|| {
            Error::validation(format!("expected a numeric directory name at {}", p.display()))
        })
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dir_sorted(dir)?.into_iter().filter(|p| p.is_dir()).collect())
}

fn scan_synthetic(root: &Path) -> Result<Vec<TrackletRecord>> {
    let mut records = Vec::new();
    for id_dir in subdirs(root)? {
        let person_id = numeric_dir_name(&id_dir)?;
        for cam_dir in subdirs(&id_dir)? {
            let camera_id = numeric_dir_name(&cam_dir)?;
            for t_dir in subdirs(&cam_dir)? {
                let tracklet = numeric_dir_name(&t_dir)? as u32;
                records.push(TrackletRecord {
                    person_id,
                    camera_id,
                    tracklet,
                    split: Split::Train,
                    frame_paths: frames_in(&t_dir)?,
                });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::validation(format!(
            "no tracklets found under {}",
            root.display()
        )));
    }
    Ok(records)
}

fn read_info_matrix(info: &Path, stem: &str) -> Result<Matrix> {
    let mat = info.join(format!("{stem}.mat"));
    if mat.exists() {
        return matfile::read_first_matrix(&mat);
    }
    for ext in ["csv", "txt"] {
        let p = info.join(format!("{stem}.{ext}"));
        if p.exists() {
            return matfile::read_text_matrix(&p);
        }
    }
    Err(Error::io(
        info.join(format!("{stem}.mat")),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MARS info table missing"),
    ))
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn mars_tracks(
    root: &Path,
    subset: &str,
    names: &[String],
    tracks: &Matrix,
    split_of: impl Fn(usize) -> Split,
) -> Result<Vec<TrackletRecord>> {
    if tracks.cols < 4 {
        return Err(Error::validation(format!(
            "MARS {subset} track table needs 4 columns, found {}",
            tracks.cols
        )));
    }
    let mut out = Vec::with_capacity(tracks.rows);
    // several MARS tracks may share an ordinal once junk folders are merged
    let mut ordinals: BTreeMap<(i64, i64), u32> = BTreeMap::new();
    for row in 0..tracks.rows {
        let r = tracks.row(row);
        let (start, end) = (r[0] as usize, r[1] as usize);
        if start == 0 || end < start || end > names.len() {
            return Err(Error::validation(format!(
                "MARS {subset} track {row} has invalid frame range {start}..={end}"
            )));
        }
        let (person_id, camera_id) = (r[2] as i64, r[3] as i64);
        let frame_paths: Vec<PathBuf> = names[start - 1..end]
            .iter()
            .map(|n| {
                let folder = n.get(..4).unwrap_or(n);
                root.join(format!("bbox_{subset}")).join(folder).join(n)
            })
            .collect();
        let next = ordinals.entry((person_id, camera_id)).or_insert(0);
        let tracklet = *next;
        *next += 1;
        out.push(TrackletRecord {
            person_id,
            camera_id,
            tracklet,
            split: split_of(row),
            frame_paths,
        });
    }
    Ok(out)
}

fn scan_mars(root: &Path) -> Result<Vec<TrackletRecord>> {
    let info = root.join("info");
    let train_names = read_names(&info.join("train_name.txt"))?;
    let test_names = read_names(&info.join("test_name.txt"))?;
    let train = read_info_matrix(&info, "tracks_train_info")?;
    let test = read_info_matrix(&info, "tracks_test_info")?;
    let query: BTreeSet<usize> = read_info_matrix(&info, "query_IDX")?
        .values()
        .iter()
        .map(|&v| v as usize)
        .collect();
    if query.iter().any(|&q| q == 0 || q > test.rows) {
        return Err(Error::validation("MARS query_IDX refers outside the test track table"));
    }
    let mut records = mars_tracks(root, "train", &train_names, &train, |_| Split::Train)?;
    records.extend(mars_tracks(root, "test", &test_names, &test, |row| {
        if query.contains(&(row + 1)) {
            Split::Query
        } else {
            Split::Gallery
        }
    })?);
    Ok(records)
}

fn person_number(dir: &Path) -> Option<i64> {
    let name = dir.file_name()?.to_str()?;
    name.trim_start_matches(|c: char| !c.is_ascii_digit()).parse().ok()
}

fn scan_two_camera(
    base: &Path,
    cams: [(&str, i64); 2],
    keep: impl Fn(i64) -> bool,
) -> Result<Vec<TrackletRecord>> {
    let mut per_cam: Vec<BTreeMap<i64, PathBuf>> = Vec::new();
    for (name, _) in cams {
        let dir = base.join(name);
        let mut people = BTreeMap::new();
        for p in subdirs(&dir)? {
            let id = person_number(&p).ok_or_else(|| {
                Error::validation(format!("unrecognized person directory {}", p.display()))
            })?;
            people.insert(id, p);
        }
        per_cam.push(people);
    }
    let mut records = Vec::new();
    for (id, dir_a) in &per_cam[0] {
        let Some(dir_b) = per_cam[1].get(id) else { continue };
        if !keep(*id) {
            continue;
        }
        for (dir, (_, cam)) in [(dir_a, cams[0]), (dir_b, cams[1])] {
            records.push(TrackletRecord {
                person_id: *id,
                camera_id: cam,
                tracklet: 0,
                split: Split::Train,
                frame_paths: frames_in(dir)?,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::validation(format!(
            "no identities visible in both cameras under {}",
            base.display()
        )));
    }
    Ok(records)
}

fn scan_prid(root: &Path) -> Result<Vec<TrackletRecord>> {
    let base = [root.join("multi_shot"), root.join("prid_2011").join("multi_shot")]
        .into_iter()
        .find(|p| p.join("cam_a").is_dir())
        .unwrap_or_else(|| root.to_path_buf());
    scan_two_camera(&base, [("cam_a", 1), ("cam_b", 2)], |id| id <= 200)
}

fn scan_ilids(root: &Path) -> Result<Vec<TrackletRecord>> {
    let base = [
        root.join("i-LIDS-VID").join("sequences"),
        root.join("sequences"),
    ]
    .into_iter()
    .find(|p| p.join("cam1").is_dir())
    .unwrap_or_else(|| root.to_path_buf());
    scan_two_camera(&base, [("cam1", 1), ("cam2", 2)], |_| true)
}
