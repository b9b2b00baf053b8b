//! Video-level features, distance matrices and retrieval metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{assign_cross_camera_split, split_inference_clips, Layout, Split, TrackletIndex, TrackletRecord};
use crate::model::{FeatureSpace, ReidModel};
use crate::seed;
use crate::transforms::{load_clip, ClipTensor, TransformConfig};
use crate::{Error, Result};

/// Person id marking junk gallery entries; they never count as hits or misses.
pub const JUNK_ID: i64 = -1;

/// Upper bound on clips per forward pass during extraction.
const CLIPS_PER_PASS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoFeature {
    pub vector: Vec<f32>,
    pub person_id: i64,
    pub camera_id: i64,
    pub tracklet: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Meta {
    pub person_id: i64,
    pub camera_id: i64,
}

impl VideoFeature {
    pub fn meta(&self) -> Meta {
        Meta {
            person_id: self.person_id,
            camera_id: self.camera_id,
        }
    }
}

/// Mean of the clip features of one tracklet (consecutive windows of
/// `clip_len` frames, eval-mode forward).
pub fn extract_video_feature(
    tracklet: &TrackletRecord,
    model: &ReidModel,
    clip_len: usize,
    transform: &TransformConfig,
) -> Result<VideoFeature> {
    let clips = split_inference_clips(tracklet, clip_len)?;
    let tcfg = transform.eval_mode();
    // eval transforms draw nothing, the stream only satisfies the signature
    let loaded: Vec<ClipTensor> = clips
        .par_iter()
        .map(|c| {
            let paths: Vec<&Path> = c.frame_paths().collect();
            load_clip(&paths, &tcfg, &mut seed::rng_for(0, &[]))
        })
        .collect::<Result<_>>()?;
    let mut parts = Vec::new();
    for chunk in loaded.chunks(CLIPS_PER_PASS) {
        let batch = ClipTensor::stack(chunk, model.device())?;
        let out = model.forward(&batch, false)?;
        parts.push(out.eval_features().detach());
    }
    let all = Tensor::cat(&parts, 0)?;
    let n = all.dim(0)?;
    let vector = (all.sum(0)? / n as f64)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite feature for tracklet {:?}",
            tracklet.key()
        )));
    }
    Ok(VideoFeature {
        vector,
        person_id: tracklet.person_id,
        camera_id: tracklet.camera_id,
        tracklet: tracklet.tracklet,
    })
}

pub fn extract_features(
    records: &[&TrackletRecord],
    model: &ReidModel,
    clip_len: usize,
    transform: &TransformConfig,
) -> Result<Vec<VideoFeature>> {
    records
        .iter()
        .map(|r| extract_video_feature(r, model, clip_len, transform))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    /// 1 - cosine similarity
    Cosine,
}

/// (Q, G) distance matrix in f64.
pub fn distance_matrix(query: &[VideoFeature], gallery: &[VideoFeature], metric: Metric) -> Result<Vec<Vec<f64>>> {
    let dim = query.first().or(gallery.first()).map_or(0, |f| f.vector.len());
    if query.iter().chain(gallery).any(|f| f.vector.len() != dim) {
        return Err(Error::validation("feature dimensions differ"));
    }
    let norm = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    Ok(query
        .par_iter()
        .map(|q| {
            let qn = norm(&q.vector);
            gallery
                .iter()
                .map(|g| match metric {
                    Metric::Euclidean => q
                        .vector
                        .iter()
                        .zip(&g.vector)
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum::<f64>()
                        .sqrt(),
                    Metric::Cosine => {
                        let dot: f64 = q.vector.iter().zip(&g.vector).map(|(&a, &b)| a as f64 * b as f64).sum();
                        let denom = qn * norm(&g.vector);
                        if denom == 0.0 {
                            1.0
                        } else {
                            1.0 - dot / denom
                        }
                    }
                })
                .collect()
        })
        .collect())
}

fn check_shapes(dist: &[Vec<f64>], q: &[Meta], g: &[Meta]) -> Result<()> {
    if dist.len() != q.len() || dist.iter().any(|r| r.len() != g.len()) {
        return Err(Error::validation(format!(
            "distance matrix does not match {} queries x {} gallery entries",
            q.len(),
            g.len()
        )));
    }
    Ok(())
}

/// Relevance flags of the filtered ranking for one query, or `None` when
/// the query has no valid match. Gallery entries sharing both id and camera
/// with the query, and junk entries, are removed; ties keep gallery order.
fn ranked_relevance(row: &[f64], q: Meta, g: &[Meta]) -> Option<Vec<bool>> {
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    let hits: Vec<bool> = order
        .into_iter()
        .filter(|&j| {
            let m = g[j];
            m.person_id != JUNK_ID && !(m.person_id == q.person_id && m.camera_id == q.camera_id)
        })
        .map(|j| g[j].person_id == q.person_id)
        .collect();
    hits.iter().any(|&h| h).then_some(hits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcResult {
    pub accuracy: BTreeMap<usize, f64>,
    pub evaluated: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

fn no_valid_queries() -> Error {
    Error::validation("no query has a valid gallery match")
}

pub fn compute_cmc(dist: &[Vec<f64>], q: &[Meta], g: &[Meta], ranks: &[usize]) -> Result<CmcResult> {
    check_shapes(dist, q, g)?;
    if ranks.contains(&0) {
        return Err(Error::validation("ranks are 1-based"));
    }
    let firsts: Vec<Option<usize>> = dist
        .par_iter()
        .zip(q)
        .map(|(row, &qm)| ranked_relevance(row, qm, g).and_then(|h| h.iter().position(|&x| x)))
        .collect();
    let valid: Vec<usize> = firsts.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(no_valid_queries());
    }
    let accuracy = ranks
        .iter()
        .map(|&k| {
            let hit = valid.iter().filter(|&&p| p < k).count();
            (k, hit as f64 / valid.len() as f64)
        })
        .collect();
    Ok(CmcResult {
        accuracy,
        evaluated: valid.len(),
        excluded: q.len() - valid.len(),
    })
}

/// Non-interpolated average precision: mean of precision at each hit.
fn average_precision(hits: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    sum / found as f64
}

pub fn compute_map(dist: &[Vec<f64>], q: &[Meta], g: &[Meta]) -> Result<MapResult> {
    check_shapes(dist, q, g)?;
    let aps: Vec<f64> = dist
        .par_iter()
        .zip(q)
        .filter_map(|(row, &qm)| ranked_relevance(row, qm, g).map(|h| average_precision(&h)))
        .collect();
    if aps.is_empty() {
        return Err(no_valid_queries());
    }
    Ok(MapResult {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        evaluated: aps.len(),
        excluded: q.len() - aps.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    /// pick by dataset layout
    #[default]
    Auto,
    /// fixed query/gallery split (MARS)
    Fixed,
    /// repeated seeded half splits, first camera probes the second (PRID2011, iLIDS-VID)
    CrossCamera,
    /// every training tracklet against every other
    Train,
}

impl ProtocolKind {
    pub fn resolve(self, layout: Layout) -> Self {
        match (self, layout) {
            (ProtocolKind::Auto, Layout::Mars) => ProtocolKind::Fixed,
            (ProtocolKind::Auto, Layout::Prid2011 | Layout::IlidsVid) => ProtocolKind::CrossCamera,
            (ProtocolKind::Auto, Layout::Synthetic) => ProtocolKind::Train,
            (k, _) => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    pub num_splits: usize,
    pub split_seed: u64,
    pub ranks: Vec<usize>,
    pub metric: Metric,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::Auto,
            num_splits: 10,
            split_seed: 0,
            ranks: vec![1, 5, 10, 20],
            metric: Metric::Euclidean,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_splits == 0 {
            return Err(Error::config("num_splits must be at least 1"));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(Error::config("ranks must be non-empty and 1-based"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolDescriptor {
    pub dataset: String,
    pub kind: ProtocolKind,
    pub split_count: usize,
    pub feature_space: FeatureSpace,
    pub metric: Metric,
    pub clip_len: usize,
    pub filtering: String,
    pub evaluated_queries: usize,
    pub excluded_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// rank -> accuracy
    pub cmc: BTreeMap<usize, f64>,
    pub map_score: f64,
    pub protocol: ProtocolDescriptor,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.get(&1).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let p = &self.protocol;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "dataset {} | protocol {:?} x{} | {} {:?} | T={}",
            p.dataset, p.kind, p.split_count, p.feature_space, p.metric, p.clip_len
        );
        let _ = writeln!(s, "{:<10} {:>8}", "metric", "value");
        for (k, v) in &self.cmc {
            let _ = writeln!(s, "{:<10} {:>7.2}%", format!("rank-{k}"), v * 100.0);
        }
        let _ = writeln!(s, "{:<10} {:>7.2}%", "mAP", self.map_score * 100.0);
        let _ = write!(
            s,
            "queries: {} evaluated, {} without a valid match",
            p.evaluated_queries, p.excluded_queries
        );
        s
    }
}

fn metas(features: &[&VideoFeature]) -> Vec<Meta> {
    features.iter().map(|f| f.meta()).collect()
}

fn score(
    query: &[&VideoFeature],
    gallery: &[&VideoFeature],
    cfg: &ProtocolConfig,
) -> Result<(CmcResult, MapResult)> {
    let q: Vec<VideoFeature> = query.iter().map(|f| (*f).clone()).collect();
    let g: Vec<VideoFeature> = gallery.iter().map(|f| (*f).clone()).collect();
    let dist = distance_matrix(&q, &g, cfg.metric)?;
    let (qm, gm) = (metas(query), metas(gallery));
    Ok((compute_cmc(&dist, &qm, &gm, &cfg.ranks)?, compute_map(&dist, &qm, &gm)?))
}

/// Retrieval evaluation of `model` on `index` under the configured protocol.
///
/// Cross-camera protocols extract each tracklet once and average CMC and mAP
/// over `num_splits` seeded query/gallery partitions of the same features.
pub fn run_protocol(
    index: &TrackletIndex,
    model: &ReidModel,
    cfg: &ProtocolConfig,
    clip_len: usize,
    transform: &TransformConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let kind = cfg.kind.resolve(index.layout());
    let records = index.records();
    let (cmc, map_score, splits, evaluated, excluded) = match kind {
        ProtocolKind::Fixed | ProtocolKind::Train => {
            let (qs, gs) = if kind == ProtocolKind::Fixed {
                (Split::Query, Split::Gallery)
            } else {
                (Split::Train, Split::Train)
            };
            let qi: Vec<usize> = index.split(qs).map(|(i, _)| i).collect();
            let gi: Vec<usize> = index.split(gs).map(|(i, _)| i).collect();
            if qi.is_empty() || gi.is_empty() {
                return Err(Error::config(format!(
                    "dataset has no {qs}/{gs} tracklets for the {kind:?} protocol"
                )));
            }
            let mut wanted: Vec<usize> = qi.iter().chain(&gi).copied().collect();
            wanted.sort_unstable();
            wanted.dedup();
            let feats = features_for(records, &wanted, model, clip_len, transform)?;
            let q: Vec<&VideoFeature> = qi.iter().map(|i| &feats[i]).collect();
            let g: Vec<&VideoFeature> = gi.iter().map(|i| &feats[i]).collect();
            let (c, m) = score(&q, &g, cfg)?;
            (c.accuracy, m.map, 1, c.evaluated, c.excluded)
        }
        ProtocolKind::CrossCamera => {
            let cams: std::collections::BTreeSet<i64> = records.iter().map(|r| r.camera_id).collect();
            if cams.len() < 2 {
                return Err(Error::config("cross-camera protocol needs two cameras"));
            }
            let all: Vec<usize> = (0..records.len()).collect();
            let feats = features_for(records, &all, model, clip_len, transform)?;
            let mut sum_cmc: BTreeMap<usize, f64> = BTreeMap::new();
            let (mut sum_map, mut evaluated, mut excluded) = (0.0, 0, 0);
            for s in 0..cfg.num_splits {
                let mut split = records.to_vec();
                assign_cross_camera_split(&mut split, s, cfg.split_seed);
                let pick = |want: Split| -> Vec<&VideoFeature> {
                    split
                        .iter()
                        .enumerate()
                        .filter(|(_, r)| r.split == want)
                        .map(|(i, _)| &feats[&i])
                        .collect()
                };
                let (q, g) = (pick(Split::Query), pick(Split::Gallery));
                if q.is_empty() || g.is_empty() {
                    return Err(Error::config(format!("split {s} has an empty query or gallery side")));
                }
                let (c, m) = score(&q, &g, cfg)?;
                for (k, v) in c.accuracy {
                    *sum_cmc.entry(k).or_default() += v;
                }
                sum_map += m.map;
                evaluated += c.evaluated;
                excluded += c.excluded;
            }
            let n = cfg.num_splits as f64;
            let cmc = sum_cmc.into_iter().map(|(k, v)| (k, v / n)).collect();
            (cmc, sum_map / n, cfg.num_splits, evaluated, excluded)
        }
        ProtocolKind::Auto => unreachable!("resolved above"),
    };
    Ok(EvalReport {
        cmc,
        map_score,
        protocol: ProtocolDescriptor {
            dataset: index.layout().name().to_string(),
            kind,
            split_count: splits,
            feature_space: model.spec().head.eval_feature,
            metric: cfg.metric,
            clip_len,
            filtering: "same id and same camera removed; id -1 is junk".into(),
            evaluated_queries: evaluated,
            excluded_queries: excluded,
        },
    })
}

fn features_for(
    records: &[TrackletRecord],
    wanted: &[usize],
    model: &ReidModel,
    clip_len: usize,
    transform: &TransformConfig,
) -> Result<BTreeMap<usize, VideoFeature>> {
    let refs: Vec<&TrackletRecord> = wanted.iter().map(|&i| &records[i]).collect();
    let feats = extract_features(&refs, model, clip_len, transform)?;
    Ok(wanted.iter().copied().zip(feats).collect())
}

const DUMP_MAGIC: &[u8; 8] = b"REIDFEAT";

#[derive(Serialize, Deserialize)]
struct DumpRow {
    row: usize,
    person_id: i64,
    camera_id: i64,
    tracklet: u32,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("jsonl")
}

/// Writes `path` (magic, u64 rows, u64 cols, row-major little-endian f32)
/// and a `.jsonl` sidecar with one metadata record per row.
pub fn write_feature_dump(path: &Path, features: &[VideoFeature]) -> Result<()> {
    let dim = features.first().map_or(0, |f| f.vector.len());
    if features.iter().any(|f| f.vector.len() != dim) {
        return Err(Error::validation("feature dimensions differ"));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(DUMP_MAGIC).map_err(io)?;
    w.write_all(&(features.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(dim as u64).to_le_bytes()).map_err(io)?;
    for f in features {
        for v in &f.vector {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    let side = sidecar(path);
    let file = std::fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
    let mut w = BufWriter::new(file);
    for (row, f) in features.iter().enumerate() {
        let rec = DumpRow {
            row,
            person_id: f.person_id,
            camera_id: f.camera_id,
            tracklet: f.tracklet,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("row serializes")).map_err(|e| Error::io(&side, e))?;
    }
    w.flush().map_err(|e| Error::io(&side, e))
}

pub fn read_feature_dump(path: &Path) -> Result<Vec<VideoFeature>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || &bytes[..8] != DUMP_MAGIC {
        return Err(Error::validation(format!("{} is not a feature dump", path.display())));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let body = &bytes[24..];
    if body.len() != rows * cols * 4 {
        return Err(Error::validation(format!("{} is truncated", path.display())));
    }
    let side = sidecar(path);
    let file = std::fs::File::open(&side).map_err(|e| Error::io(&side, e))?;
    let mut out = Vec::with_capacity(rows);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&side, e))?;
        let rec: DumpRow = serde_json::from_str(&line)
            .map_err(|e| Error::validation(format!("{} line {}: {e}", side.display(), i + 1)))?;
        if rec.row != i || i >= rows {
            return Err(Error::validation(format!("{} rows out of order", side.display())));
        }
        let vector = body[i * cols * 4..(i + 1) * cols * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push(VideoFeature {
            vector,
            person_id: rec.person_id,
            camera_id: rec.camera_id,
            tracklet: rec.tracklet,
        });
    }
    if out.len() != rows {
        return Err(Error::validation(format!("{} has {} rows, matrix has {rows}", side.display(), out.len())));
    }
    Ok(out)
}
