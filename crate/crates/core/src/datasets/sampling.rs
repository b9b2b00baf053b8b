use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Split, TrackletIndex, TrackletRecord};
use crate::{Error, Result};

/// Identity-balanced batch shape: `identities` people with `instances`
/// tracklet draws each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchSpec {
    pub identities: usize,
    pub instances: usize,
}

impl BatchSpec {
    pub fn new(identities: usize, instances: usize) -> Result<Self> {
        let spec = Self {
            identities,
            instances,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::config(format!(
                "batch needs at least 2 identities for negatives, got {}",
                self.identities
            )));
        }
        if self.instances < 2 {
            return Err(Error::config(format!(
                "batch needs at least 2 instances per identity for positives, got {}",
                self.instances
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.identities * self.instances
    }
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            identities: 8,
            instances: 4,
        }
    }
}

/// A fixed-length ordered frame selection from one tracklet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clip<'a> {
    pub source: &'a TrackletRecord,
    pub frame_indices: Vec<usize>,
}

impl Clip<'_> {
    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }

    pub fn frame_paths(&self) -> impl Iterator<Item = &std::path::Path> + '_ {
        self.frame_indices
            .iter()
            .map(|&i| self.source.frame_paths[i].as_path())
    }
}

fn check_clip_len(t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::validation("clip length must be at least 1"));
    }
    Ok(())
}

/// Draws `t` sorted frame indices: without replacement when the tracklet is
/// long enough, with replacement otherwise.
pub fn sample_training_clip<'a, R: Rng + ?Sized>(
    tracklet: &'a TrackletRecord,
    t: usize,
    rng: &mut R,
) -> Result<Clip<'a>> {
    check_clip_len(t)?;
    let n = tracklet.len();
    if n == 0 {
        return Err(Error::validation("cannot sample from an empty tracklet"));
    }
    let mut frame_indices: Vec<usize> = if n >= t {
        index::sample(rng, n, t).into_vec()
    } else {
        (0..t).map(|_| rng.random_range(0..n)).collect()
    };
    frame_indices.sort_unstable();
    Ok(Clip {
        source: tracklet,
        frame_indices,
    })
}

/// Consecutive non-overlapping windows of `t` frames; the last window repeats
/// the final frame when the length is not a multiple of `t`.
pub fn split_inference_clips(tracklet: &TrackletRecord, t: usize) -> Result<Vec<Clip<'_>>> {
    check_clip_len(t)?;
    let n = tracklet.len();
    if n == 0 {
        return Err(Error::validation("cannot split an empty tracklet"));
    }
    Ok((0..n.div_ceil(t))
        .map(|c| Clip {
            source: tracklet,
            frame_indices: (c * t..(c + 1) * t).map(|i| i.min(n - 1)).collect(),
        })
        .collect())
}

/// One epoch of identity-balanced batches. Every training identity is drawn
/// at least once; each batch has `identities` distinct people with
/// `instances` tracklets each.
pub struct PkBatches<'a> {
    index: &'a TrackletIndex,
    plan: std::vec::IntoIter<Vec<(usize, i64)>>,
    total: usize,
}

impl<'a> PkBatches<'a> {
    pub fn num_batches(&self) -> usize {
        self.total
    }
}

impl<'a> Iterator for PkBatches<'a> {
    type Item = Vec<(&'a TrackletRecord, i64)>;

    fn next(&mut self) -> Option<Self::Item> {
        let index = self.index;
        self.plan.next().map(|batch| {
            batch
                .into_iter()
                .map(|(i, pid)| (&index.records()[i], pid))
                .collect()
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.plan.size_hint()
    }
}

pub fn pk_batch_stream<'a, R: Rng + ?Sized>(
    index: &'a TrackletIndex,
    spec: BatchSpec,
    rng: &mut R,
) -> Result<PkBatches<'a>> {
    spec.validate()?;
    let groups = index.by_identity(Split::Train);
    if groups.len() < spec.identities {
        return Err(Error::config(format!(
            "training split has {} identities but batches need {}",
            groups.len(),
            spec.identities
        )));
    }
    let ids: Vec<(i64, Vec<usize>)> = groups.into_iter().collect();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(rng);

    let mut plan = Vec::with_capacity(order.len().div_ceil(spec.identities));
    for chunk in order.chunks(spec.identities) {
        let mut chosen = chunk.to_vec();
        if chosen.len() < spec.identities {
            let mut rest: Vec<usize> = (0..ids.len()).filter(|i| !chosen.contains(i)).collect();
            rest.shuffle(rng);
            chosen.extend(rest.into_iter().take(spec.identities - chunk.len()));
        }
        let mut batch = Vec::with_capacity(spec.batch_size());
        for id in chosen {
            let (pid, members) = &ids[id];
            for pick in draw_instances(members.len(), spec.instances, rng) {
                batch.push((members[pick], *pid));
            }
        }
        plan.push(batch);
    }
    let total = plan.len();
    Ok(PkBatches {
        index,
        plan: plan.into_iter(),
        total,
    })
}

fn draw_instances<R: Rng + ?Sized>(available: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if available >= k {
        return index::sample(rng, available, k).into_vec();
    }
    let mut picks: Vec<usize> = (0..available).collect();
    picks.shuffle(rng);
    picks.extend((available..k).map(|_| rng.random_range(0..available)));
    picks
}
