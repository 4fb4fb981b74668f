use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::geometry::PatchGeometry;
use super::normalize::{Normalization, StatsAccumulator};
use super::points::{FramePair, GroundTruthPoint, Sequence};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    Jittered,
    Cross,
    Mirrored,
    Negative,
}

/// A labeled training pair, stored as coordinates and materialized into
/// patches on demand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub seq: u32,
    pub frame: u32,
    pub mirrored: bool,
    pub y: i32,
    pub rgb_x: i32,
    pub lwir_x: i32,
    /// Annotated disparity of the source point.
    pub d: i32,
    pub same: bool,
    pub provenance: Provenance,
}

impl SampleRef {
    /// Horizontal offset of the LWIR patch from the true match of the RGB patch.
    pub fn displacement(&self) -> i32 {
        self.lwir_x - (self.rgb_x + self.d)
    }

    /// Class index in the head output: 0 = same, 1 = different.
    pub fn target(&self) -> usize {
        if self.same {
            0
        } else {
            1
        }
    }
}

fn point_provenance(p: &GroundTruthPoint) -> Provenance {
    if p.mirrored {
        Provenance::Mirrored
    } else if p.spawned {
        Provenance::Cross
    } else {
        Provenance::Original
    }
}

/// Positive pairs with the LWIR patch at `x + d - 1`, `x + d`, `x + d + 1`;
/// shifts that leave the image are dropped.
pub fn make_positives(p: &GroundTruthPoint, pair: &FramePair, geom: &PatchGeometry) -> Vec<SampleRef> {
    if !geom.fits(&pair.rgb, p.x as i64, p.y as i64) {
        return Vec::new();
    }
    let base = point_provenance(p);
    (-1..=1)
        .filter(|j| geom.fits(&pair.lwir, (p.x + p.d + j) as i64, p.y as i64))
        .map(|j| SampleRef {
            seq: p.seq,
            frame: p.frame,
            mirrored: p.mirrored,
            y: p.y,
            rgb_x: p.x,
            lwir_x: p.x + p.d + j,
            d: p.d,
            same: true,
            provenance: if j != 0 && base == Provenance::Original { Provenance::Jittered } else { base },
        })
        .collect()
}

/// Offset band of negative pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativePolicy {
    pub min_offset: i32,
    pub max_offset: i32,
    /// Place the pair at `(x + o, y)` / `(x - d + o, y)` instead of keeping
    /// the RGB patch and moving the LWIR patch to `x + d + o`.
    pub literal: bool,
    /// Draws attempted before giving up on a point.
    pub retries: usize,
}

impl Default for NegativePolicy {
    fn default() -> Self {
        Self { min_offset: 10, max_offset: 30, literal: false, retries: 32 }
    }
}

impl NegativePolicy {
    /// `|o|` uniform over `[min_offset, max_offset]`, sign uniform.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> i32 {
        let m = rng.gen_range(self.min_offset..=self.max_offset);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    }
}

pub fn make_negative(
    p: &GroundTruthPoint,
    pair: &FramePair,
    geom: &PatchGeometry,
    policy: &NegativePolicy,
    rng: &mut ChaCha8Rng,
) -> Option<SampleRef> {
    for _ in 0..policy.retries.max(1) {
        let o = policy.draw(rng);
        let (rgb_x, lwir_x) = if policy.literal { (p.x + o, p.x - p.d + o) } else { (p.x, p.x + p.d + o) };
        if geom.fits(&pair.rgb, rgb_x as i64, p.y as i64) && geom.fits(&pair.lwir, lwir_x as i64, p.y as i64) {
            return Some(SampleRef {
                seq: p.seq,
                frame: p.frame,
                mirrored: p.mirrored,
                y: p.y,
                rgb_x,
                lwir_x,
                d: p.d,
                same: false,
                provenance: Provenance::Negative,
            });
        }
    }
    None
}

/// Neighbors spawned by cross duplication.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighborhood {
    /// `(x +- 1, y)` and `(x, y +- 1)`.
    #[default]
    Cross,
    /// `(x +- 1, y +- 1)`.
    Diagonal,
}

impl Neighborhood {
    pub fn offsets(self) -> [(i32, i32); 4] {
        match self {
            Neighborhood::Cross => [(-1, 0), (1, 0), (0, -1), (0, 1)],
            Neighborhood::Diagonal => [(-1, -1), (1, -1), (-1, 1), (1, 1)],
        }
    }
}

/// Adds the four neighbors of every point with the parent's disparity.
/// Neighbors rejected by `keep` are dropped; a location already present
/// (annotated or spawned earlier) is not added again.
pub fn cross_duplicate(
    points: &[GroundTruthPoint],
    neighborhood: Neighborhood,
    keep: impl Fn(&GroundTruthPoint) -> bool,
) -> Vec<GroundTruthPoint> {
    let mut seen: HashSet<_> = points.iter().map(|p| p.location()).collect();
    let mut out = points.to_vec();
    for p in points {
        for (dx, dy) in neighborhood.offsets() {
            let q = GroundTruthPoint { x: p.x + dx, y: p.y + dy, spawned: true, ..*p };
            if keep(&q) && seen.insert(q.location()) {
                out.push(q);
            }
        }
    }
    out
}

/// Point coordinates in the horizontally flipped frame pair of width `width`.
///
/// A patch spanning `[x - P/2, x + P/2)` lands on `[W - x - P/2, W - x + P/2)`
/// after flipping, so the mirrored center is `W - x`; the LWIR match
/// `x + d` moves to `W - x - d`, i.e. the disparity changes sign.
pub fn mirror_point(p: &GroundTruthPoint, width: usize) -> GroundTruthPoint {
    GroundTruthPoint { x: width as i32 - p.x, d: -p.d, mirrored: !p.mirrored, ..*p }
}

pub fn mirror_points(points: &[GroundTruthPoint], width: usize) -> Vec<GroundTruthPoint> {
    points.iter().map(|p| mirror_point(p, width)).collect()
}

/// Flips both frames and returns them with the original points followed by
/// their mirrored copies.
pub fn mirror_augment(frames: &FramePair, points: &[GroundTruthPoint]) -> (FramePair, Vec<GroundTruthPoint>) {
    let mut all = points.to_vec();
    all.extend(mirror_points(points, frames.width()));
    (frames.flip_horizontal(), all)
}

/// How many jittered positives each point contributes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JitterPolicy {
    /// One positive at a uniformly drawn shift in `{-1, 0, 1}`.
    #[default]
    Sample,
    /// Every in-bounds shift.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    /// Cross duplication neighborhood; `None` disables it.
    pub cross: Option<Neighborhood>,
    pub mirror: bool,
    pub jitter: JitterPolicy,
    pub negatives: NegativePolicy,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self { cross: Some(Neighborhood::Cross), mirror: true, jitter: JitterPolicy::Sample, negatives: NegativePolicy::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub raw_points: usize,
    pub after_cross: usize,
    pub after_mirror: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Positives discarded because no negative could be placed for them.
    pub dropped: usize,
}

/// A minibatch ready for the network.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub rgb: Tensor<T>,
    pub lwir: Tensor<T>,
    pub targets: Vec<usize>,
}

/// All loaded sequences, addressed by index.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub geometry: PatchGeometry,
    sequences: Vec<Sequence>,
    flipped: Vec<BTreeMap<u32, FramePair>>,
    index: HashMap<String, u32>,
}

impl Corpus {
    pub fn new(geometry: PatchGeometry) -> Self {
        Self { geometry, sequences: Vec::new(), flipped: Vec::new(), index: HashMap::new() }
    }

    /// Adds a sequence and stamps its points with the new sequence index.
    pub fn add(&mut self, mut seq: Sequence) -> Result<u32> {
        if self.index.contains_key(&seq.name) {
            return Err(Error::Config(format!("sequence {} added twice", seq.name)));
        }
        let id = self.sequences.len() as u32;
        for p in seq.points.iter_mut().chain(seq.unusable.iter_mut()) {
            p.seq = id;
        }
        self.index.insert(seq.name.clone(), id);
        self.sequences.push(seq);
        self.flipped.push(BTreeMap::new());
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<u32> {
        self.index.get(name).copied().ok_or_else(|| Error::UnknownSequence(name.to_string()))
    }

    pub fn sequence(&self, id: u32) -> &Sequence {
        &self.sequences[id as usize]
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    /// Materializes the flipped frames of a sequence (idempotent).
    pub fn prepare_mirror(&mut self, id: u32) {
        let seq = &self.sequences[id as usize];
        let flipped = &mut self.flipped[id as usize];
        for (f, pair) in &seq.frames {
            flipped.entry(*f).or_insert_with(|| pair.flip_horizontal());
        }
    }

    pub fn frames(&self, seq: u32, frame: u32, mirrored: bool) -> Option<&FramePair> {
        if mirrored {
            self.flipped.get(seq as usize)?.get(&frame)
        } else {
            self.sequences.get(seq as usize)?.frames.get(&frame)
        }
    }

    fn frames_of(&self, p: &GroundTruthPoint) -> Option<&FramePair> {
        self.frames(p.seq, p.frame, p.mirrored)
    }

    pub fn usable(&self, p: &GroundTruthPoint) -> bool {
        self.frames_of(p).is_some_and(|f| f.usable(&self.geometry, p))
    }

    pub fn queryable(&self, p: &GroundTruthPoint) -> bool {
        self.frames_of(p).is_some_and(|f| f.queryable(&self.geometry, p.x, p.y))
    }

    /// Cross duplication, mirroring, jittered positives and one negative per
    /// positive. The result is balanced and in generation order (shuffling
    /// is the trainer's job).
    pub fn augment(
        &mut self,
        points: &[GroundTruthPoint],
        opts: &AugmentOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<SampleRef>, AugmentReport)> {
        let mut report = AugmentReport { raw_points: points.len(), ..Default::default() };
        let mut pts = match opts.cross {
            Some(n) => cross_duplicate(points, n, |q| self.usable(q)),
            None => points.to_vec(),
        };
        report.after_cross = pts.len();
        if opts.mirror {
            let seqs: HashSet<u32> = pts.iter().map(|p| p.seq).collect();
            for s in seqs {
                self.prepare_mirror(s);
            }
            let mirrored: Vec<_> = pts
                .iter()
                .map(|p| {
                    let w = self.frames_of(p).map(|f| f.width()).unwrap_or(0);
                    mirror_point(p, w)
                })
                .collect();
            pts.extend(mirrored);
        }
        report.after_mirror = pts.len();

        let geom = self.geometry;
        let mut samples = Vec::with_capacity(pts.len() * 2);
        for p in &pts {
            let pair = self
                .frames_of(p)
                .ok_or_else(|| Error::Config(format!("point in frame {} has no loaded frames", p.frame)))?;
            let mut positives = make_positives(p, pair, &geom);
            if opts.jitter == JitterPolicy::Sample && !positives.is_empty() {
                let pick = rng.gen_range(0..positives.len());
                positives = vec![positives[pick]];
            }
            for pos in positives {
                match make_negative(p, pair, &geom, &opts.negatives, rng) {
                    Some(neg) => {
                        samples.push(pos);
                        samples.push(neg);
                        report.positives += 1;
                        report.negatives += 1;
                    }
                    None => report.dropped += 1,
                }
            }
        }
        Ok((samples, report))
    }

    /// RGB and LWIR patches (`[3, P, P]`, values in `[0, 1]`) of a sample.
    pub fn sample_patches(&self, s: &SampleRef) -> Option<(Vec<f32>, Vec<f32>)> {
        let pair = self.frames(s.seq, s.frame, s.mirrored)?;
        let g = &self.geometry;
        Some((g.patch_at(&pair.rgb, s.rgb_x as i64, s.y as i64)?, g.patch_at(&pair.lwir, s.lwir_x as i64, s.y as i64)?))
    }

    /// RGB patch and widened LWIR patch of a query point, `[0, 1]`-scaled.
    pub fn query_patches(&self, p: &GroundTruthPoint) -> Option<(Vec<f32>, Vec<f32>)> {
        let pair = self.frames_of(p)?;
        let g = &self.geometry;
        Some((g.patch_at(&pair.rgb, p.x as i64, p.y as i64)?, g.wide_at(&pair.lwir, p.x as i64, p.y as i64)?))
    }

    /// Channel statistics of every patch of `samples`.
    pub fn normalization(&self, samples: &[SampleRef]) -> Result<Normalization> {
        let mut rgb = StatsAccumulator::default();
        let mut lwir = StatsAccumulator::default();
        for s in samples {
            let (r, l) = self.sample_patches(s).ok_or(Error::EmptyBatch)?;
            rgb.add(&r);
            lwir.add(&l);
        }
        Ok(Normalization { rgb: rgb.finish()?, lwir: lwir.finish()? })
    }

    pub fn batch<T: Scalar>(&self, samples: &[SampleRef], norm: &Normalization) -> Result<Batch<T>> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let p = self.geometry.patch;
        let pairs: Vec<Option<(Vec<f32>, Vec<f32>)>> = samples
            .par_iter()
            .map(|s| {
                self.sample_patches(s).map(|(mut r, mut l)| {
                    norm.rgb.apply(&mut r);
                    norm.lwir.apply(&mut l);
                    (r, l)
                })
            })
            .collect();
        let mut rgb = Vec::with_capacity(samples.len() * 3 * p * p);
        let mut lwir = Vec::with_capacity(samples.len() * 3 * p * p);
        for (s, pair) in samples.iter().zip(pairs) {
            let (r, l) = pair.ok_or_else(|| Error::Config(format!("sample {s:?} leaves its frame")))?;
            rgb.extend(r.into_iter().map(|v| T::of(v as f64)));
            lwir.extend(l.into_iter().map(|v| T::of(v as f64)));
        }
        let shape = [samples.len(), 3, p, p];
        Ok(Batch {
            rgb: Tensor::new(shape, rgb)?,
            lwir: Tensor::new(shape, lwir)?,
            targets: samples.iter().map(SampleRef::target).collect(),
        })
    }
}

/// Seeded in-place shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    items.shuffle(rng);
}
