//! Turning affinities and class scores into segments.
//!
//! Semantic rows of `A` select the patches of each class; instance rows
//! select the patches of one object each. Selected patches are merged into
//! masks, and things are painted over stuff to form a panoptic map.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Matrix;
use crate::error::GeometryError;
use crate::mask::BinaryMask;
use crate::math;
use crate::synth::{ClassTable, Scene};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct InferenceConfig {
    /// `θ_A`: a patch joins a query's mask at or above this affinity.
    pub affinity_threshold: f64,
    /// `θ_s`: minimum class score of an instance.
    pub score_threshold: f64,
    /// An instance covered by earlier ones below this visible fraction is dropped.
    pub min_visible: f64,
    pub clip_temperature: f64,
    /// `κ`: weight of the mask-pooled embedding scores in open mode.
    pub kappa: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { affinity_threshold: 0.5, score_threshold: 0.25, min_visible: 0.5, clip_temperature: 0.07, kappa: 0.4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Mode {
    Closed,
    Open,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SegmentKind {
    SemanticRegion,
    Instance,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SegmentPrediction {
    pub mask: BinaryMask,
    pub class_id: u32,
    pub score: f64,
    pub kind: SegmentKind,
    /// Query row that produced the segment.
    pub query: usize,
    pub patches: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PanopticSegment {
    /// Nonzero id used in [`PanopticMap::pixels`].
    pub id: u32,
    pub class_id: u32,
    pub is_thing: bool,
    pub score: f64,
}

/// Per-pixel segment ids (0 is unassigned) plus the segment table.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PanopticMap {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u32>,
    pub segments: Vec<PanopticSegment>,
}

impl PanopticMap {
    pub fn segment_mask(&self, id: u32) -> BinaryMask {
        let dense: Vec<bool> = self.pixels.iter().map(|&p| p == id).collect();
        BinaryMask::from_dense(self.width, self.height, &dense).expect("pixel count matches size")
    }

    /// Serialized pixel ids followed by the segment table, for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() * 4 + self.segments.len() * 17);
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for s in &self.segments {
            out.extend_from_slice(&s.id.to_le_bytes());
            out.extend_from_slice(&s.class_id.to_le_bytes());
            out.push(s.is_thing as u8);
            out.extend_from_slice(&s.score.to_bits().to_le_bytes());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InferenceOutput {
    /// One region per class that claims at least one patch.
    pub semantic: Vec<SegmentPrediction>,
    /// Per-pixel class, `None` where no class claims the pixel.
    pub semantic_map: Vec<Option<u32>>,
    pub instances: Vec<SegmentPrediction>,
    pub panoptic: PanopticMap,
}

/// Mask-pooled embedding logits: `cos(mean of field over mask, e_c) / temperature`.
pub fn clip_logits(
    masks: &[BinaryMask],
    scene: &Scene,
    classes: &ClassTable,
    temperature: f64,
) -> Result<Matrix, GeometryError> {
    let c = classes.len();
    let mut data = Vec::with_capacity(masks.len() * c);
    for m in masks {
        let pooled = mask_pool(m, &scene.clip_field, scene.clip_dim)?;
        let norm = math::sqrt(pooled.iter().map(|v| v * v).sum());
        for e in &classes.entries {
            let en = math::sqrt(e.embedding.iter().map(|v| v * v).sum());
            let dot: f64 = pooled.iter().zip(&e.embedding).map(|(a, b)| a * b).sum();
            let cos = if norm == 0.0 || en == 0.0 { 0.0 } else { dot / (norm * en) };
            data.push(cos / temperature);
        }
    }
    Ok(Matrix { rows: masks.len(), cols: c, data })
}

/// Mean of a `pixels × dim` field over the pixels of `mask`.
pub fn mask_pool(mask: &BinaryMask, field: &[f32], dim: usize) -> Result<Vec<f64>, GeometryError> {
    if mask.is_empty() {
        return Err(GeometryError::EmptyMask);
    }
    let mut sum = vec![0.0; dim];
    for p in mask.pixel_indices() {
        let v = &field[p as usize * dim..(p as usize + 1) * dim];
        for (s, &x) in sum.iter_mut().zip(v) {
            *s += x as f64;
        }
    }
    let area = mask.area() as f64;
    Ok(sum.into_iter().map(|s| s / area).collect())
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| math::exp(x - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `σ(S^cls)^(1−κ) + softmax_c(S^CLIP)^κ`, elementwise.
pub fn fuse_scores(class_logits: &Matrix, clip: &Matrix, kappa: f64) -> Matrix {
    assert_eq!(class_logits.shape(), clip.shape(), "score matrices differ in shape");
    let mut data = Vec::with_capacity(class_logits.data.len());
    for r in 0..clip.rows {
        let p = softmax_row(clip.row(r));
        for (c, &pc) in p.iter().enumerate() {
            let s = math::sigmoid(class_logits.get(r, c));
            data.push(math::powf(s, 1.0 - kappa) + math::powf(pc, kappa));
        }
    }
    Matrix { rows: clip.rows, cols: clip.cols, data }
}

fn merge_patches(patches: &[BinaryMask], ids: &[usize], width: u32, height: u32) -> BinaryMask {
    let mut m = BinaryMask::empty(width, height);
    for &i in ids {
        m = m.union(&patches[i]).expect("patches share the scene size");
    }
    m
}

/// Index of the largest value; ties keep the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Assigns each patch to the claiming row with the highest affinity; ties go
/// to the earlier claimant. `claims[r]` lists patches row `rows[r]` selects.
fn resolve_conflicts(affinity: &Matrix, rows: &[usize], claims: &[Vec<usize>], n: usize) -> Vec<Vec<usize>> {
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (r, patches) in claims.iter().enumerate() {
        for &p in patches {
            let better = match owner[p] {
                None => true,
                Some(o) => affinity.get(rows[r], p) > affinity.get(rows[o], p),
            };
            if better {
                owner[p] = Some(r);
            }
        }
    }
    let mut out = vec![Vec::new(); claims.len()];
    for (p, o) in owner.into_iter().enumerate() {
        if let Some(o) = o {
            out[o].push(p);
        }
    }
    out
}

/// Segments from the final-stage affinity `A` (`(C + N) × N`) and class
/// logits. In [`Mode::Open`] instance labels and scores come from half of
/// [`fuse_scores`], which stays in `[0, 1]`; at `κ = 0` this is `(σ + 1) / 2`,
/// so labels and ranking match closed mode.
pub fn infer(
    scene: &Scene,
    classes: &ClassTable,
    affinity: &Matrix,
    class_logits: &Matrix,
    config: &InferenceConfig,
    mode: Mode,
) -> Result<InferenceOutput, GeometryError> {
    let (w, h) = (scene.width, scene.height);
    let n = scene.patches.len();
    let c = classes.len();
    if affinity.cols != n || affinity.rows < c + n || class_logits.rows < c + n || class_logits.cols != c {
        return Err(GeometryError::SizeMismatch);
    }
    let theta = config.affinity_threshold;
    let selected = |row: usize| -> Vec<usize> { (0..n).filter(|&p| affinity.get(row, p) >= theta).collect() };

    // semantic regions
    let sem_rows: Vec<usize> = (0..c).collect();
    let sem_claims: Vec<Vec<usize>> = sem_rows.iter().map(|&r| selected(r)).collect();
    let sem_owned = resolve_conflicts(affinity, &sem_rows, &sem_claims, n);
    let mut semantic = Vec::new();
    let mut semantic_map = vec![None; (w * h) as usize];
    for (class, patches) in sem_owned.into_iter().enumerate() {
        if patches.is_empty() {
            continue;
        }
        let mask = merge_patches(&scene.patches, &patches, w, h);
        for p in mask.pixel_indices() {
            semantic_map[p as usize] = Some(class as u32);
        }
        let score = math::sigmoid(class_logits.get(class, class));
        semantic.push(SegmentPrediction {
            mask,
            class_id: class as u32,
            score,
            kind: SegmentKind::SemanticRegion,
            query: class,
            patches,
        });
    }

    // instance candidates: rows with at least one selected patch
    let inst_rows: Vec<usize> = (c..c + n).filter(|&r| (0..n).any(|p| affinity.get(r, p) >= theta)).collect();
    let raw: Vec<Vec<usize>> = inst_rows.iter().map(|&r| selected(r)).collect();
    let scores: Matrix = match mode {
        Mode::Closed => {
            let data = inst_rows
                .iter()
                .flat_map(|&r| class_logits.row(r).iter().map(|&x| math::sigmoid(x)))
                .collect();
            Matrix { rows: inst_rows.len(), cols: c, data }
        }
        Mode::Open => {
            let masks: Vec<BinaryMask> = raw.iter().map(|p| merge_patches(&scene.patches, p, w, h)).collect();
            let clip = clip_logits(&masks, scene, classes, config.clip_temperature)?;
            let rows: Vec<f64> = inst_rows.iter().flat_map(|&r| class_logits.row(r).to_vec()).collect();
            let cls = Matrix { rows: inst_rows.len(), cols: c, data: rows };
            let mut fused = fuse_scores(&cls, &clip, config.kappa);
            fused.data.iter_mut().for_each(|v| *v *= 0.5);
            fused
        }
    };

    let mut keep: Vec<(usize, u32, f64)> = Vec::new();
    for (i, _) in inst_rows.iter().enumerate() {
        let label = argmax(scores.row(i));
        let score = scores.get(i, label);
        if score >= config.score_threshold && classes.is_thing(label as u32) {
            keep.push((i, label as u32, score));
        }
    }
    // exact duplicates keep the higher score, then the lower row
    let mut unique: Vec<(usize, u32, f64)> = Vec::new();
    for cand in keep {
        match unique.iter_mut().find(|u| raw[u.0] == raw[cand.0]) {
            Some(u) if cand.2 > u.2 => *u = cand,
            Some(_) => {}
            None => unique.push(cand),
        }
    }
    let rows: Vec<usize> = unique.iter().map(|u| inst_rows[u.0]).collect();
    let claims: Vec<Vec<usize>> = unique.iter().map(|u| raw[u.0].clone()).collect();
    let owned = resolve_conflicts(affinity, &rows, &claims, n);
    let mut instances = Vec::new();
    for ((i, label, score), patches) in unique.into_iter().zip(owned) {
        if patches.is_empty() {
            continue;
        }
        instances.push(SegmentPrediction {
            mask: merge_patches(&scene.patches, &patches, w, h),
            class_id: label,
            score,
            kind: SegmentKind::Instance,
            query: inst_rows[i],
            patches,
        });
    }

    let panoptic = combine_panoptic(&semantic, &instances, classes, w, h, config.min_visible);
    Ok(InferenceOutput { semantic, semantic_map, instances, panoptic })
}

/// Paints instances in descending score order, dropping those left less than
/// `min_visible` visible, then fills free pixels from stuff regions.
pub fn combine_panoptic(
    semantic: &[SegmentPrediction],
    instances: &[SegmentPrediction],
    classes: &ClassTable,
    width: u32,
    height: u32,
    min_visible: f64,
) -> PanopticMap {
    let mut pixels = vec![0u32; (width * height) as usize];
    let mut segments = Vec::new();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| instances[b].score.total_cmp(&instances[a].score).then(a.cmp(&b)));
    for i in order {
        let inst = &instances[i];
        let area = inst.mask.area();
        let free: Vec<u32> = inst.mask.pixel_indices().filter(|&p| pixels[p as usize] == 0).collect();
        if area == 0 || (free.len() as f64) < min_visible * area as f64 {
            continue;
        }
        let id = segments.len() as u32 + 1;
        for p in free {
            pixels[p as usize] = id;
        }
        segments.push(PanopticSegment { id, class_id: inst.class_id, is_thing: true, score: inst.score });
    }
    for region in semantic.iter().filter(|s| !classes.is_thing(s.class_id)) {
        let free: Vec<u32> = region.mask.pixel_indices().filter(|&p| pixels[p as usize] == 0).collect();
        if free.is_empty() {
            continue;
        }
        let id = segments.len() as u32 + 1;
        for p in free {
            pixels[p as usize] = id;
        }
        segments.push(PanopticSegment { id, class_id: region.class_id, is_thing: false, score: region.score });
    }
    PanopticMap { width, height, pixels, segments }
}
