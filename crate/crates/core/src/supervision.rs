//! Label assignment and losses.
//!
//! Ground truth is expressed as *units*: every thing instance, plus one
//! region per class present in the scene (the union of a thing class's
//! instances, or the stuff region itself). The matching matrix `G` marks
//! which patches compose each unit. Semantic queries copy the `G` row of
//! their class region; instance queries are matched to thing instances by
//! the Hungarian algorithm and copy the matched row.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Axis, Graph, Matrix, Tensor};
use crate::decoder::{high_affinity_box, DenoisingQueries, StageOutput};
use crate::encoder::position_embedding;
use crate::error::{AutodiffError, GeometryError, ModelError};
use crate::mask::{giou_box, iop_box, iop_mask, iou_mask, union_all, BBox, BinaryMask};
use crate::math;
use crate::synth::{mix_seed, GtInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    /// A single thing instance.
    Instance,
    /// Everything of one class in the scene.
    Region,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unit {
    pub mask: BinaryMask,
    pub class_id: u32,
    pub kind: UnitKind,
}

/// Thing instances in ground-truth order, then one region per present class
/// in ascending class order.
pub fn target_units(gt: &[GtInstance]) -> Result<Vec<Unit>, GeometryError> {
    let mut units: Vec<Unit> = gt
        .iter()
        .filter(|g| g.is_thing)
        .map(|g| Unit { mask: g.mask.clone(), class_id: g.class_id, kind: UnitKind::Instance })
        .collect();
    let mut by_class: BTreeMap<u32, Vec<BinaryMask>> = BTreeMap::new();
    for g in gt {
        by_class.entry(g.class_id).or_default().push(g.mask.clone());
    }
    for (class_id, masks) in by_class {
        units.push(Unit { mask: union_all(&masks)?, class_id, kind: UnitKind::Region });
    }
    Ok(units)
}

/// Binary `K × N` matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl MatchMatrix {
    pub fn get(&self, k: usize, n: usize) -> bool {
        self.data[k * self.cols + n]
    }

    pub fn row(&self, k: usize) -> &[bool] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }

    pub fn row_f64(&self, k: usize) -> Vec<f64> {
        self.row(k).iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// `G[k,n] = 1` iff both the box IoP and the mask IoP of patch `n` against
/// target `k` exceed `tau`. A target left without any patch instead takes
/// every patch whose mask IoU with it is at least `lowq_iou`.
pub fn build_g(
    targets: &[BinaryMask],
    patches: &[BinaryMask],
    tau: f64,
    lowq_iou: f64,
) -> Result<MatchMatrix, GeometryError> {
    if patches.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    let patch_boxes: Vec<BBox> = patches.iter().map(BinaryMask::bbox).collect::<Result<_, _>>()?;
    let (k_count, n_count) = (targets.len(), patches.len());
    let mut data = vec![false; k_count * n_count];
    for (k, t) in targets.iter().enumerate() {
        let tb = t.bbox()?;
        let row = &mut data[k * n_count..(k + 1) * n_count];
        for (n, p) in patches.iter().enumerate() {
            let ib = iop_box(&patch_boxes[n], &tb)?;
            if ib <= tau {
                continue;
            }
            row[n] = iop_mask(p, t)?.min(ib) > tau;
        }
        if row.iter().all(|&b| !b) {
            for (n, p) in patches.iter().enumerate() {
                row[n] = iou_mask(p, t)? >= lowq_iou;
            }
        }
    }
    Ok(MatchMatrix { rows: k_count, cols: n_count, data })
}

/// Minimum-cost assignment of `min(rows, cols)` pairs on a row-major cost
/// matrix. Among optimal assignments the lexicographically smallest is
/// returned (lowest row first, then lowest column). Pairs are sorted by row.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    assert_eq!(cost.len(), rows * cols, "cost matrix shape");
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let all_rows: Vec<usize> = (0..rows).collect();
    let all_cols: Vec<usize> = (0..cols).collect();
    let best = solve_subproblem(cost, cols, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + best.abs());

    // fix rows one at a time to the smallest column that keeps the optimum
    let mut free_rows = all_rows;
    let mut free_cols = all_cols;
    let mut fixed = 0.0;
    let mut pairs = Vec::new();
    let mut slots = rows.min(cols);
    while slots > 0 {
        let r = free_rows.remove(0);
        let mut chosen = None;
        for (ci, &c) in free_cols.iter().enumerate() {
            let mut rest_cols = free_cols.clone();
            rest_cols.remove(ci);
            let total = fixed + cost[r * cols + c] + solve_subproblem(cost, cols, &free_rows, &rest_cols);
            if total <= best + tol {
                chosen = Some((ci, c));
                break;
            }
        }
        // no column keeps the optimum: the row stays unassigned
        if let Some((ci, c)) = chosen {
            fixed += cost[r * cols + c];
            free_cols.remove(ci);
            pairs.push((r, c));
            slots -= 1;
        }
    }
    pairs
}

/// Optimal total cost over the given rows and columns.
fn solve_subproblem(cost: &[f64], stride: usize, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let at = |i: usize, j: usize| cost[rows[i] * stride + cols[j]];
    if rows.len() <= cols.len() {
        kuhn_munkres(rows.len(), cols.len(), at).1
    } else {
        kuhn_munkres(cols.len(), rows.len(), |i, j| at(j, i)).1
    }
}

/// Shortest augmenting path with potentials; requires `n <= m`. Returns the
/// column of each row and the total cost.
fn kuhn_munkres(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> (Vec<usize>, f64) {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) matched to column j; column 0 is the virtual root
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost(i, j)).sum();
    (assign, total)
}

/// Weights of the five matching-cost terms; zero disables a term.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MatchWeights {
    pub cls: f64,
    pub mfl: f64,
    pub dice: f64,
    pub bbox: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self { cls: 2.0, mfl: 1.0, dice: 1.0, bbox: 1.0, giou: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct DenoisingConfig {
    pub enabled: bool,
    /// Box jitter as a fraction of the box size.
    pub box_noise: f64,
    pub label_flip: f64,
}

impl Default for DenoisingConfig {
    fn default() -> Self {
        Self { enabled: true, box_noise: 0.2, label_flip: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LossConfig {
    pub tau: f64,
    /// IoU of the low-quality fallback in `G`.
    pub lowq_iou: f64,
    pub lambda_cls: f64,
    pub lambda_mfl: f64,
    pub lambda_dice: f64,
    pub match_weights: MatchWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Unmatched instance queries are trained to keep their own patch.
    pub negative_self_affinity: bool,
    pub denoising: DenoisingConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.8,
            lowq_iou: 0.5,
            lambda_cls: 2.0,
            lambda_mfl: 1.0,
            lambda_dice: 1.0,
            match_weights: MatchWeights::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            negative_self_affinity: true,
            denoising: DenoisingConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.lowq_iou) {
            return Err(ModelError::InvalidConfig("tau and lowq_iou must lie in [0, 1]"));
        }
        let w = &self.match_weights;
        let all = [self.lambda_cls, self.lambda_mfl, self.lambda_dice, w.cls, w.mfl, w.dice, w.bbox, w.giou];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ModelError::InvalidConfig("loss and matching weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return Err(ModelError::InvalidConfig("invalid focal parameters"));
        }
        let d = &self.denoising;
        if d.box_noise < 0.0 || !(0.0..=1.0).contains(&d.label_flip) {
            return Err(ModelError::InvalidConfig("invalid denoising noise"));
        }
        Ok(())
    }
}

/// Scene-level supervision that does not depend on predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSupervision {
    pub units: Vec<Unit>,
    pub g: MatchMatrix,
    pub unit_boxes: Vec<BBox>,
    pub width: u32,
    pub height: u32,
}

impl SceneSupervision {
    pub fn new(gt: &[GtInstance], patches: &[BinaryMask], config: &LossConfig) -> Result<Self, GeometryError> {
        let units = target_units(gt)?;
        let masks: Vec<BinaryMask> = units.iter().map(|u| u.mask.clone()).collect();
        let g = build_g(&masks, patches, config.tau, config.lowq_iou)?;
        let unit_boxes = units.iter().map(|u| u.mask.bbox()).collect::<Result<_, _>>()?;
        let (width, height) = patches.first().map_or((0, 0), |p| (p.width(), p.height()));
        Ok(Self { units, g, unit_boxes, width, height })
    }

    pub fn thing_units(&self) -> Vec<usize> {
        (0..self.units.len()).filter(|&k| self.units[k].kind == UnitKind::Instance).collect()
    }

    pub fn region_of(&self, class_id: u32) -> Option<usize> {
        self.units.iter().position(|u| u.kind == UnitKind::Region && u.class_id == class_id)
    }
}

/// Focal classification cost of predicting probability `p` for a positive.
pub fn focal_class_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-8, 1.0 - 1e-8);
    let pos = alpha * math::powf(1.0 - p, gamma) * -math::ln(p);
    let neg = (1.0 - alpha) * math::powf(p, gamma) * -math::ln(1.0 - p);
    pos - neg
}

/// Box of a predicted affinity row: merged boxes of patches at or above 0.5,
/// or the single highest-affinity patch when none qualifies.
pub fn query_box(row: &[f64], boxes: &[BBox]) -> BBox {
    high_affinity_box(row, boxes, 0.5).unwrap_or_else(|| {
        let mut best = 0;
        for (n, &a) in row.iter().enumerate() {
            if a > row[best] {
                best = n;
            }
        }
        boxes[best]
    })
}

/// Per-query mask focal sum normalized by `max(|b|₀, 1)`, with affinities as probabilities.
pub fn mask_focal_term(a: &[f64], b: &[f64], alpha: f64, gamma: f64) -> f64 {
    let count = b.iter().filter(|&&v| v != 0.0).count().max(1) as f64;
    a.iter().zip(b).map(|(&p, &y)| math::focal(p, y, alpha, gamma)).sum::<f64>() / count
}

pub fn dice_term(a: &[f64], b: &[f64]) -> f64 {
    let inter: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let total: f64 = a.iter().sum::<f64>() + b.iter().sum::<f64>();
    if total == 0.0 {
        0.0
    } else {
        1.0 - 2.0 * inter / total
    }
}

/// Cost of assigning each unit in `rows` to each query in `queries`, `|rows| × |queries|`.
#[allow(clippy::too_many_arguments)]
pub fn matching_cost(
    class_logits: &Matrix,
    affinity: &Matrix,
    patch_boxes: &[BBox],
    sup: &SceneSupervision,
    rows: &[usize],
    queries: &[usize],
    config: &LossConfig,
) -> Result<Matrix, GeometryError> {
    let w = &config.match_weights;
    let (alpha, gamma) = (config.focal_alpha, config.focal_gamma);
    let q_boxes: Vec<BBox> = queries.iter().map(|&q| query_box(affinity.row(q), patch_boxes)).collect();
    let mut data = Vec::with_capacity(rows.len() * queries.len());
    for &k in rows {
        let unit = &sup.units[k];
        let target = sup.g.row_f64(k);
        let gt_box = sup.unit_boxes[k];
        let gt_n = gt_box.normalized_cxcywh(sup.width, sup.height);
        for (qi, &q) in queries.iter().enumerate() {
            let a = affinity.row(q);
            let p = math::sigmoid(class_logits.get(q, unit.class_id as usize));
            let qb = q_boxes[qi];
            let q_n = qb.normalized_cxcywh(sup.width, sup.height);
            let l1: f64 = q_n.iter().zip(&gt_n).map(|(x, y)| (x - y).abs()).sum();
            let cost = w.cls * focal_class_cost(p, alpha, gamma)
                + w.mfl * mask_focal_term(a, &target, alpha, gamma)
                + w.dice * dice_term(a, &target)
                + w.bbox * l1
                + w.giou * (1.0 - giou_box(&qb, &gt_box)?);
            data.push(cost);
        }
    }
    Ok(Matrix { rows: rows.len(), cols: queries.len(), data })
}

/// Per-query supervision for one decoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTargets {
    /// Ground-truth affinity `B`, `M × N`, entries 0 or 1.
    pub b: Matrix,
    /// `ε_m`: whether the mask losses see query `m`.
    pub eps: Vec<f64>,
    /// Positive class of each query, `None` for negatives.
    pub classes: Vec<Option<u32>>,
    /// Unit each query copies its `B` row from.
    pub assignment: Vec<Option<usize>>,
    /// Semantic plus instance queries; the rest are denoising queries.
    pub real_queries: usize,
}

impl SupervisionTargets {
    /// `M*`: queries with `ε = 1` among the real ones.
    pub fn positives(&self) -> usize {
        self.eps[..self.real_queries].iter().filter(|&&e| e != 0.0).count()
    }
}

/// Builds `B`, `ε`, class targets and the assignment from one stage's predictions.
/// `dn_units` lists the unit supervising each denoising query.
pub fn build_targets(
    sup: &SceneSupervision,
    class_logits: &Matrix,
    affinity: &Matrix,
    patch_boxes: &[BBox],
    num_classes: usize,
    dn_units: &[usize],
    config: &LossConfig,
) -> Result<SupervisionTargets, GeometryError> {
    let n = sup.g.cols;
    let real = num_classes + n;
    let m = real + dn_units.len();
    let mut b = Matrix::zeros(m, n);
    let mut eps = vec![0.0; m];
    let mut classes = vec![None; m];
    let mut assignment = vec![None; m];
    let copy = |b: &mut Matrix, q: usize, k: usize| {
        for (dst, &src) in b.data[q * n..(q + 1) * n].iter_mut().zip(sup.g.row(k)) {
            *dst = if src { 1.0 } else { 0.0 };
        }
    };

    for c in 0..num_classes {
        if let Some(k) = sup.region_of(c as u32) {
            copy(&mut b, c, k);
            eps[c] = 1.0;
            classes[c] = Some(c as u32);
            assignment[c] = Some(k);
        }
    }

    let things = sup.thing_units();
    let queries: Vec<usize> = (num_classes..real).collect();
    let cost = matching_cost(class_logits, affinity, patch_boxes, sup, &things, &queries, config)?;
    let pairs = hungarian(&cost.data, things.len(), queries.len());
    let mut matched = vec![false; n];
    for (r, qi) in pairs {
        let (k, q) = (things[r], queries[qi]);
        copy(&mut b, q, k);
        eps[q] = 1.0;
        classes[q] = Some(sup.units[k].class_id);
        assignment[q] = Some(k);
        matched[qi] = true;
    }
    if config.negative_self_affinity {
        for (qi, &q) in queries.iter().enumerate() {
            if !matched[qi] {
                b.data[q * n + qi] = 1.0;
                eps[q] = 1.0;
            }
        }
    }

    for (i, &k) in dn_units.iter().enumerate() {
        let q = real + i;
        copy(&mut b, q, k);
        eps[q] = 1.0;
        classes[q] = Some(sup.units[k].class_id);
        assignment[q] = Some(k);
    }
    Ok(SupervisionTargets { b, eps, classes, assignment, real_queries: real })
}

/// Extra training queries from jittered ground-truth boxes and possibly
/// flipped labels, one per ground-truth instance.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingBatch {
    pub queries: DenoisingQueries,
    pub boxes: Vec<BBox>,
    /// Supervising unit of each query.
    pub units: Vec<usize>,
}

fn jitter_box(b: BBox, noise: f64, width: u32, height: u32, rng: &mut ChaCha8Rng) -> BBox {
    if noise == 0.0 {
        return b;
    }
    let (w, h) = (b.width() as f64, b.height() as f64);
    let cx = (b.x0 + b.x1) as f64 / 2.0 + rng.random_range(-noise..=noise) * w / 2.0;
    let cy = (b.y0 + b.y1) as f64 / 2.0 + rng.random_range(-noise..=noise) * h / 2.0;
    let nw = (w * (1.0 + rng.random_range(-noise..=noise))).max(1.0);
    let nh = (h * (1.0 + rng.random_range(-noise..=noise))).max(1.0);
    let clamp = |v: f64, hi: u32| (math::round(v).max(0.0) as u32).min(hi);
    let x0 = clamp(cx - nw / 2.0, width - 1);
    let y0 = clamp(cy - nh / 2.0, height - 1);
    let x1 = clamp(cx + nw / 2.0, width).max(x0 + 1);
    let y1 = clamp(cy + nh / 2.0, height).max(y0 + 1);
    BBox { x0, y0, x1, y1 }
}

/// One denoising query per ground-truth instance: things supervise with their
/// instance unit, stuff with its class region. `labels` lists the classes a
/// flipped label may take.
pub fn denoising_batch(
    sup: &SceneSupervision,
    gt: &[GtInstance],
    labels: &[u32],
    dim: usize,
    config: &DenoisingConfig,
    seed: u64,
) -> Result<DenoisingBatch, GeometryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xD0_15E));
    let mut boxes = Vec::with_capacity(gt.len());
    let mut units = Vec::with_capacity(gt.len());
    let mut out_labels = Vec::with_capacity(gt.len());
    let mut positions = Vec::with_capacity(gt.len() * dim);
    let mut thing_index = 0;
    for inst in gt {
        let unit = if inst.is_thing {
            let k = thing_index;
            thing_index += 1;
            k
        } else {
            sup.region_of(inst.class_id).ok_or(GeometryError::EmptyInput)?
        };
        let b = jitter_box(inst.mask.bbox()?, config.box_noise, sup.width, sup.height, &mut rng);
        let mut label = inst.class_id;
        if labels.len() > 1 && rng.random::<f64>() < config.label_flip {
            let others: Vec<u32> = labels.iter().copied().filter(|&c| c != inst.class_id).collect();
            label = others[rng.random_range(0..others.len())];
        }
        positions.extend(position_embedding(b, sup.width, sup.height, dim));
        boxes.push(b);
        units.push(unit);
        out_labels.push(label);
    }
    let queries = DenoisingQueries {
        positions: Matrix { rows: units.len(), cols: dim, data: positions },
        labels: out_labels,
    };
    Ok(DenoisingBatch { queries, boxes, units })
}

/// Loss values of one stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageLoss {
    pub cls: f64,
    pub mfl: f64,
    pub dice: f64,
    pub all: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub cls: f64,
    pub mfl: f64,
    pub dice: f64,
    pub all: f64,
    pub stages: Vec<StageLoss>,
}

/// `(1/M)·Σ_m Σ_c FL(σ(S[m,c]), [c*_m = c])`.
pub fn loss_cls(g: &mut Graph, logits: Tensor, targets: &SupervisionTargets, config: &LossConfig) -> Result<Tensor, AutodiffError> {
    let [m, c] = g.shape(logits);
    let mut y = vec![0.0; m * c];
    for (q, cls) in targets.classes.iter().enumerate() {
        if let Some(cls) = cls {
            y[q * c + *cls as usize] = 1.0;
        }
    }
    let fl = g.sigmoid_focal(logits, &y, config.focal_alpha, config.focal_gamma)?;
    let s = g.sum(fl);
    Ok(g.scale(s, 1.0 / m as f64))
}

/// Mask focal and dice losses over rows with `ε = 1`, both normalized by `M*`.
pub fn loss_masks(
    g: &mut Graph,
    logits: Tensor,
    affinity: Tensor,
    targets: &SupervisionTargets,
    config: &LossConfig,
) -> Result<(Tensor, Tensor), AutodiffError> {
    let m = g.shape(logits)[0];
    let positives = targets.positives();
    if positives == 0 {
        let z = g.constant(Matrix::scalar(0.0));
        return Ok((z, z));
    }
    let norm = 1.0 / positives as f64;
    let counts: Vec<f64> = (0..m).map(|q| targets.b.row(q).iter().sum::<f64>()).collect();

    let fl = g.sigmoid_focal(logits, &targets.b.data, config.focal_alpha, config.focal_gamma)?;
    let row_fl = g.sum_axis(fl, Axis::Cols);
    let w = Matrix { rows: m, cols: 1, data: (0..m).map(|q| targets.eps[q] / counts[q].max(1.0) * norm).collect() };
    let w = g.constant(w);
    let weighted = g.mul(row_fl, w)?;
    let mfl = g.sum(weighted);

    let b = g.constant(targets.b.clone());
    let inter = g.mul(affinity, b)?;
    let inter = g.sum_axis(inter, Axis::Cols);
    let mass = g.sum_axis(affinity, Axis::Cols);
    let cnt = g.constant(Matrix { rows: m, cols: 1, data: counts });
    let denom = g.add(mass, cnt)?;
    let ratio = g.div(inter, denom)?;
    let dice = g.affine(ratio, -2.0, 1.0);
    let w = g.constant(Matrix { rows: m, cols: 1, data: targets.eps.iter().map(|e| e * norm).collect() });
    let weighted = g.mul(dice, w)?;
    let dice = g.sum(weighted);
    Ok((mfl, dice))
}

/// Sums `λ_cls·L_cls + λ_mfl·L_mfl + λ_dice·L_dice` over stages, averaged, and
/// reports each part. `targets[s]` belongs to `stages[s]`.
pub fn total_loss(
    g: &mut Graph,
    stages: &[StageOutput],
    targets: &[SupervisionTargets],
    config: &LossConfig,
) -> Result<(Tensor, LossReport), AutodiffError> {
    if stages.is_empty() || stages.len() != targets.len() {
        return Err(AutodiffError::InvalidArgument("one target set per stage required"));
    }
    let mut report = LossReport::default();
    let mut parts = Vec::with_capacity(stages.len());
    for (out, t) in stages.iter().zip(targets) {
        let cls = loss_cls(g, out.class_logits, t, config)?;
        let (mfl, dice) = loss_masks(g, out.affinity_logits, out.affinity, t, config)?;
        let a = g.scale(cls, config.lambda_cls);
        let b = g.scale(mfl, config.lambda_mfl);
        let c = g.scale(dice, config.lambda_dice);
        let ab = g.add(a, b)?;
        let all = g.add(ab, c)?;
        let stage = StageLoss {
            cls: g.scalar_value(cls),
            mfl: g.scalar_value(mfl),
            dice: g.scalar_value(dice),
            all: g.scalar_value(all),
        };
        report.stages.push(stage);
        parts.push(all);
    }
    let stacked = g.concat(&parts, Axis::Rows)?;
    let total = g.mean(stacked);
    let k = stages.len() as f64;
    report.cls = report.stages.iter().map(|s| s.cls).sum::<f64>() / k;
    report.mfl = report.stages.iter().map(|s| s.mfl).sum::<f64>() / k;
    report.dice = report.stages.iter().map(|s| s.dice).sum::<f64>() / k;
    report.all = g.scalar_value(total);
    Ok((total, report))
}
