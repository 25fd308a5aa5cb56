//! Panoptic quality, mask AP, mIoU and proposal diagnostics.
//!
//! Every metric is an accumulator fed one scene at a time; accumulators
//! merge associatively, so per-scene work can run in any order as long as
//! results are merged in scene order. All reported values are percentages.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::GeometryError;
use crate::inference::{PanopticMap, SegmentPrediction};
use crate::mask::{iop_mask, iou_mask, union_all, BinaryMask};
use crate::synth::GtInstance;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PqStats {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

impl PqStats {
    fn add(&mut self, o: &PqStats) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
    }

    pub fn summary(&self) -> PqSummary {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        let (pq, sq, rq) = if denom == 0.0 {
            (0.0, 0.0, 0.0)
        } else if self.tp == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (self.iou_sum / denom, self.iou_sum / self.tp as f64, self.tp as f64 / denom)
        };
        PqSummary { pq: 100.0 * pq, sq: 100.0 * sq, rq: 100.0 * rq, tp: self.tp, fp: self.fp, fn_: self.fn_ }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PqSummary {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Panoptic quality. Segments match when they share a class and their IoU
/// exceeds 0.5. Aggregates pool counts over classes, so `PQ = SQ·RQ`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PqAccumulator {
    pub per_class: BTreeMap<u32, PqStats>,
}

impl PqAccumulator {
    pub fn add_scene(&mut self, pred: &PanopticMap, gt: &[GtInstance]) -> Result<(), GeometryError> {
        for (class, s) in pq_scene(pred, gt)? {
            self.per_class.entry(class).or_default().add(&s);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PqAccumulator) {
        for (c, s) in &other.per_class {
            self.per_class.entry(*c).or_default().add(s);
        }
    }

    /// Pooled summary over `classes`, or over every class seen when `None`.
    pub fn summary(&self, classes: Option<&[u32]>) -> PqSummary {
        let mut total = PqStats::default();
        for (c, s) in &self.per_class {
            if classes.is_none_or(|cs| cs.contains(c)) {
                total.add(s);
            }
        }
        total.summary()
    }
}

fn pq_scene(pred: &PanopticMap, gt: &[GtInstance]) -> Result<BTreeMap<u32, PqStats>, GeometryError> {
    let n_pix = (pred.width * pred.height) as usize;
    if pred.pixels.len() != n_pix {
        return Err(GeometryError::SizeMismatch);
    }
    // gt index + 1 per pixel
    let mut gt_pix = vec![0usize; n_pix];
    for (j, g) in gt.iter().enumerate() {
        if g.mask.width() != pred.width || g.mask.height() != pred.height {
            return Err(GeometryError::SizeMismatch);
        }
        for p in g.mask.pixel_indices() {
            gt_pix[p as usize] = j + 1;
        }
    }
    let seg_index: BTreeMap<u32, usize> = pred.segments.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let mut pred_area = vec![0u64; pred.segments.len()];
    let mut inter: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (p, &id) in pred.pixels.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let i = *seg_index.get(&id).ok_or(GeometryError::InvalidRuns)?;
        pred_area[i] += 1;
        if gt_pix[p] > 0 {
            *inter.entry((i, gt_pix[p] - 1)).or_default() += 1;
        }
    }
    let mut stats: BTreeMap<u32, PqStats> = BTreeMap::new();
    let mut pred_matched = vec![false; pred.segments.len()];
    let mut gt_matched = vec![false; gt.len()];
    for (&(i, j), &a) in &inter {
        if pred.segments[i].class_id != gt[j].class_id {
            continue;
        }
        let union = pred_area[i] + gt[j].mask.area() - a;
        let iou = a as f64 / union as f64;
        if iou > 0.5 {
            pred_matched[i] = true;
            gt_matched[j] = true;
            let s = stats.entry(gt[j].class_id).or_default();
            s.tp += 1;
            s.iou_sum += iou;
        }
    }
    for (i, seg) in pred.segments.iter().enumerate() {
        if !pred_matched[i] && pred_area[i] > 0 {
            stats.entry(seg.class_id).or_default().fp += 1;
        }
    }
    for (j, g) in gt.iter().enumerate() {
        if !gt_matched[j] {
            stats.entry(g.class_id).or_default().fn_ += 1;
        }
    }
    Ok(stats)
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn ap_thresholds() -> [f64; 10] {
    core::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ApClass {
    gt_count: u64,
    /// `(score, matched at each threshold)` in insertion order.
    dets: Vec<(f64, [bool; 10])>,
}

/// COCO-style mask AP: greedy per-scene matching in descending score order,
/// 101-point interpolated precision, averaged over thresholds and over
/// classes that have ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApAccumulator {
    per_class: BTreeMap<u32, ApClass>,
}

impl ApAccumulator {
    /// `classes` restricts evaluation (usually to thing classes).
    pub fn add_scene(
        &mut self,
        instances: &[SegmentPrediction],
        gt: &[GtInstance],
        classes: &[u32],
    ) -> Result<(), GeometryError> {
        let th = ap_thresholds();
        for &c in classes {
            let gts: Vec<&GtInstance> = gt.iter().filter(|g| g.class_id == c).collect();
            let mut preds: Vec<&SegmentPrediction> = instances.iter().filter(|p| p.class_id == c).collect();
            preds.sort_by(|a, b| b.score.total_cmp(&a.score));
            let ious: Vec<Vec<f64>> = preds
                .iter()
                .map(|p| gts.iter().map(|g| iou_mask(&p.mask, &g.mask)).collect::<Result<_, _>>())
                .collect::<Result<_, _>>()?;
            let mut flags = vec![[false; 10]; preds.len()];
            for (t, &thr) in th.iter().enumerate() {
                let mut taken = vec![false; gts.len()];
                for (i, row) in ious.iter().enumerate() {
                    let mut best: Option<(usize, f64)> = None;
                    for (j, &iou) in row.iter().enumerate() {
                        if !taken[j] && iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                            best = Some((j, iou));
                        }
                    }
                    if let Some((j, _)) = best {
                        taken[j] = true;
                        flags[i][t] = true;
                    }
                }
            }
            let entry = self.per_class.entry(c).or_default();
            entry.gt_count += gts.len() as u64;
            entry.dets.extend(preds.iter().zip(flags).map(|(p, f)| (p.score, f)));
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ApAccumulator) {
        for (c, o) in &other.per_class {
            let e = self.per_class.entry(*c).or_default();
            e.gt_count += o.gt_count;
            e.dets.extend_from_slice(&o.dets);
        }
    }

    /// Per-class AP for classes with ground truth.
    pub fn per_class(&self) -> Vec<(u32, f64)> {
        let mut out = Vec::new();
        for (&c, e) in &self.per_class {
            if e.gt_count == 0 {
                continue;
            }
            let mut dets = e.dets.clone();
            // stable sort keeps scene order among equal scores
            dets.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut total = 0.0;
            for t in 0..10 {
                total += interpolated_ap(&dets.iter().map(|d| d.1[t]).collect::<Vec<_>>(), e.gt_count);
            }
            out.push((c, 100.0 * total / 10.0));
        }
        out
    }

    pub fn ap(&self) -> f64 {
        let per = self.per_class();
        if per.is_empty() {
            0.0
        } else {
            per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64
        }
    }
}

/// 101-point interpolated average precision of a ranked list of hits.
pub fn interpolated_ap(hits: &[bool], gt_count: u64) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0u64;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }
    // make precision monotone from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        while idx < recall.len() && recall[idx] < r {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// Dataset-level IoU per class from pixel counts; the mean covers classes
/// present in the ground truth or the prediction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MiouAccumulator {
    /// `(intersection, union)` per class.
    pub per_class: BTreeMap<u32, (u64, u64)>,
}

impl MiouAccumulator {
    pub fn add_scene(&mut self, semantic_map: &[Option<u32>], gt: &[GtInstance]) -> Result<(), GeometryError> {
        let mut gt_map = vec![None; semantic_map.len()];
        for g in gt {
            for p in g.mask.pixel_indices() {
                *gt_map.get_mut(p as usize).ok_or(GeometryError::SizeMismatch)? = Some(g.class_id);
            }
        }
        for (&pred, &truth) in semantic_map.iter().zip(&gt_map) {
            if pred == truth {
                if let Some(c) = pred {
                    let e = self.per_class.entry(c).or_default();
                    e.0 += 1;
                    e.1 += 1;
                }
                continue;
            }
            for c in [pred, truth].into_iter().flatten() {
                self.per_class.entry(c).or_default().1 += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MiouAccumulator) {
        for (c, (i, u)) in &other.per_class {
            let e = self.per_class.entry(*c).or_default();
            e.0 += i;
            e.1 += u;
        }
    }

    pub fn per_class(&self) -> Vec<(u32, f64)> {
        self.per_class
            .iter()
            .filter(|(_, &(_, u))| u > 0)
            .map(|(&c, &(i, u))| (c, 100.0 * i as f64 / u as f64))
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let per = self.per_class();
        if per.is_empty() {
            0.0
        } else {
            per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64
        }
    }
}

/// Best IoU any proposal reaches against each ground-truth instance. With
/// `merge_oracle`, the union of patches whose IoP against the instance
/// exceeds `tau` is also a candidate.
pub fn best_proposal_ious(
    patches: &[BinaryMask],
    gt: &[GtInstance],
    merge_oracle: bool,
    tau: f64,
) -> Result<Vec<f64>, GeometryError> {
    let mut out = Vec::with_capacity(gt.len());
    for g in gt {
        let mut best: f64 = 0.0;
        for p in patches {
            best = best.max(iou_mask(p, &g.mask)?);
        }
        if merge_oracle {
            let inside: Vec<BinaryMask> = patches
                .iter()
                .filter_map(|p| match iop_mask(p, &g.mask) {
                    Ok(v) if v > tau => Some(Ok(p.clone())),
                    Ok(_) => None,
                    Err(e) => Some(Err(e)),
                })
                .collect::<Result<_, _>>()?;
            if !inside.is_empty() {
                best = best.max(iou_mask(&union_all(&inside)?, &g.mask)?);
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Diagnostics {
    pub miou: f64,
    /// Mean best IoU over instances whose best IoU exceeds 0.5.
    pub miou_above_half: f64,
    /// Share of instances whose best IoU is at most 0.25, 0.5 and 0.75.
    pub mr_25: f64,
    pub mr_50: f64,
    pub mr_75: f64,
    pub instances: u64,
}

/// Collects best-proposal IoUs across scenes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagnosticsAccumulator {
    pub best: Vec<f64>,
}

impl DiagnosticsAccumulator {
    pub fn add_scene(&mut self, patches: &[BinaryMask], gt: &[GtInstance], merge_oracle: bool, tau: f64) -> Result<(), GeometryError> {
        self.best.extend(best_proposal_ious(patches, gt, merge_oracle, tau)?);
        Ok(())
    }

    pub fn merge(&mut self, other: &DiagnosticsAccumulator) {
        self.best.extend_from_slice(&other.best);
    }

    pub fn finish(&self) -> Diagnostics {
        let n = self.best.len();
        if n == 0 {
            return Diagnostics::default();
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { 100.0 * v.iter().sum::<f64>() / v.len() as f64 };
        let above: Vec<f64> = self.best.iter().copied().filter(|&b| b > 0.5).collect();
        let rate = |x: f64| 100.0 * self.best.iter().filter(|&&b| b <= x).count() as f64 / n as f64;
        Diagnostics {
            miou: mean(&self.best),
            miou_above_half: mean(&above),
            mr_25: rate(0.25),
            mr_50: rate(0.5),
            mr_75: rate(0.75),
            instances: n as u64,
        }
    }
}
