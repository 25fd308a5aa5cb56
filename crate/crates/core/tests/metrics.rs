mod checks;
mod oracle;

use checks::metrics::{corpus, segment};
use patchmerge_core::inference::{combine_panoptic, SegmentKind, SegmentPrediction};
use patchmerge_core::mask::{iou_mask, BinaryMask};
use patchmerge_core::metrics::{ApAccumulator, PqAccumulator};
use patchmerge_core::synth::{CorruptionConfig, GtInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn perfect_predictions_score_one_hundred() {
    checks::metrics::perfect_predictions();
}

#[test]
fn merge_oracle_covers_every_instance_of_an_uncorrupted_corpus() {
    checks::metrics::merge_oracle_on_uncorrupted();
}

/// Pooled PQ from dense per-pixel segment ids.
fn dense_pq(pixels: &[u32], classes: &[(u32, u32)], gt: &[GtInstance], acc: &mut (f64, u64, u64, u64)) {
    let dense_gt: Vec<Vec<bool>> = gt.iter().map(|g| g.mask.to_dense()).collect();
    let mut gt_hit = vec![false; gt.len()];
    for &(id, class) in classes {
        let seg: Vec<bool> = pixels.iter().map(|&p| p == id).collect();
        if !seg.iter().any(|&b| b) {
            continue;
        }
        let mut matched = false;
        for (j, g) in dense_gt.iter().enumerate() {
            if gt[j].class_id != class {
                continue;
            }
            let inter = seg.iter().zip(g).filter(|(a, b)| **a && **b).count() as f64;
            let union = seg.iter().zip(g).filter(|(a, b)| **a || **b).count() as f64;
            if inter / union > 0.5 {
                acc.0 += inter / union;
                gt_hit[j] = true;
                matched = true;
            }
        }
        if matched {
            acc.1 += 1;
        } else {
            acc.2 += 1;
        }
    }
    acc.3 += gt_hit.iter().filter(|h| !**h).count() as u64;
}

#[test]
fn pq_matches_dense_recount_and_factorizes() {
    let corruption = CorruptionConfig { drop_rate: 0.1, merge_rate: 0.3, jitter_rate: 0.5, ..Default::default() };
    let c = corpus(60, corruption);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pq = PqAccumulator::default();
    let mut dense = (0.0, 0, 0, 0);
    for s in &c.train {
        // each patch becomes a prediction labelled like its best-overlapping gt
        let mut instances = Vec::new();
        let mut semantic: Vec<SegmentPrediction> = Vec::new();
        for (q, p) in s.patches.iter().enumerate() {
            let best = s
                .gt
                .iter()
                .max_by(|a, b| iou_mask(p, &a.mask).unwrap().total_cmp(&iou_mask(p, &b.mask).unwrap()))
                .unwrap();
            let class = if rng.random_bool(0.85) { best.class_id } else { rng.random_range(0..c.classes.len() as u32) };
            if c.classes.is_thing(class) {
                instances.push(segment(p.clone(), class, rng.random(), SegmentKind::Instance, q));
            } else {
                match semantic.iter_mut().find(|r| r.class_id == class) {
                    Some(r) => r.mask = r.mask.union(p).unwrap(),
                    None => semantic.push(segment(p.clone(), class, 1.0, SegmentKind::SemanticRegion, q)),
                }
            }
        }
        let pan = combine_panoptic(&semantic, &instances, &c.classes, s.width, s.height, 0.5);
        pq.add_scene(&pan, &s.gt).unwrap();
        let ids: Vec<(u32, u32)> = pan.segments.iter().map(|g| (g.id, g.class_id)).collect();
        dense_pq(&pan.pixels, &ids, &s.gt, &mut dense);
    }
    let sum = pq.summary(None);
    let (iou, tp, fp, fn_) = dense;
    assert_eq!((sum.tp, sum.fp, sum.fn_), (tp, fp, fn_));
    assert!(tp > 0 && fp > 0 && fn_ > 0);
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    assert!((sum.pq - 100.0 * iou / denom).abs() < 1e-9);
    assert!((sum.pq - sum.sq * sum.rq / 100.0).abs() < 1e-9);
}

#[test]
fn ap_counts_passing_thresholds() {
    let c = corpus(1, CorruptionConfig::default());
    let s = &c.train[0];
    let g = s.gt.iter().find(|g| g.is_thing).unwrap();
    let bbox = g.mask.bbox().unwrap();
    // grow the box until the IoU lands strictly between two thresholds
    let mut pred = g.mask.clone();
    let mut y = bbox.y1;
    while iou_mask(&pred, &g.mask).unwrap() > 0.72 && y < s.height {
        let row = BinaryMask::from_fn(s.width, s.height, |px, py| py == y && px >= bbox.x0 && px < bbox.x1);
        pred = pred.union(&row).unwrap();
        y += 1;
    }
    let iou = iou_mask(&pred, &g.mask).unwrap();
    let gt = vec![g.clone()];
    let mut ap = ApAccumulator::default();
    ap.add_scene(&[segment(pred, g.class_id, 0.5, SegmentKind::Instance, 0)], &gt, &[g.class_id]).unwrap();
    let passing = (0..10).filter(|i| iou >= 0.5 + 0.05 * *i as f64).count();
    assert!((ap.ap() - 100.0 * passing as f64 / 10.0).abs() < 1e-9, "iou {iou} ap {}", ap.ap());
}
