use patchmerge_core::mask::BinaryMask;
use patchmerge_core::inference::{combine_panoptic, SegmentKind, SegmentPrediction};
use patchmerge_core::metrics::{ApAccumulator, DiagnosticsAccumulator, MiouAccumulator, PqAccumulator};
use patchmerge_core::synth::{generate_corpus, Corpus, CorpusConfig, CorruptionConfig, Scene};

pub fn corpus(scenes: usize, corruption: CorruptionConfig) -> Corpus {
    let cfg = CorpusConfig { train_scenes: scenes, eval_scenes: 0, corruption, ..Default::default() };
    generate_corpus(&cfg, 11).unwrap()
}

pub fn segment(mask: BinaryMask, class_id: u32, score: f64, kind: SegmentKind, query: usize) -> SegmentPrediction {
    SegmentPrediction { mask, class_id, score, kind, query, patches: Vec::new() }
}

pub fn semantic_map(regions: &[SegmentPrediction], pixels: usize) -> Vec<Option<u32>> {
    let mut map = vec![None; pixels];
    for r in regions {
        for p in r.mask.pixel_indices() {
            map[p as usize] = Some(r.class_id);
        }
    }
    map
}

/// Ground truth turned into predictions.
fn perfect(scene: &Scene) -> (Vec<SegmentPrediction>, Vec<SegmentPrediction>) {
    let mut semantic: Vec<SegmentPrediction> = Vec::new();
    let mut instances = Vec::new();
    for (i, g) in scene.gt.iter().enumerate() {
        if g.is_thing {
            instances.push(segment(g.mask.clone(), g.class_id, 0.9, SegmentKind::Instance, i));
        }
        match semantic.iter_mut().find(|s| s.class_id == g.class_id) {
            Some(s) => s.mask = s.mask.union(&g.mask).unwrap(),
            None => semantic.push(segment(g.mask.clone(), g.class_id, 0.9, SegmentKind::SemanticRegion, i)),
        }
    }
    (semantic, instances)
}

/// Ground truth scored against itself through the panoptic combination.
pub fn perfect_predictions() -> String {
    let c = corpus(40, CorruptionConfig::default());
    let things: Vec<u32> = c.classes.entries.iter().filter(|e| e.is_thing).map(|e| e.id).collect();
    let (mut pq, mut ap, mut miou) = (PqAccumulator::default(), ApAccumulator::default(), MiouAccumulator::default());
    for s in &c.train {
        let (semantic, instances) = perfect(s);
        let pan = combine_panoptic(&semantic, &instances, &c.classes, s.width, s.height, 0.5);
        pq.add_scene(&pan, &s.gt).unwrap();
        ap.add_scene(&instances, &s.gt, &things).unwrap();
        miou.add_scene(&semantic_map(&semantic, (s.width * s.height) as usize), &s.gt).unwrap();
    }
    let sum = pq.summary(None);
    assert_eq!((sum.pq, sum.sq, sum.rq), (100.0, 100.0, 100.0));
    assert_eq!(ap.ap(), 100.0);
    assert_eq!(miou.miou(), 100.0);
    format!("PQ {:.1}, AP {:.1}, mIoU {:.1}", sum.pq, ap.ap(), miou.miou())
}

pub fn merge_oracle_on_uncorrupted() -> String {
    let c = corpus(100, CorruptionConfig::default());
    let mut with = DiagnosticsAccumulator::default();
    let mut without = DiagnosticsAccumulator::default();
    for s in &c.train {
        with.add_scene(&s.patches, &s.gt, true, 0.8).unwrap();
        without.add_scene(&s.patches, &s.gt, false, 0.8).unwrap();
    }
    let (w, wo) = (with.finish(), without.finish());
    assert_eq!(w.mr_50, 0.0);
    assert_eq!(w.miou, 100.0);
    assert!(wo.mr_50 > 0.0, "oversegmentation should leave some instances uncovered");
    assert!(wo.mr_25 <= wo.mr_50 && wo.mr_50 <= wo.mr_75);
    format!("MR_0.5 {:.3} with the merge oracle, {:.3} without", w.mr_50, wo.mr_50)
}
