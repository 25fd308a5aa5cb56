use patchmerge_core::autodiff::Matrix;
use patchmerge_core::supervision::{build_g, build_targets, target_units, LossConfig, SceneSupervision, UnitKind};
use patchmerge_core::synth::{generate_corpus, Corpus, CorpusConfig, CorruptionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle;

/// Corrupted patches exercise the low-quality fallback.
pub fn corrupted_corpus(seed: u64, scenes: usize) -> Corpus {
    let corruption = CorruptionConfig { drop_rate: 0.1, merge_rate: 0.3, jitter_rate: 0.5, ..Default::default() };
    let cfg = CorpusConfig { train_scenes: scenes, eval_scenes: 0, overseg_max: 4, corruption, ..Default::default() };
    generate_corpus(&cfg, seed).unwrap()
}

pub fn g_vs_dense(scenes: usize) -> String {
    let config = LossConfig::default();
    let corpus = corrupted_corpus(31, scenes);
    let mut fallbacks = 0;
    let mut rows = 0;
    for scene in &corpus.train {
        let units = target_units(&scene.gt).unwrap();
        let masks: Vec<_> = units.iter().map(|u| u.mask.clone()).collect();
        let g = build_g(&masks, &scene.patches, config.tau, config.lowq_iou).unwrap();

        let ou = oracle::units(&scene.gt);
        assert_eq!(ou.len(), units.len());
        for (u, o) in units.iter().zip(&ou) {
            assert_eq!((u.class_id, u.kind == UnitKind::Instance), (o.1, o.2));
        }
        let targets: Vec<oracle::Dense> = ou.into_iter().map(|u| u.0).collect();
        let patches: Vec<oracle::Dense> = scene.patches.iter().map(oracle::Dense::of).collect();
        let want = oracle::g_matrix(&targets, &patches, config.tau, config.lowq_iou);
        for (k, row) in want.iter().enumerate() {
            assert_eq!(g.row(k), row.as_slice(), "scene {} unit {k}", scene.seed);
            let strict = patches.iter().any(|p| {
                let (pb, tb) = (p.bbox(), targets[k].bbox());
                let ib = oracle::rect_inter(pb, tb) as f64 / ((pb.2 - pb.0) * (pb.3 - pb.1)) as f64;
                ib > config.tau && targets[k].and_count(p) as f64 / p.area() as f64 > config.tau
            });
            if !strict {
                fallbacks += 1;
            }
            rows += 1;
        }
    }
    assert!(fallbacks > 0, "the corrupted corpus should need the fallback at least once");
    format!("{scenes} scenes, {rows} rows ({fallbacks} via the IoU fallback) agree")
}

/// Full targets, including Hungarian matching, negatives and denoising rows.
pub fn targets_vs_naive(scenes: usize) -> String {
    let config = LossConfig::default();
    let corpus = corrupted_corpus(32, scenes);
    let c = corpus.classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let w = &config.match_weights;
    let weights = [w.cls, w.mfl, w.dice, w.bbox, w.giou];
    for scene in &corpus.train {
        let sup = SceneSupervision::new(&scene.gt, &scene.patches, &config).unwrap();
        let boxes = scene.patch_boxes().unwrap();
        let n = scene.patches.len();
        let units = oracle::units(&scene.gt);
        let dn: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(0..units.len())).collect();
        let m = c + n + dn.len();
        let affinity = Matrix::new(m, n, (0..m * n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let logits = Matrix::new(m, c, (0..m * c).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect()).unwrap();
        let t = build_targets(&sup, &logits, &affinity, &boxes, c, &dn, &config).unwrap();

        let targets: Vec<oracle::Dense> = units.iter().map(|u| u.0.clone()).collect();
        let patches: Vec<oracle::Dense> = scene.patches.iter().map(oracle::Dense::of).collect();
        let g = oracle::g_matrix(&targets, &patches, config.tau, config.lowq_iou);
        let row_of = |k: usize| -> Vec<f64> { g[k].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect() };

        let mut b = vec![vec![0.0; n]; m];
        let mut eps = vec![0.0; m];
        let mut classes = vec![None; m];
        for (k, u) in units.iter().enumerate().filter(|(_, u)| !u.2) {
            let q = u.1 as usize;
            b[q] = row_of(k);
            eps[q] = 1.0;
            classes[q] = Some(u.1);
        }
        let things: Vec<usize> = (0..units.len()).filter(|&k| units[k].2).collect();
        let mut cost = Vec::new();
        for &k in &things {
            for qi in 0..n {
                let q = c + qi;
                cost.push(oracle::cost(&units[k].0, &g[k], logits.get(q, units[k].1 as usize), affinity.row(q), &patches, weights, 0.25, 2.0));
            }
        }
        let pairs = oracle::brute_assign(&cost, things.len(), n);
        let mut matched = vec![false; n];
        for (r, qi) in pairs {
            let k = things[r];
            b[c + qi] = row_of(k);
            eps[c + qi] = 1.0;
            classes[c + qi] = Some(units[k].1);
            matched[qi] = true;
        }
        for qi in (0..n).filter(|&qi| !matched[qi]) {
            b[c + qi][qi] = 1.0;
            eps[c + qi] = 1.0;
        }
        for (i, &k) in dn.iter().enumerate() {
            b[c + n + i] = row_of(k);
            eps[c + n + i] = 1.0;
            classes[c + n + i] = Some(units[k].1);
        }

        for q in 0..m {
            assert_eq!(t.b.row(q), b[q].as_slice(), "scene {} query {q}", scene.seed);
        }
        assert_eq!(t.eps, eps);
        assert_eq!(t.classes, classes);
        assert_eq!(t.real_queries, c + n);
    }
    format!("{scenes} scenes agree exactly")
}
