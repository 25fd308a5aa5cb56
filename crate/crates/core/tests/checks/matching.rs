use patchmerge_core::autodiff::Matrix;
use patchmerge_core::supervision::{hungarian, matching_cost, LossConfig, SceneSupervision};
use patchmerge_core::synth::{generate_corpus, CorpusConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle;

/// Random matrices up to 7×7, half of them with small integer costs so ties are common.
pub fn hungarian_vs_exhaustive(cases: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..cases {
        let rows = rng.random_range(1..=7);
        let cols = rng.random_range(1..=7);
        let integer = case % 2 == 0;
        let cost: Vec<f64> = (0..rows * cols)
            .map(|_| if integer { rng.random_range(0..5) as f64 } else { rng.random::<f64>() * 10.0 - 3.0 })
            .collect();
        let got = hungarian(&cost, rows, cols);
        let want = oracle::brute_assign(&cost, rows, cols);
        assert_eq!(got.len(), rows.min(cols));
        let (gc, wc) = (oracle::assignment_cost(&cost, cols, &got), oracle::assignment_cost(&cost, cols, &want));
        assert!(gc <= wc + 1e-9 * (1.0 + wc.abs()), "case {case}: {gc} > {wc}");
        assert_eq!(got, want, "case {case}: {rows}x{cols} {cost:?}");
    }
    format!("{cases} matrices agree")
}

pub fn matching_cost_vs_scalar(scenes: usize) -> String {
    let corpus = generate_corpus(&CorpusConfig { train_scenes: scenes, eval_scenes: 0, ..Default::default() }, 21).unwrap();
    let config = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let c = corpus.classes.len();
    let mut entries = 0;
    for scene in &corpus.train {
        let sup = SceneSupervision::new(&scene.gt, &scene.patches, &config).unwrap();
        let boxes = scene.patch_boxes().unwrap();
        let n = scene.patches.len();
        let m = c + n;
        let affinity = Matrix::new(m, n, (0..m * n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let logits = Matrix::new(m, c, (0..m * c).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect()).unwrap();
        let rows: Vec<usize> = (0..sup.units.len()).collect();
        let queries: Vec<usize> = (0..m).collect();
        let got = matching_cost(&logits, &affinity, &boxes, &sup, &rows, &queries, &config).unwrap();

        let units = oracle::units(&scene.gt);
        let patches: Vec<oracle::Dense> = scene.patches.iter().map(oracle::Dense::of).collect();
        let targets: Vec<oracle::Dense> = units.iter().map(|u| u.0.clone()).collect();
        let g = oracle::g_matrix(&targets, &patches, config.tau, config.lowq_iou);
        let w = &config.match_weights;
        for (k, (t, class, _)) in units.iter().enumerate() {
            for q in 0..m {
                let want = oracle::cost(
                    t,
                    &g[k],
                    logits.get(q, *class as usize),
                    affinity.row(q),
                    &patches,
                    [w.cls, w.mfl, w.dice, w.bbox, w.giou],
                    config.focal_alpha,
                    config.focal_gamma,
                );
                let v = got.get(k, q);
                assert!((v - want).abs() <= 1e-12 * (1.0 + want.abs()), "unit {k} query {q}: {v} vs {want}");
                entries += 1;
            }
        }
    }
    format!("{entries} cost entries agree")
}
