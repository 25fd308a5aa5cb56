use patchmerge_core::autodiff::{Graph, Matrix, ParameterStore};
use patchmerge_core::decoder::StageOutput;
use patchmerge_core::model::{Model, ModelConfig};
use patchmerge_core::supervision::{loss_cls, loss_masks, total_loss, LossConfig, LossReport, SupervisionTargets};
use patchmerge_core::synth::{generate_corpus, CorpusConfig};
use patchmerge_core::train::{apply_batch, scene_step, TrainConfig, TrainScene, Vocabulary};

const LN2: f64 = std::f64::consts::LN_2;

pub fn targets(b: Vec<Vec<f64>>, eps: Vec<f64>, classes: Vec<Option<u32>>) -> SupervisionTargets {
    let m = b.len();
    SupervisionTargets {
        b: Matrix::from_rows(&b).unwrap(),
        eps,
        classes,
        assignment: vec![None; m],
        real_queries: m,
    }
}

pub fn masks(logits: Vec<Vec<f64>>, t: &SupervisionTargets) -> (f64, f64) {
    let mut g = Graph::new();
    let l = g.constant(Matrix::from_rows(&logits).unwrap());
    let a = g.sigmoid(l);
    let (mfl, dice) = loss_masks(&mut g, l, a, t, &LossConfig::default()).unwrap();
    (g.scalar_value(mfl), g.scalar_value(dice))
}

fn close(got: f64, want: f64, what: &str) {
    assert!((got - want).abs() < 1e-12, "{what}: {got} vs {want}");
}

/// Hand-computed class and mask losses with probabilities 0.5, 0.75 and 0.25.
pub fn micro_cases() -> String {
    let l3 = 3f64.ln();
    let t = targets(vec![vec![0.0]; 2], vec![0.0; 2], vec![Some(1), None]);
    let mut g = Graph::new();
    let s = g.constant(Matrix::from_rows(&[vec![0.0, 0.0], vec![l3, -l3]]).unwrap());
    let v = loss_cls(&mut g, s, &t, &LossConfig::default()).unwrap();
    // only (0, 1) is positive
    let want = (0.1875 * LN2 + 0.0625 * LN2 + 0.84375 * LN2 - 0.046875 * 0.75f64.ln()) / 2.0;
    close(g.scalar_value(v), want, "class loss");

    // one positive row, one-hot target
    let t = targets(vec![vec![1.0, 0.0, 0.0, 0.0]], vec![1.0], vec![None]);
    let (mfl, dice) = masks(vec![vec![0.0, l3, -l3, 0.0]], &t);
    close(mfl, 0.0625 * LN2 + 0.84375 * LN2 - 0.046875 * 0.75f64.ln() + 0.1875 * LN2, "case 1 focal");
    close(dice, 2.0 / 3.0, "case 1 dice");

    // uniform 0.5 over four patches against a one-hot row, plus an ignored row
    let t = targets(vec![vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0, 1.0]], vec![1.0, 0.0], vec![None, None]);
    let (mfl, dice) = masks(vec![vec![0.0; 4], vec![5.0, -2.0, 0.3, 1.0]], &t);
    close(mfl, 0.0625 * LN2 + 3.0 * 0.1875 * LN2, "case 2 focal");
    close(dice, 1.0 - 2.0 * 0.5 / 3.0, "case 2 dice");

    // two positives; a two-patch target halves its focal sum, and both divide by M* = 2
    let t = targets(vec![vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], vec![1.0, 1.0], vec![None, None]);
    let (mfl, dice) = masks(vec![vec![0.0; 3], vec![0.0; 3]], &t);
    let row0 = (2.0 * 0.0625 * LN2 + 0.1875 * LN2) / 2.0;
    let row1 = 0.0625 * LN2 + 2.0 * 0.1875 * LN2;
    close(mfl, (row0 + row1) / 2.0, "case 3 focal");
    let d0 = 1.0 - 2.0 * 1.0 / (1.5 + 2.0);
    let d1 = 1.0 - 2.0 * 0.5 / (1.5 + 1.0);
    close(dice, (d0 + d1) / 2.0, "case 3 dice");
    "class loss and 3 mask cases within 1e-12".into()
}

/// Saturated predictions equal to the targets on every positive row.
pub fn exact_prediction_is_free() -> String {
    let b = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]];
    let logits: Vec<Vec<f64>> = b.iter().map(|r| r.iter().map(|&v| if v == 1.0 { 1e3 } else { -1e3 }).collect()).collect();
    let t = targets(b, vec![1.0, 1.0], vec![None, None]);
    assert_eq!(masks(logits, &t), (0.0, 0.0));
    let t = targets(vec![vec![1.0, 0.0]], vec![0.0], vec![None]);
    assert_eq!(masks(vec![vec![0.3, -0.2]], &t), (0.0, 0.0));
    "L_mfl = L_dice = 0".into()
}

fn check_report(r: &LossReport, config: &LossConfig) {
    let combine = |cls: f64, mfl: f64, dice: f64| config.lambda_cls * cls + config.lambda_mfl * mfl + config.lambda_dice * dice;
    for st in &r.stages {
        assert!((st.all - combine(st.cls, st.mfl, st.dice)).abs() <= 1e-12 * (1.0 + st.all.abs()));
    }
    assert!((r.all - combine(r.cls, r.mfl, r.dice)).abs() <= 1e-12 * (1.0 + r.all.abs()));
    assert_eq!((config.lambda_cls, config.lambda_mfl, config.lambda_dice), (2.0, 1.0, 1.0));
}

/// Stage losses are weighted sums and the total is their mean.
pub fn total_over_stages() -> String {
    let config = LossConfig::default();
    let mut g = Graph::new();
    let mut stages = Vec::new();
    let mut all = Vec::new();
    for s in 0..3 {
        let shift = s as f64 * 0.4;
        let l = g.constant(Matrix::from_rows(&[vec![shift, -1.0], vec![0.5, 2.0 - shift]]).unwrap());
        let a = g.sigmoid(l);
        let c = g.constant(Matrix::from_rows(&[vec![shift - 1.0, 0.2], vec![1.0, -shift]]).unwrap());
        stages.push(StageOutput { affinity_logits: l, affinity: a, class_logits: c, queries: c });
    }
    let t = targets(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 1.0], vec![Some(0), None]);
    let ts = vec![t.clone(), t.clone(), t];
    let (total, report) = total_loss(&mut g, &stages, &ts, &config).unwrap();
    check_report(&report, &config);
    for (i, st) in report.stages.iter().enumerate() {
        let cls = loss_cls(&mut g, stages[i].class_logits, &ts[i], &config).unwrap();
        let (mfl, dice) = loss_masks(&mut g, stages[i].affinity_logits, stages[i].affinity, &ts[i], &config).unwrap();
        assert_eq!((st.cls, st.mfl, st.dice), (g.scalar_value(cls), g.scalar_value(mfl), g.scalar_value(dice)));
        all.push(st.all);
    }
    close(g.scalar_value(total), all.iter().sum::<f64>() / 3.0, "stage mean");
    "stage losses combine and average".into()
}

/// `L_all = 2·L_cls + L_mfl + L_dice` on every step of a short training run.
pub fn every_training_step(steps: usize) -> String {
    let cfg = CorpusConfig { width: 32, height: 32, thing_size_min: 8, thing_size_max: 14, train_scenes: 12, eval_scenes: 0, ..Default::default() };
    let corpus = generate_corpus(&cfg, 5).unwrap();
    let mc = ModelConfig { dim: 16, heads: 2, encoder_layers: 1, decoder_stages: 3, ffn_dim: 16, roi_size: 3, affinity_heads: 2, ..Default::default() };
    let loss = LossConfig::default();
    let tc = TrainConfig::default();
    let vocab = Vocabulary::seen(&corpus.classes);
    let mut store = ParameterStore::new();
    let model = Model::new(&mc, corpus.classes.embedding_dim(), 3, &mut store).unwrap();
    let prepared: Vec<TrainScene> = corpus.train.iter().map(|s| TrainScene::new(s, &vocab, &mc, &loss).unwrap()).collect();
    for step in 0..steps {
        let i = step % corpus.train.len();
        let (grads, report) = scene_step(&model, &store, &corpus.train[i], &prepared[i], &vocab, &loss, step as u64).unwrap();
        check_report(&report, &loss);
        apply_batch(&mut store, &[grads], &tc).unwrap();
    }
    format!("identity holds on {steps} training steps")
}
