//! Corpus generation, training and evaluation with per-scene parallelism.
//!
//! Scene work runs on the current rayon pool; results are collected in
//! scene order and reduced sequentially, so output is independent of the
//! thread count.

use std::io::Write;
use std::path::Path;

use patchmerge_core::autodiff::ParameterStore;
use patchmerge_core::inference::{infer, InferenceConfig, InferenceOutput, Mode};
use patchmerge_core::metrics::{ApAccumulator, Diagnostics, DiagnosticsAccumulator, MiouAccumulator, PqAccumulator};
use patchmerge_core::model::{Model, PreparedScene};
use patchmerge_core::synth::{generate_corpus, Corpus, Scene};
use patchmerge_core::train::{apply_batch, epoch_order, predict, scene_step, step_seed, EpochLog, TrainScene, Vocabulary};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::format::{Checkpoint, CorpusFile};
use crate::report::{DiagnosticsReport, MetricReport};

/// Runs `f` on a pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be positive".into()));
        }
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn generate(config: &RunConfig) -> Result<CorpusFile> {
    let corpus = generate_corpus(&config.corpus, config.corpus_seed)?;
    Ok(CorpusFile { seed: config.corpus_seed, config: config.corpus.clone(), corpus })
}

/// Trains a fresh model on the training split. `on_epoch` sees each epoch's
/// log record as soon as the epoch ends.
pub fn train(config: &RunConfig, corpus: &Corpus, mut on_epoch: impl FnMut(&EpochLog) -> Result<()>) -> Result<Checkpoint> {
    config.validate()?;
    let vocab = Vocabulary::seen(&corpus.classes);
    let text_dim = corpus.classes.embedding_dim();
    let mut store = ParameterStore::new();
    let model = Model::new(&config.model, text_dim, config.model_seed, &mut store)?;
    let scenes = &corpus.train;
    if scenes.is_empty() {
        return Err(Error::Data("corpus has no training scenes".into()));
    }
    let prepared = scenes
        .par_iter()
        .map(|s| TrainScene::new(s, &vocab, &config.model, &config.loss))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let tc = &config.train;
    for epoch in 0..tc.epochs {
        let order = epoch_order(scenes.len(), tc.seed, epoch);
        let mut reports = Vec::with_capacity(order.len());
        let mut norms = Vec::new();
        for batch in order.chunks(tc.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let seed = step_seed(tc.seed, epoch, i);
                    scene_step(&model, &store, &scenes[i], &prepared[i], &vocab, &config.loss, seed)
                })
                .collect::<Vec<_>>();
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (g, rep) = r?;
                grads.push(g);
                reports.push(rep);
            }
            norms.push(apply_batch(&mut store, &grads, tc)?);
        }
        on_epoch(&EpochLog::from_reports(epoch, &reports, &norms))?;
    }
    Ok(Checkpoint { model_config: config.model.clone(), text_dim, vocabulary: vocab.ids, store })
}

/// Appends one JSON record per epoch to `path`.
pub fn append_log(path: &Path, log: &EpochLog) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(log).expect("epoch logs always serialize");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Final-stage inference on one scene over the full class table.
pub fn infer_scene(
    model: &Model,
    store: &ParameterStore,
    corpus: &Corpus,
    scene: &Scene,
    config: &InferenceConfig,
    mode: Mode,
) -> Result<InferenceOutput> {
    let vocab = Vocabulary::all(&corpus.classes);
    let prepared = PreparedScene::new(scene, &model.config)?;
    let (a, s) = predict(model, store, scene, &prepared, &vocab)?;
    Ok(infer(scene, &corpus.classes, &a, &s, config, mode)?)
}

/// Metrics over the evaluation split.
pub fn evaluate(
    model: &Model,
    store: &ParameterStore,
    corpus: &Corpus,
    config: &InferenceConfig,
    mode: Mode,
) -> Result<MetricReport> {
    let things: Vec<u32> = corpus.classes.entries.iter().filter(|e| e.is_thing).map(|e| e.id).collect();
    let per_scene = corpus
        .eval
        .par_iter()
        .map(|scene| -> Result<_> {
            let out = infer_scene(model, store, corpus, scene, config, mode)?;
            let mut pq = PqAccumulator::default();
            let mut ap = ApAccumulator::default();
            let mut miou = MiouAccumulator::default();
            pq.add_scene(&out.panoptic, &scene.gt)?;
            ap.add_scene(&out.instances, &scene.gt, &things)?;
            miou.add_scene(&out.semantic_map, &scene.gt)?;
            Ok((pq, ap, miou))
        })
        .collect::<Vec<_>>();
    let mut pq = PqAccumulator::default();
    let mut ap = ApAccumulator::default();
    let mut miou = MiouAccumulator::default();
    for r in per_scene {
        let (p, a, m) = r?;
        pq.merge(&p);
        ap.merge(&a);
        miou.merge(&m);
    }
    Ok(MetricReport::new(&corpus.classes, mode, config, corpus.eval.len(), &pq, &ap, &miou))
}

/// Best-proposal statistics over every scene, without and with the merge oracle.
pub fn diagnose(corpus: &Corpus, tau: f64) -> Result<DiagnosticsReport> {
    let scenes: Vec<&Scene> = corpus.train.iter().chain(&corpus.eval).collect();
    let run = |oracle: bool| -> Result<Diagnostics> {
        let per_scene = scenes
            .par_iter()
            .map(|s| {
                let mut acc = DiagnosticsAccumulator::default();
                acc.add_scene(&s.patches, &s.gt, oracle, tau).map(|_| acc)
            })
            .collect::<Vec<_>>();
        let mut acc = DiagnosticsAccumulator::default();
        for r in per_scene {
            acc.merge(&r?);
        }
        Ok(acc.finish())
    };
    Ok(DiagnosticsReport { tau, proposals: run(false)?, merge_oracle: run(true)? })
}
