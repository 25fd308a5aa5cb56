//! Per-scene gradients, batch updates and the prediction path.
//!
//! A training step is split so callers can compute scene gradients in
//! parallel: [`scene_step`] is pure given the parameters, and
//! [`apply_batch`] sums gradients in the order given before one AdamW step.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamConfig, Gradients, Graph, Matrix, ParameterStore};
use crate::error::ModelError;
use crate::model::{Model, ModelConfig, PreparedScene};
use crate::nn::params_finite;
use crate::supervision::{build_targets, denoising_batch, total_loss, LossConfig, LossReport, SceneSupervision};
use crate::synth::{mix_seed, ClassTable, GtInstance, Scene};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            grad_clip: 1.0,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be positive"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(ModelError::InvalidConfig("invalid optimizer settings"));
        }
        if !(self.grad_clip >= 0.0) || !(a.weight_decay >= 0.0) {
            return Err(ModelError::InvalidConfig("grad_clip and weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Classes the model sees, in query order. Query `i` stands for class `ids[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub ids: Vec<u32>,
    pub embeddings: Matrix,
}

impl Vocabulary {
    pub fn all(classes: &ClassTable) -> Self {
        Self::from_ids(classes, classes.entries.iter().map(|e| e.id).collect())
    }

    /// Every class not held out.
    pub fn seen(classes: &ClassTable) -> Self {
        Self::from_ids(classes, classes.entries.iter().filter(|e| !e.held_out).map(|e| e.id).collect())
    }

    fn from_ids(classes: &ClassTable, ids: Vec<u32>) -> Self {
        let dim = classes.embedding_dim();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in &ids {
            data.extend_from_slice(&classes.entries[id as usize].embedding);
        }
        Self { embeddings: Matrix { rows: ids.len(), cols: dim, data }, ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn local(&self, class_id: u32) -> Option<u32> {
        self.ids.iter().position(|&c| c == class_id).map(|i| i as u32)
    }
}

/// Everything about a training scene that does not depend on parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainScene {
    pub prepared: PreparedScene,
    /// Ground truth with class ids replaced by vocabulary positions.
    pub gt: Vec<GtInstance>,
    pub supervision: SceneSupervision,
}

impl TrainScene {
    pub fn new(scene: &Scene, vocab: &Vocabulary, model: &ModelConfig, loss: &LossConfig) -> Result<Self, ModelError> {
        let gt = scene
            .gt
            .iter()
            .map(|g| {
                let class_id = vocab
                    .local(g.class_id)
                    .ok_or(ModelError::InvalidConfig("training scene contains a class outside the vocabulary"))?;
                Ok(GtInstance { mask: g.mask.clone(), class_id, is_thing: g.is_thing })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let supervision = SceneSupervision::new(&gt, &scene.patches, loss)?;
        Ok(Self { prepared: PreparedScene::new(scene, model)?, gt, supervision })
    }
}

/// Forward, target construction per stage, loss and backward for one scene.
/// `seed` drives the denoising jitter.
pub fn scene_step(
    model: &Model,
    store: &ParameterStore,
    scene: &Scene,
    ts: &TrainScene,
    vocab: &Vocabulary,
    loss: &LossConfig,
    seed: u64,
) -> Result<(Gradients, LossReport), ModelError> {
    let dn = if loss.denoising.enabled && !ts.gt.is_empty() {
        let labels: Vec<u32> = (0..vocab.len() as u32).collect();
        Some(denoising_batch(&ts.supervision, &ts.gt, &labels, model.config.dim, &loss.denoising, seed)?)
    } else {
        None
    };
    let mut g = Graph::new();
    let stages = model.forward(&mut g, store, scene, &ts.prepared, &vocab.embeddings, dn.as_ref().map(|d| &d.queries))?;
    let dn_units = dn.as_ref().map(|d| d.units.as_slice()).unwrap_or(&[]);
    let targets = stages
        .iter()
        .map(|s| {
            build_targets(
                &ts.supervision,
                g.value(s.class_logits),
                g.value(s.affinity),
                &ts.prepared.boxes,
                vocab.len(),
                dn_units,
                loss,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (total, report) = total_loss(&mut g, &stages, &targets, loss)?;
    if !report.all.is_finite() {
        return Err(ModelError::NonFinite("loss"));
    }
    let grads = g.backward(total)?;
    if !grads.is_finite() {
        return Err(ModelError::NonFinite("gradients"));
    }
    Ok((grads, report))
}

/// Averages `grads` in order, clips, and takes one AdamW step. Returns the
/// gradient norm before clipping.
pub fn apply_batch(store: &mut ParameterStore, grads: &[Gradients], config: &TrainConfig) -> Result<f64, ModelError> {
    if grads.is_empty() {
        return Ok(0.0);
    }
    let mut sum = Gradients::default();
    for g in grads {
        sum.accumulate(g);
    }
    sum.scale(1.0 / grads.len() as f64);
    let norm = if config.grad_clip > 0.0 { sum.clip_global_norm(config.grad_clip) } else { sum.global_norm() };
    if !norm.is_finite() {
        return Err(ModelError::NonFinite("gradient norm"));
    }
    store.step_adam(&sum, &config.adam);
    if !params_finite(store) {
        return Err(ModelError::NonFinite("parameters"));
    }
    Ok(norm)
}

/// Scene visiting order of one epoch.
pub fn epoch_order(scenes: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scenes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE90C_0000 + epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Denoising seed of a scene in a given epoch.
pub fn step_seed(seed: u64, epoch: usize, scene: usize) -> u64 {
    mix_seed(mix_seed(seed, epoch as u64), scene as u64)
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: usize,
    pub cls: f64,
    pub mfl: f64,
    pub dice: f64,
    pub all: f64,
    pub grad_norm: f64,
}

impl EpochLog {
    /// Averages scene reports (in visiting order) and batch gradient norms.
    pub fn from_reports(epoch: usize, reports: &[LossReport], norms: &[f64]) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            epoch,
            cls: mean(|r| r.cls),
            mfl: mean(|r| r.mfl),
            dice: mean(|r| r.dice),
            all: mean(|r| r.all),
            grad_norm: norms.iter().sum::<f64>() / norms.len().max(1) as f64,
        }
    }
}

/// Single-threaded training loop; calls `on_epoch` after every epoch.
pub fn train<F>(
    model: &Model,
    store: &mut ParameterStore,
    scenes: &[Scene],
    prepared: &[TrainScene],
    vocab: &Vocabulary,
    loss: &LossConfig,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(), ModelError>
where
    F: FnMut(&EpochLog),
{
    config.validate()?;
    for epoch in 0..config.epochs {
        let order = epoch_order(scenes.len(), config.seed, epoch);
        let mut reports = Vec::with_capacity(order.len());
        let mut norms = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let mut grads = Vec::with_capacity(batch.len());
            for &i in batch {
                let (g, r) = scene_step(model, store, &scenes[i], &prepared[i], vocab, loss, step_seed(config.seed, epoch, i))?;
                grads.push(g);
                reports.push(r);
            }
            norms.push(apply_batch(store, &grads, config)?);
        }
        on_epoch(&EpochLog::from_reports(epoch, &reports, &norms));
    }
    Ok(())
}

/// Final-stage affinity and class logits over the real queries, with class
/// columns in `vocab` order.
pub fn predict(
    model: &Model,
    store: &ParameterStore,
    scene: &Scene,
    prepared: &PreparedScene,
    vocab: &Vocabulary,
) -> Result<(Matrix, Matrix), ModelError> {
    let mut g = Graph::new();
    let stages = model.forward(&mut g, store, scene, prepared, &vocab.embeddings, None)?;
    let last = stages.last().ok_or(ModelError::InvalidConfig("model has no decoder stages"))?;
    let a = g.value(last.affinity).clone();
    let s = g.value(last.class_logits).clone();
    if a.data.iter().chain(&s.data).any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("prediction"));
    }
    Ok((a, s))
}
