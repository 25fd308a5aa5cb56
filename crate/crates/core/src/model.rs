//! The full network: patch encoder followed by the affinity decoder.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Matrix, ParameterStore};
use crate::decoder::{AffinityDecoder, DecoderInputs, DenoisingQueries, StageOutput};
use crate::encoder::{patch_position_embeddings, patch_region_features, GridView, PatchEncoder};
use crate::error::ModelError;
use crate::mask::BBox;
use crate::synth::{ClassTable, Scene};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModelConfig {
    /// Model width `D`.
    pub dim: usize,
    /// Attention heads in encoder and decoder layers.
    pub heads: usize,
    /// Self-attention layers in the patch encoder.
    pub encoder_layers: usize,
    pub decoder_stages: usize,
    pub ffn_dim: usize,
    pub roi_size: usize,
    /// Head count of the affinity similarity.
    pub affinity_heads: usize,
    pub dca_threshold: f64,
    pub qe_threshold: f64,
    pub use_dca: bool,
    pub use_affinity_refinement: bool,
    pub use_query_enhancement: bool,
    pub use_mask_roi: bool,
    /// Initial probability of affinity entries and class scores.
    pub prior: f64,
    /// Initial value of the classifier's learnable `1/s`.
    pub class_inv_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            encoder_layers: 6,
            decoder_stages: 6,
            ffn_dim: 128,
            roi_size: 7,
            affinity_heads: 4,
            dca_threshold: 0.5,
            qe_threshold: 0.5,
            use_dca: true,
            use_affinity_refinement: true,
            use_query_enhancement: true,
            use_mask_roi: true,
            prior: 0.01,
            class_inv_scale: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig("dim must be a positive multiple of heads"));
        }
        if self.affinity_heads == 0 || self.dim % self.affinity_heads != 0 {
            return Err(ModelError::InvalidConfig("dim must be a positive multiple of affinity_heads"));
        }
        if self.decoder_stages == 0 || self.roi_size == 0 || self.ffn_dim == 0 {
            return Err(ModelError::InvalidConfig("decoder_stages, roi_size and ffn_dim must be positive"));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(ModelError::InvalidConfig("prior must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.dca_threshold) || !(0.0..=1.0).contains(&self.qe_threshold) {
            return Err(ModelError::InvalidConfig("thresholds must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Stacks class embeddings into a `C × D_txt` matrix.
pub fn class_matrix(classes: &ClassTable) -> Matrix {
    let dim = classes.embedding_dim();
    let mut data = Vec::with_capacity(classes.len() * dim);
    for e in &classes.entries {
        data.extend_from_slice(&e.embedding);
    }
    Matrix { rows: classes.len(), cols: dim, data }
}

/// Parameter-independent per-scene inputs, computed once and reused every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedScene {
    pub regions: Matrix,
    pub positions: Matrix,
    pub boxes: Vec<BBox>,
}

impl PreparedScene {
    pub fn new(scene: &Scene, config: &ModelConfig) -> Result<Self, ModelError> {
        if scene.patches.is_empty() {
            return Err(ModelError::NoPatches);
        }
        Ok(Self {
            regions: patch_region_features(scene, config.roi_size, config.use_mask_roi)?,
            positions: patch_position_embeddings(scene, config.dim)?,
            boxes: scene.patch_boxes()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub text_dim: usize,
    pub encoder: PatchEncoder,
    pub decoder: AffinityDecoder,
}

impl Model {
    /// Registers freshly initialized parameters into `store`.
    pub fn new(config: &ModelConfig, text_dim: usize, seed: u64, store: &mut ParameterStore) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = PatchEncoder::register(
            store,
            config.roi_size,
            config.dim,
            config.ffn_dim,
            config.encoder_layers,
            config.heads,
            &mut rng,
        )?;
        let decoder = AffinityDecoder::register(store, config, text_dim, &mut rng)?;
        Ok(Self { config: config.clone(), text_dim, encoder, decoder })
    }

    /// Builds the graph for one scene and returns every decoder stage.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        scene: &Scene,
        prepared: &PreparedScene,
        class_embeddings: &Matrix,
        denoising: Option<&DenoisingQueries>,
    ) -> Result<Vec<StageOutput>, ModelError> {
        if class_embeddings.cols != self.text_dim {
            return Err(ModelError::InvalidConfig("class embedding width differs from the model"));
        }
        let regions = g.constant(prepared.regions.clone());
        let positions = g.constant(prepared.positions.clone());
        let feats = self.encoder.forward(g, store, regions, positions)?;
        let inputs = DecoderInputs {
            class_embeddings,
            grid: GridView::image(scene),
            patch_boxes: &prepared.boxes,
            denoising,
        };
        self.decoder.forward(g, store, feats, positions, &inputs)
    }
}
