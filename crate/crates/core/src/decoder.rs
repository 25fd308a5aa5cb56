//! Affinity decoder. Semantic queries (one per class) and instance queries
//! (one per patch) are refined stage by stage; each stage predicts an
//! affinity matrix `A` (queries × patches) and class logits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{multi_head_attention, Axis, Graph, Matrix, ParamId, ParameterStore, Tensor};
use crate::encoder::{roi_align, GridView};
use crate::error::{AutodiffError, ModelError};
use crate::mask::{merge_bboxes, BBox};
use crate::math;
use crate::model::ModelConfig;
use crate::nn::{rows_to_matrix, Attention, Linear, Mlp, Norm};

/// Per-stage decoder outputs, all as graph tensors.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    /// Pre-sigmoid affinity `Â`, `M × N`.
    pub affinity_logits: Tensor,
    /// `A = σ(Â)`.
    pub affinity: Tensor,
    /// `S^cls`, `M × C`.
    pub class_logits: Tensor,
    pub queries: Tensor,
}

/// Training-only queries built from perturbed ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingQueries {
    /// Position embeddings of the jittered boxes, `K × D`.
    pub positions: Matrix,
    /// Possibly flipped class of each query.
    pub labels: Vec<u32>,
}

impl DenoisingQueries {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Scene-dependent inputs to [`AffinityDecoder::forward`].
pub struct DecoderInputs<'a> {
    /// Class text embeddings, `C × D_txt`.
    pub class_embeddings: &'a Matrix,
    pub grid: GridView<'a>,
    pub patch_boxes: &'a [BBox],
    pub denoising: Option<&'a DenoisingQueries>,
}

/// Pairwise query/patch similarity with learned head mixing.
#[derive(Clone, Copy, Debug)]
pub struct AffinityHead {
    pub fc_q: Linear,
    pub fc_k: Linear,
    pub mix_w1: ParamId,
    pub mix_b1: ParamId,
    pub mix_w2: ParamId,
    pub mix_b2: ParamId,
    pub inv_scale: ParamId,
    /// `D × 1`, turns each patch feature into a column bias.
    pub bias_k: ParamId,
    pub bias0: ParamId,
    pub heads: usize,
}

impl AffinityHead {
    pub fn register(
        store: &mut ParameterStore,
        name: &str,
        dim: usize,
        heads: usize,
        prior: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, AutodiffError> {
        let mut eye = Matrix::zeros(heads, heads);
        for h in 0..heads {
            eye.data[h * heads + h] = 1.0;
        }
        Ok(Self {
            fc_q: Linear::register(store, &format!("{name}.fc_q"), dim, dim, rng)?,
            fc_k: Linear::register(store, &format!("{name}.fc_k"), dim, dim, rng)?,
            mix_w1: store.register(&format!("{name}.mix_w1"), eye)?,
            mix_b1: store.register(&format!("{name}.mix_b1"), Matrix::zeros(1, heads))?,
            mix_w2: store.register(&format!("{name}.mix_w2"), Matrix::filled(heads, 1, 1.0 / heads as f64))?,
            mix_b2: store.register(&format!("{name}.mix_b2"), Matrix::zeros(1, 1))?,
            inv_scale: store.register(&format!("{name}.inv_scale"), Matrix::scalar(1.0))?,
            bias_k: store.register(&format!("{name}.bias_k"), Matrix::zeros(dim, 1))?,
            bias0: store.register(&format!("{name}.bias0"), Matrix::scalar(math::logit(prior)))?,
            heads,
        })
    }

    /// Similarity logits `M × N`; `prev` (earlier-stage logits) is added when present.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        q: Tensor,
        k: Tensor,
        prev: Option<Tensor>,
    ) -> Result<Tensor, AutodiffError> {
        let [m, d] = g.shape(q);
        let [n, dk] = g.shape(k);
        if d != dk || self.heads == 0 || d % self.heads != 0 {
            return Err(AutodiffError::ShapeMismatch { op: "affinity_similarity", lhs: vec![m, d], rhs: vec![n, dk] });
        }
        let q = self.fc_q.forward(g, store, q)?;
        let k = self.fc_k.forward(g, store, k)?;
        let dh = d / self.heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut per_head = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, Axis::Cols, h * dh, dh)?;
            let kh = g.slice(k, Axis::Cols, h * dh, dh)?;
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            // one column per head so the mixing MLP is a plain matmul
            per_head.push(g.reshape(s, m * n, 1)?);
        }
        let stacked = g.concat(&per_head, Axis::Cols)?;
        let w1 = g.param(store, self.mix_w1);
        let b1 = g.param(store, self.mix_b1);
        let w2 = g.param(store, self.mix_w2);
        let b2 = g.param(store, self.mix_b2);
        let h = g.matmul(stacked, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let mixed = g.matmul(h, w2)?;
        let mixed = g.add(mixed, b2)?;
        let sim = g.reshape(mixed, m, n)?;

        let inv_s = g.param(store, self.inv_scale);
        let sim = g.mul(sim, inv_s)?;
        let bk = g.param(store, self.bias_k);
        let col_bias = g.matmul(k, bk)?;
        let col_bias = g.transpose(col_bias);
        let b0 = g.param(store, self.bias0);
        let col_bias = g.add(col_bias, b0)?;
        let logits = g.add(sim, col_bias)?;
        match prev {
            Some(p) => g.add(logits, p),
            None => Ok(logits),
        }
    }
}

/// Cosine classifier against class text embeddings.
#[derive(Clone, Copy, Debug)]
pub struct ClassHead {
    pub proj: Linear,
    pub inv_scale: ParamId,
    pub bias: ParamId,
}

impl ClassHead {
    pub fn register(
        store: &mut ParameterStore,
        name: &str,
        dim: usize,
        text_dim: usize,
        inv_scale: f64,
        prior: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, AutodiffError> {
        Ok(Self {
            proj: Linear::register(store, &format!("{name}.proj"), dim, text_dim, rng)?,
            inv_scale: store.register(&format!("{name}.inv_scale"), Matrix::scalar(inv_scale))?,
            bias: store.register(&format!("{name}.bias"), Matrix::scalar(math::logit(prior)))?,
        })
    }

    /// `M × C` logits; `class_embeddings` rows need not be normalized.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        q: Tensor,
        class_embeddings: Tensor,
    ) -> Result<Tensor, AutodiffError> {
        let p = self.proj.forward(g, store, q)?;
        cosine_logits(g, store, p, class_embeddings, self.inv_scale, self.bias)
    }
}

/// `(1/s)·cos(q_m, e_c) + b` for all pairs.
pub fn cosine_logits(
    g: &mut Graph,
    store: &ParameterStore,
    q: Tensor,
    e: Tensor,
    inv_scale: ParamId,
    bias: ParamId,
) -> Result<Tensor, AutodiffError> {
    let qn = g.l2_normalize_rows(q)?;
    let en = g.l2_normalize_rows(e)?;
    let et = g.transpose(en);
    let cos = g.matmul(qn, et)?;
    let s = g.param(store, inv_scale);
    let b = g.param(store, bias);
    let y = g.mul(cos, s)?;
    g.add(y, b)
}

/// Attention, normalization and feed-forward weights of one stage.
#[derive(Clone, Copy, Debug)]
pub struct DecoderStage {
    pub cross_norm: Norm,
    pub cross_attn: Attention,
    pub self_norm: Norm,
    pub self_attn: Attention,
    pub ffn_norm: Norm,
    pub ffn: Mlp,
}

impl DecoderStage {
    fn register(
        store: &mut ParameterStore,
        name: &str,
        dim: usize,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, AutodiffError> {
        Ok(Self {
            cross_norm: Norm::register(store, &format!("{name}.cross_norm"), dim)?,
            cross_attn: Attention::register(store, &format!("{name}.cross_attn"), dim, rng)?,
            self_norm: Norm::register(store, &format!("{name}.self_norm"), dim)?,
            self_attn: Attention::register(store, &format!("{name}.self_attn"), dim, rng)?,
            ffn_norm: Norm::register(store, &format!("{name}.ffn_norm"), dim)?,
            ffn: Mlp::register(store, &format!("{name}.ffn"), [dim, ffn_dim, dim], rng)?,
        })
    }
}

/// Key mask for cross-attention: hides patch `n` from query `m` when `A[m,n] < threshold`.
pub fn dca_mask(affinity: &Matrix, threshold: f64) -> Vec<bool> {
    affinity.data.iter().map(|&a| a < threshold).collect()
}

/// Cross-attention of queries over patch features restricted by the affinity.
#[allow(clippy::too_many_arguments)]
pub fn dca(
    g: &mut Graph,
    store: &ParameterStore,
    attn: &Attention,
    q: Tensor,
    kv: Tensor,
    affinity: Option<&Matrix>,
    threshold: f64,
    heads: usize,
) -> Result<Tensor, AutodiffError> {
    let mask = affinity.map(|a| dca_mask(a, threshold));
    let w = attn.weights(g, store);
    multi_head_attention(g, q, kv, kv, mask.as_deref(), heads, &w)
}

/// Merged box of the patches in `row` reaching `threshold`, if any.
pub fn high_affinity_box(row: &[f64], boxes: &[BBox], threshold: f64) -> Option<BBox> {
    let picked: Vec<BBox> = row.iter().zip(boxes).filter(|(&a, _)| a >= threshold).map(|(_, &b)| b).collect();
    merge_bboxes(&picked).ok()
}

/// Averages each query with an MLP embedding of the RoI over its high-affinity
/// patches; queries without such patches pass through.
#[allow(clippy::too_many_arguments)]
pub fn query_enhance(
    g: &mut Graph,
    store: &ParameterStore,
    mlp: &Mlp,
    q: Tensor,
    affinity: &Matrix,
    grid: GridView<'_>,
    boxes: &[BBox],
    threshold: f64,
    roi_size: usize,
) -> Result<Tensor, ModelError> {
    let cols = roi_size * roi_size * grid.channels;
    let mut rows = Vec::with_capacity(affinity.rows);
    let mut sel = Vec::with_capacity(affinity.rows);
    for m in 0..affinity.rows {
        match high_affinity_box(affinity.row(m), boxes, threshold) {
            Some(b) => {
                rows.push(roi_align(grid, b, roi_size)?);
                sel.push(0.5);
            }
            None => {
                rows.push(vec![0.0; cols]);
                sel.push(0.0);
            }
        }
    }
    if sel.iter().all(|&s| s == 0.0) {
        return Ok(q);
    }
    let feats = g.constant(rows_to_matrix(&rows, cols));
    let region = mlp.forward(g, store, feats)?;
    let keep = g.constant(Matrix { rows: sel.len(), cols: 1, data: sel.iter().map(|s| 1.0 - s).collect() });
    let take = g.constant(Matrix { rows: sel.len(), cols: 1, data: sel });
    let a = g.mul(q, keep)?;
    let b = g.mul(region, take)?;
    Ok(g.add(a, b)?)
}

#[derive(Clone, Debug)]
pub struct AffinityDecoder {
    pub semantic_proj: Linear,
    pub stages: Vec<DecoderStage>,
    pub affinity: AffinityHead,
    pub classifier: ClassHead,
    pub enhance: Mlp,
    pub config: ModelConfig,
}

impl AffinityDecoder {
    pub fn register(
        store: &mut ParameterStore,
        config: &ModelConfig,
        text_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, AutodiffError> {
        let d = config.dim;
        let roi = config.roi_size * config.roi_size * 3;
        Ok(Self {
            semantic_proj: Linear::register(store, "dec.semantic_proj", text_dim, d, rng)?,
            stages: (0..config.decoder_stages)
                .map(|i| DecoderStage::register(store, &format!("dec.stage{i}"), d, config.ffn_dim, rng))
                .collect::<Result<_, _>>()?,
            affinity: AffinityHead::register(store, "dec.affinity", d, config.affinity_heads, config.prior, rng)?,
            classifier: ClassHead::register(store, "dec.cls", d, text_dim, config.class_inv_scale, config.prior, rng)?,
            enhance: Mlp::register(store, "dec.enhance", [roi, d, d], rng)?,
            config: config.clone(),
        })
    }

    /// Initial query matrix: semantic, instance, then denoising rows.
    fn initial_queries(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        feats: Tensor,
        positions: Tensor,
        class_emb: Tensor,
        inputs: &DecoderInputs<'_>,
    ) -> Result<Tensor, ModelError> {
        let semantic = self.semantic_proj.forward(g, store, class_emb)?;
        let instance = g.add(feats, positions)?;
        let mut parts = vec![semantic, instance];
        if let Some(dn) = inputs.denoising.filter(|d| !d.is_empty()) {
            let text = inputs.class_embeddings;
            let rows: Vec<Vec<f64>> = dn.labels.iter().map(|&c| text.row(c as usize).to_vec()).collect();
            let emb = g.constant(rows_to_matrix(&rows, text.cols));
            let label_q = self.semantic_proj.forward(g, store, emb)?;
            let pos = g.constant(dn.positions.clone());
            parts.push(g.add(label_q, pos)?);
        }
        Ok(g.concat(&parts, Axis::Rows)?)
    }

    /// Runs every stage. `feats` and `positions` are `N × D`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        feats: Tensor,
        positions: Tensor,
        inputs: &DecoderInputs<'_>,
    ) -> Result<Vec<StageOutput>, ModelError> {
        let n = g.shape(feats)[0];
        if n == 0 {
            return Err(ModelError::NoPatches);
        }
        if inputs.patch_boxes.len() != n {
            return Err(ModelError::InvalidConfig("patch box count differs from feature count"));
        }
        let cfg = &self.config;
        let class_emb = g.constant(inputs.class_embeddings.clone());
        let c = inputs.class_embeddings.rows;
        let mut q = self.initial_queries(g, store, feats, positions, class_emb, inputs)?;
        let m_all = g.shape(q)[0];
        let real = c + n;
        // real queries never see denoising ones
        let visibility: Option<Vec<bool>> = (m_all > real)
            .then(|| (0..m_all * m_all).map(|i| i / m_all < real && i % m_all >= real).collect());

        let mut prev_logits: Option<Tensor> = None;
        let mut affinity: Option<Matrix> = None;
        let mut outputs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let qn = stage.cross_norm.forward(g, store, q)?;
            let mask_src = if cfg.use_dca { affinity.as_ref() } else { None };
            let a = dca(g, store, &stage.cross_attn, qn, feats, mask_src, cfg.dca_threshold, cfg.heads)?;
            q = g.add(q, a)?;

            let qn = stage.self_norm.forward(g, store, q)?;
            let w = stage.self_attn.weights(g, store);
            let a = multi_head_attention(g, qn, qn, qn, visibility.as_deref(), cfg.heads, &w)?;
            q = g.add(q, a)?;

            let qn = stage.ffn_norm.forward(g, store, q)?;
            let f = stage.ffn.forward(g, store, qn)?;
            q = g.add(q, f)?;

            let prev = if cfg.use_affinity_refinement { prev_logits } else { None };
            let logits = self.affinity.forward(g, store, q, feats, prev)?;
            let aff = g.sigmoid(logits);
            let aff_value = g.value(aff).clone();

            if cfg.use_query_enhancement {
                q = query_enhance(
                    g,
                    store,
                    &self.enhance,
                    q,
                    &aff_value,
                    inputs.grid,
                    inputs.patch_boxes,
                    cfg.qe_threshold,
                    cfg.roi_size,
                )?;
            }
            let class_logits = self.classifier.forward(g, store, q, class_emb)?;
            outputs.push(StageOutput { affinity_logits: logits, affinity: aff, class_logits, queries: q });
            prev_logits = Some(logits);
            affinity = Some(aff_value);
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, AttentionWeights};
    use rand::{Rng, SeedableRng};

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    fn eye(d: usize) -> Matrix {
        let mut m = Matrix::zeros(d, d);
        for i in 0..d {
            m.data[i * d + i] = 1.0;
        }
        m
    }

    #[test]
    fn zeroed_mixing_gives_prior_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let head = AffinityHead::register(&mut store, "a", 8, 2, 0.01, &mut rng).unwrap();
        for id in [head.mix_w1, head.mix_b1, head.mix_w2, head.mix_b2] {
            let v = store.value_mut(id);
            v.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let q = g.constant(rand_matrix(&mut rng, 3, 8));
        let k = g.constant(rand_matrix(&mut rng, 5, 8));
        let logits = head.forward(&mut g, &store, q, k, None).unwrap();
        let a = g.sigmoid(logits);
        assert!(g.value(a).data.iter().all(|&v| (v - 0.01).abs() < 1e-12));
    }

    #[test]
    fn identity_similarity_matches_scaled_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 6;
        let mut store = ParameterStore::new();
        let head = AffinityHead::register(&mut store, "a", d, 1, 0.5, &mut rng).unwrap();
        store.set("a.fc_q.w", eye(d)).unwrap();
        store.set("a.fc_k.w", eye(d)).unwrap();
        store.set("a.mix_w2", Matrix::scalar(1.0)).unwrap();
        let qm = rand_matrix(&mut rng, 3, d);
        // relu in the mixer passes positive similarities only, so keep them positive
        let km = Matrix { rows: 4, cols: d, data: qm.data.iter().chain(&qm.data[..d]).map(|v| v.abs()).collect() };
        let qm = Matrix { rows: 3, cols: d, data: qm.data.iter().map(|v| v.abs()).collect() };
        let mut g = Graph::new();
        let q = g.constant(qm.clone());
        let k = g.constant(km.clone());
        let logits = head.forward(&mut g, &store, q, k, None).unwrap();
        let got = g.value(logits);
        for i in 0..3 {
            for j in 0..4 {
                let dot: f64 = (0..d).map(|t| qm.get(i, t) * km.get(j, t)).sum();
                assert!((got.get(i, j) - dot / math::sqrt(d as f64)).abs() < 1e-12);
            }
        }

        // zero previous logits are an additive identity
        let prev = g.constant(Matrix::zeros(3, 4));
        let with_prev = head.forward(&mut g, &store, q, k, Some(prev)).unwrap();
        assert_eq!(g.value(with_prev), g.value(logits));
    }

    #[test]
    fn classifier_cosine_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let head = ClassHead::register(&mut store, "c", 2, 2, 1.0, 0.01, &mut rng).unwrap();
        let mut g = Graph::new();
        let q = g.constant(Matrix::from_rows(&[vec![3.0, 0.0]]).unwrap());
        let e = g.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let s = cosine_logits(&mut g, &store, q, e, head.inv_scale, head.bias).unwrap();
        let b = math::logit(0.01);
        assert!((g.value(s).get(0, 0) - (1.0 + b)).abs() < 1e-12);
        assert!((g.value(s).get(0, 1) - b).abs() < 1e-12);
        assert!((math::sigmoid(b) - 0.01).abs() < 1e-12);
        let z = g.constant(Matrix::zeros(1, 2));
        assert!(cosine_logits(&mut g, &store, z, e, head.inv_scale, head.bias).is_err());
    }

    fn attn_weights(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize) -> AttentionWeights {
        let mut p = |r, c| g.constant(rand_matrix(rng, r, c));
        AttentionWeights {
            wq: p(d, d),
            bq: p(1, d),
            wk: p(d, d),
            bk: p(1, d),
            wv: p(d, d),
            bv: p(1, d),
            wo: p(d, d),
            bo: p(1, d),
        }
    }

    #[test]
    fn masked_attention_equals_attention_over_surviving_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, n, d) = (3, 5, 4);
        let qm = rand_matrix(&mut rng, m, d);
        let km = rand_matrix(&mut rng, n, d);
        let aff = Matrix { rows: m, cols: n, data: (0..m * n).map(|_| rng.random_range(0.0..1.0)).collect() };
        let mut g = Graph::new();
        let w = attn_weights(&mut g, &mut rng, d);
        let q = g.constant(qm.clone());
        let k = g.constant(km.clone());
        let mask = dca_mask(&aff, 0.5);
        let full = multi_head_attention(&mut g, q, k, k, Some(&mask), 2, &w).unwrap();
        let full = g.value(full).clone();
        for r in 0..m {
            let keep: Vec<usize> = (0..n).filter(|&j| aff.get(r, j) >= 0.5).collect();
            if keep.is_empty() {
                continue;
            }
            let rows: Vec<Vec<f64>> = keep.iter().map(|&j| km.row(j).to_vec()).collect();
            let sub = g.constant(Matrix::from_rows(&rows).unwrap());
            let qr = g.constant(Matrix::from_rows(&[qm.row(r).to_vec()]).unwrap());
            let out = multi_head_attention(&mut g, qr, sub, sub, None, 2, &w).unwrap();
            for (a, b) in g.value(out).data.iter().zip(full.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_ones_affinity_is_unmasked() {
        let aff = Matrix::filled(2, 3, 1.0);
        assert!(dca_mask(&aff, 0.5).iter().all(|&b| !b));
    }

    #[test]
    fn high_affinity_box_cases() {
        let boxes = [BBox::new(0, 0, 4, 4).unwrap(), BBox::new(6, 2, 9, 10).unwrap(), BBox::new(1, 1, 2, 2).unwrap()];
        assert_eq!(high_affinity_box(&[0.1, 0.2, 0.3], &boxes, 0.5), None);
        assert_eq!(high_affinity_box(&[0.1, 0.9, 0.3], &boxes, 0.5), Some(boxes[1]));
        let merged = high_affinity_box(&[0.7, 0.9, 0.3], &boxes, 0.5).unwrap();
        assert_eq!(merged, BBox::new(0, 0, 9, 10).unwrap());
    }

    #[test]
    fn affinity_head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let head = AffinityHead::register(&mut store, "a", 4, 2, 0.01, &mut rng).unwrap();
        // shift the mixer bias so the relu stays away from its kink
        store.set("a.mix_b1", Matrix::filled(1, 2, 0.3)).unwrap();
        let inputs = [rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 2, 4), rand_matrix(&mut rng, 3, 2)];
        let err = grad_check(
            |g, t| {
                let l = head.forward(g, &store, t[0], t[1], Some(t[2]))?;
                let a = g.sigmoid(l);
                let a = g.mul(a, a)?;
                Ok(g.sum(a))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
