//! Patch encoder: region features sampled from the scene grid, masked to the
//! patch, projected by an MLP, offset by a box position embedding, then
//! contextualized by stacked self-attention layers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Matrix, ParameterStore, Tensor};
use crate::error::{AutodiffError, GeometryError, ModelError};
use crate::mask::{BBox, BinaryMask};
use crate::math;
use crate::nn::{rows_to_matrix, Mlp, Norm, SelfAttentionLayer};
use crate::synth::Scene;

/// Borrowed `height × width × channels` grid of `f32` features.
#[derive(Clone, Copy, Debug)]
pub struct GridView<'a> {
    pub data: &'a [f32],
    pub width: u32,
    pub height: u32,
    pub channels: usize,
}

impl<'a> GridView<'a> {
    pub fn image(scene: &'a Scene) -> Self {
        Self { data: &scene.image, width: scene.width, height: scene.height, channels: 3 }
    }

    fn at(&self, x: u32, y: u32, c: usize) -> f64 {
        self.data[(y * self.width + x) as usize * self.channels + c] as f64
    }
}

/// Bilinear samples at `out_size × out_size` cell centers inside `b`.
/// Output is row-major `out_size × out_size × channels`.
pub fn roi_align(grid: GridView<'_>, b: BBox, out_size: usize) -> Result<Vec<f64>, GeometryError> {
    if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > grid.width || b.y1 > grid.height || out_size == 0 {
        return Err(GeometryError::DegenerateBox);
    }
    let (bw, bh) = (b.width() as f64 / out_size as f64, b.height() as f64 / out_size as f64);
    let mut out = Vec::with_capacity(out_size * out_size * grid.channels);
    let (wmax, hmax) = (grid.width as f64 - 1.0, grid.height as f64 - 1.0);
    for i in 0..out_size {
        // continuous coordinates with pixel centers at integers
        let py = (b.y0 as f64 + (i as f64 + 0.5) * bh - 0.5).clamp(0.0, hmax);
        let y0 = math::floor(py) as u32;
        let y1 = (y0 + 1).min(grid.height - 1);
        let fy = py - y0 as f64;
        for j in 0..out_size {
            let px = (b.x0 as f64 + (j as f64 + 0.5) * bw - 0.5).clamp(0.0, wmax);
            let x0 = math::floor(px) as u32;
            let x1 = (x0 + 1).min(grid.width - 1);
            let fx = px - x0 as f64;
            for c in 0..grid.channels {
                let top = grid.at(x0, y0, c) * (1.0 - fx) + grid.at(x1, y0, c) * fx;
                let bottom = grid.at(x0, y1, c) * (1.0 - fx) + grid.at(x1, y1, c) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor resampling of `mask` over `b` to `out_size × out_size`.
pub fn resample_mask(mask: &BinaryMask, b: BBox, out_size: usize) -> Vec<bool> {
    let (bw, bh) = (b.width() as f64 / out_size as f64, b.height() as f64 / out_size as f64);
    let mut out = Vec::with_capacity(out_size * out_size);
    for i in 0..out_size {
        let y = b.y0 + math::floor((i as f64 + 0.5) * bh) as u32;
        for j in 0..out_size {
            let x = b.x0 + math::floor((j as f64 + 0.5) * bw) as u32;
            out.push(mask.contains(x, y));
        }
    }
    out
}

/// Zeroes RoI cells whose resampled mask value is unset.
pub fn mask_roi(roi: &[f64], mask: &BinaryMask, b: BBox, out_size: usize) -> Vec<f64> {
    let cells = resample_mask(mask, b, out_size);
    let channels = roi.len() / (out_size * out_size);
    roi.iter()
        .enumerate()
        .map(|(i, &v)| if cells[i / channels] { v } else { 0.0 })
        .collect()
}

/// Sinusoidal embedding of normalized `(cx, cy, w, h)`; `dim / 4` entries per
/// coordinate, half sines and half cosines.
pub fn position_embedding(b: BBox, width: u32, height: u32, dim: usize) -> Vec<f64> {
    let coords = b.normalized_cxcywh(width, height);
    let per = dim / 4;
    let freqs = (per / 2).max(1);
    let mut out = vec![0.0; dim];
    for (k, &v) in coords.iter().enumerate() {
        for f in 0..freqs {
            // geometric ladder from 1 to 16 cycles over the unit interval
            let cycles = if freqs > 1 { math::powf(16.0, f as f64 / (freqs - 1) as f64) } else { 1.0 };
            let angle = 2.0 * core::f64::consts::PI * cycles * v;
            let base = k * per + 2 * f;
            if base < (k + 1) * per {
                out[base] = math::sin(angle);
            }
            if base + 1 < (k + 1) * per {
                out[base + 1] = math::cos(angle);
            }
        }
    }
    out
}

/// Flattened region features of every patch (`N × roi²·3`).
pub fn patch_region_features(scene: &Scene, roi_size: usize, use_mask: bool) -> Result<Matrix, GeometryError> {
    let grid = GridView::image(scene);
    let cols = roi_size * roi_size * 3;
    let mut rows = Vec::with_capacity(scene.patches.len());
    for p in &scene.patches {
        let b = p.bbox()?;
        let roi = roi_align(grid, b, roi_size)?;
        rows.push(if use_mask { mask_roi(&roi, p, b, roi_size) } else { roi });
    }
    Ok(rows_to_matrix(&rows, cols))
}

/// Position embeddings of every patch box (`N × dim`).
pub fn patch_position_embeddings(scene: &Scene, dim: usize) -> Result<Matrix, GeometryError> {
    let rows: Vec<Vec<f64>> = scene
        .patches
        .iter()
        .map(|p| p.bbox().map(|b| position_embedding(b, scene.width, scene.height, dim)))
        .collect::<Result<_, _>>()?;
    Ok(rows_to_matrix(&rows, dim))
}

#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub project: Mlp,
    pub layers: Vec<SelfAttentionLayer>,
    pub final_norm: Norm,
    pub heads: usize,
}

impl PatchEncoder {
    pub fn register(
        store: &mut ParameterStore,
        roi_size: usize,
        dim: usize,
        ffn_dim: usize,
        layers: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, AutodiffError> {
        let input = roi_size * roi_size * 3;
        Ok(Self {
            project: Mlp::register(store, "enc.project", [input, dim, dim], rng)?,
            layers: (0..layers)
                .map(|i| SelfAttentionLayer::register(store, &format!("enc.layer{i}"), dim, ffn_dim, rng))
                .collect::<Result<_, _>>()?,
            final_norm: Norm::register(store, "enc.final_norm", dim)?,
            heads,
        })
    }

    /// Encodes precomputed region features and position embeddings into `N × dim` patch features.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        regions: Tensor,
        positions: Tensor,
    ) -> Result<Tensor, ModelError> {
        if g.shape(regions)[0] == 0 {
            return Err(ModelError::NoPatches);
        }
        let h = self.project.forward(g, store, regions)?;
        let mut x = g.add(h, positions)?;
        for layer in &self.layers {
            x = layer.forward(g, store, x, None, self.heads)?;
        }
        Ok(self.final_norm.forward(g, store, x)?)
    }
}
