//! Parameter bundles for the small layers shared by the encoder and decoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionWeights, Graph, Matrix, ParamId, ParameterStore, Tensor};
use crate::error::AutodiffError;
use crate::math;

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let a = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Matrix { rows: fan_in, cols: fan_out, data }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register(
        store: &mut ParameterStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, AutodiffError> {
        let w = store.register(&format!("{name}.w"), xavier(rng, fan_in, fan_out))?;
        let b = store.register(&format!("{name}.b"), Matrix::zeros(1, fan_out))?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Tensor) -> Result<Tensor, AutodiffError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Layer normalization with a learned per-feature gain and offset.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl Norm {
    pub fn register(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self, AutodiffError> {
        let gain = store.register(&format!("{name}.gain"), Matrix::filled(1, dim, 1.0))?;
        let offset = store.register(&format!("{name}.offset"), Matrix::zeros(1, dim))?;
        Ok(Self { gain, offset })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Tensor) -> Result<Tensor, AutodiffError> {
        let n = g.layer_norm(x, 1e-5);
        let gain = g.param(store, self.gain);
        let offset = g.param(store, self.offset);
        let y = g.mul(n, gain)?;
        g.add(y, offset)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn register(
        store: &mut ParameterStore,
        name: &str,
        dims: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, AutodiffError> {
        Ok(Self {
            first: Linear::register(store, &format!("{name}.0"), dims[0], dims[1], rng)?,
            second: Linear::register(store, &format!("{name}.1"), dims[1], dims[2], rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Tensor) -> Result<Tensor, AutodiffError> {
        let h = self.first.forward(g, store, x)?;
        let h = g.relu(h);
        self.second.forward(g, store, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn register(store: &mut ParameterStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self, AutodiffError> {
        Ok(Self {
            q: Linear::register(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::register(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::register(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::register(store, &format!("{name}.o"), dim, dim, rng)?,
        })
    }

    pub fn weights(&self, g: &mut Graph, store: &ParameterStore) -> AttentionWeights {
        let mut p = |id| g.param(store, id);
        AttentionWeights {
            wq: p(self.q.w),
            bq: p(self.q.b),
            wk: p(self.k.w),
            bk: p(self.k.b),
            wv: p(self.v.w),
            bv: p(self.v.b),
            wo: p(self.o.w),
            bo: p(self.o.b),
        }
    }
}

/// Pre-norm residual block: `x + attn(norm(x), ·)` then `x + ffn(norm(x))`.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttentionLayer {
    pub norm_attn: Norm,
    pub attn: Attention,
    pub norm_ffn: Norm,
    pub ffn: Mlp,
}

impl SelfAttentionLayer {
    pub fn register(
        store: &mut ParameterStore,
        name: &str,
        dim: usize,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, AutodiffError> {
        Ok(Self {
            norm_attn: Norm::register(store, &format!("{name}.norm_attn"), dim)?,
            attn: Attention::register(store, &format!("{name}.attn"), dim, rng)?,
            norm_ffn: Norm::register(store, &format!("{name}.norm_ffn"), dim)?,
            ffn: Mlp::register(store, &format!("{name}.ffn"), [dim, ffn_dim, dim], rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Tensor,
        mask: Option<&[bool]>,
        heads: usize,
    ) -> Result<Tensor, AutodiffError> {
        let n = self.norm_attn.forward(g, store, x)?;
        let w = self.attn.weights(g, store);
        let a = crate::autodiff::multi_head_attention(g, n, n, n, mask, heads, &w)?;
        let x = g.add(x, a)?;
        let n = self.norm_ffn.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, n)?;
        g.add(x, f)
    }
}

pub(crate) fn params_finite(store: &ParameterStore) -> bool {
    store.iter().all(|(_, _, m)| m.data.iter().all(|v| v.is_finite()))
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>], cols: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(r);
    }
    Matrix { rows: rows.len(), cols, data }
}
