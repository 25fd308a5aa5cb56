//! Finite-difference checks of every operator and of the full training graph.

use patchmerge_core::autodiff::{grad_check, grad_check_params, Axis, Graph, Matrix, ParameterStore, Tensor};
use patchmerge_core::mask::{BBox, BinaryMask};
use patchmerge_core::model::{Model, ModelConfig, PreparedScene};
use patchmerge_core::supervision::{build_targets, denoising_batch, total_loss, DenoisingConfig, LossConfig, SceneSupervision};
use patchmerge_core::synth::{GtInstance, Scene};
use patchmerge_core::AutodiffError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix { rows, cols, data: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect() }
}

type Case = (&'static str, Vec<[usize; 2]>, fn(&mut Graph, &[Tensor]) -> Result<Tensor, AutodiffError>);

fn op_cases() -> Vec<Case> {
    fn weighted(g: &mut Graph, t: Tensor) -> Result<Tensor, AutodiffError> {
        // a fixed non-uniform weighting so the check does not collapse to sums
        let [r, c] = g.shape(t);
        let w = g.constant(Matrix::new(r, c, (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect())?);
        let p = g.mul(t, w)?;
        Ok(g.sum(p))
    }
    vec![
        ("matmul", vec![[3, 4], [4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y)
        }),
        ("add/sub/mul/div same", vec![[2, 3], [2, 3]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            let d = g.affine(v[1], 0.1, 3.0);
            let q = g.div(m, d)?;
            weighted(g, q)
        }),
        ("broadcast row/col/scalar", vec![[3, 4], [1, 4], [3, 1], [1, 1]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.mul(a, v[2])?;
            let d = g.affine(v[3], 1.0, 2.5);
            let c = g.div(b, d)?;
            let e = g.sub(c, v[3])?;
            weighted(g, e)
        }),
        ("sigmoid/relu", vec![[3, 3]], |g, v| {
            let s = g.sigmoid(v[0]);
            let r = g.relu(v[0]);
            let a = g.add(s, r)?;
            weighted(g, a)
        }),
        ("softmax both axes", vec![[3, 4]], |g, v| {
            let a = g.softmax(v[0], Axis::Cols);
            let b = g.softmax(v[0], Axis::Rows);
            let c = g.mul(a, b)?;
            weighted(g, c)
        }),
        ("layer_norm", vec![[3, 5]], |g, v| {
            let y = g.layer_norm(v[0], 1e-5);
            weighted(g, y)
        }),
        ("l2_normalize", vec![[3, 4]], |g, v| {
            let y = g.l2_normalize_rows(v[0])?;
            weighted(g, y)
        }),
        ("concat/slice", vec![[2, 3], [2, 2], [1, 3]], |g, v| {
            let c = g.concat(&[v[0], v[1]], Axis::Cols)?;
            let s = g.slice(c, Axis::Cols, 1, 3)?;
            let r = g.concat(&[v[0], v[2]], Axis::Rows)?;
            let t = g.slice(r, Axis::Rows, 1, 2)?;
            let p = g.mul(s, t)?;
            weighted(g, p)
        }),
        ("sum/mean axis", vec![[3, 4]], |g, v| {
            let a = g.sum_axis(v[0], Axis::Rows);
            let b = g.mean_axis(v[0], Axis::Cols);
            let c = g.mean(v[0]);
            let ab = g.matmul(b, a)?;
            let abc = g.mul(ab, c)?;
            weighted(g, abc)
        }),
        ("transpose/reshape", vec![[2, 3]], |g, v| {
            let t = g.transpose(v[0]);
            let r = g.reshape(t, 1, 6)?;
            let s = g.sigmoid(r);
            weighted(g, s)
        }),
        ("masked_fill + softmax", vec![[2, 3]], |g, v| {
            let m = g.masked_fill(v[0], &[false, true, false, true, true, true])?;
            let s = g.softmax(m, Axis::Cols);
            weighted(g, s)
        }),
        ("sigmoid_focal", vec![[2, 3]], |g, v| {
            let f = g.sigmoid_focal(v[0], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], 0.25, 2.0)?;
            weighted(g, f)
        }),
    ]
}

/// Largest relative error over every operator, three random inputs each.
pub fn every_operator() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let cases = op_cases();
    for (name, shapes, f) in &cases {
        for _ in 0..3 {
            let inputs: Vec<Matrix> = shapes.iter().map(|s| rand_matrix(&mut rng, s[0], s[1])).collect();
            let err = grad_check(f, &inputs, STEP).unwrap();
            assert!(err < TOLERANCE, "{name}: relative error {err}");
            worst = worst.max(err);
        }
    }
    format!("{} operator groups, max relative error {worst:.2e}", cases.len())
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_stages: 2,
        ffn_dim: 8,
        roi_size: 2,
        affinity_heads: 2,
        ..ModelConfig::default()
    }
}

/// 8×8 scene: a thing of class 0 split into two patches on a stuff background of class 1.
pub fn three_patch_scene() -> (Scene, Matrix) {
    let (w, h) = (8u32, 8u32);
    let thing = BinaryMask::from_box(w, h, BBox::new(1, 1, 5, 5).unwrap());
    let left = BinaryMask::from_box(w, h, BBox::new(1, 1, 3, 5).unwrap());
    let right = BinaryMask::from_box(w, h, BBox::new(3, 1, 5, 5).unwrap());
    let stuff = BinaryMask::full(w, h).difference(&thing).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let image = (0..w * h * 3).map(|_| rng.random::<f32>()).collect();
    let scene = Scene {
        width: w,
        height: h,
        image,
        patches: vec![left, right, stuff.clone()],
        gt: vec![
            GtInstance { mask: thing, class_id: 0, is_thing: true },
            GtInstance { mask: stuff, class_id: 1, is_thing: false },
        ],
        clip_dim: 4,
        clip_field: vec![0.0; (w * h * 4) as usize],
        seed: 0,
    };
    let emb = Matrix::new(2, 4, vec![0.5, 0.5, 0.5, 0.5, 0.5, -0.5, 0.5, -0.5]).unwrap();
    (scene, emb)
}

/// Encoder, decoder and total loss with denoising queries, probed in four
/// entries of every parameter.
pub fn full_graph() -> String {
    let config = tiny_config();
    let (scene, emb) = three_patch_scene();
    let mut store = ParameterStore::new();
    let model = Model::new(&config, 4, 1, &mut store).unwrap();
    let prepared = PreparedScene::new(&scene, &config).unwrap();
    let loss = LossConfig::default();
    let sup = SceneSupervision::new(&scene.gt, &scene.patches, &loss).unwrap();
    let dn_cfg = DenoisingConfig { enabled: true, box_noise: 0.2, label_flip: 0.0 };
    let dn = denoising_batch(&sup, &scene.gt, &[0, 1], config.dim, &dn_cfg, 5).unwrap();

    // matching is piecewise constant: fix the targets at the base point
    let mut g = Graph::new();
    let stages = model.forward(&mut g, &store, &scene, &prepared, &emb, Some(&dn.queries)).unwrap();
    let targets: Vec<_> = stages
        .iter()
        .map(|s| build_targets(&sup, g.value(s.class_logits), g.value(s.affinity), &prepared.boxes, 2, &dn.units, &loss).unwrap())
        .collect();

    let err = grad_check_params(
        &store,
        |g, store| {
            let stages = model
                .forward(g, store, &scene, &prepared, &emb, Some(&dn.queries))
                .map_err(|_| AutodiffError::InvalidArgument("forward"))?;
            Ok(total_loss(g, &stages, &targets, &loss)?.0)
        },
        STEP,
        4,
    )
    .unwrap();
    assert!(err < TOLERANCE, "max relative error {err}");
    format!("{} parameter tensors, max relative error {err:.2e}", store.len())
}
