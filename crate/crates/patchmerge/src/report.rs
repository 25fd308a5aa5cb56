//! JSON reports and PPM overlays.

use std::path::Path;

use patchmerge_core::inference::{InferenceConfig, InferenceOutput, Mode};
use patchmerge_core::metrics::{ApAccumulator, Diagnostics, MiouAccumulator, PqAccumulator, PqSummary};
use patchmerge_core::synth::{ClassTable, Scene};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u32,
    pub name: String,
    pub is_thing: bool,
    pub held_out: bool,
    pub pq: Option<PqSummary>,
    pub ap: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: Mode,
    pub kappa: f64,
    pub scenes: usize,
    pub pq: PqSummary,
    pub pq_things: PqSummary,
    pub pq_stuff: PqSummary,
    /// Restricted to held-out classes; all zero when none are held out.
    pub pq_held_out: PqSummary,
    pub ap: f64,
    pub miou: f64,
    pub classes: Vec<ClassMetrics>,
}

impl MetricReport {
    pub fn new(
        classes: &ClassTable,
        mode: Mode,
        config: &InferenceConfig,
        scenes: usize,
        pq: &PqAccumulator,
        ap: &ApAccumulator,
        miou: &MiouAccumulator,
    ) -> Self {
        let ids = |f: fn(&patchmerge_core::synth::ClassEntry) -> bool| -> Vec<u32> {
            classes.entries.iter().filter(|e| f(e)).map(|e| e.id).collect()
        };
        let ap_per = ap.per_class();
        let iou_per = miou.per_class();
        let per_class = classes
            .entries
            .iter()
            .map(|e| ClassMetrics {
                class_id: e.id,
                name: e.name.clone(),
                is_thing: e.is_thing,
                held_out: e.held_out,
                pq: pq.per_class.get(&e.id).map(|s| s.summary()),
                ap: ap_per.iter().find(|p| p.0 == e.id).map(|p| p.1),
                iou: iou_per.iter().find(|p| p.0 == e.id).map(|p| p.1),
            })
            .collect();
        Self {
            mode,
            kappa: config.kappa,
            scenes,
            pq: pq.summary(None),
            pq_things: pq.summary(Some(&ids(|e| e.is_thing))),
            pq_stuff: pq.summary(Some(&ids(|e| !e.is_thing))),
            pq_held_out: pq.summary(Some(&ids(|e| e.held_out))),
            ap: ap.ap(),
            miou: miou.miou(),
            classes: per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub tau: f64,
    pub proposals: Diagnostics,
    pub merge_oracle: Diagnostics,
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports always serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)).map_err(|e| Error::io(path, e))
}

/// Binary PPM (P6) from RGB values in `[0, 1]`.
pub fn ppm(width: u32, height: u32, rgb: &[[f64; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        for &c in px {
            out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn id_color(id: u32) -> [f64; 3] {
    let h = patchmerge_core::synth::mix_seed(id as u64, 0xC0_10_25);
    let c = |s: u32| 0.25 + 0.75 * ((h >> s) & 0xFF) as f64 / 255.0;
    [c(0), c(8), c(16)]
}

/// Overlay images of one scene: patch boundaries on the input, semantic
/// classes and panoptic segments.
pub fn overlays(scene: &Scene, classes: &ClassTable, out: &InferenceOutput) -> Vec<(&'static str, Vec<u8>)> {
    let (w, h) = (scene.width, scene.height);
    let n = (w * h) as usize;
    let mut owner = vec![usize::MAX; n];
    for (i, p) in scene.patches.iter().enumerate() {
        for px in p.pixel_indices() {
            owner[px as usize] = i;
        }
    }
    let mut patches = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let edge = (x + 1 < w && owner[i + 1] != owner[i]) || (y + 1 < h && owner[i + w as usize] != owner[i]);
            let p = scene.pixel(x, y);
            patches.push(if edge { [0.0; 3] } else { [p[0] as f64, p[1] as f64, p[2] as f64] });
        }
    }
    let semantic: Vec<[f64; 3]> =
        out.semantic_map.iter().map(|c| c.map_or([0.0; 3], |c| classes.entries[c as usize].color)).collect();
    let panoptic: Vec<[f64; 3]> =
        out.panoptic.pixels.iter().map(|&id| if id == 0 { [0.0; 3] } else { id_color(id) }).collect();
    vec![
        ("patches.ppm", ppm(w, h, &patches)),
        ("semantic.ppm", ppm(w, h, &semantic)),
        ("panoptic.ppm", ppm(w, h, &panoptic)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub class_id: u32,
    pub class_name: String,
    pub score: f64,
    pub area: u64,
    pub patches: Vec<usize>,
}

/// Per-scene summary written next to the overlays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: usize,
    pub patches: usize,
    pub semantic: Vec<SegmentRecord>,
    pub instances: Vec<SegmentRecord>,
    pub panoptic_segments: usize,
}

impl SceneReport {
    pub fn new(index: usize, scene: &Scene, classes: &ClassTable, out: &InferenceOutput) -> Self {
        let rec = |s: &patchmerge_core::inference::SegmentPrediction| SegmentRecord {
            class_id: s.class_id,
            class_name: classes.entries[s.class_id as usize].name.clone(),
            score: s.score,
            area: s.mask.area(),
            patches: s.patches.clone(),
        };
        Self {
            scene: index,
            patches: scene.patches.len(),
            semantic: out.semantic.iter().map(rec).collect(),
            instances: out.instances.iter().map(rec).collect(),
            panoptic_segments: out.panoptic.segments.len(),
        }
    }
}
