//! Deterministic toy scenes standing in for real images, proposal masks and
//! text/image embeddings.
//!
//! Each scene is a painted grid of flat-colored stuff regions and thing
//! instances (rectangles, ellipses, L-shapes). Every ground-truth region is
//! cut into Voronoi sub-patches to play the role of an over-segmenting
//! proposal generator, and a per-pixel embedding field mimics dense
//! vision-language features.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::SynthError;
use crate::mask::{BBox, BinaryMask};
use crate::math;

/// One row of the class table.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
    pub is_thing: bool,
    /// Never painted into training scenes.
    pub held_out: bool,
    /// Unit-norm text embedding; every coordinate is exactly representable as `f32`.
    pub embedding: Vec<f64>,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassTable {
    pub entries: Vec<ClassEntry>,
}

impl ClassTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.embedding.len())
    }

    pub fn is_thing(&self, class_id: u32) -> bool {
        self.entries[class_id as usize].is_thing
    }

    pub fn held_out_ids(&self) -> Vec<u32> {
        self.entries.iter().filter(|e| e.held_out).map(|e| e.id).collect()
    }

    /// Checks dense ids, unit-norm embeddings and at least one thing and one stuff class.
    pub fn validate(&self) -> Result<(), SynthError> {
        if !self.entries.iter().enumerate().all(|(i, e)| e.id as usize == i) {
            return Err(SynthError::InvalidConfig("class ids must be dense from 0"));
        }
        let dim = self.embedding_dim();
        for e in &self.entries {
            let n = math::sqrt(e.embedding.iter().map(|v| v * v).sum());
            if e.embedding.len() != dim || (n - 1.0).abs() > 1e-6 {
                return Err(SynthError::InvalidConfig("class embeddings must be unit vectors"));
            }
        }
        if !self.entries.iter().any(|e| e.is_thing) || !self.entries.iter().any(|e| !e.is_thing) {
            return Err(SynthError::InvalidConfig("need at least one thing and one stuff class"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GtInstance {
    pub mask: BinaryMask,
    pub class_id: u32,
    pub is_thing: bool,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    /// Row-major `height × width × 3`.
    pub image: Vec<f32>,
    pub patches: Vec<BinaryMask>,
    pub gt: Vec<GtInstance>,
    pub clip_dim: usize,
    /// Row-major `height × width × clip_dim`.
    pub clip_field: Vec<f32>,
    pub seed: u64,
}

impl Scene {
    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.image[i], self.image[i + 1], self.image[i + 2]]
    }

    pub fn clip_vector(&self, pixel_index: u32) -> &[f32] {
        let i = pixel_index as usize * self.clip_dim;
        &self.clip_field[i..i + self.clip_dim]
    }

    pub fn patch_boxes(&self) -> Result<Vec<BBox>, crate::GeometryError> {
        self.patches.iter().map(BinaryMask::bbox).collect()
    }
}

/// Proposal corruption rates; all zero leaves patches untouched.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CorruptionConfig {
    pub drop_rate: f64,
    /// `(class_id, rate)` overrides of `drop_rate` for patches owned by a class.
    pub class_drop: Vec<(u32, f64)>,
    pub merge_rate: f64,
    pub jitter_rate: f64,
}

impl CorruptionConfig {
    pub fn is_identity(&self) -> bool {
        self.drop_rate == 0.0
            && self.class_drop.iter().all(|&(_, r)| r == 0.0)
            && self.merge_rate == 0.0
            && self.jitter_rate == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CorpusConfig {
    pub width: u32,
    pub height: u32,
    pub thing_classes: usize,
    pub stuff_classes: usize,
    pub clip_dim: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    /// Smallest and largest thing side length in pixels.
    pub thing_size_min: u32,
    pub thing_size_max: u32,
    pub overseg_min: usize,
    pub overseg_max: usize,
    /// Standard deviation of per-pixel color noise.
    pub noise: f64,
    /// Half-width of the uniform per-instance color offset.
    pub tint: f64,
    /// Standard deviation of per-pixel embedding noise.
    pub clip_noise: f64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub held_out: Vec<u32>,
    pub max_retries: usize,
    pub corruption: CorruptionConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            thing_classes: 4,
            stuff_classes: 2,
            clip_dim: 32,
            instances_min: 1,
            instances_max: 3,
            thing_size_min: 12,
            thing_size_max: 24,
            overseg_min: 1,
            overseg_max: 3,
            noise: 0.02,
            tint: 0.05,
            clip_noise: 0.0,
            train_scenes: 500,
            eval_scenes: 100,
            held_out: Vec::new(),
            max_retries: 200,
            corruption: CorruptionConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::InvalidConfig("image size must be positive"));
        }
        if self.thing_classes == 0 || self.stuff_classes == 0 {
            return Err(SynthError::InvalidConfig("need at least one thing and one stuff class"));
        }
        if self.clip_dim == 0 {
            return Err(SynthError::InvalidConfig("clip_dim must be positive"));
        }
        if self.instances_min > self.instances_max || self.overseg_min == 0 || self.overseg_min > self.overseg_max {
            return Err(SynthError::InvalidConfig("invalid min/max range"));
        }
        if self.thing_size_min < 2
            || self.thing_size_min > self.thing_size_max
            || self.thing_size_max > self.width.min(self.height)
        {
            return Err(SynthError::InvalidConfig("invalid thing size range"));
        }
        let n = (self.thing_classes + self.stuff_classes) as u32;
        if self.held_out.iter().any(|&c| c >= n) {
            return Err(SynthError::InvalidConfig("held-out class out of range"));
        }
        let seen_stuff = (self.thing_classes..self.thing_classes + self.stuff_classes)
            .any(|c| !self.held_out.contains(&(c as u32)));
        if !seen_stuff {
            return Err(SynthError::InvalidConfig("every stuff class is held out"));
        }
        if self.instances_min > 0 && (0..self.thing_classes).all(|c| self.held_out.contains(&(c as u32))) {
            return Err(SynthError::InvalidConfig("every thing class is held out"));
        }
        let c = &self.corruption;
        let rates = [c.drop_rate, c.merge_rate, c.jitter_rate];
        if rates.iter().chain(c.class_drop.iter().map(|(_, r)| r)).any(|r| !(0.0..=1.0).contains(r)) {
            return Err(SynthError::InvalidConfig("corruption rates must lie in [0, 1]"));
        }
        if self.noise < 0.0 || self.tint < 0.0 || self.clip_noise < 0.0 {
            return Err(SynthError::InvalidConfig("noise levels must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Corpus {
    pub width: u32,
    pub height: u32,
    pub classes: ClassTable,
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

/// SplitMix64 finalizer used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of scene `index` in `split`; independent of generation order.
pub fn scene_seed(corpus_seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 1u64 << 40,
        Split::Eval => 2u64 << 40,
    };
    mix_seed(corpus_seed, tag | index as u64)
}

/// Class colors and embeddings; a pure function of `(config, seed)`.
pub fn make_class_table(config: &CorpusConfig, seed: u64) -> ClassTable {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC1A55));
    let n = config.thing_classes + config.stuff_classes;
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut min_dist = 0.35;
    while colors.len() < n {
        let mut placed = false;
        for _ in 0..2000 {
            let c = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
            let far = colors.iter().all(|o| {
                let d: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                math::sqrt(d) >= min_dist
            });
            if far {
                colors.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            min_dist *= 0.8;
        }
    }
    let entries = (0..n)
        .map(|i| {
            let is_thing = i < config.thing_classes;
            let raw: Vec<f64> = (0..config.clip_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = math::sqrt(raw.iter().map(|v| v * v).sum());
            let embedding = raw.iter().map(|v| (v / norm) as f32 as f64).collect();
            let name = if is_thing { format!("thing{i}") } else { format!("stuff{}", i - config.thing_classes) };
            ClassEntry {
                id: i as u32,
                name,
                is_thing,
                held_out: config.held_out.contains(&(i as u32)),
                embedding,
                color: colors[i],
            }
        })
        .collect();
    ClassTable { entries }
}

/// Splits `instance` into `k` disjoint non-empty parts: pixels go to the
/// nearest of `k` distinct seed pixels drawn inside the mask (ties to the
/// lower seed index).
pub fn oversegment(instance: &BinaryMask, k: usize, seed: u64) -> Result<Vec<BinaryMask>, SynthError> {
    let area = instance.area();
    if k == 0 || k as u64 > area {
        return Err(SynthError::TooManyParts { parts: k, area });
    }
    if k == 1 {
        return Ok(vec![instance.clone()]);
    }
    let w = instance.width();
    let mut pixels: Vec<u32> = instance.pixel_indices().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = pixels.partial_shuffle(&mut rng, k);
    let seeds: Vec<(i64, i64)> = chosen.iter().map(|&p| ((p % w) as i64, (p / w) as i64)).collect();
    let mut parts: Vec<Vec<(u32, u32)>> = vec![Vec::new(); k];
    pixels.sort_unstable();
    for p in pixels {
        let (x, y) = ((p % w) as i64, (p / w) as i64);
        let mut best = 0;
        let mut best_d = i64::MAX;
        for (i, &(sx, sy)) in seeds.iter().enumerate() {
            let d = (x - sx) * (x - sx) + (y - sy) * (y - sy);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        parts[best].push((p, 1));
    }
    Ok(parts
        .into_iter()
        .map(|runs| BinaryMask::from_runs_normalized(w, instance.height(), runs))
        .collect())
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    LShape,
}

fn paint_shape(width: u32, height: u32, bx: BBox, shape: Shape, corner: u8) -> BinaryMask {
    let (bw, bh) = (bx.width() as f64, bx.height() as f64);
    BinaryMask::from_fn(width, height, |x, y| {
        if x < bx.x0 || x >= bx.x1 || y < bx.y0 || y >= bx.y1 {
            return false;
        }
        let (u, v) = ((x - bx.x0) as f64 + 0.5, (y - bx.y0) as f64 + 0.5);
        match shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let (dx, dy) = ((u - bw / 2.0) / (bw / 2.0), (v - bh / 2.0) / (bh / 2.0));
                dx * dx + dy * dy <= 1.0
            }
            Shape::LShape => {
                // remove one quadrant of the box
                let right = u >= bw / 2.0;
                let bottom = v >= bh / 2.0;
                let cut = match corner % 4 {
                    0 => right && !bottom,
                    1 => right && bottom,
                    2 => !right && bottom,
                    _ => !right && !bottom,
                };
                !cut
            }
        }
    })
}

fn dilate(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let dense = mask.to_dense();
    BinaryMask::from_fn(w, h, |x, y| {
        let (x, y) = (x as i64, y as i64);
        (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                let (nx, ny) = (x + dx, y + dy);
                nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 && dense[(ny * w as i64 + nx) as usize]
            })
        })
    })
}

/// Generates one scene from the classes available to `split`.
pub fn generate_scene(
    config: &CorpusConfig,
    classes: &ClassTable,
    split: Split,
    seed: u64,
) -> Result<Scene, SynthError> {
    let (w, h) = (config.width, config.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let allowed = |e: &&ClassEntry| split == Split::Eval || !e.held_out;
    let things: Vec<u32> = classes.entries.iter().filter(|e| e.is_thing).filter(allowed).map(|e| e.id).collect();
    let stuff: Vec<u32> = classes.entries.iter().filter(|e| !e.is_thing).filter(allowed).map(|e| e.id).collect();
    if stuff.is_empty() {
        return Err(SynthError::InvalidConfig("no stuff class available"));
    }

    // stuff layout: one region, or two split by an axis-aligned line
    let two = stuff.len() >= 2 && rng.random_bool(0.5);
    let mut stuff_regions: Vec<(u32, BinaryMask)> = Vec::new();
    if two {
        let mut pick = stuff.clone();
        pick.shuffle(&mut rng);
        let vertical = rng.random_bool(0.5);
        let extent = if vertical { w } else { h };
        let cut = rng.random_range(extent * 3 / 10..=extent * 7 / 10).max(1);
        let first = BinaryMask::from_fn(w, h, |x, y| if vertical { x < cut } else { y < cut });
        let second = BinaryMask::full(w, h).difference(&first)?;
        stuff_regions.push((pick[0], first));
        stuff_regions.push((pick[1], second));
    } else {
        let c = stuff[rng.random_range(0..stuff.len())];
        stuff_regions.push((c, BinaryMask::full(w, h)));
    }

    let count = if things.is_empty() { 0 } else { rng.random_range(config.instances_min..=config.instances_max) };
    let mut gt: Vec<GtInstance> = Vec::new();
    let mut occupied = BinaryMask::empty(w, h);
    let mut attempts = 0;
    while gt.len() < count {
        attempts += 1;
        if attempts > config.max_retries * count.max(1) {
            return Err(SynthError::InfeasibleLayout(attempts - 1));
        }
        let bw = rng.random_range(config.thing_size_min..=config.thing_size_max);
        let bh = rng.random_range(config.thing_size_min..=config.thing_size_max);
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(0..=h - bh);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Rect,
            1 => Shape::Ellipse,
            _ => Shape::LShape,
        };
        let corner: u8 = rng.random_range(0..4);
        let class_id = things[rng.random_range(0..things.len())];
        let bx = BBox::new(x0, y0, x0 + bw, y0 + bh)?;
        let m = paint_shape(w, h, bx, shape, corner);
        // keep a one-pixel gap between things
        if m.is_empty() || dilate(&m).intersection_area(&occupied)? > 0 {
            continue;
        }
        occupied = occupied.union(&m)?;
        gt.push(GtInstance { mask: m, class_id, is_thing: true });
    }
    for (class_id, region) in stuff_regions {
        let m = region.difference(&occupied)?;
        if !m.is_empty() {
            gt.push(GtInstance { mask: m, class_id, is_thing: false });
        }
    }

    let mut patches = Vec::new();
    for g in &gt {
        let k = rng.random_range(config.overseg_min..=config.overseg_max).min(g.mask.area() as usize);
        patches.extend(oversegment(&g.mask, k, rng.random())?);
    }
    patches.shuffle(&mut rng);

    let mut image = vec![0f32; (w * h * 3) as usize];
    let mut clip_field = vec![0f32; (w * h) as usize * config.clip_dim];
    for g in &gt {
        let entry = &classes.entries[g.class_id as usize];
        let tint: [f64; 3] = core::array::from_fn(|_| {
            if config.tint > 0.0 {
                rng.random_range(-config.tint..=config.tint)
            } else {
                0.0
            }
        });
        for p in g.mask.pixel_indices() {
            for c in 0..3 {
                let noise = if config.noise > 0.0 { config.noise * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                image[p as usize * 3 + c] = (entry.color[c] + tint[c] + noise) as f32;
            }
            let base = p as usize * config.clip_dim;
            for (d, &e) in entry.embedding.iter().enumerate() {
                let noise = if config.clip_noise > 0.0 {
                    config.clip_noise * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                clip_field[base + d] = (e + noise) as f32;
            }
        }
    }

    let scene = Scene { width: w, height: h, image, patches, gt, clip_dim: config.clip_dim, clip_field, seed };
    Ok(corrupt_patches(scene, &config.corruption))
}

/// Builds the class table and both splits; a pure function of `(config, seed)`.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus, SynthError> {
    config.validate()?;
    let classes = make_class_table(config, seed);
    let gen = |split, n: usize| -> Result<Vec<Scene>, SynthError> {
        (0..n).map(|i| generate_scene(config, &classes, split, scene_seed(seed, split, i))).collect()
    };
    let train = gen(Split::Train, config.train_scenes)?;
    let eval = gen(Split::Eval, config.eval_scenes)?;
    Ok(Corpus { width: config.width, height: config.height, classes, train, eval })
}

fn owner_of(patch: &BinaryMask, gt: &[GtInstance]) -> Option<usize> {
    let mut best: Option<(usize, u64)> = None;
    for (i, g) in gt.iter().enumerate() {
        let a = patch.intersection_area(&g.mask).unwrap_or(0);
        if a > 0 && best.is_none_or(|(_, b)| a > b) {
            best = Some((i, a));
        }
    }
    best.map(|(i, _)| i)
}

fn shift(mask: &BinaryMask, dx: i64, dy: i64) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    BinaryMask::from_fn(w, h, |x, y| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        sx >= 0 && sy >= 0 && mask.contains(sx as u32, sy as u32)
    })
}

/// Applies proposal corruption: dropping, cross-instance merging and boundary
/// jitter. Randomness derives from the scene seed, so the result is
/// deterministic. All-zero rates return the scene unchanged.
pub fn corrupt_patches(mut scene: Scene, config: &CorruptionConfig) -> Scene {
    if config.is_identity() {
        return scene;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.seed, 0xC0_4407));
    let owners: Vec<Option<usize>> = scene.patches.iter().map(|p| owner_of(p, &scene.gt)).collect();

    let mut keep = Vec::with_capacity(scene.patches.len());
    for (p, owner) in scene.patches.drain(..).zip(owners) {
        let class = owner.map(|o| scene.gt[o].class_id);
        let rate = class
            .and_then(|c| config.class_drop.iter().find(|(cid, _)| *cid == c).map(|&(_, r)| r))
            .unwrap_or(config.drop_rate);
        let u: f64 = rng.random();
        if u >= rate {
            keep.push((p, owner));
        }
    }

    if config.merge_rate > 0.0 {
        let mut merged: Vec<(BinaryMask, Option<usize>)> = Vec::new();
        let mut used = vec![false; keep.len()];
        for i in 0..keep.len() {
            if used[i] {
                continue;
            }
            used[i] = true;
            let mut m = keep[i].0.clone();
            let grown = dilate(&m);
            for j in i + 1..keep.len() {
                if used[j] || keep[j].1 == keep[i].1 {
                    continue;
                }
                let touching = grown.intersection_area(&keep[j].0).unwrap_or(0) > 0;
                if touching && rng.random::<f64>() < config.merge_rate {
                    m = m.union(&keep[j].0).expect("same scene");
                    used[j] = true;
                    break;
                }
            }
            merged.push((m, keep[i].1));
        }
        keep = merged;
    }

    if config.jitter_rate > 0.0 {
        for (p, _) in keep.iter_mut() {
            if rng.random::<f64>() < config.jitter_rate {
                let (dx, dy) = loop {
                    let d = (rng.random_range(-1i64..=1), rng.random_range(-1i64..=1));
                    if d != (0, 0) {
                        break d;
                    }
                };
                let moved = shift(p, dx, dy);
                if !moved.is_empty() {
                    *p = moved;
                }
            }
        }
    }
    scene.patches = keep.into_iter().map(|(p, _)| p).collect();
    scene
}
