//! Binary corpus and checkpoint files.
//!
//! Both start with an 8-byte magic and a version byte, followed by a
//! length-prefixed JSON header and a little-endian body.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use patchmerge_core::autodiff::{Matrix, ParameterStore};
use patchmerge_core::model::{Model, ModelConfig};
use patchmerge_core::synth::{ClassTable, Corpus, CorpusConfig, GtInstance, Scene};
use patchmerge_core::BinaryMask;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 8] = b"PMCORPUS";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PMCKPT\0\0";
pub const VERSION: u8 = 1;

fn data_err(e: std::io::Error) -> Error {
    Error::Data(format!("truncated or unreadable file: {e}"))
}

fn write_header<W: Write, T: Serialize>(w: &mut W, magic: &[u8; 8], header: &T) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_u8(VERSION)?;
    let json = serde_json::to_vec(header).expect("headers always serialize");
    w.write_u32::<LE>(json.len() as u32)?;
    w.write_all(&json)
}

fn read_header<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R, magic: &[u8; 8], what: &str) -> Result<T> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(data_err)?;
    if &m != magic {
        return Err(Error::Data(format!("not a {what} file")));
    }
    let v = r.read_u8().map_err(data_err)?;
    if v != VERSION {
        return Err(Error::Data(format!("unsupported {what} version {v} (expected {VERSION})")));
    }
    let len = r.read_u32::<LE>().map_err(data_err)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(data_err)?;
    serde_json::from_slice(&json).map_err(|e| Error::Data(format!("bad {what} header: {e}")))
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    seed: u64,
    config: CorpusConfig,
    classes: ClassTable,
    width: u32,
    height: u32,
    train: u32,
    eval: u32,
}

/// A generated corpus together with what produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusFile {
    pub seed: u64,
    pub config: CorpusConfig,
    pub corpus: Corpus,
}

fn write_f32s<W: Write>(w: &mut W, v: &[f32]) -> std::io::Result<()> {
    w.write_u32::<LE>(v.len() as u32)?;
    v.iter().try_for_each(|&x| w.write_f32::<LE>(x))
}

fn read_f32s<R: Read>(r: &mut R) -> std::io::Result<Vec<f32>> {
    let n = r.read_u32::<LE>()? as usize;
    let mut v = vec![0f32; n];
    r.read_f32_into::<LE>(&mut v)?;
    Ok(v)
}

fn write_mask<W: Write>(w: &mut W, m: &BinaryMask) -> std::io::Result<()> {
    w.write_u32::<LE>(m.runs().len() as u32)?;
    for &(s, l) in m.runs() {
        w.write_u32::<LE>(s)?;
        w.write_u32::<LE>(l)?;
    }
    Ok(())
}

fn read_mask<R: Read>(r: &mut R, width: u32, height: u32) -> Result<BinaryMask> {
    let n = r.read_u32::<LE>().map_err(data_err)? as usize;
    let mut runs = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let s = r.read_u32::<LE>().map_err(data_err)?;
        let l = r.read_u32::<LE>().map_err(data_err)?;
        runs.push((s, l));
    }
    Ok(BinaryMask::from_runs(width, height, runs)?)
}

fn write_scene<W: Write>(w: &mut W, s: &Scene) -> std::io::Result<()> {
    w.write_u64::<LE>(s.seed)?;
    w.write_u32::<LE>(s.clip_dim as u32)?;
    write_f32s(w, &s.image)?;
    write_f32s(w, &s.clip_field)?;
    w.write_u32::<LE>(s.patches.len() as u32)?;
    s.patches.iter().try_for_each(|p| write_mask(w, p))?;
    w.write_u32::<LE>(s.gt.len() as u32)?;
    for g in &s.gt {
        w.write_u32::<LE>(g.class_id)?;
        w.write_u8(g.is_thing as u8)?;
        write_mask(w, &g.mask)?;
    }
    Ok(())
}

fn read_scene<R: Read>(r: &mut R, width: u32, height: u32) -> Result<Scene> {
    let seed = r.read_u64::<LE>().map_err(data_err)?;
    let clip_dim = r.read_u32::<LE>().map_err(data_err)? as usize;
    let image = read_f32s(r).map_err(data_err)?;
    let clip_field = read_f32s(r).map_err(data_err)?;
    let pixels = (width * height) as usize;
    if image.len() != pixels * 3 || clip_field.len() != pixels * clip_dim {
        return Err(Error::Data("scene arrays do not match the image size".into()));
    }
    let np = r.read_u32::<LE>().map_err(data_err)?;
    let patches = (0..np).map(|_| read_mask(r, width, height)).collect::<Result<Vec<_>>>()?;
    let ng = r.read_u32::<LE>().map_err(data_err)?;
    let mut gt = Vec::with_capacity(ng as usize);
    for _ in 0..ng {
        let class_id = r.read_u32::<LE>().map_err(data_err)?;
        let is_thing = r.read_u8().map_err(data_err)? != 0;
        gt.push(GtInstance { mask: read_mask(r, width, height)?, class_id, is_thing });
    }
    Ok(Scene { width, height, image, patches, gt, clip_dim, clip_field, seed })
}

impl CorpusFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.corpus;
        let header = CorpusHeader {
            seed: self.seed,
            config: self.config.clone(),
            classes: c.classes.clone(),
            width: c.width,
            height: c.height,
            train: c.train.len() as u32,
            eval: c.eval.len() as u32,
        };
        let mut out = Vec::new();
        write_header(&mut out, CORPUS_MAGIC, &header).expect("writing to memory");
        for s in c.train.iter().chain(&c.eval) {
            write_scene(&mut out, s).expect("writing to memory");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let h: CorpusHeader = read_header(&mut r, CORPUS_MAGIC, "corpus")?;
        h.classes.validate()?;
        let train = (0..h.train).map(|_| read_scene(&mut r, h.width, h.height)).collect::<Result<Vec<_>>>()?;
        let eval = (0..h.eval).map(|_| read_scene(&mut r, h.width, h.height)).collect::<Result<Vec<_>>>()?;
        if !r.is_empty() {
            return Err(Error::Data("trailing bytes after corpus".into()));
        }
        let corpus = Corpus { width: h.width, height: h.height, classes: h.classes, train, eval };
        Ok(Self { seed: h.seed, config: h.config, corpus })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    text_dim: usize,
    /// Class ids the model was trained on, in query order.
    vocabulary: Vec<u32>,
    parameters: u32,
}

/// Trained parameters plus the configuration needed to rebuild the model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub text_dim: usize,
    pub vocabulary: Vec<u32>,
    pub store: ParameterStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            model: self.model_config.clone(),
            text_dim: self.text_dim,
            vocabulary: self.vocabulary.clone(),
            parameters: self.store.len() as u32,
        };
        let mut out = Vec::new();
        write_header(&mut out, CHECKPOINT_MAGIC, &header).expect("writing to memory");
        for (_, name, m) in self.store.iter() {
            out.write_u32::<LE>(name.len() as u32).unwrap();
            out.write_all(name.as_bytes()).unwrap();
            out.write_u32::<LE>(m.rows as u32).unwrap();
            out.write_u32::<LE>(m.cols as u32).unwrap();
            for &v in &m.data {
                out.write_f64::<LE>(v).unwrap();
            }
        }
        out
    }

    /// Parses a checkpoint and rebuilds the model it belongs to.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Model)> {
        let mut r = bytes;
        let h: CheckpointHeader = read_header(&mut r, CHECKPOINT_MAGIC, "checkpoint")?;
        let mut store = ParameterStore::new();
        let model = Model::new(&h.model, h.text_dim, 0, &mut store)?;
        if store.len() != h.parameters as usize {
            return Err(Error::Data("checkpoint parameter count differs from its model".into()));
        }
        for _ in 0..h.parameters {
            let len = r.read_u32::<LE>().map_err(data_err)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(data_err)?;
            let name = String::from_utf8(name).map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
            let rows = r.read_u32::<LE>().map_err(data_err)? as usize;
            let cols = r.read_u32::<LE>().map_err(data_err)? as usize;
            let mut data = vec![0f64; rows * cols];
            r.read_f64_into::<LE>(&mut data).map_err(data_err)?;
            store
                .set(&name, Matrix { rows, cols, data })
                .map_err(|e| Error::Data(format!("checkpoint parameter {name}: {e}")))?;
        }
        if !r.is_empty() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        let ckpt = Self { model_config: h.model, text_dim: h.text_dim, vocabulary: h.vocabulary, store };
        Ok((ckpt, model))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Model)> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
