//! On-disk checkpoint: a directory holding a TOML `manifest` and a single
//! `tensors.bin` whose header indexes every tensor by name.
//!
//! `tensors.bin` layout: magic `RLMT`, u64 LE index length, JSON index of
//! `{name, dtype, shape, offset}` entries, then little-endian f32 data
//! (offsets in bytes from the start of the data section).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Layout, ModelParams};
use crate::numcodec::P10Config;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RLMT";
const MANIFEST: &str = "manifest";
const TENSORS: &str = "tensors.bin";
const RNG_BYTES: usize = 32 + 8 + 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub params: ModelParams,
    pub p10: P10Config,
    pub optimizer: AdamState,
    pub step: u64,
    /// ChaCha8 seed, stream and word position of the batch sampler.
    pub rng_state: Vec<u8>,
    pub val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    /// Evaluations since the best validation loss last improved.
    pub stale_evals: usize,
    pub format_version: u32,
}

impl ModelCheckpoint {
    pub fn new(params: ModelParams, p10: P10Config, rng: ChaCha8Rng) -> Self {
        let n = params.data.len();
        let mut c = Self {
            params,
            p10,
            optimizer: AdamState::new(n),
            step: 0,
            rng_state: Vec::new(),
            val_loss: None,
            best_val_loss: None,
            stale_evals: 0,
            format_version: FORMAT_VERSION,
        };
        c.set_rng(&rng);
        c
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.params.arch
    }

    pub fn set_rng(&mut self, rng: &ChaCha8Rng) {
        let mut b = Vec::with_capacity(RNG_BYTES);
        b.extend_from_slice(&rng.get_seed());
        b.extend_from_slice(&rng.get_stream().to_le_bytes());
        b.extend_from_slice(&rng.get_word_pos().to_le_bytes());
        self.rng_state = b;
    }

    pub fn rng(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let b = &self.rng_state;
        if b.len() != RNG_BYTES {
            return Err(Error::Compatibility(format!("rng state has {} bytes, expected {RNG_BYTES}", b.len())));
        }
        let seed: [u8; 32] = b[..32].try_into().expect("length checked");
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(u64::from_le_bytes(b[32..40].try_into().expect("length checked")));
        rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().expect("length checked")));
        Ok(rng)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    val_loss: Option<f64>,
    best_val_loss: Option<f64>,
    stale_evals: usize,
    optimizer_updates: u64,
    rng_state: String,
    tensor_file: String,
    tensor_bytes: u64,
    crc32: u32,
    arch: ArchConfig,
    p10: P10Config,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

fn tensor_groups(c: &ModelCheckpoint) -> [(&'static str, &[f32]); 3] {
    [("param", &c.params.data), ("adam_m", &c.optimizer.m), ("adam_v", &c.optimizer.v)]
}

fn encode_tensors(c: &ModelCheckpoint) -> Result<Vec<u8>> {
    let mut index = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    for (group, buf) in tensor_groups(c) {
        for spec in &c.params.layout.specs {
            index.push(IndexEntry {
                name: format!("{group}/{}", spec.name),
                dtype: "f32".into(),
                shape: spec.shape.clone(),
                offset: data.len() as u64,
            });
            for v in &buf[spec.slot.range()] {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let index = serde_json::to_vec(&index)?;
    let mut out = Vec::with_capacity(12 + index.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Writes `ckpt` into directory `path`, replacing any previous content
/// atomically (temp directory then rename).
pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::io(p, e)
    };
    let tensors = encode_tensors(ckpt)?;
    let manifest = Manifest {
        format_version: ckpt.format_version,
        step: ckpt.step,
        val_loss: ckpt.val_loss,
        best_val_loss: ckpt.best_val_loss,
        stale_evals: ckpt.stale_evals,
        optimizer_updates: ckpt.optimizer.t,
        rng_state: hex::encode(&ckpt.rng_state),
        tensor_file: TENSORS.into(),
        tensor_bytes: tensors.len() as u64,
        crc32: crc32fast::hash(&tensors),
        arch: ckpt.params.arch.clone(),
        p10: ckpt.p10,
    };
    let manifest = toml::to_string(&manifest).map_err(|e| Error::Config(format!("manifest: {e}")))?;

    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io(parent))?;
    let name = path.file_name().ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?;
    let tmp = sibling(parent, name, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
    }
    fs::create_dir(&tmp).map_err(io(&tmp))?;
    for (file, bytes) in [(TENSORS, tensors.as_slice()), (MANIFEST, manifest.as_bytes())] {
        let p = tmp.join(file);
        let mut f = fs::File::create(&p).map_err(io(&p))?;
        f.write_all(bytes).map_err(io(&p))?;
        f.sync_all().map_err(io(&p))?;
    }
    if path.exists() {
        let old = sibling(parent, name, "old");
        if old.exists() {
            fs::remove_dir_all(&old).map_err(io(&old))?;
        }
        fs::rename(path, &old).map_err(io(path))?;
        fs::rename(&tmp, path).map_err(io(path))?;
        fs::remove_dir_all(&old).map_err(io(&old))?;
    } else {
        fs::rename(&tmp, path).map_err(io(path))?;
    }
    Ok(())
}

fn sibling(parent: &Path, name: &std::ffi::OsStr, tag: &str) -> PathBuf {
    parent.join(format!(".{}.{tag}-{}", name.to_string_lossy(), std::process::id()))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let corrupt = |msg: String| Error::Corrupt { path: path.to_path_buf(), msg };
    let mpath = path.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let raw: toml::Table = text.parse().map_err(|e| corrupt(format!("manifest: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(toml::Value::as_integer)
        .ok_or_else(|| corrupt("manifest lacks format_version".into()))?;
    if found != FORMAT_VERSION as i64 {
        return Err(Error::Version { found: found.clamp(0, u32::MAX as i64) as u32, expected: FORMAT_VERSION });
    }
    let m: Manifest = toml::from_str(&text).map_err(|e| corrupt(format!("manifest: {e}")))?;

    let tpath = path.join(&m.tensor_file);
    let bytes = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
    if bytes.len() as u64 != m.tensor_bytes || crc32fast::hash(&bytes) != m.crc32 {
        return Err(corrupt("tensor file size or checksum mismatch".into()));
    }
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad tensor file magic".into()));
    }
    let ilen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let index_end = 12usize.checked_add(ilen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("index overruns file".into()))?;
    let index: Vec<IndexEntry> =
        serde_json::from_slice(&bytes[12..index_end]).map_err(|e| corrupt(format!("tensor index: {e}")))?;
    let data = &bytes[index_end..];

    m.arch.validate()?;
    let layout = Layout::new(&m.arch);
    let n = layout.total;
    let mut bufs = [vec![0f32; n], vec![0f32; n], vec![0f32; n]];
    let mut seen = 0usize;
    for e in &index {
        let (group, name) =
            e.name.split_once('/').ok_or_else(|| corrupt(format!("tensor name {:?} has no group", e.name)))?;
        let g = ["param", "adam_m", "adam_v"]
            .iter()
            .position(|&x| x == group)
            .ok_or_else(|| corrupt(format!("unknown tensor group {group:?}")))?;
        let spec = layout
            .specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Compatibility(format!("tensor {name:?} not in architecture {}", m.arch.label())))?;
        if spec.shape != e.shape {
            return Err(Error::Compatibility(format!(
                "tensor {} has shape {:?}, architecture expects {:?}",
                e.name, e.shape, spec.shape
            )));
        }
        if e.dtype != "f32" {
            return Err(corrupt(format!("unsupported dtype {:?}", e.dtype)));
        }
        let start = e.offset as usize;
        let end = start + spec.slot.len * 4;
        if end > data.len() {
            return Err(corrupt(format!("tensor {} overruns data section", e.name)));
        }
        for (dst, chunk) in bufs[g][spec.slot.range()].iter_mut().zip(data[start..end].chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        seen += 1;
    }
    if seen != 3 * layout.specs.len() {
        return Err(corrupt(format!("expected {} tensors, found {seen}", 3 * layout.specs.len())));
    }
    let [p, mm, vv] = bufs;
    let params = ModelParams::from_data(m.arch, p)?;
    let rng_state = hex::decode(&m.rng_state).map_err(|e| corrupt(format!("rng_state: {e}")))?;
    Ok(ModelCheckpoint {
        params,
        p10: m.p10,
        optimizer: AdamState { m: mm, v: vv, t: m.optimizer_updates },
        step: m.step,
        rng_state,
        val_loss: m.val_loss,
        best_val_loss: m.best_val_loss,
        stale_evals: m.stale_evals,
        format_version: m.format_version,
    })
}
