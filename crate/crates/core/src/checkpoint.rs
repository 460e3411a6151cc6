//! Binary checkpoints with a JSON sidecar.
//!
//! Layout: the magic `VDCK`, a little-endian `u64` header length, a JSON
//! header listing `(name, shape)` of every tensor, then each tensor's `f64`
//! values little-endian in header order. The sidecar `<path>.json` records
//! the backbone config, step, seed and rng state.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, EncoderParams};
use crate::distill::{DistillState, Student, Teacher};
use crate::error::{Error, Result};
use crate::optim::AdamW;

const MAGIC: &[u8; 4] = b"VDCK";
pub const FORMAT_VERSION: u32 = 1;

/// The rng of step `s` is ChaCha8 seeded with `seed` on stream `s`, so the
/// step counter fully determines it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub backbone: BackboneConfig,
    pub step: u64,
    pub seed: u64,
    pub rng: RngState,
    pub adam_steps: u64,
    pub config_hash: String,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub distill: DistillState,
    pub adam: AdamW,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn tensors_of(state: &TrainState) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out = Vec::new();
    let prefixed = |prefix: &str, p: &EncoderParams| -> Vec<(String, Vec<usize>, usize, usize)> {
        p.layout()
            .entries()
            .iter()
            .map(|(n, s)| {
                let shape = if s.rows == 1 {
                    vec![s.cols]
                } else {
                    vec![s.rows, s.cols]
                };
                (format!("{prefix}/{n}"), shape, s.offset, s.len())
            })
            .collect()
    };
    let d = &state.distill;
    for (n, shape, off, len) in prefixed("teacher", d.teacher.params()) {
        out.push((n, shape, &d.teacher.values[off..off + len]));
    }
    for (n, shape, off, len) in prefixed("student", &d.student) {
        out.push((n, shape, &d.student.values[off..off + len]));
    }
    out.push(("center".into(), vec![d.center.len()], &d.center[..]));
    for (n, shape, off, len) in prefixed("adam_m", &d.student) {
        out.push((n, shape, &state.adam.m[off..off + len]));
    }
    for (n, shape, off, len) in prefixed("adam_v", &d.student) {
        out.push((n, shape, &state.adam.v[off..off + len]));
    }
    out
}

pub fn save_checkpoint(state: &TrainState, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tensors = tensors_of(state);
    let header = Header {
        tensors: tensors
            .iter()
            .map(|(n, s, _)| (n.clone(), s.clone()))
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let total: usize = tensors.iter().map(|(_, _, d)| d.len()).sum();
    let mut bytes = Vec::with_capacity(12 + header.len() + total * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, _, data) in &tensors {
        for v in *data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// Tensor name to (shape, values).
pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

/// Reads every named tensor of a checkpoint file.
pub fn read_tensors(path: &Path) -> Result<TensorMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Parse {
        what: path.display().to_string(),
        message: m.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| bad(&e.to_string()))?;
    let mut pos = body;
    let mut out = BTreeMap::new();
    for (name, shape) in header.tensors {
        let len: usize = shape.iter().product();
        let end = pos + len * 8;
        if end > bytes.len() {
            return Err(bad("truncated tensor data"));
        }
        let data = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos = end;
        out.insert(name, (shape, data));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(out)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: side.display().to_string(),
        message: e.to_string(),
    })
}

fn take_group(
    tensors: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    prefix: &str,
) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
    let keys: Vec<String> = tensors
        .keys()
        .filter(|k| k.starts_with(prefix))
        .cloned()
        .collect();
    keys.into_iter()
        .map(|k| {
            let v = tensors.remove(&k).expect("key exists");
            (k[prefix.len()..].to_string(), v)
        })
        .collect()
}

/// Loads a checkpoint; when `expected` is given its backbone must match the
/// one recorded in the sidecar.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&BackboneConfig>,
) -> Result<(TrainState, CheckpointMeta)> {
    let meta = read_meta(path)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    if let Some(cfg) = expected {
        if *cfg != meta.backbone {
            return Err(Error::Validation(format!(
                "checkpoint backbone {:?} does not match configured backbone {:?}",
                meta.backbone, cfg
            )));
        }
    }
    let mut tensors = read_tensors(path)?;
    let cfg = &meta.backbone;
    let teacher = EncoderParams::from_named(cfg, &take_group(&mut tensors, "teacher/"))?;
    let student = EncoderParams::from_named(cfg, &take_group(&mut tensors, "student/"))?;
    let m = EncoderParams::from_named(cfg, &take_group(&mut tensors, "adam_m/"))?;
    let v = EncoderParams::from_named(cfg, &take_group(&mut tensors, "adam_v/"))?;
    let (shape, center) = tensors
        .remove("center")
        .ok_or_else(|| Error::Shape("checkpoint is missing the center vector".into()))?;
    if shape != [cfg.proj_output_dim] {
        return Err(Error::Shape(format!(
            "center has shape {shape:?}, expected [{}]",
            cfg.proj_output_dim
        )));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Shape(format!(
            "checkpoint has unexpected tensor {extra}"
        )));
    }
    let state = TrainState {
        distill: DistillState {
            teacher: Teacher::from_params(teacher),
            student: Student(student),
            center,
            step: meta.step,
        },
        adam: AdamW::from_moments(m.values, v.values, meta.adam_steps),
    };
    Ok((state, meta))
}

/// Teacher parameters of a checkpoint, for feature extraction.
pub fn load_teacher(path: &Path) -> Result<EncoderParams> {
    let meta = read_meta(path)?;
    let mut tensors = read_tensors(path)?;
    EncoderParams::from_named(&meta.backbone, &take_group(&mut tensors, "teacher/"))
}
