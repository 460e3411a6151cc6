//! Clip manifests, frame loading, and segment-based frame sampling.
//!
//! On disk a dataset is a JSON-lines manifest (one header line followed by one
//! line per clip) next to per-clip directories of zero-padded PNG frames
//! (`frame_000042.png`). Paths inside the manifest are relative to the
//! manifest's directory; in memory they are resolved against it.

mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use synthetic::{generate_synthetic, SyntheticDataset, SyntheticSpec, SYNTHETIC_CLASSES};

use crate::error::{ensure, Error, Result};
use crate::frames::{FrameStack, Rect};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

/// One pre-trimmed clip and its group-activity label(s).
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Directory holding the frames, resolved against the manifest directory.
    pub frame_dir: PathBuf,
    pub num_frames: usize,
    pub fps: f64,
    pub labels: BTreeSet<usize>,
    /// Optional per-frame actor boxes in pixels.
    pub boxes: Option<BTreeMap<usize, Vec<Rect>>>,
}

impl ClipRecord {
    pub fn frame_path(&self, index: usize) -> PathBuf {
        self.frame_dir.join(frame_file_name(index))
    }

    /// The single label of a single-label record (the smallest id otherwise).
    pub fn primary_label(&self) -> usize {
        *self
            .labels
            .iter()
            .next()
            .expect("labels are validated non-empty")
    }

    pub fn boxes_at(&self, frame: usize) -> Option<&[Rect]> {
        self.boxes
            .as_ref()
            .and_then(|b| b.get(&frame))
            .map(|v| v.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dataset_name: String,
    pub label_names: Vec<String>,
    pub multi_label: bool,
    pub records: Vec<ClipRecord>,
    /// Label-id to merged-label-id map used by merged accuracy.
    pub merge_map: Option<BTreeMap<usize, usize>>,
    /// Directory the manifest was read from or written to.
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    dataset_name: String,
    label_names: Vec<String>,
    multi_label: bool,
    #[serde(default)]
    merge_map: Option<BTreeMap<usize, usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    clip_id: String,
    frame_dir: PathBuf,
    num_frames: usize,
    fps: f64,
    labels: Vec<usize>,
    #[serde(default)]
    boxes: Option<BTreeMap<usize, Vec<[f64; 4]>>>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn find(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.records.iter().find(|r| r.clip_id == clip_id)
    }

    /// Checks every record against the manifest invariants, touching the
    /// filesystem to confirm frame files exist.
    pub fn validate(&self) -> Result<()> {
        let n_labels = self.label_names.len();
        ensure!(n_labels > 0, Validation, "manifest declares no labels");
        if let Some(map) = &self.merge_map {
            for id in 0..n_labels {
                ensure!(
                    map.contains_key(&id),
                    Validation,
                    "merge_map has no entry for label {id} ({})",
                    self.label_names[id]
                );
            }
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            let ctx = |msg: String| Error::Validation(format!("clip '{}': {msg}", r.clip_id));
            if !seen.insert(r.clip_id.as_str()) {
                return Err(ctx("duplicate clip_id".into()));
            }
            if r.labels.is_empty() {
                return Err(ctx("labels must be non-empty".into()));
            }
            if !self.multi_label && r.labels.len() != 1 {
                return Err(ctx(format!(
                    "single-label manifest but record has {} labels",
                    r.labels.len()
                )));
            }
            if let Some(&bad) = r.labels.iter().find(|&&l| l >= n_labels) {
                return Err(ctx(format!(
                    "label id {bad} out of range for {n_labels} labels"
                )));
            }
            if r.num_frames == 0 {
                return Err(ctx("num_frames must be >= 1".into()));
            }
            if !(r.fps > 0.0 && r.fps.is_finite()) {
                return Err(ctx(format!("fps must be positive, got {}", r.fps)));
            }
            let on_disk = count_frame_files(&r.frame_dir)?;
            if on_disk != r.num_frames {
                return Err(ctx(format!(
                    "num_frames is {} but {} frame files found in {}",
                    r.num_frames,
                    on_disk,
                    r.frame_dir.display()
                )));
            }
            for i in 0..r.num_frames {
                let p = r.frame_path(i);
                if !p.is_file() {
                    return Err(ctx(format!("missing frame file {}", p.display())));
                }
            }
            if let Some(boxes) = &r.boxes {
                let (w, h) =
                    image::image_dimensions(r.frame_path(0)).map_err(|e| Error::Decode {
                        path: r.frame_path(0),
                        message: e.to_string(),
                    })?;
                for (&frame, list) in boxes {
                    if frame >= r.num_frames {
                        return Err(ctx(format!("boxes reference frame {frame} out of range")));
                    }
                    for b in list {
                        if !(b.w > 0.0 && b.h > 0.0) || !b.inside(w as f64, h as f64) {
                            return Err(ctx(format!(
                                "malformed box ({}, {}, {}, {}) on frame {frame} for {w}x{h} frames",
                                b.x, b.y, b.w, b.h
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the manifest as JSON lines, with frame paths made relative to
    /// the directory containing `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let root = path.parent().unwrap_or(Path::new("."));
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = HeaderLine {
            dataset_name: self.dataset_name.clone(),
            label_names: self.label_names.clone(),
            multi_label: self.multi_label,
            merge_map: self.merge_map.clone(),
        };
        let mut lines = vec![serde_json::to_string(&header).expect("header serializes")];
        for r in &self.records {
            let rel = r
                .frame_dir
                .strip_prefix(root)
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| r.frame_dir.clone());
            let line = RecordLine {
                clip_id: r.clip_id.clone(),
                frame_dir: rel,
                num_frames: r.num_frames,
                fps: r.fps,
                labels: r.labels.iter().copied().collect(),
                boxes: r.boxes.as_ref().map(|b| {
                    b.iter()
                        .map(|(&k, v)| (k, v.iter().map(|r| [r.x, r.y, r.w, r.h]).collect()))
                        .collect()
                }),
            };
            lines.push(serde_json::to_string(&line).expect("record serializes"));
        }
        for l in lines {
            writeln!(out, "{l}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

fn count_frame_files(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("frame_") && name.ends_with(".png") {
            n += 1;
        }
    }
    Ok(n)
}

/// Reads and eagerly validates a JSON-lines manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
        what: format!("{} line {}", path.display(), line + 1),
        message: e.to_string(),
    };
    let mut lines = BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Validation(format!("{} is empty", path.display())))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let header: HeaderLine = serde_json::from_str(&header).map_err(|e| parse_err(0, e))?;
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| parse_err(i, e))?;
        let boxes = rec.boxes.map(|b| {
            b.into_iter()
                .map(|(k, v)| (k, v.into_iter().map(Rect::from_array).collect()))
                .collect()
        });
        records.push(ClipRecord {
            clip_id: rec.clip_id,
            frame_dir: root.join(rec.frame_dir),
            num_frames: rec.num_frames,
            fps: rec.fps,
            labels: rec.labels.into_iter().collect(),
            boxes,
        });
    }
    let manifest = Manifest {
        dataset_name: header.dataset_name,
        label_names: header.label_names,
        multi_label: header.multi_label,
        records,
        merge_map: header.merge_map,
        root,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Decodes the requested frames of a clip, in index order, into `[0, 1]` RGB.
pub fn load_clip(record: &ClipRecord, indices: &[usize]) -> Result<FrameStack> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= record.num_frames) {
        return Err(Error::Precondition(format!(
            "frame index {bad} out of range for clip '{}' with {} frames",
            record.clip_id, record.num_frames
        )));
    }
    let mut stack: Option<FrameStack> = None;
    let mut decoded: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &i in indices {
        if decoded.contains_key(&i) {
            continue;
        }
        let path = record.frame_path(i);
        let img = image::open(&path)
            .map_err(|e| Error::Decode {
                path: path.clone(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        match &stack {
            None => stack = Some(FrameStack::zeros(0, h, w)),
            Some(s) if s.width != w || s.height != h => {
                return Err(Error::Decode {
                    path,
                    message: format!("frame is {w}x{h}, expected {}x{}", s.width, s.height),
                })
            }
            _ => {}
        }
        decoded.insert(i, img.as_raw().iter().map(|&b| b as f64 / 255.0).collect());
    }
    let mut stack = stack.unwrap_or_else(|| FrameStack::zeros(0, 0, 0));
    stack.frames = indices.len();
    stack.data = Vec::with_capacity(indices.len() * stack.frame_len());
    for i in indices {
        stack.data.extend_from_slice(&decoded[i]);
    }
    Ok(stack)
}

/// Loads every frame of a clip.
pub fn load_full_clip(record: &ClipRecord) -> Result<FrameStack> {
    let all: Vec<usize> = (0..record.num_frames).collect();
    load_clip(record, &all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Train,
    Eval,
}

/// Evaluation-mode segment sampling: the center frame of each of `k` equal
/// segments.
pub fn segment_centers(num_frames: usize, k: usize) -> Vec<usize> {
    assert!(
        k >= 1 && num_frames >= 1,
        "segment_centers needs k >= 1 and num_frames >= 1"
    );
    let (t, k) = (num_frames as u64, k as u64);
    (0..k)
        .map(|i| (((2 * i + 1) * t) / (2 * k)) as usize)
        .collect()
}

/// Segment-based sampling: split `[0, num_frames)` into `k` equal segments and
/// take one index per segment, uniformly at random in training and the
/// segment center in evaluation. When a segment holds no whole frame (clip
/// shorter than `k`) its rounded center is used, so frames repeat.
pub fn segment_sample<R: Rng + ?Sized>(
    num_frames: usize,
    k: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Vec<usize> {
    assert!(
        k >= 1 && num_frames >= 1,
        "segment_sample needs k >= 1 and num_frames >= 1"
    );
    let (t, k) = (num_frames as u64, k as u64);
    (0..k)
        .map(|i| {
            let center = ((2 * i + 1) * t) / (2 * k);
            let idx = match mode {
                SampleMode::Eval => center,
                SampleMode::Train => {
                    let lo = (i * t).div_ceil(k);
                    let hi = ((i + 1) * t).div_ceil(k);
                    if hi > lo {
                        rng.random_range(lo..hi)
                    } else {
                        center
                    }
                }
            };
            idx as usize
        })
        .collect()
}
