//! Synthetic group-activity clips: a handful of discs whose joint motion
//! pattern, not their appearance, determines the class.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frame_file_name, ClipRecord, Manifest, MANIFEST_FILE};
use crate::error::{ensure, Error, Result};
use crate::frames::Rect;

pub const SYNTHETIC_CLASSES: [&str; 4] =
    ["converge", "disperse", "follow_leader", "counter_rotate"];

/// Smallest patch size the backbone supports.
const MIN_PATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub train_clips: usize,
    pub test_clips: usize,
    pub num_classes: usize,
    pub frames_per_clip: usize,
    pub frame_size: usize,
    pub min_actors: usize,
    pub max_actors: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_clips: 200,
            test_clips: 80,
            num_classes: 4,
            frames_per_clip: 16,
            frame_size: 64,
            min_actors: 2,
            max_actors: 6,
            fps: 25.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.train_clips >= 1 && self.test_clips >= 1,
            Validation,
            "clip counts must be >= 1"
        );
        ensure!(
            (1..=SYNTHETIC_CLASSES.len()).contains(&self.num_classes),
            Validation,
            "num_classes must be in 1..={}, got {}",
            SYNTHETIC_CLASSES.len(),
            self.num_classes
        );
        ensure!(
            self.frames_per_clip >= 1,
            Validation,
            "frames_per_clip must be >= 1"
        );
        ensure!(
            self.frame_size >= MIN_PATCH && self.frame_size.is_multiple_of(MIN_PATCH),
            Validation,
            "frame_size {} must be a positive multiple of {MIN_PATCH}",
            self.frame_size
        );
        ensure!(
            self.min_actors >= 1 && self.min_actors <= self.max_actors,
            Validation,
            "actor range {}..={} is invalid",
            self.min_actors,
            self.max_actors
        );
        ensure!(self.fps > 0.0, Validation, "fps must be positive");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Manifest,
    pub test: Manifest,
}

impl SyntheticDataset {
    pub fn train_manifest_path(out_dir: &Path) -> PathBuf {
        out_dir.join("train").join(MANIFEST_FILE)
    }

    pub fn test_manifest_path(out_dir: &Path) -> PathBuf {
        out_dir.join("test").join(MANIFEST_FILE)
    }
}

/// Renders the train and test splits under `out_dir/{train,test}` and writes
/// their manifests. Output is a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<SyntheticDataset> {
    spec.validate()?;
    let train = generate_split(spec, out_dir, "train", 0, spec.train_clips)?;
    let test = generate_split(spec, out_dir, "test", 1, spec.test_clips)?;
    Ok(SyntheticDataset { train, test })
}

fn generate_split(
    spec: &SyntheticSpec,
    out_dir: &Path,
    split: &str,
    split_id: u64,
    count: usize,
) -> Result<Manifest> {
    let root = out_dir.join(split);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % spec.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream((split_id << 32) | i as u64);
        let clip = render_clip(spec, class, &mut rng);
        let clip_id = format!("{split}_{i:05}");
        let dir = root.join(&clip_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, frame) in clip.frames.iter().enumerate() {
            let path = dir.join(frame_file_name(t));
            image::save_buffer_with_format(
                &path,
                frame,
                spec.frame_size as u32,
                spec.frame_size as u32,
                image::ExtendedColorType::Rgb8,
                image::ImageFormat::Png,
            )
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&path, io),
                other => Error::Decode {
                    path: path.clone(),
                    message: other.to_string(),
                },
            })?;
        }
        records.push(ClipRecord {
            clip_id,
            frame_dir: dir,
            num_frames: spec.frames_per_clip,
            fps: spec.fps,
            labels: BTreeSet::from([class]),
            boxes: Some(clip.boxes),
        });
    }
    let manifest = Manifest {
        dataset_name: format!("synthetic-{split}"),
        label_names: SYNTHETIC_CLASSES[..spec.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        multi_label: false,
        records,
        merge_map: None,
        root: root.clone(),
    };
    manifest.write(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

struct RenderedClip {
    frames: Vec<Vec<u8>>,
    boxes: BTreeMap<usize, Vec<Rect>>,
}

/// Actor centers for every frame, `positions[t][actor] = (x, y)`.
fn trajectories(
    class: usize,
    actors: usize,
    frames: usize,
    size: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<(f64, f64)>> {
    let cx = size / 2.0 + rng.random_range(-0.08..0.08) * size;
    let cy = size / 2.0 + rng.random_range(-0.08..0.08) * size;
    let base_angle = rng.random_range(0.0..2.0 * PI);
    let angles: Vec<f64> = (0..actors)
        .map(|k| base_angle + 2.0 * PI * k as f64 / actors as f64 + rng.random_range(-0.3..0.3))
        .collect();
    let u = |t: usize| {
        if frames > 1 {
            t as f64 / (frames - 1) as f64
        } else {
            0.0
        }
    };
    match class {
        // converge / disperse: radial motion along fixed bearings
        0 | 1 => {
            let far: Vec<f64> = (0..actors)
                .map(|_| rng.random_range(0.30..0.40) * size)
                .collect();
            let near: Vec<f64> = (0..actors)
                .map(|_| rng.random_range(0.04..0.10) * size)
                .collect();
            (0..frames)
                .map(|t| {
                    let s = u(t);
                    (0..actors)
                        .map(|k| {
                            let (r0, r1) = if class == 0 {
                                (far[k], near[k])
                            } else {
                                (near[k], far[k])
                            };
                            let r = r0 + (r1 - r0) * s;
                            (cx + r * angles[k].cos(), cy + r * angles[k].sin())
                        })
                        .collect()
                })
                .collect()
        }
        // follow the leader: a file of actors translating along one heading
        2 => {
            let heading = rng.random_range(0.0..2.0 * PI);
            let (dx, dy) = (heading.cos(), heading.sin());
            let travel = rng.random_range(0.30..0.40) * size;
            let spacing = rng.random_range(0.07..0.09) * size;
            let lateral: Vec<f64> = (0..actors)
                .map(|_| rng.random_range(-0.02..0.02) * size)
                .collect();
            (0..frames)
                .map(|t| {
                    let along = (u(t) - 0.5) * travel;
                    (0..actors)
                        .map(|k| {
                            let offset = ((actors as f64 - 1.0) / 2.0 - k as f64) * spacing + along;
                            (
                                cx + dx * offset - dy * lateral[k],
                                cy + dy * offset + dx * lateral[k],
                            )
                        })
                        .collect()
                })
                .collect()
        }
        // counter-rotation: alternate actors orbit the center in opposite senses
        _ => {
            let radii: Vec<f64> = (0..actors)
                .map(|_| rng.random_range(0.18..0.32) * size)
                .collect();
            let sweep = rng.random_range(0.6..1.0) * PI;
            (0..frames)
                .map(|t| {
                    let s = u(t);
                    (0..actors)
                        .map(|k| {
                            let dir = if k % 2 == 0 { 1.0 } else { -1.0 };
                            let a = angles[k] + dir * sweep * s;
                            (cx + radii[k] * a.cos(), cy + radii[k] * a.sin())
                        })
                        .collect()
                })
                .collect()
        }
    }
}

fn render_clip(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> RenderedClip {
    let size = spec.frame_size;
    let fsize = size as f64;
    let actors = rng.random_range(spec.min_actors..=spec.max_actors);
    let background: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.25));
    let colors: Vec<[f64; 3]> = (0..actors)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.55..1.0)))
        .collect();
    let radii: Vec<f64> = (0..actors)
        .map(|_| fsize / 16.0 * rng.random_range(0.8..1.2))
        .collect();
    let paths = trajectories(class, actors, spec.frames_per_clip, fsize, rng);

    let mut frames = Vec::with_capacity(spec.frames_per_clip);
    let mut boxes = BTreeMap::new();
    for (t, centers) in paths.iter().enumerate() {
        let mut px = vec![0u8; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let mut rgb = background;
                for (k, &(ax, ay)) in centers.iter().enumerate() {
                    let (ax, ay) = clamp_center(ax, ay, radii[k], fsize);
                    let (ddx, ddy) = (x as f64 + 0.5 - ax, y as f64 + 0.5 - ay);
                    if ddx * ddx + ddy * ddy <= radii[k] * radii[k] {
                        rgb = colors[k];
                    }
                }
                for c in 0..3 {
                    px[(y * size + x) * 3 + c] = (rgb[c] * 255.0).round() as u8;
                }
            }
        }
        frames.push(px);
        let frame_boxes = centers
            .iter()
            .enumerate()
            .map(|(k, &(ax, ay))| {
                let (ax, ay) = clamp_center(ax, ay, radii[k], fsize);
                Rect::new(ax - radii[k], ay - radii[k], 2.0 * radii[k], 2.0 * radii[k])
                    .clamp_to(fsize, fsize)
            })
            .collect();
        boxes.insert(t, frame_boxes);
    }
    RenderedClip { frames, boxes }
}

fn clamp_center(x: f64, y: f64, r: f64, size: f64) -> (f64, f64) {
    (x.clamp(r, size - r), y.clamp(r, size - r))
}
