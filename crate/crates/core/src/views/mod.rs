//! Global temporal, local temporal and local spatial views of one clip.
//!
//! Global and local temporal views share the global spatial size and differ in
//! how many frames they sample; local spatial views are small crops resized to
//! the local size. Every view samples its frames with [`segment_sample`].

mod augment;
mod crop;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment_view, AppliedAugment, AugmentPolicy};
pub use crop::{
    bbox_guided_crop, choose_guided_crop, expand_box, random_crop, GuidedCrop, GUIDED_MARGIN,
};

use crate::dataset::{load_full_clip, segment_centers, segment_sample, ClipRecord, SampleMode};
use crate::error::{ensure, Error, Result};
use crate::frames::{FrameStack, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropSource {
    Random,
    GtBoxes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    /// Frames per global temporal view (teacher input).
    pub global_frames: usize,
    /// Frame counts of the local views; one local temporal view per entry.
    pub local_frame_choices: Vec<usize>,
    /// `(width, height)` of global and local temporal views.
    pub global_size: (usize, usize),
    /// `(width, height)` of local spatial views.
    pub local_size: (usize, usize),
    pub num_global: usize,
    pub num_local_spatial: usize,
    pub crop_source: CropSource,
    /// Area fraction range of random local crops.
    #[serde(default = "default_local_scale")]
    pub local_crop_scale: (f64, f64),
}

fn default_local_scale() -> (f64, f64) {
    (0.1, 0.5)
}

impl ViewConfig {
    fn preset(global_frames: usize, choices: &[usize]) -> Self {
        Self {
            global_frames,
            local_frame_choices: choices.to_vec(),
            global_size: (224, 224),
            local_size: (96, 96),
            num_global: 2,
            num_local_spatial: 16,
            crop_source: CropSource::Random,
            local_crop_scale: default_local_scale(),
        }
    }

    pub fn volleyball() -> Self {
        Self::preset(5, &[3, 5])
    }

    pub fn nba() -> Self {
        Self::preset(18, &[2, 4, 8, 16, 18])
    }

    /// Local choices above `K_g = 8` are clamped by [`ViewConfig::clamped`].
    pub fn jrdb_par() -> Self {
        Self::preset(8, &[2, 4, 8, 16, 18])
    }

    /// Clamps local frame counts to the global count, logging a warning when
    /// any entry changes.
    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        for k in out.local_frame_choices.iter_mut() {
            if *k > self.global_frames {
                log::warn!(
                    "local frame count {} exceeds global frame count {}; clamping",
                    *k,
                    self.global_frames
                );
                *k = self.global_frames;
            }
        }
        out
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        ensure!(
            self.global_frames >= 1,
            Validation,
            "global_frames must be >= 1"
        );
        ensure!(
            !self.local_frame_choices.is_empty()
                && self.local_frame_choices.iter().all(|&k| k >= 1),
            Validation,
            "local_frame_choices must be non-empty and positive"
        );
        ensure!(
            self.local_frame_choices
                .iter()
                .all(|&k| k <= self.global_frames),
            Validation,
            "local frame counts {:?} exceed global_frames {} (use clamped())",
            self.local_frame_choices,
            self.global_frames
        );
        ensure!(self.num_global >= 1, Validation, "num_global must be >= 1");
        ensure!(
            self.num_local_spatial >= 1,
            Validation,
            "num_local_spatial must be >= 1"
        );
        for (name, (w, h)) in [
            ("global_size", self.global_size),
            ("local_size", self.local_size),
        ] {
            ensure!(
                w > 0 && h > 0 && w % patch_size == 0 && h % patch_size == 0,
                Validation,
                "{name} {w}x{h} must be a positive multiple of the patch size {patch_size}"
            );
        }
        ensure!(
            0.0 < self.local_crop_scale.0
                && self.local_crop_scale.0 <= self.local_crop_scale.1
                && self.local_crop_scale.1 <= 1.0,
            Validation,
            "local_crop_scale {:?} must satisfy 0 < lo <= hi <= 1",
            self.local_crop_scale
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    GlobalTemporal,
    LocalTemporal,
    LocalSpatial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub frames: FrameStack,
    pub kind: ViewKind,
    pub frame_indices: Vec<usize>,
    /// Source region in original frame pixels.
    pub crop_rect: Rect,
    pub applied: AppliedAugment,
}

impl View {
    pub fn new(
        frames: FrameStack,
        kind: ViewKind,
        frame_indices: Vec<usize>,
        crop_rect: Rect,
    ) -> Self {
        Self {
            frames,
            kind,
            frame_indices,
            crop_rect,
            applied: AppliedAugment::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub globals: Vec<View>,
    pub local_temporals: Vec<View>,
    pub local_spatials: Vec<View>,
}

impl ViewBatch {
    pub fn student_views(&self) -> impl Iterator<Item = &View> {
        self.local_temporals.iter().chain(&self.local_spatials)
    }

    pub fn all_views(&self) -> impl Iterator<Item = &View> {
        self.globals.iter().chain(self.student_views())
    }
}

/// Loads the clip from disk and builds its views.
pub fn sample_views_from_disk<R: Rng + ?Sized>(
    record: &ClipRecord,
    cfg: &ViewConfig,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<ViewBatch> {
    let clip = load_full_clip(record)?;
    sample_views(record, &clip, cfg, policy, rng)
}

/// Builds one training sample's views from the clip's decoded frames.
pub fn sample_views<R: Rng + ?Sized>(
    record: &ClipRecord,
    clip: &FrameStack,
    cfg: &ViewConfig,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<ViewBatch> {
    ensure!(
        clip.frames == record.num_frames,
        Precondition,
        "clip '{}' has {} decoded frames, record says {}",
        record.clip_id,
        clip.frames,
        record.num_frames
    );
    if cfg.crop_source == CropSource::GtBoxes && record.boxes.is_none() {
        return Err(Error::Validation(format!(
            "crop_source gt_boxes requested but clip '{}' has no boxes; use crop_source random",
            record.clip_id
        )));
    }
    let full = clip.full_rect();
    let (gw, gh) = cfg.global_size;
    let (lw, lh) = cfg.local_size;
    let temporal = |k: usize, kind: ViewKind, rng: &mut R| {
        let idx = segment_sample(record.num_frames, k, SampleMode::Train, rng);
        let frames = clip.select(&idx).crop_resize(full, gw, gh);
        View::new(frames, kind, idx, full)
    };

    let mut globals = Vec::with_capacity(cfg.num_global);
    for _ in 0..cfg.num_global {
        let v = temporal(cfg.global_frames, ViewKind::GlobalTemporal, rng);
        globals.push(augment_view(v, policy, rng));
    }
    let mut local_temporals = Vec::with_capacity(cfg.local_frame_choices.len());
    for &k in &cfg.local_frame_choices {
        let v = temporal(k, ViewKind::LocalTemporal, rng);
        local_temporals.push(augment_view(v, policy, rng));
    }
    let mut local_spatials = Vec::with_capacity(cfg.num_local_spatial);
    let frame_size = (clip.width, clip.height);
    let aspect = lw as f64 / lh as f64;
    for _ in 0..cfg.num_local_spatial {
        let k = cfg.local_frame_choices[rng.random_range(0..cfg.local_frame_choices.len())];
        let idx = segment_sample(record.num_frames, k, SampleMode::Train, rng);
        let rect = match cfg.crop_source {
            CropSource::Random => random_crop(frame_size, cfg.local_crop_scale, aspect, rng),
            CropSource::GtBoxes => {
                let center = idx[idx.len() / 2];
                let boxes = record.boxes_at(center).unwrap_or(&[]);
                if boxes.is_empty() {
                    return Err(Error::Validation(format!(
                        "clip '{}' has no boxes on frame {center}; use crop_source random",
                        record.clip_id
                    )));
                }
                bbox_guided_crop(boxes, frame_size, aspect, rng)?
            }
        };
        let frames = clip.select(&idx).crop_resize(rect, lw, lh);
        let v = View::new(frames, ViewKind::LocalSpatial, idx, rect);
        local_spatials.push(augment_view(v, policy, rng));
    }
    Ok(ViewBatch {
        globals,
        local_temporals,
        local_spatials,
    })
}

/// The deterministic evaluation view: segment centers, global size, no
/// augmentation.
pub fn eval_view(
    record: &ClipRecord,
    clip: &FrameStack,
    frames: usize,
    size: (usize, usize),
) -> View {
    let idx = segment_centers(record.num_frames, frames);
    let full = clip.full_rect();
    View::new(
        clip.select(&idx).crop_resize(full, size.0, size.1),
        ViewKind::GlobalTemporal,
        idx,
        full,
    )
}
