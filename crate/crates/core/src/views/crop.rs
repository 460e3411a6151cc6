//! Crop selection for local spatial views.

use rand::Rng;

use crate::error::{Error, Result};
use crate::frames::Rect;

/// Result of a box-guided crop draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidedCrop {
    pub rect: Rect,
    pub box_index: usize,
    pub margin: f64,
}

pub const GUIDED_MARGIN: (f64, f64) = (1.2, 2.0);

/// Picks one of `frame_boxes` uniformly, grows it by a random margin in
/// `[1.2, 2.0]`, widens it to `target_aspect` (width / height) and clips to
/// the frame.
pub fn choose_guided_crop<R: Rng + ?Sized>(
    frame_boxes: &[Rect],
    frame_size: (usize, usize),
    target_aspect: f64,
    rng: &mut R,
) -> Result<GuidedCrop> {
    if frame_boxes.is_empty() {
        return Err(Error::Precondition(
            "bbox-guided crop needs at least one box".into(),
        ));
    }
    let box_index = rng.random_range(0..frame_boxes.len());
    let margin = rng.random_range(GUIDED_MARGIN.0..=GUIDED_MARGIN.1);
    let rect = expand_box(frame_boxes[box_index], margin, frame_size, target_aspect);
    Ok(GuidedCrop {
        rect,
        box_index,
        margin,
    })
}

pub fn bbox_guided_crop<R: Rng + ?Sized>(
    frame_boxes: &[Rect],
    frame_size: (usize, usize),
    target_aspect: f64,
    rng: &mut R,
) -> Result<Rect> {
    choose_guided_crop(frame_boxes, frame_size, target_aspect, rng).map(|c| c.rect)
}

/// Deterministic part of the guided crop: scale about the box center, grow the
/// short side to reach the aspect ratio, clip to the frame.
pub fn expand_box(b: Rect, margin: f64, frame_size: (usize, usize), target_aspect: f64) -> Rect {
    let (cx, cy) = b.center();
    let mut w = b.w * margin;
    let mut h = b.h * margin;
    if w / h < target_aspect {
        w = h * target_aspect;
    } else {
        h = w / target_aspect;
    }
    Rect::new(cx - w / 2.0, cy - h / 2.0, w, h).clamp_to(frame_size.0 as f64, frame_size.1 as f64)
}

/// Random sub-rectangle covering `scale` of the frame area with an aspect
/// ratio within a factor 4/3 of `target_aspect`.
pub fn random_crop<R: Rng + ?Sized>(
    frame_size: (usize, usize),
    scale: (f64, f64),
    target_aspect: f64,
    rng: &mut R,
) -> Rect {
    let (fw, fh) = (frame_size.0 as f64, frame_size.1 as f64);
    let area = fw * fh * rng.random_range(scale.0..=scale.1);
    let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
    let aspect = target_aspect * log_ratio.exp();
    let w = (area * aspect).sqrt().clamp(1.0, fw);
    let h = (area / aspect).sqrt().clamp(1.0, fh);
    let x = if fw > w {
        rng.random_range(0.0..=fw - w)
    } else {
        0.0
    };
    let y = if fh > h {
        rng.random_range(0.0..=fh - h)
    } else {
        0.0
    };
    Rect::new(x, y, w, h)
}
