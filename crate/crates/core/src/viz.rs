//! Class-token attention maps, top-k locations and overlays.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{encode_with_attention, EncoderParams};
use crate::error::{ensure, Error, Result};
use crate::frames::{FrameStack, Rect};
use crate::views::View;

/// Class-token attention of the last block's spatial stage, restricted to
/// each frame's patches and renormalized there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub heads: usize,
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    /// `(width, height)` of the encoded view.
    pub view_size: (usize, usize),
    /// Region of the source frame the view was cut from.
    pub crop_rect: Rect,
    pub frame_indices: Vec<usize>,
    /// `[heads, frames, grid_h * grid_w]`.
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn spatial(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn row(&self, head: usize, frame: usize) -> &[f64] {
        let s = self.spatial();
        let off = (head * self.frames + frame) * s;
        &self.weights[off..off + s]
    }

    /// Weights of one frame averaged over heads.
    pub fn mean_row(&self, frame: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.spatial()];
        for h in 0..self.heads {
            for (o, w) in out.iter_mut().zip(self.row(h, frame)) {
                *o += w / self.heads as f64;
            }
        }
        out
    }

    fn to_source(&self, u: f64, v: f64) -> (f64, f64) {
        let r = &self.crop_rect;
        (
            r.x + u * r.w / self.view_size.0 as f64,
            r.y + v * r.h / self.view_size.1 as f64,
        )
    }

    /// Footprint of patch `s` in source-frame pixels.
    pub fn patch_rect(&self, s: usize) -> Rect {
        let p = self.patch_size as f64;
        let (gy, gx) = (s / self.grid_w, s % self.grid_w);
        let (x0, y0) = self.to_source(gx as f64 * p, gy as f64 * p);
        let (x1, y1) = self.to_source((gx + 1) as f64 * p, (gy + 1) as f64 * p);
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Circle radius for this view: half a patch, in source pixels.
    pub fn marker_radius(&self) -> f64 {
        self.crop_rect.w / self.view_size.0 as f64 * self.patch_size as f64 / 2.0
    }
}

pub fn extract_attention(backbone: &EncoderParams, view: &View) -> Result<AttentionMap> {
    let (_, cls) = encode_with_attention(&view.frames, backbone)?;
    let grid = cls.grid;
    let s = grid.spatial();
    let mut weights = Vec::with_capacity(cls.heads * grid.frames * s);
    for h in 0..cls.heads {
        let all = cls.head(h);
        for t in 0..grid.frames {
            let row = &all[grid.index(t, 0)..grid.index(t, 0) + s];
            let total: f64 = row.iter().sum();
            weights.extend(row.iter().map(|w| w / total));
        }
    }
    Ok(AttentionMap {
        heads: cls.heads,
        frames: grid.frames,
        grid_h: grid.grid_h,
        grid_w: grid.grid_w,
        patch_size: backbone.config.patch_size,
        view_size: (view.frames.width, view.frames.height),
        crop_rect: view.crop_rect,
        frame_indices: view.frame_indices.clone(),
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    /// Frame position within the view.
    pub frame: usize,
    /// `None` for head-averaged weights.
    pub head: Option<usize>,
    pub token: usize,
    /// Patch center in source-frame pixels.
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

/// The `k` highest-weight patches of every frame, heaviest first, ties to
/// the lower token index. `head = None` averages over heads.
pub fn top_k_locations(
    attn: &AttentionMap,
    k: usize,
    head: Option<usize>,
) -> Result<Vec<Location>> {
    let n = attn.spatial();
    ensure!(
        (1..=n).contains(&k),
        Validation,
        "k = {k} must lie in [1, {n}]"
    );
    if let Some(h) = head {
        ensure!(
            h < attn.heads,
            Validation,
            "head {h} out of range for {} heads",
            attn.heads
        );
    }
    let mut out = Vec::with_capacity(attn.frames * k);
    for t in 0..attn.frames {
        let row = match head {
            Some(h) => attn.row(h, t).to_vec(),
            None => attn.mean_row(t),
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &s in &order[..k] {
            let (x, y) = attn.patch_rect(s).center();
            out.push(Location {
                frame: t,
                head,
                token: s,
                x,
                y,
                weight: row[s],
            });
        }
    }
    Ok(out)
}

const YELLOW: [u8; 3] = [255, 255, 0];

fn to_rgb8(frames: &FrameStack, index: usize) -> image::RgbImage {
    let bytes = frames
        .frame(index)
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(frames.width as u32, frames.height as u32, bytes)
        .expect("frame buffer size")
}

/// Writes frame `index` of a stack as a PNG.
pub fn save_frame_png(frames: &FrameStack, index: usize, path: &Path) -> Result<()> {
    to_rgb8(frames, index)
        .save(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Draws a yellow ring of `radius` around each `(x, y)` and writes a PNG.
pub fn render_overlay(
    frames: &FrameStack,
    index: usize,
    locations: &[(f64, f64)],
    radius: f64,
    path: &Path,
) -> Result<()> {
    let (w, h) = (frames.width as f64, frames.height as f64);
    for &(x, y) in locations {
        ensure!(
            (0.0..=w).contains(&x) && (0.0..=h).contains(&y),
            Validation,
            "location ({x}, {y}) lies outside the {w}x{h} frame"
        );
    }
    let mut img = to_rgb8(frames, index);
    let thickness = (radius / 4.0).clamp(1.0, 3.0);
    for &(cx, cy) in locations {
        let x0 = (cx - radius - 1.0).floor().max(0.0) as u32;
        let y0 = (cy - radius - 1.0).floor().max(0.0) as u32;
        let x1 = ((cx + radius + 1.0).ceil().min(w - 1.0)) as u32;
        let y1 = ((cy + radius + 1.0).ceil().min(h - 1.0)) as u32;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let d = ((px as f64 + 0.5 - cx).powi(2) + (py as f64 + 0.5 - cy).powi(2)).sqrt();
                if (d - radius).abs() <= thickness / 2.0 {
                    img.put_pixel(px, py, image::Rgb(YELLOW));
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
