//! Dense frame stacks and the geometric resampling used by the view builder.

use serde::{Deserialize, Serialize};

/// A stack of RGB frames stored channels-last, shape `(frames, height, width, 3)`,
/// values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FrameStack {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width * 3],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, 3)
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.frame_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    #[inline]
    pub fn at(&self, f: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((f * self.height + y) * self.width + x) * 3 + c]
    }

    /// Gathers the given frame indices (repeats allowed) into a new stack.
    pub fn select(&self, indices: &[usize]) -> FrameStack {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        FrameStack {
            frames: indices.len(),
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn full_rect(&self) -> Rect {
        Rect::new(0.0, 0.0, self.width as f64, self.height as f64)
    }

    /// Crops `rect` from every frame and resamples it bilinearly to `out_w x out_h`.
    pub fn crop_resize(&self, rect: Rect, out_w: usize, out_h: usize) -> FrameStack {
        let mut out = FrameStack::zeros(self.frames, out_h, out_w);
        let sx = rect.w / out_w as f64;
        let sy = rect.h / out_h as f64;
        let xs: Vec<(usize, usize, f64)> = (0..out_w)
            .map(|j| sample_coord(rect.x + (j as f64 + 0.5) * sx - 0.5, self.width))
            .collect();
        let ys: Vec<(usize, usize, f64)> = (0..out_h)
            .map(|i| sample_coord(rect.y + (i as f64 + 0.5) * sy - 0.5, self.height))
            .collect();
        let w = self.width;
        for f in 0..self.frames {
            let src = self.frame(f);
            let dst = out.frame_mut(f);
            for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                    for c in 0..3 {
                        let p00 = src[(y0 * w + x0) * 3 + c];
                        let p01 = src[(y0 * w + x1) * 3 + c];
                        let p10 = src[(y1 * w + x0) * 3 + c];
                        let p11 = src[(y1 * w + x1) * 3 + c];
                        let top = p00 + (p01 - p00) * fx;
                        let bot = p10 + (p11 - p10) * fx;
                        dst[(i * out_w + j) * 3 + c] = top + (bot - top) * fy;
                    }
                }
            }
        }
        out
    }
}

fn sample_coord(pos: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let p = pos.clamp(0.0, max);
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, p - lo as f64)
}

/// Axis-aligned rectangle in pixel coordinates, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_array(b: [f64; 4]) -> Self {
        Self::new(b[0], b[1], b[2], b[3])
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// True when the rectangle lies within `[0, width] x [0, height]`.
    pub fn inside(&self, width: f64, height: f64) -> bool {
        const TOL: f64 = 1e-9;
        self.x >= -TOL
            && self.y >= -TOL
            && self.x + self.w <= width + TOL
            && self.y + self.h <= height + TOL
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn intersection(&self, other: &Rect) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clips the rectangle to the frame; the result may be empty.
    pub fn clamp_to(&self, width: f64, height: f64) -> Rect {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }
}
