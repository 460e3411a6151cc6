//! Photometric augmentation applied consistently across all frames of a view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{View, ViewKind};
use crate::error::{ensure, Result};
use crate::frames::FrameStack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub p_color_jitter: f64,
    pub p_grayscale: f64,
    /// Blur and solarization only ever touch global temporal views.
    pub p_blur_global: f64,
    pub p_solarize_global: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub solarize_threshold: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            p_color_jitter: 0.8,
            p_grayscale: 0.2,
            p_blur_global: 0.1,
            p_solarize_global: 0.2,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            solarize_threshold: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl AugmentPolicy {
    /// A policy that leaves every view untouched.
    pub fn disabled() -> Self {
        Self {
            p_color_jitter: 0.0,
            p_grayscale: 0.0,
            p_blur_global: 0.0,
            p_solarize_global: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_color_jitter", self.p_color_jitter),
            ("p_grayscale", self.p_grayscale),
            ("p_blur_global", self.p_blur_global),
            ("p_solarize_global", self.p_solarize_global),
        ] {
            ensure!(
                (0.0..=1.0).contains(&p),
                Validation,
                "{name} = {p} is not a probability"
            );
        }
        ensure!(
            self.brightness >= 0.0 && self.contrast >= 0.0 && self.saturation >= 0.0,
            Validation,
            "jitter strengths must be non-negative"
        );
        ensure!(
            (0.0..=0.5).contains(&self.hue),
            Validation,
            "hue jitter must be in [0, 0.5]"
        );
        ensure!(
            self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1,
            Validation,
            "blur sigma range {:?} is invalid",
            self.blur_sigma
        );
        Ok(())
    }
}

/// Which transforms were applied to a view.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedAugment {
    pub color_jitter: bool,
    pub grayscale: bool,
    pub blur: bool,
    pub solarize: bool,
}

/// Draws one set of transform parameters and applies it to every frame.
pub fn augment_view<R: Rng + ?Sized>(mut view: View, policy: &AugmentPolicy, rng: &mut R) -> View {
    let global = view.kind == ViewKind::GlobalTemporal;
    let mut applied = AppliedAugment::default();
    let frames = &mut view.frames;

    if rng.random_bool(policy.p_color_jitter) {
        applied.color_jitter = true;
        let b = jitter_factor(rng, policy.brightness);
        let c = jitter_factor(rng, policy.contrast);
        let s = jitter_factor(rng, policy.saturation);
        let h = if policy.hue > 0.0 {
            rng.random_range(-policy.hue..=policy.hue)
        } else {
            0.0
        };
        color_jitter(frames, b, c, s, h);
    }
    if rng.random_bool(policy.p_grayscale) {
        applied.grayscale = true;
        grayscale(frames);
    }
    if global && rng.random_bool(policy.p_blur_global) {
        applied.blur = true;
        let sigma = rng.random_range(policy.blur_sigma.0..=policy.blur_sigma.1);
        gaussian_blur(frames, sigma);
    }
    if global && rng.random_bool(policy.p_solarize_global) {
        applied.solarize = true;
        solarize(frames, policy.solarize_threshold);
    }
    view.applied = applied;
    view
}

fn jitter_factor<R: Rng + ?Sized>(rng: &mut R, strength: f64) -> f64 {
    if strength == 0.0 {
        1.0
    } else {
        rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
    }
}

#[inline]
fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn color_jitter(
    frames: &mut FrameStack,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue: f64,
) {
    for f in 0..frames.frames {
        let px = frames.frame_mut(f);
        for v in px.iter_mut() {
            *v = (*v * brightness).clamp(0.0, 1.0);
        }
        let n = px.len() / 3;
        let mean = px
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .sum::<f64>()
            / n as f64;
        for v in px.iter_mut() {
            *v = (mean + contrast * (*v - mean)).clamp(0.0, 1.0);
        }
        for p in px.chunks_exact_mut(3) {
            let g = luma(p[0], p[1], p[2]);
            for v in p.iter_mut() {
                *v = (g + saturation * (*v - g)).clamp(0.0, 1.0);
            }
        }
        if hue != 0.0 {
            for p in px.chunks_exact_mut(3) {
                let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
                let (r, g, b) = hsv_to_rgb((h + hue).rem_euclid(1.0), s, v);
                p[0] = r;
                p[1] = g;
                p[2] = b;
            }
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn grayscale(frames: &mut FrameStack) {
    for p in frames.data.chunks_exact_mut(3) {
        let g = luma(p[0], p[1], p[2]);
        p.fill(g);
    }
}

fn solarize(frames: &mut FrameStack, threshold: f64) {
    for v in frames.data.iter_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
}

/// Separable Gaussian blur with replicated borders.
fn gaussian_blur(frames: &mut FrameStack, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let (h, w) = (frames.height as isize, frames.width as isize);
    let mut tmp = vec![0.0; frames.frame_len()];
    for f in 0..frames.frames {
        let px = frames.frame_mut(f);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let xx = (x + ki as isize - radius).clamp(0, w - 1);
                        acc += k * px[((y * w + xx) * 3 + c) as usize];
                    }
                    tmp[((y * w + x) * 3 + c) as usize] = acc;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let yy = (y + ki as isize - radius).clamp(0, h - 1);
                        acc += k * tmp[((yy * w + x) * 3 + c) as usize];
                    }
                    px[((y * w + x) * 3 + c) as usize] = acc.clamp(0.0, 1.0);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::Rect;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noisy_view(kind: ViewKind, frames: usize, seed: u64) -> View {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fs = FrameStack::zeros(frames, 6, 5);
        for v in fs.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        View::new(
            fs,
            kind,
            (0..frames).collect(),
            Rect::new(0.0, 0.0, 5.0, 6.0),
        )
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = noisy_view(ViewKind::GlobalTemporal, 3, 0);
        let out = augment_view(v.clone(), &AugmentPolicy::disabled(), &mut rng);
        assert_eq!(out.frames, v.frames);
        assert_eq!(out.applied, AppliedAugment::default());
    }

    #[test]
    fn forced_grayscale_equalizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let policy = AugmentPolicy {
            p_grayscale: 1.0,
            ..AugmentPolicy::default()
        };
        for kind in [ViewKind::GlobalTemporal, ViewKind::LocalSpatial] {
            let out = augment_view(noisy_view(kind, 2, 5), &policy, &mut rng);
            for p in out.frames.data.chunks_exact(3) {
                assert!(p[0] == p[1] && p[1] == p[2]);
            }
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy = AugmentPolicy {
            p_color_jitter: 1.0,
            p_blur_global: 1.0,
            p_solarize_global: 1.0,
            brightness: 0.9,
            contrast: 0.9,
            saturation: 0.9,
            ..AugmentPolicy::default()
        };
        for seed in 0..20 {
            let out = augment_view(
                noisy_view(ViewKind::GlobalTemporal, 2, seed),
                &policy,
                &mut rng,
            );
            assert!(out.frames.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn parameters_are_shared_across_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let policy = AugmentPolicy {
            p_color_jitter: 1.0,
            p_grayscale: 0.5,
            p_blur_global: 1.0,
            p_solarize_global: 1.0,
            ..AugmentPolicy::default()
        };
        let base = noisy_view(ViewKind::GlobalTemporal, 1, 9);
        let constant = base.frames.select(&[0, 0, 0, 0]);
        let view = View::new(
            constant,
            ViewKind::GlobalTemporal,
            vec![0; 4],
            base.crop_rect,
        );
        for _ in 0..10 {
            let out = augment_view(view.clone(), &policy, &mut rng);
            for f in 1..4 {
                assert_eq!(out.frames.frame(0), out.frames.frame(f));
            }
        }
    }

    #[test]
    fn blur_and_solarize_never_touch_local_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let forced = AugmentPolicy {
            p_blur_global: 1.0,
            p_solarize_global: 1.0,
            ..AugmentPolicy::disabled()
        };
        for kind in [ViewKind::LocalTemporal, ViewKind::LocalSpatial] {
            let v = noisy_view(kind, 2, 6);
            let out = augment_view(v.clone(), &forced, &mut rng);
            assert!(!out.applied.blur && !out.applied.solarize);
            assert_eq!(out.frames, v.frames);
        }
        let out = augment_view(
            noisy_view(ViewKind::GlobalTemporal, 2, 6),
            &forced,
            &mut rng,
        );
        assert!(out.applied.blur && out.applied.solarize);
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let (r, g, b) = (
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            );
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }
}
