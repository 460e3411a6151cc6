//! Divided attention over a `1 + T*S` token sequence.
//!
//! Patch tokens attend within a group (one spatial location across time, or
//! one frame across space); the class token attends over every token in both
//! stages. Rows of `qkv` are `[q | k | v]`, each `m` wide and split into heads.

use super::ops::{gemm, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stage {
    Temporal,
    Spatial,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnShape {
    pub frames: usize,
    pub spatial: usize,
    pub heads: usize,
    pub dim: usize,
}

/// One attention problem: `n_q` query rows against `n_k` key rows, each a
/// strided run of token indices.
#[derive(Debug, Clone, Copy)]
struct Unit {
    q_start: usize,
    q_stride: usize,
    n_q: usize,
    k_start: usize,
    k_stride: usize,
    n_k: usize,
}

impl AttnShape {
    pub fn tokens(&self) -> usize {
        1 + self.frames * self.spatial
    }

    fn units(&self, stage: Stage) -> Vec<Unit> {
        let (t, s) = (self.frames, self.spatial);
        let mut units: Vec<Unit> = match stage {
            Stage::Temporal => (0..s)
                .map(|g| Unit {
                    q_start: 1 + g,
                    q_stride: s,
                    n_q: t,
                    k_start: 1 + g,
                    k_stride: s,
                    n_k: t,
                })
                .collect(),
            Stage::Spatial => (0..t)
                .map(|g| Unit {
                    q_start: 1 + g * s,
                    q_stride: 1,
                    n_q: s,
                    k_start: 1 + g * s,
                    k_stride: 1,
                    n_k: s,
                })
                .collect(),
        };
        units.push(Unit {
            q_start: 0,
            q_stride: 1,
            n_q: 1,
            k_start: 0,
            k_stride: 1,
            n_k: self.tokens(),
        });
        units
    }

    /// Length of the probability buffer for one stage.
    pub fn probs_len(&self, stage: Stage) -> usize {
        self.units(stage)
            .iter()
            .map(|u| u.n_q * u.n_k)
            .sum::<usize>()
            * self.heads
    }

    /// Offset of the class-token probabilities for `head` in a stage's buffer.
    pub fn cls_probs_offset(&self, stage: Stage, head: usize) -> usize {
        let units = self.units(stage);
        let before: usize = units[..units.len() - 1].iter().map(|u| u.n_q * u.n_k).sum();
        before * self.heads + head * self.tokens()
    }
}

/// Returns the attended values `[N, m]` and the softmax probabilities.
pub(crate) fn attention_forward(
    qkv: &[f64],
    shape: AttnShape,
    stage: Stage,
) -> (Vec<f64>, Vec<f64>) {
    let m = shape.dim;
    let d = m / shape.heads;
    let scale = 1.0 / (d as f64).sqrt();
    let n = shape.tokens();
    let mut out = vec![0.0; n * m];
    let mut probs = vec![0.0; shape.probs_len(stage)];
    let mut off = 0;
    for u in shape.units(stage) {
        for h in 0..shape.heads {
            let q = Mat::rows(u.q_start * 3 * m + h * d, u.q_stride * 3 * m);
            let k = Mat::rows(u.k_start * 3 * m + m + h * d, u.k_stride * 3 * m);
            let v = Mat::rows(u.k_start * 3 * m + 2 * m + h * d, u.k_stride * 3 * m);
            gemm(
                u.n_q,
                d,
                u.n_k,
                scale,
                qkv,
                q,
                qkv,
                k.t(),
                0.0,
                &mut probs,
                Mat::rows(off, u.n_k),
            );
            for row in probs[off..off + u.n_q * u.n_k].chunks_exact_mut(u.n_k) {
                softmax_in_place(row);
            }
            let o = Mat::rows(u.q_start * m + h * d, u.q_stride * m);
            gemm(
                u.n_q,
                u.n_k,
                d,
                1.0,
                &probs,
                Mat::rows(off, u.n_k),
                qkv,
                v,
                0.0,
                &mut out,
                o,
            );
            off += u.n_q * u.n_k;
        }
    }
    (out, probs)
}

/// Gradient of the attention output with respect to `qkv`.
pub(crate) fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    shape: AttnShape,
    stage: Stage,
    d_out: &[f64],
) -> Vec<f64> {
    let m = shape.dim;
    let d = m / shape.heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut d_qkv = vec![0.0; qkv.len()];
    let mut dp = Vec::new();
    let mut off = 0;
    for u in shape.units(stage) {
        for h in 0..shape.heads {
            let q = Mat::rows(u.q_start * 3 * m + h * d, u.q_stride * 3 * m);
            let k = Mat::rows(u.k_start * 3 * m + m + h * d, u.k_stride * 3 * m);
            let v = Mat::rows(u.k_start * 3 * m + 2 * m + h * d, u.k_stride * 3 * m);
            let o = Mat::rows(u.q_start * m + h * d, u.q_stride * m);
            let p = &probs[off..off + u.n_q * u.n_k];
            dp.clear();
            dp.resize(u.n_q * u.n_k, 0.0);
            gemm(
                u.n_q,
                d,
                u.n_k,
                1.0,
                d_out,
                o,
                qkv,
                v.t(),
                0.0,
                &mut dp,
                Mat::rows(0, u.n_k),
            );
            // softmax backward, in place: dS = P * (dP - <P, dP>)
            for (drow, prow) in dp.chunks_exact_mut(u.n_k).zip(p.chunks_exact(u.n_k)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (g, &pv) in drow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot);
                }
            }
            gemm(
                u.n_q,
                u.n_k,
                d,
                scale,
                &dp,
                Mat::rows(0, u.n_k),
                qkv,
                k,
                1.0,
                &mut d_qkv,
                q,
            );
            gemm(
                u.n_k,
                u.n_q,
                d,
                scale,
                &dp,
                Mat::rows(0, u.n_k).t(),
                qkv,
                q,
                1.0,
                &mut d_qkv,
                k,
            );
            gemm(
                u.n_k,
                u.n_q,
                d,
                1.0,
                probs,
                Mat::rows(off, u.n_k).t(),
                d_out,
                o,
                1.0,
                &mut d_qkv,
                v,
            );
            off += u.n_q * u.n_k;
        }
    }
    d_qkv
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
