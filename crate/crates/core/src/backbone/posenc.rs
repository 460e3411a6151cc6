//! Resolution-polymorphic positional tables.
//!
//! Learned tables are stored at the maximum grid and resampled with
//! align-corners linear interpolation. Resampling is linear in the table, so
//! its backward pass scatters through the same weights.

/// Two-tap linear resampling weights from `n_in` samples to `n_out`.
/// Endpoints map to endpoints; a single output sample reads the table center.
pub fn linear_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 2]> {
    assert!(n_in >= 1 && n_out >= 1);
    (0..n_out)
        .map(|i| {
            let pos = if n_out == 1 || n_in == 1 {
                (n_in - 1) as f64 / 2.0
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let frac = pos - lo as f64;
            if hi == lo || frac == 0.0 {
                [(lo, 1.0), (lo, 0.0)]
            } else {
                [(lo, 1.0 - frac), (hi, frac)]
            }
        })
        .collect()
}

/// Resamples a 1-D table of `dim`-vectors.
pub fn interpolate_1d(table: &[f64], n_in: usize, n_out: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_out * dim];
    for (i, taps) in linear_taps(n_in, n_out).iter().enumerate() {
        for &(j, w) in taps {
            if w != 0.0 {
                for c in 0..dim {
                    out[i * dim + c] += w * table[j * dim + c];
                }
            }
        }
    }
    out
}

/// Bilinear resampling of a row-major `(h_in, w_in)` grid of `dim`-vectors.
pub fn interpolate_2d(
    table: &[f64],
    src: (usize, usize),
    dst: (usize, usize),
    dim: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; dst.0 * dst.1 * dim];
    for_each_tap_2d(src, dst, |o, s, w| {
        for c in 0..dim {
            out[o * dim + c] += w * table[s * dim + c];
        }
    });
    out
}

/// Transpose of [`interpolate_2d`]: accumulates `grad_out` into `grad_table`.
pub(crate) fn interpolate_2d_backward(
    grad_out: &[f64],
    src: (usize, usize),
    dst: (usize, usize),
    dim: usize,
    grad_table: &mut [f64],
) {
    for_each_tap_2d(src, dst, |o, s, w| {
        for c in 0..dim {
            grad_table[s * dim + c] += w * grad_out[o * dim + c];
        }
    });
}

pub(crate) fn interpolate_1d_backward(
    grad_out: &[f64],
    n_in: usize,
    n_out: usize,
    dim: usize,
    grad_table: &mut [f64],
) {
    for (i, taps) in linear_taps(n_in, n_out).iter().enumerate() {
        for &(j, w) in taps {
            if w != 0.0 {
                for c in 0..dim {
                    grad_table[j * dim + c] += w * grad_out[i * dim + c];
                }
            }
        }
    }
}

fn for_each_tap_2d(src: (usize, usize), dst: (usize, usize), mut f: impl FnMut(usize, usize, f64)) {
    let ty = linear_taps(src.0, dst.0);
    let tx = linear_taps(src.1, dst.1);
    for (y, ry) in ty.iter().enumerate() {
        for (x, rx) in tx.iter().enumerate() {
            for &(sy, wy) in ry {
                for &(sx, wx) in rx {
                    let w = wy * wx;
                    if w != 0.0 {
                        f(y * dst.1 + x, sy * src.1 + sx, w);
                    }
                }
            }
        }
    }
}
