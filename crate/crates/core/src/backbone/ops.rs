//! Dense kernels shared by the encoder and the projection head.

/// Strided matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct Mat {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Mat {
    pub fn rows(offset: usize, row_stride: usize) -> Self {
        Self {
            offset,
            row_stride,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major view.
    pub fn t(self) -> Self {
        Self {
            offset: self.offset,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `C[m, n] = alpha * A[m, k] B[k, n] + beta * C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: Mat,
    b: &[f64],
    bv: Mat,
    beta: f64,
    c: &mut [f64],
    cv: Mat,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(av.max_index(m, k) < a.len(), "gemm: A out of bounds");
    assert!(bv.max_index(k, n) < b.len(), "gemm: B out of bounds");
    assert!(cv.max_index(m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: every element addressed through the strided views is in bounds
    // (checked above) and `c` is uniquely borrowed, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

/// `y[rows, out] = x[rows, in] W[in, out] + b`.
pub(crate) fn linear(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    rows: usize,
    din: usize,
    dout: usize,
) -> Vec<f64> {
    let mut y = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(
        rows,
        din,
        dout,
        1.0,
        x,
        Mat::rows(0, din),
        w,
        Mat::rows(0, dout),
        1.0,
        &mut y,
        Mat::rows(0, dout),
    );
    y
}

/// Accumulates weight/bias gradients of a linear layer and, when `dx` is
/// given, overwrites it with the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    din: usize,
    dout: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    gemm(
        din,
        rows,
        dout,
        1.0,
        x,
        Mat::rows(0, din).t(),
        dy,
        Mat::rows(0, dout),
        1.0,
        dw,
        Mat::rows(0, dout),
    );
    for r in 0..rows {
        for (g, d) in db.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
            *g += d;
        }
    }
    if let Some(dx) = dx {
        gemm(
            rows,
            dout,
            din,
            1.0,
            dy,
            Mat::rows(0, dout),
            w,
            Mat::rows(0, dout).t(),
            0.0,
            dx,
            Mat::rows(0, din),
        );
    }
}

pub(crate) const LN_EPS: f64 = 1e-6;

pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    dim: usize,
) -> (Vec<f64>, LnCache) {
    let rows = x.len() / dim;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..dim {
            let h = (row[i] - mean) * rs;
            xhat[r * dim + i] = h;
            y[r * dim + i] = h * gamma[i] + beta[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Adds the input gradient into `dx`.
pub(crate) fn layer_norm_backward(
    cache: &LnCache,
    gamma: &[f64],
    dy: &[f64],
    dim: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    let rows = cache.rstd.len();
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let g = &dy[r * dim..(r + 1) * dim];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..dim {
            dgamma[i] += g[i] * xh[i];
            dbeta[i] += g[i];
            dxhat[i] = g[i] * gamma[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d /= dim as f64;
        mean_dx /= dim as f64;
        let rs = cache.rstd[r];
        for i in 0..dim {
            dx[r * dim + i] += rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
