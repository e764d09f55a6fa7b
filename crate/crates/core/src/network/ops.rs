//! Dense kernels with hand-written backward passes.
//!
//! Spatial activations are stored channel-major as `[C, T*H*W]` so that a
//! whole frame batch goes through one matrix product per layer, and
//! normalization statistics are contiguous per channel.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};

pub const NORM_EPS: f64 = 1e-5;

/// Spatial extent of a channel-major activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Extent {
    pub fn len(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn halved(&self) -> Self {
        Self {
            frames: self.frames,
            height: self.height / 2,
            width: self.width / 2,
        }
    }
}

pub fn view<'a>(data: &'a [f64], rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("parameter slice shape")
}

pub fn view_mut<'a>(data: &'a mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("parameter slice shape")
}

/// `c += a · b`
pub fn gemm_acc(a: &ArrayView2<f64>, b: &ArrayView2<f64>, c: &mut ArrayViewMut2<f64>) {
    general_mat_mul(1.0, a, b, 1.0, c);
}

pub fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}

/// Unfolds 3×3 zero-padded neighbourhoods: row `c*9 + ky*3 + kx`.
pub fn im2col3x3(x: &Array2<f64>, ext: Extent) -> Array2<f64> {
    let (c, n) = x.dim();
    debug_assert_eq!(n, ext.len());
    let (h, w) = (ext.height, ext.width);
    let mut cols = Array2::zeros((c * 9, n));
    let xs = x.as_slice().expect("contiguous activation");
    let cs = cols.as_slice_mut().expect("contiguous columns");
    for ci in 0..c {
        let plane = &xs[ci * n..(ci + 1) * n];
        for k in 0..9 {
            let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
            let row = &mut cs[(ci * 9 + k) * n..(ci * 9 + k + 1) * n];
            let x0 = (-dx).max(0) as usize;
            let x1 = (w as isize - dx).min(w as isize) as usize;
            for t in 0..ext.frames {
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = t * h * w + y * w;
                    let src = ((t * h * w + sy as usize * w + x0) as isize + dx) as usize;
                    row[dst + x0..dst + x1].copy_from_slice(&plane[src..src + x1 - x0]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`].
pub fn col2im3x3(cols: &Array2<f64>, channels: usize, ext: Extent) -> Array2<f64> {
    let n = ext.len();
    let (h, w) = (ext.height, ext.width);
    let mut x = Array2::zeros((channels, n));
    let cs = cols.as_slice().expect("contiguous columns");
    let xs = x.as_slice_mut().expect("contiguous activation");
    for ci in 0..channels {
        let plane = &mut xs[ci * n..(ci + 1) * n];
        for k in 0..9 {
            let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
            let row = &cs[(ci * 9 + k) * n..(ci * 9 + k + 1) * n];
            let x0 = (-dx).max(0) as usize;
            let x1 = (w as isize - dx).min(w as isize) as usize;
            for t in 0..ext.frames {
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = t * h * w + y * w;
                    let src = ((t * h * w + sy as usize * w + x0) as isize + dx) as usize;
                    for (p, r) in plane[src..src + x1 - x0]
                        .iter_mut()
                        .zip(&row[dst + x0..dst + x1])
                    {
                        *p += r;
                    }
                }
            }
        }
    }
    x
}

/// 2×2 average pooling with stride 2.
pub fn avgpool2(x: &Array2<f64>, ext: Extent) -> Array2<f64> {
    let out_ext = ext.halved();
    let (c, n) = x.dim();
    let m = out_ext.len();
    let mut y = Array2::zeros((c, m));
    let xs = x.as_slice().expect("contiguous");
    let ys = y.as_slice_mut().expect("contiguous");
    let (h, w) = (ext.height, ext.width);
    let (oh, ow) = (out_ext.height, out_ext.width);
    for ci in 0..c {
        let src = &xs[ci * n..(ci + 1) * n];
        let dst = &mut ys[ci * m..(ci + 1) * m];
        for t in 0..ext.frames {
            for oy in 0..oh {
                let r0 = t * h * w + 2 * oy * w;
                let r1 = r0 + w;
                for ox in 0..ow {
                    let sum = src[r0 + 2 * ox] + src[r0 + 2 * ox + 1] + src[r1 + 2 * ox] + src[r1 + 2 * ox + 1];
                    dst[t * oh * ow + oy * ow + ox] = 0.25 * sum;
                }
            }
        }
    }
    y
}

pub fn avgpool2_backward(dy: &Array2<f64>, ext: Extent) -> Array2<f64> {
    let out_ext = ext.halved();
    let (c, m) = dy.dim();
    let n = ext.len();
    let mut dx = Array2::zeros((c, n));
    let dys = dy.as_slice().expect("contiguous");
    let dxs = dx.as_slice_mut().expect("contiguous");
    let (h, w) = (ext.height, ext.width);
    let (oh, ow) = (out_ext.height, out_ext.width);
    for ci in 0..c {
        let src = &dys[ci * m..(ci + 1) * m];
        let dst = &mut dxs[ci * n..(ci + 1) * n];
        for t in 0..ext.frames {
            for oy in 0..oh {
                let r0 = t * h * w + 2 * oy * w;
                let r1 = r0 + w;
                for ox in 0..ow {
                    let g = 0.25 * src[t * oh * ow + oy * ow + ox];
                    dst[r0 + 2 * ox] = g;
                    dst[r0 + 2 * ox + 1] = g;
                    dst[r1 + 2 * ox] = g;
                    dst[r1 + 2 * ox + 1] = g;
                }
            }
        }
    }
    dx
}

/// Adds `bias[c]` to every entry of row `c`.
pub fn add_row_bias(x: &mut Array2<f64>, bias: &[f64]) {
    for (mut row, &b) in x.axis_iter_mut(Axis(0)).zip(bias) {
        row += b;
    }
}

pub fn row_sums(x: &Array2<f64>) -> Vec<f64> {
    x.axis_iter(Axis(0)).map(|r| r.sum()).collect()
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the forward output was not positive.
pub fn relu_backward_inplace(grad: &mut Array2<f64>, out: &Array2<f64>) {
    grad.zip_mut_with(out, |g, &o| {
        if o <= 0.0 {
            *g = 0.0
        }
    });
}

/// Per-channel first and second raw moments of a `[C, N]` batch.
pub fn channel_moments(x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.ncols() as f64;
    x.axis_iter(Axis(0))
        .map(|r| {
            let m = r.sum() / n;
            let sq = r.iter().map(|v| v * v).sum::<f64>() / n;
            (m, sq)
        })
        .unzip()
}

/// Running-statistics normalization: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
///
/// Returns the output and the per-channel inverse standard deviations
/// needed by the backward pass.
pub fn normalize(
    x: &Array2<f64>,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
) -> (Array2<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v.max(0.0) + NORM_EPS).sqrt()).collect();
    let mut y = x.clone();
    for (c, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
        let scale = gamma[c] * inv_std[c];
        let shift = beta[c] - mean[c] * scale;
        row.mapv_inplace(|v| v * scale + shift);
    }
    (y, inv_std)
}

/// Backward of [`normalize`] with statistics held constant.
///
/// `xhat` is recovered from the input on the fly; returns
/// `(dx, dgamma, dbeta)`.
pub fn normalize_backward(
    x: &Array2<f64>,
    dy: &Array2<f64>,
    gamma: &[f64],
    mean: &[f64],
    inv_std: &[f64],
) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = dy.clone();
    let mut dgamma = vec![0.0; gamma.len()];
    let mut dbeta = vec![0.0; gamma.len()];
    for (c, (mut drow, xrow)) in dx
        .axis_iter_mut(Axis(0))
        .zip(x.axis_iter(Axis(0)))
        .enumerate()
    {
        let mut dg = 0.0;
        let mut db = 0.0;
        for (d, &xv) in drow.iter().zip(xrow.iter()) {
            dg += d * (xv - mean[c]) * inv_std[c];
            db += d;
        }
        dgamma[c] = dg;
        dbeta[c] = db;
        let s = gamma[c] * inv_std[c];
        drow.mapv_inplace(|v| v * s);
    }
    (dx, dgamma, dbeta)
}

/// Linear-interpolation matrix `[out, in]` mapping a length-`n_in` signal
/// onto `n_out` points spanning the same interval (endpoints aligned).
pub fn interp_matrix(n_in: usize, n_out: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n_out, n_in));
    if n_in == 1 || n_out == 1 {
        m.column_mut(0).fill(1.0);
        if n_out == 1 && n_in > 1 {
            m.fill(0.0);
            m[[0, 0]] = 1.0;
        }
        return m;
    }
    let scale = (n_in - 1) as f64 / (n_out - 1) as f64;
    for j in 0..n_out {
        let pos = j as f64 * scale;
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let frac = pos - i0 as f64;
        if i0 + 1 < n_in && frac > 0.0 {
            m[[j, i0]] = 1.0 - frac;
            m[[j, i0 + 1]] = frac;
        } else {
            m[[j, i0]] = 1.0;
        }
    }
    m
}

/// Unfolds a `[C, L]` signal into `[C*3, L]` zero-padded kernel-3 columns.
pub fn im2col1d(x: &Array2<f64>) -> Array2<f64> {
    let (c, l) = x.dim();
    let mut cols = Array2::zeros((c * 3, l));
    for ci in 0..c {
        for k in 0..3usize {
            let off = k as isize - 1;
            for j in 0..l {
                let src = j as isize + off;
                if src >= 0 && (src as usize) < l {
                    cols[[ci * 3 + k, j]] = x[[ci, src as usize]];
                }
            }
        }
    }
    cols
}

pub fn col2im1d(cols: &Array2<f64>, channels: usize) -> Array2<f64> {
    let l = cols.ncols();
    let mut x = Array2::zeros((channels, l));
    for ci in 0..channels {
        for k in 0..3usize {
            let off = k as isize - 1;
            for j in 0..l {
                let src = j as isize + off;
                if src >= 0 && (src as usize) < l {
                    x[[ci, src as usize]] += cols[[ci * 3 + k, j]];
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn pseudo(rows: usize, cols: usize, seed: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| ((i * cols + j) as f64 * 0.731 + seed).sin())
    }

    fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let ext = Extent { frames: 2, height: 5, width: 4 };
        let x = pseudo(3, ext.len(), 0.1);
        let c = pseudo(27, ext.len(), 0.7);
        let lhs = dot(&im2col3x3(&x, ext), &c);
        let rhs = dot(&x, &col2im3x3(&c, 3, ext));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn im2col_center_tap_is_identity() {
        let ext = Extent { frames: 1, height: 3, width: 3 };
        let x = pseudo(1, 9, 0.0);
        let cols = im2col3x3(&x, ext);
        assert_eq!(cols.row(4), x.row(0));
        // top-left tap of the top-left pixel is padding
        assert_eq!(cols[[0, 0]], 0.0);
        assert_eq!(cols[[0, 4]], x[[0, 0]]);
    }

    #[test]
    fn pooling_backward_is_adjoint() {
        let ext = Extent { frames: 3, height: 4, width: 6 };
        let x = pseudo(2, ext.len(), 0.3);
        let g = pseudo(2, ext.halved().len(), 1.3);
        let lhs = dot(&avgpool2(&x, ext), &g);
        let rhs = dot(&x, &avgpool2_backward(&g, ext));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv1d_columns_adjoint() {
        let x = pseudo(4, 7, 0.2);
        let c = pseudo(12, 7, 0.9);
        let lhs = dot(&im2col1d(&x), &c);
        let rhs = dot(&x, &col2im1d(&c, 4));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn interpolation_hits_endpoints_and_is_exact_on_ramps() {
        let m = interp_matrix(60, 40);
        let ramp: Vec<f64> = (0..60).map(|i| 2.0 * i as f64 + 1.0).collect();
        let out: Vec<f64> = m.outer_iter().map(|r| r.iter().zip(&ramp).map(|(a, b)| a * b).sum()).collect();
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!((out[39] - 119.0).abs() < 1e-9);
        for (j, v) in out.iter().enumerate() {
            let pos = j as f64 * 59.0 / 39.0;
            assert!((v - (2.0 * pos + 1.0)).abs() < 1e-9);
        }
        for r in m.outer_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }
}
