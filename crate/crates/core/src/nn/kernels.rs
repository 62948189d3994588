//! Per-layer forward and backward kernels over batched `[N, ...]` buffers.
//!
//! Batches are processed per sample. Weight gradients are summed over
//! samples in index order, so results do not depend on the worker count.

use rayon::prelude::*;

use super::tensor::{matmul, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_height * self.out_width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, pad) = (g.kernel, g.stride, g.pad() as isize);
    let p = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * s + ki) as isize - pad;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - pad;
                        *v = if ix >= 0 && ix < g.width as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, pad) = (g.kernel, g.stride, g.pad() as isize);
    let p = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * s + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * s + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(x: &[T], batch: usize, weight: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.out_len()];
    let (kdim, p) = (g.col_rows(), g.col_cols());
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(y, xs)| {
            if g.is_pointwise() {
                matmul(g.out_channels, kdim, p, weight, false, xs, false, y, false);
            } else {
                let mut cols = vec![T::zero(); kdim * p];
                im2col(xs, g, &mut cols);
                matmul(g.out_channels, kdim, p, weight, false, &cols, false, y, false);
            }
        });
    out
}

/// Returns `(dx, dweight)`.
pub fn conv_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let (kdim, p) = (g.col_rows(), g.col_cols());
    let mut dx = vec![T::zero(); batch * g.in_len()];
    let partials: Vec<Vec<T>> = dx
        .par_chunks_mut(g.in_len())
        .zip(x.par_chunks(g.in_len()))
        .zip(dy.par_chunks(g.out_len()))
        .map(|((dxs, xs), dys)| {
            let mut dw = vec![T::zero(); g.out_channels * kdim];
            if g.is_pointwise() {
                matmul(g.out_channels, p, kdim, dys, false, xs, true, &mut dw, false);
                matmul(kdim, g.out_channels, p, weight, true, dys, false, dxs, false);
            } else {
                let mut cols = vec![T::zero(); kdim * p];
                im2col(xs, g, &mut cols);
                matmul(g.out_channels, p, kdim, dys, false, &cols, true, &mut dw, false);
                matmul(kdim, g.out_channels, p, weight, true, dys, false, &mut cols, false);
                col2im(&cols, g, dxs);
            }
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); g.out_channels * kdim];
    for part in &partials {
        for (a, b) in dw.iter_mut().zip(part) {
            *a += *b;
        }
    }
    (dx, dw)
}

#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub channels: usize,
    pub stride: usize,
    pub pad: usize,
    pub height: usize,
    pub width: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Returns the pooled values and, per output, the flat in-sample index of
/// the selected input (first maximum in scan order).
pub fn maxpool_forward<T: Scalar>(x: &[T], batch: usize, g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let in_plane = g.height * g.width;
    let out_plane = g.out_height * g.out_width;
    let mut out = vec![T::zero(); batch * g.channels * out_plane];
    let mut arg = vec![0u32; out.len()];
    for n in 0..batch {
        for c in 0..g.channels {
            let base = (n * g.channels + c) * in_plane;
            let sample_base = c * in_plane;
            for oy in 0..g.out_height {
                let y0 = (oy * g.stride) as isize - g.pad as isize;
                let ys = y0.max(0) as usize..((y0 + 3) as usize).min(g.height);
                for ox in 0..g.out_width {
                    let x0 = (ox * g.stride) as isize - g.pad as isize;
                    let xs = x0.max(0) as usize..((x0 + 3) as usize).min(g.width);
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for iy in ys.clone() {
                        for ix in xs.clone() {
                            let v = x[base + iy * g.width + ix];
                            if v > best {
                                best = v;
                                best_idx = iy * g.width + ix;
                            }
                        }
                    }
                    let o = (n * g.channels + c) * out_plane + oy * g.out_width + ox;
                    out[o] = best;
                    arg[o] = (sample_base + best_idx) as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(dy: &[T], arg: &[u32], batch: usize, g: &PoolGeom) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let out_len = g.channels * g.out_height * g.out_width;
    let mut dx = vec![T::zero(); batch * in_len];
    for n in 0..batch {
        for o in 0..out_len {
            dx[n * in_len + arg[n * out_len + o] as usize] += dy[n * out_len + o];
        }
    }
    dx
}

pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Training-mode batch normalization over `batch × channels × spatial`.
/// Returns `(y, xhat, inv_std, stats)`.
pub fn batchnorm_train<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>, BnStats<T>) {
    let m = T::of_f64((batch * spatial) as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            for v in &x[off..off + spatial] {
                s += *v;
            }
        }
        mean[c] = s / m;
        let mut q = T::zero();
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            for v in &x[off..off + spatial] {
                let d = *v - mean[c];
                q += d * d;
            }
        }
        var[c] = q / m;
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                xhat[i] = (x[i] - mean[c]) * inv_std[c];
                y[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    (y, xhat, inv_std, BnStats { mean, var })
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_eval<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Vec<T> {
    let scale: Vec<T> = (0..channels).map(|c| gamma[c] / (var[c] + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                y[i] = (x[i] - mean[c]) * scale[c] + beta[c];
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::of_f64((batch * spatial) as f64);
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                dgamma[c] += dy[i] * xhat[i];
                dbeta[c] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * spatial;
            let k = gamma[c] * inv_std[c];
            let mean_dy = dbeta[c] / m;
            let mean_dy_xhat = dgamma[c] / m;
            for i in off..off + spatial {
                dx[i] = k * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn prelu_forward<T: Scalar>(x: &[T], channels: usize, spatial: usize, slope: &[T]) -> Vec<T> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if v > T::zero() {
                v
            } else {
                slope[(i / spatial) % channels] * v
            }
        })
        .collect()
}

/// Returns `(dx, dslope)`.
pub fn prelu_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    channels: usize,
    spatial: usize,
    slope: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut dslope = vec![T::zero(); channels];
    let dx = x
        .iter()
        .zip(dy)
        .enumerate()
        .map(|(i, (&v, &g))| {
            let c = (i / spatial) % channels;
            if v > T::zero() {
                g
            } else {
                dslope[c] += g * v;
                slope[c] * g
            }
        })
        .collect();
    (dx, dslope)
}

pub fn gap_forward<T: Scalar>(x: &[T], planes: usize, spatial: usize) -> Vec<T> {
    let inv = T::of_f64(1.0 / spatial as f64);
    (0..planes)
        .map(|p| x[p * spatial..(p + 1) * spatial].iter().copied().sum::<T>() * inv)
        .collect()
}

pub fn gap_backward<T: Scalar>(dy: &[T], spatial: usize) -> Vec<T> {
    let inv = T::of_f64(1.0 / spatial as f64);
    dy.iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, spatial))
        .collect()
}

pub fn linear_forward<T: Scalar>(x: &[T], batch: usize, inf: usize, outf: usize, w: &[T], b: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); batch * outf];
    for row in y.chunks_mut(outf) {
        row.copy_from_slice(b);
    }
    matmul(batch, inf, outf, x, false, w, true, &mut y, true);
    y
}

/// Returns `(dx, dweight, dbias)`.
pub fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    inf: usize,
    outf: usize,
    w: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); batch * inf];
    matmul(batch, outf, inf, dy, false, w, false, &mut dx, false);
    let mut dw = vec![T::zero(); outf * inf];
    matmul(outf, batch, inf, dy, true, x, false, &mut dw, false);
    let mut db = vec![T::zero(); outf];
    for row in dy.chunks(outf) {
        for (a, b) in db.iter_mut().zip(row) {
            *a += *b;
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_kernel_is_identity() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let g = ConvGeom {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            height: 3,
            width: 3,
            out_height: 3,
            out_width: 3,
        };
        assert_eq!(conv_forward(&x, 1, &w, &g), x);
    }

    #[test]
    fn prelu_negative_input() {
        assert_eq!(prelu_forward(&[-4.0f64, 2.0], 1, 2, &[0.25]), vec![-1.0, 2.0]);
    }

    #[test]
    fn gap_of_constant() {
        assert_eq!(gap_forward(&[5.0f32; 32], 2, 16), vec![5.0, 5.0]);
    }

    #[test]
    fn pool_picks_maximum_with_clipping() {
        // 4x4 input, ceil mode gives 2x2 with the last window clipped.
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let g = PoolGeom {
            channels: 1,
            stride: 2,
            pad: 0,
            height: 4,
            width: 4,
            out_height: 2,
            out_width: 2,
        };
        let (y, arg) = maxpool_forward(&x, 1, &g);
        assert_eq!(y, vec![10.0, 11.0, 14.0, 15.0]);
        assert_eq!(arg, vec![10, 11, 14, 15]);
    }
}
