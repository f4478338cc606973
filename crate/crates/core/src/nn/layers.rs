//! Forward/backward kernels for the supported layer types. All functions work
//! on a whole batch laid out NCHW (or N×features for dense layers).

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Elements in one filter: `in_c · k · k`.
    pub fn filter_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }
}

/// Unrolls one image into a `(in_c·k·k) × (out_h·out_w)` column matrix.
pub fn im2col<T: Real>(g: &ConvGeom, image: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let positions = oh * ow;
    for c in 0..g.in_c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && (iy as usize) < g.in_h
                            && ix >= 0
                            && (ix as usize) < g.in_w
                        {
                            image[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into the image gradient.
pub fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let positions = oh * ow;
    for c in 0..g.in_c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.in_h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.in_w {
                            continue;
                        }
                        image[(c * g.in_h + iy as usize) * g.in_w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Real>(g: &ConvGeom, batch: usize, x: &[T], weight: &[T], bias: &[T], y: &mut [T]) {
    let k = g.filter_len();
    let positions = g.out_h() * g.out_w();
    let mut cols = vec![T::zero(); k * positions];
    for n in 0..batch {
        im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        let out = &mut y[n * g.out_len()..(n + 1) * g.out_len()];
        for (oc, row) in out.chunks_mut(positions).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[oc]);
        }
        T::gemm(g.out_c, k, positions, T::one(), weight, k as isize, 1, &cols, positions as isize, 1, T::one(), out, positions as isize, 1);
    }
}

/// Accumulates weight/bias gradients and writes the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let k = g.filter_len();
    let positions = g.out_h() * g.out_w();
    let mut cols = vec![T::zero(); k * positions];
    let mut dcols = vec![T::zero(); k * positions];
    dx.iter_mut().for_each(|v| *v = T::zero());
    for n in 0..batch {
        let dout = &dy[n * g.out_len()..(n + 1) * g.out_len()];
        for (oc, row) in dout.chunks(positions).enumerate() {
            dbias[oc] += row.iter().copied().sum::<T>();
        }
        im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        // dW (oc×k) += dout (oc×P) · colsᵀ (P×k)
        T::gemm(g.out_c, positions, k, T::one(), dout, positions as isize, 1, &cols, 1, positions as isize, T::one(), dweight, k as isize, 1);
        // dcols (k×P) = Wᵀ (k×oc) · dout (oc×P)
        T::gemm(k, g.out_c, positions, T::one(), weight, 1, k as isize, dout, positions as isize, 1, T::zero(), &mut dcols, positions as isize, 1);
        col2im_add(g, &dcols, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
    }
}

/// `y (N×out) = x (N×in) · Wᵀ + b` with `W` stored `out × in`.
pub fn dense_forward<T: Real>(batch: usize, inf: usize, outf: usize, x: &[T], weight: &[T], bias: &[T], y: &mut [T]) {
    for row in y.chunks_mut(outf) {
        row.copy_from_slice(bias);
    }
    T::gemm(batch, inf, outf, T::one(), x, inf as isize, 1, weight, 1, inf as isize, T::one(), y, outf as isize, 1);
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Real>(
    batch: usize,
    inf: usize,
    outf: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    for row in dy.chunks(outf) {
        for (db, &d) in dbias.iter_mut().zip(row) {
            *db += d;
        }
    }
    // dW (out×in) += dyᵀ (out×N) · x (N×in)
    T::gemm(outf, batch, inf, T::one(), dy, 1, outf as isize, x, inf as isize, 1, T::one(), dweight, inf as isize, 1);
    // dx (N×in) = dy (N×out) · W (out×in)
    T::gemm(batch, outf, inf, T::one(), dy, outf as isize, 1, weight, inf as isize, 1, T::zero(), dx, inf as isize, 1);
}

pub fn leaky_forward<T: Real>(slope: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = if v >= T::zero() { v } else { slope * v };
    }
}

pub fn leaky_backward<T: Real>(slope: T, x: &[T], dy: &[T], dx: &mut [T]) {
    for ((o, &v), &d) in dx.iter_mut().zip(x).zip(dy) {
        *o = if v >= T::zero() { d } else { slope * d };
    }
}

/// Non-overlapping max-pool; records the flat input index of every winner
/// (first maximum on ties).
pub fn maxpool_forward<T: Real>(
    batch_channels: usize,
    h: usize,
    w: usize,
    size: usize,
    x: &[T],
    y: &mut [T],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / size, w / size);
    for bc in 0..batch_channels {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                let o = (bc * oh + oy) * ow + ox;
                y[o] = x[best];
                argmax[o] = best;
            }
        }
    }
}

pub fn maxpool_backward<T: Real>(argmax: &[usize], dy: &[T], dx: &mut [T]) {
    dx.iter_mut().for_each(|v| *v = T::zero());
    for (&i, &d) in argmax.iter().zip(dy) {
        dx[i] += d;
    }
}

/// Per-channel statistics saved by a training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    pub count: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Training-mode batch norm over N·H·W for each channel.
#[allow(clippy::too_many_arguments)]
pub fn bn_forward_train<T: Real>(
    batch: usize,
    channels: usize,
    spatial: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    y: &mut [T],
) -> BnSaved<T> {
    let count = batch * spatial;
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    let mut inv_std = vec![T::zero(); channels];
    let mut xhat = vec![T::zero(); x.len()];
    let m = T::lit(count as f64);
    for c in 0..channels {
        let mut s = T::zero();
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            s += x[off..off + spatial].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            for &e in &x[off..off + spatial] {
                v += (e - mu) * (e - mu);
            }
        }
        let v = v / m;
        let is = T::one() / (v + T::lit(BN_EPS)).sqrt();
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                xhat[i] = (x[i] - mu) * is;
                y[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
        mean[c] = mu;
        var[c] = v;
        inv_std[c] = is;
    }
    BnSaved { xhat, inv_std, mean, var, count }
}

#[allow(clippy::too_many_arguments)]
pub fn bn_forward_eval<T: Real>(
    batch: usize,
    channels: usize,
    spatial: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    y: &mut [T],
) {
    for c in 0..channels {
        let is = T::one() / (running_var[c] + T::lit(BN_EPS)).sqrt();
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                y[i] = gamma[c] * (x[i] - running_mean[c]) * is + beta[c];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn bn_backward_train<T: Real>(
    batch: usize,
    channels: usize,
    spatial: usize,
    saved: &BnSaved<T>,
    gamma: &[T],
    dy: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    dx: &mut [T],
) {
    let m = T::lit(saved.count as f64);
    for c in 0..channels {
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * saved.xhat[i];
            }
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        let scale = gamma[c] * saved.inv_std[c] / m;
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                dx[i] = scale * (m * dy[i] - sum_dy - saved.xhat[i] * sum_dy_xhat);
            }
        }
    }
}

/// Backward of the eval-mode (running statistics) batch norm.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward_eval<T: Real>(
    batch: usize,
    channels: usize,
    spatial: usize,
    x: &[T],
    gamma: &[T],
    running_mean: &[T],
    running_var: &[T],
    dy: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    dx: &mut [T],
) {
    for c in 0..channels {
        let is = T::one() / (running_var[c] + T::lit(BN_EPS)).sqrt();
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                dgamma[c] += dy[i] * (x[i] - running_mean[c]) * is;
                dbeta[c] += dy[i];
                dx[i] = dy[i] * gamma[c] * is;
            }
        }
    }
}
