//! Forward and backward loops for the differentiable primitives.
//!
//! Everything here works on flat row-major slices; shape validation happens
//! in the graph layer before these are called.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output columns `ow` for which `ow*stride + kw - pad` lands inside `[0, w)`.
    #[inline]
    fn col_range(&self, kw: usize) -> (usize, usize) {
        let lo = if self.pad > kw {
            (self.pad - kw).div_ceil(self.stride)
        } else {
            0
        };
        // largest ow with ow*stride + kw - pad <= w - 1
        let limit = self.w + self.pad;
        let hi = if limit > kw {
            ((limit - 1 - kw) / self.stride + 1).min(self.w_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn src_row(&self, oh: usize, kh: usize) -> Option<usize> {
        let r = oh * self.stride + kh;
        if r < self.pad || r - self.pad >= self.h {
            None
        } else {
            Some(r - self.pad)
        }
    }
}

/// Unfolds the input into a `[c_in·k·k, h_out·w_out]` patch matrix.
fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let plane_out = g.h_out * g.w_out;
    let mut cols = vec![0.0; g.c_in * g.k * g.k * plane_out];
    for ci in 0..g.c_in {
        let in_plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                let (lo, hi) = g.col_range(kw);
                for oh in 0..g.h_out {
                    let Some(ih) = g.src_row(oh, kh) else { continue };
                    let in_row = &in_plane[ih * g.w..(ih + 1) * g.w];
                    let out_row = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    for ow in lo..hi {
                        out_row[ow] = in_row[ow * g.stride + kw - g.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Folds a patch-matrix gradient back onto the input, accumulating.
fn col2im(g: &ConvGeom, cols: &[f64], grad_in: &mut [f64]) {
    let plane_out = g.h_out * g.w_out;
    for ci in 0..g.c_in {
        let gi_plane = &mut grad_in[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                let (lo, hi) = g.col_range(kw);
                for oh in 0..g.h_out {
                    let Some(ih) = g.src_row(oh, kh) else { continue };
                    let gi_row = &mut gi_plane[ih * g.w..(ih + 1) * g.w];
                    let s_row = &src[oh * g.w_out..(oh + 1) * g.w_out];
                    for ow in lo..hi {
                        gi_row[ow * g.stride + kw - g.pad] += s_row[ow];
                    }
                }
            }
        }
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` on row-major buffers. `ta`/`tb` transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: strides describe row-major buffers whose lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let plane_out = g.h_out * g.w_out;
    let kk = g.c_in * g.k * g.k;
    let mut out = vec![0.0; g.c_out * plane_out];
    if plane_out == 0 || kk == 0 {
        return out;
    }
    let cols = im2col(g, input);
    gemm(g.c_out, kk, plane_out, weight, false, &cols, false, 0.0, &mut out);
    out
}

/// Accumulates the input gradient of a convolution into `grad_in`.
pub(crate) fn conv2d_backward_input(g: &ConvGeom, weight: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    let plane_out = g.h_out * g.w_out;
    let kk = g.c_in * g.k * g.k;
    if plane_out == 0 || kk == 0 {
        return;
    }
    let mut cols = vec![0.0; kk * plane_out];
    gemm(kk, g.c_out, plane_out, weight, true, grad_out, false, 0.0, &mut cols);
    col2im(g, &cols, grad_in);
}

/// Accumulates the weight gradient of a convolution into `grad_w`.
pub(crate) fn conv2d_backward_weight(g: &ConvGeom, input: &[f64], grad_out: &[f64], grad_w: &mut [f64]) {
    let plane_out = g.h_out * g.w_out;
    let kk = g.c_in * g.k * g.k;
    if plane_out == 0 || kk == 0 {
        return;
    }
    let cols = im2col(g, input);
    gemm(g.c_out, plane_out, kk, grad_out, false, &cols, true, 1.0, grad_w);
}

/// Normalized Gram matrix `G = A Aᵀ / (H·W)` of a `[C, H·W]` activation.
///
/// Only the upper triangle is computed; the lower one is a copy, so the
/// result is exactly symmetric.
pub(crate) fn gram_forward(c: usize, hw: usize, a: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; c * c];
    if c == 0 || hw == 0 {
        return g;
    }
    gemm(c, hw, c, a, false, a, true, 0.0, &mut g);
    let norm = 1.0 / hw as f64;
    g.iter_mut().for_each(|v| *v *= norm);
    g
}

pub(crate) fn gram_backward(c: usize, hw: usize, a: &[f64], grad_g: &[f64], grad_a: &mut [f64]) {
    if c == 0 || hw == 0 {
        return;
    }
    let norm = 1.0 / hw as f64;
    let mut sym = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            sym[i * c + j] = (grad_g[i * c + j] + grad_g[j * c + i]) * norm;
        }
    }
    gemm(c, c, hw, &sym, false, a, false, 1.0, grad_a);
}

pub(crate) fn avg_pool2_forward(c: usize, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oh in 0..ho {
            let r0 = &plane[2 * oh * w..(2 * oh + 1) * w];
            let r1 = &plane[(2 * oh + 1) * w..(2 * oh + 2) * w];
            for ow in 0..wo {
                out[(ch * ho + oh) * wo + ow] =
                    0.25 * (r0[2 * ow] + r0[2 * ow + 1] + r1[2 * ow] + r1[2 * ow + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(c: usize, h: usize, w: usize, grad_out: &[f64], grad_in: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        for oh in 0..ho {
            for ow in 0..wo {
                let g = 0.25 * grad_out[(ch * ho + oh) * wo + ow];
                let base = ch * h * w + 2 * oh * w + 2 * ow;
                grad_in[base] += g;
                grad_in[base + 1] += g;
                grad_in[base + w] += g;
                grad_in[base + w + 1] += g;
            }
        }
    }
}

/// Max pool over 2×2 windows; returns values and the flat source index of each maximum.
/// Ties resolve to the first element in row-major window order.
pub(crate) fn max_pool2_forward(c: usize, h: usize, w: usize, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    let mut arg = vec![0; c * ho * wo];
    for ch in 0..c {
        for oh in 0..ho {
            for ow in 0..wo {
                let base = ch * h * w + 2 * oh * w + 2 * ow;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = (ch * ho + oh) * wo + ow;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

/// Numerically stable softmax.
pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log Σ exp(z)` without overflow.
pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
