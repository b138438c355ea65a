//! Low-level numeric kernels shared by the autograd ops and preprocessing.

use alloc::vec::Vec;

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), row-major.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`. When `ta` is set `a` is stored
/// as `k x m`; when `tb` is set `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
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

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `channels` planes into a `[channels*k*k, out_h*out_w]` matrix.
pub fn im2col(x: &[f32], channels: usize, g: &ConvGeom, cols: &mut Vec<f32>) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let plane = g.in_h * g.in_w;
    cols.clear();
    cols.resize(channels * k * k * oh * ow, 0.0);
    let mut row = 0;
    for c in 0..channels {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back into `dx`.
pub fn col2im_add(cols: &[f32], channels: usize, g: &ConvGeom, dx: &mut [f32]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let plane = g.in_h * g.in_w;
    let mut row = 0;
    for c in 0..channels {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * g.in_w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// One output coordinate of a half-pixel-centred linear resampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LerpTap {
    pub i0: usize,
    pub i1: usize,
    pub w1: f32,
}

/// Interpolation taps along one axis (`align_corners = false` convention).
pub fn lerp_taps(in_len: usize, out_len: usize) -> Vec<LerpTap> {
    let scale = in_len as f32 / out_len as f32;
    (0..out_len)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floorf(src) as usize).min(in_len - 1);
            let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f32 };
            LerpTap { i0, i1, w1 }
        })
        .collect()
}

/// Bilinear resize of `channels` planes.
pub fn bilinear_forward(
    x: &[f32],
    channels: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
) -> Vec<f32> {
    let ty = lerp_taps(in_hw.0, out_hw.0);
    let tx = lerp_taps(in_hw.1, out_hw.1);
    let (ih, iw) = in_hw;
    let (oh, ow) = out_hw;
    let mut out = alloc::vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let src = &x[c * ih * iw..(c + 1) * ih * iw];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.i0 * iw..(a.i0 + 1) * iw];
            let r1 = &src[a.i1 * iw..(a.i1 + 1) * iw];
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * b.w1;
                let bot = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * b.w1;
                dst[oy * ow + ox] = top + (bot - top) * a.w1;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_forward`].
pub fn bilinear_backward(
    dy: &[f32],
    channels: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
) -> Vec<f32> {
    let ty = lerp_taps(in_hw.0, out_hw.0);
    let tx = lerp_taps(in_hw.1, out_hw.1);
    let (ih, iw) = in_hw;
    let (oh, ow) = out_hw;
    let mut dx = alloc::vec![0.0; channels * ih * iw];
    for c in 0..channels {
        let src = &dy[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut dx[c * ih * iw..(c + 1) * ih * iw];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                let g0 = g * (1.0 - a.w1);
                let g1 = g * a.w1;
                dst[a.i0 * iw + b.i0] += g0 * (1.0 - b.w1);
                dst[a.i0 * iw + b.i1] += g0 * b.w1;
                dst[a.i1 * iw + b.i0] += g1 * (1.0 - b.w1);
                dst[a.i1 * iw + b.i1] += g1 * b.w1;
            }
        }
    }
    dx
}

/// Nearest-neighbour resize (`floor((o + 0.5) * in / out)` source index).
pub fn nearest_forward(
    x: &[f32],
    channels: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
) -> Vec<f32> {
    let (ih, iw) = in_hw;
    let (oh, ow) = out_hw;
    let src_idx = |o: usize, inl: usize, outl: usize| {
        (((o as f64 + 0.5) * inl as f64 / outl as f64) as usize).min(inl - 1)
    };
    let mut out = alloc::vec![0.0; channels * oh * ow];
    for c in 0..channels {
        for oy in 0..oh {
            let iy = src_idx(oy, ih, oh);
            for ox in 0..ow {
                let ix = src_idx(ox, iw, ow);
                out[c * oh * ow + oy * ow + ox] = x[c * ih * iw + iy * iw + ix];
            }
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.3 - 1.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.7).sin()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, &a, ta, &b, tb, &mut c, false);
                let want = naive(m, k, n, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            in_h: 5,
            in_w: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f32> = (0..2 * 20).map(|i| (i as f32 * 1.3).cos()).collect();
        let mut cols = Vec::new();
        im2col(&x, 2, &g, &mut cols);
        let y: Vec<f32> = (0..cols.len()).map(|i| (i as f32 * 0.4).sin()).collect();
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im_add(&y, 2, &g, &mut dx);
        let rhs: f32 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn bilinear_preserves_constants_and_is_adjoint() {
        let x = vec![2.5; 3 * 4 * 4];
        let y = bilinear_forward(&x, 3, (4, 4), (16, 16));
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-6));

        let x: Vec<f32> = (0..2 * 3 * 5).map(|i| (i as f32).sin()).collect();
        let y = bilinear_forward(&x, 2, (3, 5), (7, 9));
        let dy: Vec<f32> = (0..y.len()).map(|i| (i as f32 * 0.3).cos()).collect();
        let dx = bilinear_backward(&dy, 2, (3, 5), (7, 9));
        let lhs: f32 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn bilinear_identity_at_same_size() {
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        assert_eq!(bilinear_forward(&x, 1, (4, 4), (4, 4)), x);
    }

    #[test]
    fn nearest_upsample_repeats() {
        let x = vec![0.0, 1.0, 1.0, 0.0];
        let y = nearest_forward(&x, 1, (2, 2), (4, 4));
        assert_eq!(
            y,
            vec![0., 0., 1., 1., 0., 0., 1., 1., 1., 1., 0., 0., 1., 1., 0., 0.]
        );
    }
}
