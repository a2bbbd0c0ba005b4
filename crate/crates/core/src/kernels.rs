//! Raw slice kernels shared by the forward and backward passes.
//!
//! All `gemm_*` and conv kernels accumulate into `out`; callers zero it first
//! when they want a plain product.

use crate::scalar::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorises.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let half = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    (half[0] + half[2]) + (half[1] + half[3]) + tail
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }
}

/// Output indices `o` in `[0, out)` with `o*stride + k - pad` inside `[0, len)`.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv2d_forward_direct<T: Real>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let cpg = g.in_per_group();
    let opg = g.out_per_group();
    let plane_out = g.out_h * g.out_w;
    for co in 0..g.c_out {
        let group = co / opg;
        let dst = &mut out[co * plane_out..(co + 1) * plane_out];
        for cl in 0..cpg {
            let ci = group * cpg + cl;
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(ky, g.stride, g.pad, g.h, g.out_h);
                for kx in 0..g.kw {
                    let wv = w[((co * cpg + cl) * g.kh + ky) * g.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(kx, g.stride, g.pad, g.w, g.out_w);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let src_row = &src[iy * g.w..(iy + 1) * g.w];
                        let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in ox0..ox1 {
                            dst_row[ox] += wv * src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input_direct<T: Real>(grad: &[T], w: &[T], g: &ConvGeom, gx: &mut [T]) {
    let cpg = g.in_per_group();
    let opg = g.out_per_group();
    let plane_out = g.out_h * g.out_w;
    for co in 0..g.c_out {
        let group = co / opg;
        let src = &grad[co * plane_out..(co + 1) * plane_out];
        for cl in 0..cpg {
            let ci = group * cpg + cl;
            let dst = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(ky, g.stride, g.pad, g.h, g.out_h);
                for kx in 0..g.kw {
                    let wv = w[((co * cpg + cl) * g.kh + ky) * g.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(kx, g.stride, g.pad, g.w, g.out_w);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        for ox in ox0..ox1 {
                            dst[iy * g.w + ox * g.stride + kx - g.pad] +=
                                wv * src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight_direct<T: Real>(grad: &[T], x: &[T], g: &ConvGeom, gw: &mut [T]) {
    let cpg = g.in_per_group();
    let opg = g.out_per_group();
    let plane_out = g.out_h * g.out_w;
    for co in 0..g.c_out {
        let group = co / opg;
        let gsrc = &grad[co * plane_out..(co + 1) * plane_out];
        for cl in 0..cpg {
            let ci = group * cpg + cl;
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(ky, g.stride, g.pad, g.h, g.out_h);
                for kx in 0..g.kw {
                    let (ox0, ox1) = valid_range(kx, g.stride, g.pad, g.w, g.out_w);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        for ox in ox0..ox1 {
                            acc += gsrc[oy * g.out_w + ox]
                                * src[iy * g.w + ox * g.stride + kx - g.pad];
                        }
                    }
                    gw[((co * cpg + cl) * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    }
}

fn use_im2col(g: &ConvGeom) -> bool {
    g.groups == 1 && g.kh * g.kw > 1
}

/// Unfolds `x` into a `[(c_in·kh·kw) × (out_h·out_w)]` patch matrix whose
/// rows follow the weight layout.
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_h * g.out_w;
    let mut col = vec![T::zero(); g.c_in * g.kh * g.kw * p];
    for ci in 0..g.c_in {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.stride, g.pad, g.h, g.out_h);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.stride, g.pad, g.w, g.out_w);
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut col[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for ox in ox0..ox1 {
                        dst[ox] = src[iy * g.w + ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch-matrix entries back onto `gx`.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, gx: &mut [T]) {
    let p = g.out_h * g.out_w;
    for ci in 0..g.c_in {
        let dst = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.stride, g.pad, g.h, g.out_h);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.stride, g.pad, g.w, g.out_w);
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &col[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for ox in ox0..ox1 {
                        dst[iy * g.w + ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    if !use_im2col(g) {
        return conv2d_forward_direct(x, w, g, out);
    }
    let k = g.c_in * g.kh * g.kw;
    gemm_nn(w, &im2col(x, g), out, g.c_out, k, g.out_h * g.out_w);
}

pub(crate) fn conv2d_backward_input<T: Real>(grad: &[T], w: &[T], g: &ConvGeom, gx: &mut [T]) {
    if !use_im2col(g) {
        return conv2d_backward_input_direct(grad, w, g, gx);
    }
    let (k, p) = (g.c_in * g.kh * g.kw, g.out_h * g.out_w);
    let mut col = vec![T::zero(); k * p];
    gemm_tn(w, grad, &mut col, g.c_out, k, p);
    col2im(&col, g, gx);
}

pub(crate) fn conv2d_backward_weight<T: Real>(grad: &[T], x: &[T], g: &ConvGeom, gw: &mut [T]) {
    if !use_im2col(g) {
        return conv2d_backward_weight_direct(grad, x, g, gw);
    }
    let (k, p) = (g.c_in * g.kh * g.kw, g.out_h * g.out_w);
    gemm_nt(grad, &im2col(x, g), gw, g.c_out, p, k);
}

/// Half-pixel-centre bilinear taps for one axis: `(i0, i1, frac)` per output index.
pub(crate) fn bilinear_taps<T: Real>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    let scale = T::from_usize_lossy(n_in) / T::from_usize_lossy(n_out);
    let half = T::lit(0.5);
    (0..n_out)
        .map(|o| {
            let src = ((T::from_usize_lossy(o) + half) * scale - half).max(T::zero());
            let i0 = src.floor().to_usize().unwrap_or(0).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - T::from_usize_lossy(i0);
            (i0, i1, frac)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Real>(
    x: &[T],
    c: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Real>(
    grad: &[T],
    c: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &grad[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                dst[y0 * w + x0] += gt * (T::one() - fx);
                dst[y0 * w + x1] += gt * fx;
                dst[y1 * w + x0] += gb * (T::one() - fx);
                dst[y1 * w + x1] += gb * fx;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn im2col_path_matches_direct_loops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for (c_in, h, w, c_out, k, stride, pad) in [
            (3, 9, 7, 4, 3, 1, 1),
            (2, 16, 16, 5, 4, 2, 1),
            (3, 13, 11, 2, 7, 4, 3),
            (4, 5, 5, 3, 3, 2, 0),
        ] {
            let out_h = (h + 2 * pad - k) / stride + 1;
            let out_w = (w + 2 * pad - k) / stride + 1;
            let g = ConvGeom {
                c_in,
                h,
                w,
                c_out,
                kh: k,
                kw: k,
                stride,
                pad,
                groups: 1,
                out_h,
                out_w,
            };
            let x = random(c_in * h * w, &mut rng);
            let wt = random(c_out * c_in * k * k, &mut rng);
            let grad = random(c_out * out_h * out_w, &mut rng);
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);

            let (mut a, mut b) = (vec![0.0; grad.len()], vec![0.0; grad.len()]);
            conv2d_forward(&x, &wt, &g, &mut a);
            conv2d_forward_direct(&x, &wt, &g, &mut b);
            assert!(close(&a, &b));

            let (mut a, mut b) = (vec![0.0; x.len()], vec![0.0; x.len()]);
            conv2d_backward_input(&grad, &wt, &g, &mut a);
            conv2d_backward_input_direct(&grad, &wt, &g, &mut b);
            assert!(close(&a, &b));

            let (mut a, mut b) = (vec![0.0; wt.len()], vec![0.0; wt.len()]);
            conv2d_backward_weight(&grad, &x, &g, &mut a);
            conv2d_backward_weight_direct(&grad, &x, &g, &mut b);
            assert!(close(&a, &b));
        }
    }

    #[test]
    fn gemm_nt_matches_naive_product() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let (m, k, n) = (3, 19, 5);
        let a = random(m * k, &mut rng);
        let b = random(n * k, &mut rng);
        let mut out = vec![1.0; m * n];
        gemm_nt(&a, &b, &mut out, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = 1.0 + (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum::<f64>();
                assert!((out[i * n + j] - want).abs() < 1e-12);
            }
        }
    }
}
