//! Forward and backward kernels for the heavier operations.
//!
//! Layouts are channels-last: images are `[batch, height, width, channels]`
//! and token sequences `[batch, tokens, channels]`. Loops over the batch axis
//! go through [`crate::par`].

use crate::par;
use crate::tensor::{gemm, Float, Mat, MatMut};

/// Unfold one image `[h, w, c]` into `[h·w, k·k·c]` patches (zero padding,
/// stride 1, "same" output size). Patch columns are ordered `(dy, dx, c)`.
pub fn im2col<T: Float>(x: &[T], h: usize, w: usize, c: usize, k: usize, col: &mut [T]) {
    let p = k / 2;
    let row_len = k * k * c;
    debug_assert_eq!(col.len(), h * w * row_len);
    for y in 0..h {
        for xx in 0..w {
            let row = &mut col[(y * w + xx) * row_len..(y * w + xx + 1) * row_len];
            for dy in 0..k {
                let sy = y as isize + dy as isize - p as isize;
                for dx in 0..k {
                    let sx = xx as isize + dx as isize - p as isize;
                    let dst = &mut row[(dy * k + dx) * c..(dy * k + dx + 1) * c];
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        dst.fill(T::zero());
                    } else {
                        let s = (sy as usize * w + sx as usize) * c;
                        dst.copy_from_slice(&x[s..s + c]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate patch gradients back onto the image.
pub fn col2im<T: Float>(col: &[T], h: usize, w: usize, c: usize, k: usize, dx_img: &mut [T]) {
    let p = k / 2;
    let row_len = k * k * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &col[(y * w + xx) * row_len..(y * w + xx + 1) * row_len];
            for dy in 0..k {
                let sy = y as isize + dy as isize - p as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = xx as isize + dx as isize - p as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let s = (sy as usize * w + sx as usize) * c;
                    let src = &row[(dy * k + dx) * c..(dy * k + dx + 1) * c];
                    for (d, &v) in dx_img[s..s + c].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Convolution forward over a batch: `out = im2col(x)·w + bias`.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward<T: Float>(
    x: &[T],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    k: usize,
    weight: &[T],
    co: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw = h * w;
    let kk = k * k * ci;
    let mut out = vec![T::zero(); b * hw * co];
    par::for_each_chunk_mut(&mut out, hw * co, |bi, o| {
        let xi = &x[bi * hw * ci..(bi + 1) * hw * ci];
        if k == 1 {
            gemm(T::one(), Mat::new(xi, hw, ci), Mat::new(weight, ci, co), T::zero(), MatMut::new(o, hw, co));
        } else {
            let mut col = vec![T::zero(); hw * kk];
            im2col(xi, h, w, ci, k, &mut col);
            gemm(T::one(), Mat::new(&col, hw, kk), Mat::new(weight, kk, co), T::zero(), MatMut::new(o, hw, co));
        }
        if let Some(bias) = bias {
            for row in o.chunks_mut(co) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
    });
    out
}

/// Input gradient of the convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward_input<T: Float>(
    gy: &[T],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    k: usize,
    weight: &[T],
    co: usize,
) -> Vec<T> {
    let hw = h * w;
    let kk = k * k * ci;
    let mut gx = vec![T::zero(); b * hw * ci];
    par::for_each_chunk_mut(&mut gx, hw * ci, |bi, gxi| {
        let g = &gy[bi * hw * co..(bi + 1) * hw * co];
        if k == 1 {
            gemm(T::one(), Mat::new(g, hw, co), Mat::new(weight, ci, co).t(), T::zero(), MatMut::new(gxi, hw, ci));
        } else {
            let mut gcol = vec![T::zero(); hw * kk];
            gemm(T::one(), Mat::new(g, hw, co), Mat::new(weight, kk, co).t(), T::zero(), MatMut::new(&mut gcol, hw, kk));
            col2im(&gcol, h, w, ci, k, gxi);
        }
    });
    gx
}

/// Weight gradient of the convolution, `[k·k·ci, co]`.
///
/// Per-image partial products are summed in batch order.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward_weight<T: Float>(
    x: &[T],
    gy: &[T],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    k: usize,
    co: usize,
) -> Vec<T> {
    let hw = h * w;
    let kk = k * k * ci;
    if k == 1 {
        let mut gw = vec![T::zero(); kk * co];
        gemm(
            T::one(),
            Mat::new(x, b * hw, ci).t(),
            Mat::new(gy, b * hw, co),
            T::zero(),
            MatMut::new(&mut gw, kk, co),
        );
        return gw;
    }
    let mut col = vec![T::zero(); b * hw * kk];
    par::for_each_chunk_mut(&mut col, hw * kk, |bi, c| {
        im2col(&x[bi * hw * ci..(bi + 1) * hw * ci], h, w, ci, k, c);
    });
    let mut gw = vec![T::zero(); kk * co];
    gemm(
        T::one(),
        Mat::new(&col, b * hw, kk).t(),
        Mat::new(gy, b * hw, co),
        T::zero(),
        MatMut::new(&mut gw, kk, co),
    );
    gw
}

fn softmax_rows<T: Float>(s: &mut [T], n: usize) {
    for row in s.chunks_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        let inv = T::one() / z;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Multi-head scaled dot-product self-attention.
///
/// `qkv` is `[b, n, 3c]` with query, key and value packed along channels;
/// heads split each of them into `c / heads` contiguous channels. Returns the
/// `[b, n, c]` output and the attention probabilities `[b, heads, n, n]`.
pub fn attention_forward<T: Float>(qkv: &[T], b: usize, n: usize, c: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let d = c / heads;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut out = vec![T::zero(); b * n * c];
    let mut probs = vec![T::zero(); b * heads * n * n];
    par::for_each_chunk_pair_mut(&mut out, n * c, &mut probs, heads * n * n, |bi, o, p| {
        let base = &qkv[bi * n * 3 * c..(bi + 1) * n * 3 * c];
        for hd in 0..heads {
            let ph = &mut p[hd * n * n..(hd + 1) * n * n];
            let q = Mat::strided(&base[hd * d..], n, d, 3 * c, 1);
            let kt = Mat::strided(&base[c + hd * d..], n, d, 3 * c, 1).t();
            gemm(scale, q, kt, T::zero(), MatMut::new(ph, n, n));
            softmax_rows(ph, n);
            let v = Mat::strided(&base[2 * c + hd * d..], n, d, 3 * c, 1);
            gemm(T::one(), Mat::new(ph, n, n), v, T::zero(), MatMut::strided(&mut o[hd * d..], n, d, c, 1));
        }
    });
    (out, probs)
}

/// Gradient of [`attention_forward`] with respect to the packed `qkv`.
pub fn attention_backward<T: Float>(
    qkv: &[T],
    probs: &[T],
    gout: &[T],
    b: usize,
    n: usize,
    c: usize,
    heads: usize,
) -> Vec<T> {
    let d = c / heads;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut gqkv = vec![T::zero(); b * n * 3 * c];
    par::for_each_chunk_mut(&mut gqkv, n * 3 * c, |bi, gq| {
        let base = &qkv[bi * n * 3 * c..(bi + 1) * n * 3 * c];
        let go = &gout[bi * n * c..(bi + 1) * n * c];
        let mut ds = vec![T::zero(); n * n];
        for hd in 0..heads {
            let p = &probs[(bi * heads + hd) * n * n..(bi * heads + hd + 1) * n * n];
            let go_h = Mat::strided(&go[hd * d..], n, d, c, 1);
            // dV = Pᵀ dO
            gemm(
                T::one(),
                Mat::new(p, n, n).t(),
                go_h,
                T::zero(),
                MatMut::strided(&mut gq[2 * c + hd * d..], n, d, 3 * c, 1),
            );
            // dP = dO Vᵀ
            let vt = Mat::strided(&base[2 * c + hd * d..], n, d, 3 * c, 1).t();
            gemm(T::one(), go_h, vt, T::zero(), MatMut::new(&mut ds, n, n));
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (dr, pr) in ds.chunks_mut(n).zip(p.chunks(n)) {
                let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (x, &pp) in dr.iter_mut().zip(pr) {
                    *x = pp * (*x - dot);
                }
            }
            let k = Mat::strided(&base[c + hd * d..], n, d, 3 * c, 1);
            gemm(
                scale,
                Mat::new(&ds, n, n),
                k,
                T::zero(),
                MatMut::strided(&mut gq[hd * d..], n, d, 3 * c, 1),
            );
            let q = Mat::strided(&base[hd * d..], n, d, 3 * c, 1);
            gemm(
                scale,
                Mat::new(&ds, n, n).t(),
                q,
                T::zero(),
                MatMut::strided(&mut gq[c + hd * d..], n, d, 3 * c, 1),
            );
        }
    });
    gqkv
}

/// Row-wise normalization without affine parameters. Returns the normalized
/// values and per-row inverse standard deviations.
pub fn layer_norm_forward<T: Float>(x: &[T], c: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let mut y = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    let cn = T::lit(c as f64);
    let eps = T::lit(eps);
    for ((xr, yr), iv) in x.chunks(c).zip(y.chunks_mut(c)).zip(inv.iter_mut()) {
        let mean = xr.iter().copied().sum::<T>() / cn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - mean) * is;
        }
        *iv = is;
    }
    (y, inv)
}

pub fn layer_norm_backward<T: Float>(y: &[T], inv: &[T], gy: &[T], c: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    let cn = T::lit(c as f64);
    for (((yr, gr), gxr), &is) in y.chunks(c).zip(gy.chunks(c)).zip(gx.chunks_mut(c)).zip(inv) {
        let mg = gr.iter().copied().sum::<T>() / cn;
        let mgy = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>() / cn;
        for ((o, &g), &v) in gxr.iter_mut().zip(gr).zip(yr) {
            *o = is * (g - mg - v * mgy);
        }
    }
    gx
}

/// Source taps for half-pixel bilinear resampling of an axis of length
/// `n_in` to `n_out`: `(lower index, upper index, upper weight)`.
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_center_tap_is_identity() {
        let x: Vec<f64> = (0..2 * 3 * 2).map(|i| i as f64).collect();
        let mut col = vec![0.0; 2 * 3 * 9 * 2];
        im2col(&x, 2, 3, 2, 3, &mut col);
        for p in 0..6 {
            assert_eq!(&col[p * 18 + 8..p * 18 + 10], &x[p * 2..p * 2 + 2]);
        }
        // top-left patch: first row of taps is padding
        assert!(col[0..6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (h, w, c, k) = (3, 4, 2, 3);
        let x: Vec<f64> = (0..h * w * c).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..h * w * k * k * c).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, h, w, c, k, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, h, w, c, k, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (b, n, c, heads) = (2, 5, 4, 2);
        let qkv: Vec<f64> = (0..b * n * 3 * c).map(|i| (i as f64 * 0.17).sin()).collect();
        let (_, p) = attention_forward(&qkv, b, n, c, heads);
        for row in p.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_taps_two_to_four() {
        let taps = bilinear_taps(2, 4);
        let want = [(0, 1, 0.0), (0, 1, 0.25), (0, 1, 0.75), (1, 1, 0.25)];
        for (got, want) in taps.iter().zip(want) {
            assert_eq!((got.0, got.1), (want.0, want.1));
            assert!((got.2 - want.2).abs() < 1e-15);
        }
    }
}
