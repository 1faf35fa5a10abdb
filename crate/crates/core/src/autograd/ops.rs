use super::kernels::{self, bilinear_taps};
use super::{Grads, Var};
use crate::par;
use crate::tensor::{gemm, Float, Mat, MatMut, Tensor};

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Sum `g` over its leading axes down to `n` trailing elements.
fn reduce_rows<T: Float>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for row in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[allow(clippy::should_implement_trait)]
impl<'g, T: Float> Var<'g, T> {
    fn push<F>(&self, value: Tensor<T>, parents: &[Var<'g, T>], backward: F) -> Var<'g, T>
    where
        F: FnOnce(&Tensor<T>, &mut Grads<T>) + 'static,
    {
        self.graph.push(value, parents, backward)
    }

    /// Elementwise sum. `other` may also be a trailing-suffix shape (e.g. a
    /// bias `[c]` against `[.., c]`), in which case it is broadcast.
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        if a.shape() == b.shape() {
            let out = a.zip_map(&b, |x, y| x + y);
            let (ia, ib) = (self.id, other.id);
            return self.push(out, &[self, other], move |g, gr| {
                gr.accumulate(ia, g.clone());
                gr.accumulate(ib, g.clone());
            });
        }
        if !is_suffix(a.shape(), b.shape()) && is_suffix(b.shape(), a.shape()) {
            return other.add(self);
        }
        assert!(is_suffix(a.shape(), b.shape()), "add: cannot broadcast {:?} onto {:?}", b.shape(), a.shape());
        let n = b.numel();
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &v) in row.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        let out = Tensor::new(a.shape(), out);
        let (ia, ib) = (self.id, other.id);
        let bshape = b.shape().to_vec();
        self.push(out, &[self, other], move |g, gr| {
            gr.accumulate(ia, g.clone());
            if gr.needs(ib) {
                gr.accumulate(ib, Tensor::new(&bshape, reduce_rows(g.data(), n)));
            }
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        let (ia, ib) = (self.id, other.id);
        self.push(out, &[self, other], move |g, gr| {
            gr.accumulate(ia, g.clone());
            if gr.needs(ib) {
                gr.accumulate(ib, g.map(|x| -x));
            }
        })
    }

    /// Elementwise product, with the same suffix broadcasting as [`Var::add`].
    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        if !is_suffix(a.shape(), b.shape()) && is_suffix(b.shape(), a.shape()) {
            return other.mul(self);
        }
        assert!(is_suffix(a.shape(), b.shape()), "mul: cannot broadcast {:?} onto {:?}", b.shape(), a.shape());
        let n = b.numel();
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &v) in row.iter_mut().zip(b.data()) {
                *o *= v;
            }
        }
        let out = Tensor::new(a.shape(), out);
        let (ia, ib) = (self.id, other.id);
        self.push(out, &[self, other], move |g, gr| {
            if gr.needs(ia) {
                let mut ga = g.data().to_vec();
                for row in ga.chunks_mut(n) {
                    for (o, &v) in row.iter_mut().zip(b.data()) {
                        *o *= v;
                    }
                }
                gr.accumulate(ia, Tensor::new(a.shape(), ga));
            }
            if gr.needs(ib) {
                let mut gb = vec![T::zero(); n];
                for (gr_, ar) in g.data().chunks(n).zip(a.data().chunks(n)) {
                    for ((o, &gg), &aa) in gb.iter_mut().zip(gr_).zip(ar) {
                        *o += gg * aa;
                    }
                }
                gr.accumulate(ib, Tensor::new(b.shape(), gb));
            }
        })
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::lit(c);
        let out = self.value().map(|x| x * c);
        let ia = self.id;
        self.push(out, &[self], move |g, gr| gr.accumulate(ia, g.map(|x| x * c)))
    }

    /// `x[b, n, c] + v[b, c]`, broadcasting `v` over the middle axis.
    pub fn add_mid(self, v: Var<'g, T>) -> Var<'g, T> {
        let (x, vv) = (self.value(), v.value());
        let (b, c) = (vv.dim(0), vv.dim(1));
        assert!(x.rank() >= 2 && x.dim(0) == b && x.shape()[x.rank() - 1] == c, "add_mid shape mismatch {:?} vs {:?}", x.shape(), vv.shape());
        let per = x.numel() / b;
        let mut out = x.data().to_vec();
        for (bi, chunk) in out.chunks_mut(per).enumerate() {
            let vr = &vv.data()[bi * c..(bi + 1) * c];
            for row in chunk.chunks_mut(c) {
                for (o, &s) in row.iter_mut().zip(vr) {
                    *o += s;
                }
            }
        }
        let (ix, iv) = (self.id, v.id);
        self.push(Tensor::new(x.shape(), out), &[self, v], move |g, gr| {
            gr.accumulate(ix, g.clone());
            if gr.needs(iv) {
                let mut gv = vec![T::zero(); b * c];
                for (bi, chunk) in g.data().chunks(per).enumerate() {
                    let dst = &mut gv[bi * c..(bi + 1) * c];
                    for row in chunk.chunks(c) {
                        for (o, &s) in dst.iter_mut().zip(row) {
                            *o += s;
                        }
                    }
                }
                gr.accumulate(iv, Tensor::new(&[b, c], gv));
            }
        })
    }

    /// `x[b, n, c] ⊙ v[b, c]`, broadcasting `v` over the middle axis.
    pub fn mul_mid(self, v: Var<'g, T>) -> Var<'g, T> {
        let (x, vv) = (self.value(), v.value());
        let (b, c) = (vv.dim(0), vv.dim(1));
        assert!(x.rank() >= 2 && x.dim(0) == b && x.shape()[x.rank() - 1] == c, "mul_mid shape mismatch {:?} vs {:?}", x.shape(), vv.shape());
        let per = x.numel() / b;
        let mut out = x.data().to_vec();
        for (bi, chunk) in out.chunks_mut(per).enumerate() {
            let vr = &vv.data()[bi * c..(bi + 1) * c];
            for row in chunk.chunks_mut(c) {
                for (o, &s) in row.iter_mut().zip(vr) {
                    *o *= s;
                }
            }
        }
        let (ix, iv) = (self.id, v.id);
        self.push(Tensor::new(x.shape(), out), &[self, v], move |g, gr| {
            if gr.needs(ix) {
                let mut gx = g.data().to_vec();
                for (bi, chunk) in gx.chunks_mut(per).enumerate() {
                    let vr = &vv.data()[bi * c..(bi + 1) * c];
                    for row in chunk.chunks_mut(c) {
                        for (o, &s) in row.iter_mut().zip(vr) {
                            *o *= s;
                        }
                    }
                }
                gr.accumulate(ix, Tensor::new(x.shape(), gx));
            }
            if gr.needs(iv) {
                let mut gv = vec![T::zero(); b * c];
                for (bi, (gc, xc)) in g.data().chunks(per).zip(x.data().chunks(per)).enumerate() {
                    let dst = &mut gv[bi * c..(bi + 1) * c];
                    for (gr_, xr) in gc.chunks(c).zip(xc.chunks(c)) {
                        for ((o, &gg), &xx) in dst.iter_mut().zip(gr_).zip(xr) {
                            *o += gg * xx;
                        }
                    }
                }
                gr.accumulate(iv, Tensor::new(&[b, c], gv));
            }
        })
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v / (T::one() + (-v).exp()));
        let ia = self.id;
        self.push(out, &[self], move |g, gr| {
            let gx = x.zip_map(g, |v, gg| {
                let s = T::one() / (T::one() + (-v).exp());
                gg * s * (T::one() + v * (T::one() - s))
            });
            gr.accumulate(ia, gx);
        })
    }

    /// `x[.., k] · w[k, n]`.
    pub fn matmul(self, w: Var<'g, T>) -> Var<'g, T> {
        self.linear_impl(w, None)
    }

    /// `x[.., k] · w[k, n] + bias[n]`.
    pub fn linear(self, w: Var<'g, T>, bias: Var<'g, T>) -> Var<'g, T> {
        self.linear_impl(w, Some(bias))
    }

    fn linear_impl(self, w: Var<'g, T>, bias: Option<Var<'g, T>>) -> Var<'g, T> {
        let (x, wv) = (self.value(), w.value());
        assert_eq!(wv.rank(), 2, "linear weight must be a matrix");
        let (k, n) = (wv.dim(0), wv.dim(1));
        assert_eq!(*x.shape().last().unwrap(), k, "linear: input width {:?} vs weight {:?}", x.shape(), wv.shape());
        let m = x.numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), Mat::new(x.data(), m, k), Mat::new(wv.data(), k, n), T::zero(), MatMut::new(&mut out, m, n));
        let bv = bias.map(|b| b.value());
        if let Some(bv) = &bv {
            assert_eq!(bv.shape(), [n], "linear bias shape");
            for row in out.chunks_mut(n) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let (ix, iw, ib) = (self.id, w.id, bias.map(|b| b.id));
        let mut parents = vec![self, w];
        parents.extend(bias);
        self.push(Tensor::new(&shape, out), &parents, move |g, gr| {
            if gr.needs(ix) {
                let mut gx = vec![T::zero(); m * k];
                gemm(T::one(), Mat::new(g.data(), m, n), Mat::new(wv.data(), k, n).t(), T::zero(), MatMut::new(&mut gx, m, k));
                gr.accumulate(ix, Tensor::new(x.shape(), gx));
            }
            if gr.needs(iw) {
                let mut gw = vec![T::zero(); k * n];
                gemm(T::one(), Mat::new(x.data(), m, k).t(), Mat::new(g.data(), m, n), T::zero(), MatMut::new(&mut gw, k, n));
                gr.accumulate(iw, Tensor::new(&[k, n], gw));
            }
            if let Some(ib) = ib {
                if gr.needs(ib) {
                    gr.accumulate(ib, Tensor::new(&[n], reduce_rows(g.data(), n)));
                }
            }
        })
    }

    /// Batched product `x[b, m, k] · w[b, k, n]`.
    pub fn bmm(self, w: Var<'g, T>) -> Var<'g, T> {
        let (x, wv) = (self.value(), w.value());
        assert!(x.rank() == 3 && wv.rank() == 3 && x.dim(0) == wv.dim(0) && x.dim(2) == wv.dim(1), "bmm shape mismatch {:?} · {:?}", x.shape(), wv.shape());
        let (b, m, k, n) = (x.dim(0), x.dim(1), x.dim(2), wv.dim(2));
        let mut out = vec![T::zero(); b * m * n];
        par::for_each_chunk_mut(&mut out, m * n, |bi, o| {
            gemm(
                T::one(),
                Mat::new(&x.data()[bi * m * k..(bi + 1) * m * k], m, k),
                Mat::new(&wv.data()[bi * k * n..(bi + 1) * k * n], k, n),
                T::zero(),
                MatMut::new(o, m, n),
            );
        });
        let (ix, iw) = (self.id, w.id);
        self.push(Tensor::new(&[b, m, n], out), &[self, w], move |g, gr| {
            if gr.needs(ix) {
                let mut gx = vec![T::zero(); b * m * k];
                par::for_each_chunk_mut(&mut gx, m * k, |bi, o| {
                    gemm(
                        T::one(),
                        Mat::new(&g.data()[bi * m * n..(bi + 1) * m * n], m, n),
                        Mat::new(&wv.data()[bi * k * n..(bi + 1) * k * n], k, n).t(),
                        T::zero(),
                        MatMut::new(o, m, k),
                    );
                });
                gr.accumulate(ix, Tensor::new(&[b, m, k], gx));
            }
            if gr.needs(iw) {
                let mut gw = vec![T::zero(); b * k * n];
                par::for_each_chunk_mut(&mut gw, k * n, |bi, o| {
                    gemm(
                        T::one(),
                        Mat::new(&x.data()[bi * m * k..(bi + 1) * m * k], m, k).t(),
                        Mat::new(&g.data()[bi * m * n..(bi + 1) * m * n], m, n),
                        T::zero(),
                        MatMut::new(o, k, n),
                    );
                });
                gr.accumulate(iw, Tensor::new(&[b, k, n], gw));
            }
        })
    }

    /// Normalize over the last axis (zero mean, unit variance), no affine.
    pub fn layer_norm(self, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let c = *x.shape().last().unwrap();
        let (y, inv) = kernels::layer_norm_forward(x.data(), c, eps);
        let y = Tensor::new(x.shape(), y);
        let ia = self.id;
        let yc = y.clone();
        self.push(y, &[self], move |g, gr| {
            let gx = kernels::layer_norm_backward(yc.data(), &inv, g.data(), c);
            gr.accumulate(ia, Tensor::new(yc.shape(), gx));
        })
    }

    /// Self-attention over packed `[b, n, 3c]` query/key/value; returns `[b, n, c]`.
    pub fn attention(self, heads: usize) -> Var<'g, T> {
        let qkv = self.value();
        assert_eq!(qkv.rank(), 3, "attention expects [b, n, 3c]");
        let (b, n, c3) = (qkv.dim(0), qkv.dim(1), qkv.dim(2));
        assert!(c3 % 3 == 0 && (c3 / 3) % heads == 0, "attention width {c3} incompatible with {heads} heads");
        let c = c3 / 3;
        let (out, probs) = kernels::attention_forward(qkv.data(), b, n, c, heads);
        let ia = self.id;
        self.push(Tensor::new(&[b, n, c], out), &[self], move |g, gr| {
            let gq = kernels::attention_backward(qkv.data(), &probs, g.data(), b, n, c, heads);
            gr.accumulate(ia, Tensor::new(&[b, n, c3], gq));
        })
    }

    /// "Same" convolution, stride 1, odd kernel `k`, on `[b, h, w, ci]`.
    /// `w` is `[k·k·ci, co]` with rows ordered `(dy, dx, ci)`.
    pub fn conv2d(self, w: Var<'g, T>, bias: Option<Var<'g, T>>, k: usize) -> Var<'g, T> {
        let (x, wv) = (self.value(), w.value());
        assert!(k % 2 == 1, "kernel size must be odd");
        assert_eq!(x.rank(), 4, "conv2d expects [b, h, w, c]");
        let (b, h, wd, ci) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert_eq!(wv.dim(0), k * k * ci, "conv2d weight rows {:?} vs input {:?}", wv.shape(), x.shape());
        let co = wv.dim(1);
        let bv = bias.map(|b| b.value());
        let out = kernels::conv_forward(x.data(), b, h, wd, ci, k, wv.data(), co, bv.as_ref().map(|t| t.data()));
        let (ix, iw, ib) = (self.id, w.id, bias.map(|b| b.id));
        let mut parents = vec![self, w];
        parents.extend(bias);
        self.push(Tensor::new(&[b, h, wd, co], out), &parents, move |g, gr| {
            if gr.needs(ix) {
                let gx = kernels::conv_backward_input(g.data(), b, h, wd, ci, k, wv.data(), co);
                gr.accumulate(ix, Tensor::new(&[b, h, wd, ci], gx));
            }
            if gr.needs(iw) {
                let gw = kernels::conv_backward_weight(x.data(), g.data(), b, h, wd, ci, k, co);
                gr.accumulate(iw, Tensor::new(&[k * k * ci, co], gw));
            }
            if let Some(ib) = ib {
                if gr.needs(ib) {
                    gr.accumulate(ib, Tensor::new(&[co], reduce_rows(g.data(), co)));
                }
            }
        })
    }

    /// `[b, h, w, c] → [b, h/r, w/r, c·r²]`, channel index `(dy·r + dx)·c + ch`.
    pub fn pixel_unshuffle(self, r: usize) -> Var<'g, T> {
        let x = self.value();
        let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert!(h % r == 0 && w % r == 0, "pixel_unshuffle: {h}x{w} not divisible by {r}");
        let map = shuffle_map(b, h, w, c, r);
        let mut out = vec![T::zero(); x.numel()];
        for (dst, &src) in map.iter().enumerate() {
            out[dst] = x.data()[src];
        }
        let ia = self.id;
        let shape = x.shape().to_vec();
        self.push(Tensor::new(&[b, h / r, w / r, c * r * r], out), &[self], move |g, gr| {
            let mut gx = vec![T::zero(); g.numel()];
            for (dst, &src) in map.iter().enumerate() {
                gx[src] = g.data()[dst];
            }
            gr.accumulate(ia, Tensor::new(&shape, gx));
        })
    }

    /// Inverse of [`Var::pixel_unshuffle`].
    pub fn pixel_shuffle(self, r: usize) -> Var<'g, T> {
        let x = self.value();
        let (b, h, w, cr) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert!(cr % (r * r) == 0, "pixel_shuffle: {cr} channels not divisible by {}", r * r);
        let c = cr / (r * r);
        // map[i] = index in the full-resolution tensor of unshuffled element i
        let map = shuffle_map(b, h * r, w * r, c, r);
        let mut out = vec![T::zero(); x.numel()];
        for (src, &dst) in map.iter().enumerate() {
            out[dst] = x.data()[src];
        }
        let ia = self.id;
        let shape = x.shape().to_vec();
        self.push(Tensor::new(&[b, h * r, w * r, c], out), &[self], move |g, gr| {
            let mut gx = vec![T::zero(); g.numel()];
            for (src, &dst) in map.iter().enumerate() {
                gx[src] = g.data()[dst];
            }
            gr.accumulate(ia, Tensor::new(&shape, gx));
        })
    }

    /// Half-pixel bilinear resampling of `[b, h, w, c]` to `[b, oh, ow, c]`.
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Var<'g, T> {
        let x = self.value();
        let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let mut out = vec![T::zero(); b * oh * ow * c];
        for bi in 0..b {
            let src = &x.data()[bi * h * w * c..(bi + 1) * h * w * c];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let o = ((bi * oh + oy) * ow + ox) * c;
                    for (tap_y, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                        for (tap_x, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                            let wgt = T::lit(wy * wx);
                            if wgt == T::zero() {
                                continue;
                            }
                            let s = (tap_y * w + tap_x) * c;
                            for ch in 0..c {
                                out[o + ch] += wgt * src[s + ch];
                            }
                        }
                    }
                }
            }
        }
        let ia = self.id;
        self.push(Tensor::new(&[b, oh, ow, c], out), &[self], move |g, gr| {
            let mut gx = vec![T::zero(); b * h * w * c];
            for bi in 0..b {
                let dst = &mut gx[bi * h * w * c..(bi + 1) * h * w * c];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let o = ((bi * oh + oy) * ow + ox) * c;
                        for (tap_y, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                            for (tap_x, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                                let wgt = T::lit(wy * wx);
                                if wgt == T::zero() {
                                    continue;
                                }
                                let s = (tap_y * w + tap_x) * c;
                                for ch in 0..c {
                                    dst[s + ch] += wgt * g.data()[o + ch];
                                }
                            }
                        }
                    }
                }
            }
            gr.accumulate(ia, Tensor::new(&[b, h, w, c], gx));
        })
    }

    /// Concatenate along the last axis; leading shapes must agree.
    pub fn concat_last(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let (ra, rb) = (a.rank(), b.rank());
        assert!(ra == rb && a.shape()[..ra - 1] == b.shape()[..rb - 1], "concat_last shape mismatch {:?} / {:?}", a.shape(), b.shape());
        let (ca, cb) = (a.shape()[ra - 1], b.shape()[rb - 1]);
        let rows = a.numel() / ca;
        let mut out = Vec::with_capacity(a.numel() + b.numel());
        for (x, y) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
            out.extend_from_slice(x);
            out.extend_from_slice(y);
        }
        let mut shape = a.shape().to_vec();
        shape[ra - 1] = ca + cb;
        let (ia, ib) = (self.id, other.id);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.push(Tensor::new(&shape, out), &[self, other], move |g, gr| {
            let mut ga = Vec::with_capacity(rows * ca);
            let mut gb = Vec::with_capacity(rows * cb);
            for row in g.data().chunks(ca + cb) {
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            gr.accumulate(ia, Tensor::new(&sa, ga));
            gr.accumulate(ib, Tensor::new(&sb, gb));
        })
    }

    /// Append the rows of `p[t, d]` to every batch element of `x[b, n, d]`.
    pub fn concat_rows(self, p: Var<'g, T>) -> Var<'g, T> {
        let (x, pv) = (self.value(), p.value());
        assert!(x.rank() == 3 && pv.rank() == 2 && x.dim(2) == pv.dim(1), "concat_rows shape mismatch {:?} / {:?}", x.shape(), pv.shape());
        let (b, n, d, t) = (x.dim(0), x.dim(1), x.dim(2), pv.dim(0));
        let mut out = Vec::with_capacity(b * (n + t) * d);
        for xb in x.data().chunks(n * d) {
            out.extend_from_slice(xb);
            out.extend_from_slice(pv.data());
        }
        let (ix, ip) = (self.id, p.id);
        self.push(Tensor::new(&[b, n + t, d], out), &[self, p], move |g, gr| {
            let mut gx = Vec::with_capacity(b * n * d);
            let mut gp = vec![T::zero(); t * d];
            for gb in g.data().chunks((n + t) * d) {
                gx.extend_from_slice(&gb[..n * d]);
                for (o, &v) in gp.iter_mut().zip(&gb[n * d..]) {
                    *o += v;
                }
            }
            gr.accumulate(ix, Tensor::new(&[b, n, d], gx));
            gr.accumulate(ip, Tensor::new(&[t, d], gp));
        })
    }

    /// Rows `start..start+len` of every batch element of `x[b, m, d]`.
    pub fn narrow_rows(self, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let (b, m, d) = (x.dim(0), x.dim(1), x.dim(2));
        assert!(start + len <= m, "narrow_rows out of range");
        let mut out = Vec::with_capacity(b * len * d);
        for xb in x.data().chunks(m * d) {
            out.extend_from_slice(&xb[start * d..(start + len) * d]);
        }
        let ia = self.id;
        self.push(Tensor::new(&[b, len, d], out), &[self], move |g, gr| {
            let mut gx = vec![T::zero(); b * m * d];
            for (dst, src) in gx.chunks_mut(m * d).zip(g.data().chunks(len * d)) {
                dst[start * d..(start + len) * d].copy_from_slice(src);
            }
            gr.accumulate(ia, Tensor::new(&[b, m, d], gx));
        })
    }

    /// Elements `start..start+len` of the last axis.
    pub fn narrow_last(self, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let r = x.rank();
        let l = x.shape()[r - 1];
        assert!(start + len <= l, "narrow_last out of range");
        let mut out = Vec::with_capacity(x.numel() / l * len);
        for row in x.data().chunks(l) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        shape[r - 1] = len;
        let ia = self.id;
        let full = x.shape().to_vec();
        self.push(Tensor::new(&shape, out), &[self], move |g, gr| {
            let mut gx = vec![T::zero(); full.iter().product()];
            for (dst, src) in gx.chunks_mut(l).zip(g.data().chunks(len)) {
                dst[start..start + len].copy_from_slice(src);
            }
            gr.accumulate(ia, Tensor::new(&full, gx));
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let out = x.reshape(shape);
        let ia = self.id;
        let orig = x.shape().to_vec();
        self.push(out, &[self], move |g, gr| gr.accumulate(ia, g.reshape(&orig)))
    }

    /// Rows `ids` of `table[v, d]`.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'g, T> {
        let t = self.value();
        let (v, d) = (t.dim(0), t.dim(1));
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "gather_rows: id {i} out of range {v}");
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let ia = self.id;
        let ids = ids.to_vec();
        self.push(Tensor::new(&[ids.len(), d], out), &[self], move |g, gr| {
            if gr.needs(ia) {
                let mut gt = vec![T::zero(); v * d];
                for (row, &i) in g.data().chunks(d).zip(&ids) {
                    for (o, &x) in gt[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *o += x;
                    }
                }
                gr.accumulate(ia, Tensor::new(&[v, d], gt));
            }
        })
    }

    /// Forward differences along height (`axis = 1`) or width (`axis = 2`)
    /// of `[b, h, w, c]`.
    pub fn spatial_diff(self, axis: usize) -> Var<'g, T> {
        let x = self.value();
        let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert!(axis == 1 || axis == 2, "spatial_diff axis must be 1 or 2");
        let (oh, ow) = if axis == 1 { (h - 1, w) } else { (h, w - 1) };
        let step = if axis == 1 { w * c } else { c };
        let idx = move |bi: usize, y: usize, xx: usize| ((bi * h + y) * w + xx) * c;
        let mut out = Vec::with_capacity(b * oh * ow * c);
        for bi in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let s = idx(bi, y, xx);
                    for ch in 0..c {
                        out.push(x.data()[s + step + ch] - x.data()[s + ch]);
                    }
                }
            }
        }
        let ia = self.id;
        self.push(Tensor::new(&[b, oh, ow, c], out), &[self], move |g, gr| {
            let mut gx = vec![T::zero(); b * h * w * c];
            let mut k = 0;
            for bi in 0..b {
                for y in 0..oh {
                    for xx in 0..ow {
                        let s = idx(bi, y, xx);
                        for ch in 0..c {
                            let v = g.data()[k];
                            gx[s + step + ch] += v;
                            gx[s + ch] -= v;
                            k += 1;
                        }
                    }
                }
            }
            gr.accumulate(ia, Tensor::new(&[b, h, w, c], gx));
        })
    }

    /// Mean of `(self − target)²` over all elements.
    pub fn mse(self, target: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), target.value());
        assert_eq!(a.shape(), b.shape(), "mse shape mismatch");
        let n = T::lit(a.numel() as f64);
        let loss = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        let (ia, ib) = (self.id, target.id);
        self.push(Tensor::scalar(loss), &[self, target], move |g, gr| {
            let s = g.item() * T::lit(2.0) / n;
            let ga = a.zip_map(&b, |x, y| (x - y) * s);
            if gr.needs(ib) {
                gr.accumulate(ib, ga.map(|v| -v));
            }
            gr.accumulate(ia, ga);
        })
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let x = self.value();
        let ia = self.id;
        let shape = x.shape().to_vec();
        self.push(Tensor::scalar(x.sum()), &[self], move |g, gr| {
            gr.accumulate(ia, Tensor::full(&shape, g.item()));
        })
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }
}

/// Source index (in the `[b, h, w, c]` tensor) of every element of the
/// pixel-unshuffled tensor, in output order.
fn shuffle_map(b: usize, h: usize, w: usize, c: usize, r: usize) -> Vec<usize> {
    let (oh, ow) = (h / r, w / r);
    let mut map = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                for dy in 0..r {
                    for dx in 0..r {
                        for ch in 0..c {
                            map.push(((bi * h + y * r + dy) * w + x * r + dx) * c + ch);
                        }
                    }
                }
            }
        }
    }
    map
}
