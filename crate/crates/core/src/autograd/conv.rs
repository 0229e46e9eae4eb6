//! 2-D convolution and transposed convolution on NCHW batches via im2col.
//!
//! Weights follow the usual layouts: `(C_out, C_in, k, k)` for convolution and
//! `(C_in, C_out, k, k)` for transposed convolution. Padding is zero padding.

use ndarray::{Array1, ArrayD, IxDyn};

use super::{gemm_strided, Real, Tensor, Var};

pub fn conv_output_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "kernel {k} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - k) / stride + 1
}

pub fn conv_transpose_output_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + k - 2 * pad
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input column `ox * s + kj - p` is inside
/// the image.
#[inline]
fn valid_range(g: &Geom, kj: usize) -> (usize, usize) {
    let lo = if kj >= g.p { 0 } else { (g.p - kj).div_ceil(g.s) };
    let hi = if g.w + g.p > kj {
        ((g.w + g.p - kj - 1) / g.s + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Output rows per band, sized so one band of the column matrix stays in
/// cache.
fn band_rows(g: &Geom) -> usize {
    const TARGET: usize = 1 << 16;
    (TARGET / (g.rows() * g.wo).max(1)).clamp(1, g.ho)
}

/// Unfolds output rows `[oy0, oy1)` of one `(C, H, W)` image into a
/// `(C*k*k, (oy1-oy0)*Wo)` matrix.
fn im2col<T: Real>(x: &[T], g: Geom, oy0: usize, oy1: usize, cols: &mut [T]) {
    let l = (oy1 - oy0) * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                let (lo, hi) = valid_range(&g, kj);
                for oy in oy0..oy1 {
                    let iy = (oy * g.s + ki) as isize - g.p as isize;
                    let drow = &mut dst[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let first = lo * g.s + kj - g.p;
                    if g.s == 1 {
                        drow[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, &v) in drow[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.s)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a band's column matrix into an image.
fn col2im<T: Real>(cols: &[T], g: Geom, oy0: usize, oy1: usize, x: &mut [T]) {
    let l = (oy1 - oy0) * g.wo;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * l..(row + 1) * l];
                let (lo, hi) = valid_range(&g, kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.s + kj - g.p;
                for oy in oy0..oy1 {
                    let iy = (oy * g.s + ki) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let base = (oy - oy0) * g.wo;
                    let srow = &src[base + lo..base + hi];
                    if g.s == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.s).zip(srow) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output row bands `[oy0, oy1)` covering `0..g.ho`.
fn bands(g: &Geom) -> impl Iterator<Item = (usize, usize)> {
    let step = band_rows(g);
    let ho = g.ho;
    (0..ho).step_by(step).map(move |a| (a, (a + step).min(ho)))
}

fn contiguous<T: Real>(t: &Tensor<T>) -> std::borrow::Cow<'_, [T]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], n: usize, plane: usize) {
    let c = bias.len();
    for i in 0..n {
        for (co, &b) in bias.iter().enumerate() {
            let off = (i * c + co) * plane;
            out[off..off + plane].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn bias_grad<T: Real>(g: &[T], n: usize, c: usize, plane: usize) -> Tensor<T> {
    let mut db = Array1::<T>::zeros(c);
    for i in 0..n {
        for co in 0..c {
            let off = (i * c + co) * plane;
            db[co] += g[off..off + plane].iter().copied().sum::<T>();
        }
    }
    db.into_dyn()
}

fn dims4(shape: &[usize], what: &str) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "{what} must be 4-D, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

impl<'g, T: Real> Var<'g, T> {
    /// Cross-correlation with zero padding.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let xv = self.value();
        let wv = weight.value();
        let [n, c, h, w] = dims4(xv.shape(), "conv2d input");
        let [co, ci, k, k2] = dims4(wv.shape(), "conv2d weight");
        assert_eq!(ci, c, "conv2d channel mismatch: input {c}, weight {ci}");
        assert_eq!(k, k2, "square kernels only");
        let geom = Geom {
            c,
            h,
            w,
            k,
            s: stride,
            p: pad,
            ho: conv_output_size(h, k, stride, pad),
            wo: conv_output_size(w, k, stride, pad),
        };
        let (rows, l) = (geom.rows(), geom.cols());
        let xs = contiguous(&xv);
        let ws = contiguous(&wv);
        let mut out = vec![T::zero(); n * co * l];
        let mut cols = vec![T::zero(); rows * band_rows(&geom) * geom.wo];
        for i in 0..n {
            let xi = &xs[i * c * h * w..(i + 1) * c * h * w];
            let oi = &mut out[i * co * l..(i + 1) * co * l];
            for (a, b) in bands(&geom) {
                let bc = (b - a) * geom.wo;
                im2col(xi, geom, a, b, &mut cols);
                gemm_strided(
                    co,
                    rows,
                    bc,
                    &ws,
                    (rows, 1),
                    &cols,
                    (bc, 1),
                    &mut oi[a * geom.wo..],
                    l,
                    false,
                );
            }
        }
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            assert_eq!(b.shape(), [co], "conv2d bias shape");
            add_bias(&mut out, &contiguous(b), n, l);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, co, geom.ho, geom.wo]), out).unwrap();
        drop(xs);
        drop(ws);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.graph.op(out, &parents, move |g, need| {
            let gs = contiguous(g);
            let xs = contiguous(&xv);
            let ws = contiguous(&wv);
            let mut dx = need[0].then(|| vec![T::zero(); n * c * h * w]);
            let mut dw = need[1].then(|| vec![T::zero(); co * rows]);
            let mut cols = vec![T::zero(); rows * band_rows(&geom) * geom.wo];
            for i in 0..n {
                let gi = &gs[i * co * l..(i + 1) * co * l];
                for (a, b) in bands(&geom) {
                    let bc = (b - a) * geom.wo;
                    let gb = &gi[a * geom.wo..];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xs[i * c * h * w..(i + 1) * c * h * w], geom, a, b, &mut cols);
                        gemm_strided(co, bc, rows, gb, (l, 1), &cols, (1, bc), dw, rows, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm_strided(rows, co, bc, &ws, (1, rows), gb, (l, 1), &mut cols, bc, false);
                        col2im(&cols, geom, a, b, &mut dx[i * c * h * w..(i + 1) * c * h * w]);
                    }
                }
            }
            let mut res = vec![
                dx.map(|v| ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), v).unwrap()),
                dw.map(|v| ArrayD::from_shape_vec(IxDyn(&[co, ci, k, k]), v).unwrap()),
            ];
            if need.len() > 2 {
                res.push(need[2].then(|| bias_grad(&gs, n, co, l)));
            }
            res
        })
    }

    /// Transposed convolution (the adjoint of [`Var::conv2d`] w.r.t. its input).
    pub fn conv_transpose2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Var<'g, T> {
        let xv = self.value();
        let wv = weight.value();
        let [n, ci, hi, wi] = dims4(xv.shape(), "conv_transpose2d input");
        let [wci, co, k, k2] = dims4(wv.shape(), "conv_transpose2d weight");
        assert_eq!(wci, ci, "conv_transpose2d channel mismatch: input {ci}, weight {wci}");
        assert_eq!(k, k2, "square kernels only");
        let ho = conv_transpose_output_size(hi, k, stride, pad);
        let wo = conv_transpose_output_size(wi, k, stride, pad);
        // Geometry of the forward convolution whose adjoint this is.
        let geom = Geom {
            c: co,
            h: ho,
            w: wo,
            k,
            s: stride,
            p: pad,
            ho: hi,
            wo: wi,
        };
        debug_assert_eq!(conv_output_size(ho, k, stride, pad), hi);
        let (rows, l) = (geom.rows(), geom.cols());
        let xs = contiguous(&xv);
        let ws = contiguous(&wv);
        let plane_out = ho * wo;
        let mut out = vec![T::zero(); n * co * plane_out];
        let mut cols = vec![T::zero(); rows * band_rows(&geom) * geom.wo];
        for i in 0..n {
            let xi = &xs[i * ci * l..(i + 1) * ci * l];
            for (a, b) in bands(&geom) {
                let bc = (b - a) * geom.wo;
                gemm_strided(
                    rows,
                    ci,
                    bc,
                    &ws,
                    (1, rows),
                    &xi[a * geom.wo..],
                    (l, 1),
                    &mut cols,
                    bc,
                    false,
                );
                col2im(
                    &cols,
                    geom,
                    a,
                    b,
                    &mut out[i * co * plane_out..(i + 1) * co * plane_out],
                );
            }
        }
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            assert_eq!(b.shape(), [co], "conv_transpose2d bias shape");
            add_bias(&mut out, &contiguous(b), n, plane_out);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, co, ho, wo]), out).unwrap();
        drop(xs);
        drop(ws);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.graph.op(out, &parents, move |g, need| {
            let gs = contiguous(g);
            let xs = contiguous(&xv);
            let ws = contiguous(&wv);
            let mut dx = need[0].then(|| vec![T::zero(); n * ci * l]);
            let mut dw = need[1].then(|| vec![T::zero(); ci * rows]);
            let mut cols = vec![T::zero(); rows * band_rows(&geom) * geom.wo];
            for i in 0..n {
                let xi = &xs[i * ci * l..(i + 1) * ci * l];
                for (a, b) in bands(&geom) {
                    let bc = (b - a) * geom.wo;
                    im2col(&gs[i * co * plane_out..(i + 1) * co * plane_out], geom, a, b, &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        let dxi = &mut dx[i * ci * l..(i + 1) * ci * l];
                        gemm_strided(
                            ci,
                            rows,
                            bc,
                            &ws,
                            (rows, 1),
                            &cols,
                            (bc, 1),
                            &mut dxi[a * geom.wo..],
                            l,
                            false,
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        gemm_strided(ci, bc, rows, &xi[a * geom.wo..], (l, 1), &cols, (1, bc), dw, rows, true);
                    }
                }
            }
            let mut res = vec![
                dx.map(|v| ArrayD::from_shape_vec(IxDyn(&[n, ci, hi, wi]), v).unwrap()),
                dw.map(|v| ArrayD::from_shape_vec(IxDyn(&[ci, co, k, k]), v).unwrap()),
            ];
            if need.len() > 2 {
                res.push(need[2].then(|| bias_grad(&gs, n, co, plane_out)));
            }
            res
        })
    }
}
