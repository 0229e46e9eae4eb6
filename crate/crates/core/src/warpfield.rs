//! Offset deformation grids and the differentiable bilinear warp.
//!
//! Offsets live in normalised image coordinates: the image spans `[-1, 1]`
//! along each axis, so one pixel along an axis of size `S` is `2 / (S - 1)`.
//! Channel 0 of an offset field is the horizontal (x, column) component and
//! channel 1 the vertical (y, row) component. The identity grid is the
//! all-zero offset field.
//!
//! Sampling uses border replication: positions outside `[-1, 1]` are clamped
//! onto the image edge.

use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};

use crate::autograd::{Real, Tensor, Var};
use crate::error::{Error, Result};

/// Maximum offset, in pixels at native resolution.
pub const DEFAULT_MAX_OFFSET_PX: f64 = 5.0;

/// Normalised-coordinate length of one pixel along an axis of `size` pixels.
pub fn pixel_step(size: usize) -> f64 {
    2.0 / (size as f64 - 1.0)
}

/// Largest admissible offset along an axis of `size` pixels.
pub fn offset_bound(max_offset_px: f64, size: usize) -> f64 {
    max_offset_px * pixel_step(size)
}

/// Per-pixel 2-D offset field, `(H, W, 2)`, with bounded magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationGrid<T: Real = f64> {
    offsets: Array3<T>,
    max_offset_px: f64,
}

impl<T: Real> DeformationGrid<T> {
    /// Wraps an offset field after checking finiteness and the magnitude bound.
    pub fn new(offsets: Array3<T>, max_offset_px: f64) -> Result<Self> {
        let (h, w, c) = offsets.dim();
        check_dims(h, w)?;
        if c != 2 {
            return Err(Error::ShapeMismatch(format!("offset field needs 2 channels, got {c}")));
        }
        if !(max_offset_px > 0.0 && max_offset_px.is_finite()) {
            return Err(Error::Range(format!(
                "max_offset_px = {max_offset_px} must be positive"
            )));
        }
        if offsets.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("offset field".into()));
        }
        let bounds = [offset_bound(max_offset_px, w), offset_bound(max_offset_px, h)];
        for ((_, _, ch), &v) in offsets.indexed_iter() {
            if v.to_f64c().abs() > bounds[ch] * (1.0 + 1e-6) {
                return Err(Error::Range(format!(
                    "offset {v} exceeds bound {} on channel {ch}",
                    bounds[ch]
                )));
            }
        }
        Ok(Self { offsets, max_offset_px })
    }

    pub fn identity(h: usize, w: usize, max_offset_px: f64) -> Result<Self> {
        check_dims(h, w)?;
        Self::new(Array3::zeros((h, w, 2)), max_offset_px)
    }

    pub fn height(&self) -> usize {
        self.offsets.dim().0
    }

    pub fn width(&self) -> usize {
        self.offsets.dim().1
    }

    pub fn offsets(&self) -> &Array3<T> {
        &self.offsets
    }

    pub fn max_offset_px(&self) -> f64 {
        self.max_offset_px
    }

    /// Offsets as a `(1, 2, H, W)` batch.
    pub fn to_batch(&self) -> Tensor<T> {
        self.offsets
            .view()
            .permuted_axes([2, 0, 1])
            .insert_axis(Axis(0))
            .as_standard_layout()
            .into_owned()
            .into_dyn()
    }

    /// Sample `n` of an `(N, 2, H, W)` offset batch.
    pub fn from_batch(batch: &Tensor<T>, n: usize, max_offset_px: f64) -> Result<Self> {
        if batch.ndim() != 4 || batch.shape()[1] != 2 {
            return Err(Error::ShapeMismatch(format!("offset batch shape {:?}", batch.shape())));
        }
        let off = batch
            .index_axis(Axis(0), n)
            .permuted_axes(IxDyn(&[1, 2, 0]))
            .as_standard_layout()
            .into_owned()
            .into_dimensionality()
            .expect("3-D");
        Self::new(off, max_offset_px)
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!("grid needs h, w >= 2, got {h}x{w}")));
    }
    Ok(())
}

/// All-zero offset field with the default offset bound.
pub fn identity_grid(h: usize, w: usize) -> Result<DeformationGrid<f64>> {
    DeformationGrid::identity(h, w, DEFAULT_MAX_OFFSET_PX)
}

/// Squashes an unbounded `(H, W, 2)` field: `tanh(raw) * bound` per axis.
pub fn offsets_to_grid<T: Real>(raw: &Array3<T>, max_offset_px: f64) -> Result<DeformationGrid<T>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("raw offset field".into()));
    }
    let (h, w, _) = raw.dim();
    check_dims(h, w)?;
    let b = [
        T::lit(offset_bound(max_offset_px, w)),
        T::lit(offset_bound(max_offset_px, h)),
    ];
    let mut off = raw.mapv(|v| v.tanh());
    for ((_, _, ch), v) in off.indexed_iter_mut() {
        *v = *v * b[ch];
    }
    DeformationGrid::new(off, max_offset_px)
}

/// Graph version of [`offsets_to_grid`] on an `(N, 2, H, W)` batch.
pub fn bounded_offsets<'g, T: Real>(raw: Var<'g, T>, max_offset_px: f64) -> Var<'g, T> {
    let s = raw.shape();
    assert_eq!(s.len(), 4, "offset batch must be NCHW");
    assert_eq!(s[1], 2, "offset batch needs 2 channels");
    let scale = ArrayD::from_shape_vec(
        IxDyn(&[1, 2, 1, 1]),
        vec![
            T::lit(offset_bound(max_offset_px, s[3])),
            T::lit(offset_bound(max_offset_px, s[2])),
        ],
    )
    .unwrap();
    raw.tanh().mul_const(&scale)
}

/// Absolute sampling positions of the identity grid, `(1, 2, H, W)`.
pub fn base_positions<T: Real>(h: usize, w: usize) -> Tensor<T> {
    Array4::from_shape_fn((1, 2, h, w), |(_, c, i, j)| {
        if c == 0 {
            T::lit(-1.0 + j as f64 * pixel_step(w))
        } else {
            T::lit(-1.0 + i as f64 * pixel_step(h))
        }
    })
    .into_dyn()
}

/// One bilinear tap: lattice corner, fractional parts, and whether each
/// coordinate was inside the image (the clamp passes derivatives only there).
#[derive(Clone, Copy)]
struct Tap<T> {
    x0: usize,
    y0: usize,
    fx: T,
    fy: T,
    dx_live: bool,
    dy_live: bool,
}

#[inline]
fn axis_tap<T: Real>(pos: T, size: usize) -> (usize, T, bool) {
    let hi = T::lit((size - 1) as f64);
    let live = pos >= T::zero() && pos <= hi;
    let p = pos.max(T::zero()).min(hi);
    // the last cell owns the far edge so that i0 + 1 stays in range
    let i0 = p.floor().to_usize().unwrap_or(0).min(size - 2);
    (i0, p - T::lit(i0 as f64), live)
}

#[inline]
fn tap<T: Real>(i: usize, j: usize, dx: T, dy: T, h: usize, w: usize, sx: T, sy: T) -> Tap<T> {
    let (x0, fx, dx_live) = axis_tap(T::lit(j as f64) + dx * sx, w);
    let (y0, fy, dy_live) = axis_tap(T::lit(i as f64) + dy * sy, h);
    Tap {
        x0,
        y0,
        fx,
        fy,
        dx_live,
        dy_live,
    }
}

struct WarpDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn warp_forward<T: Real>(img: &[T], off: &[T], d: &WarpDims) -> Vec<T> {
    let (h, w, plane) = (d.h, d.w, d.h * d.w);
    // normalised offset -> pixel displacement
    let sx = T::lit((w - 1) as f64 / 2.0);
    let sy = T::lit((h - 1) as f64 / 2.0);
    let mut out = vec![T::zero(); d.n * d.c * plane];
    for b in 0..d.n {
        let ox = &off[(b * 2) * plane..(b * 2 + 1) * plane];
        let oy = &off[(b * 2 + 1) * plane..(b * 2 + 2) * plane];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let t = tap(i, j, ox[p], oy[p], h, w, sx, sy);
                let (w00, w01) = ((T::one() - t.fy) * (T::one() - t.fx), (T::one() - t.fy) * t.fx);
                let (w10, w11) = (t.fy * (T::one() - t.fx), t.fy * t.fx);
                let (a, bb) = (t.y0 * w + t.x0, (t.y0 + 1) * w + t.x0);
                for ch in 0..d.c {
                    let src = &img[(b * d.c + ch) * plane..(b * d.c + ch + 1) * plane];
                    out[(b * d.c + ch) * plane + p] =
                        w00 * src[a] + w01 * src[a + 1] + w10 * src[bb] + w11 * src[bb + 1];
                }
            }
        }
    }
    out
}

fn warp_backward<T: Real>(
    img: &[T],
    off: &[T],
    grad: &[T],
    d: &WarpDims,
    need_img: bool,
    need_off: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (h, w, plane) = (d.h, d.w, d.h * d.w);
    let sx = T::lit((w - 1) as f64 / 2.0);
    let sy = T::lit((h - 1) as f64 / 2.0);
    let mut gi = need_img.then(|| vec![T::zero(); img.len()]);
    let mut go = need_off.then(|| vec![T::zero(); off.len()]);
    for b in 0..d.n {
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let t = tap(
                    i,
                    j,
                    off[(b * 2) * plane + p],
                    off[(b * 2 + 1) * plane + p],
                    h,
                    w,
                    sx,
                    sy,
                );
                let (a, bb) = (t.y0 * w + t.x0, (t.y0 + 1) * w + t.x0);
                let (w00, w01) = ((T::one() - t.fy) * (T::one() - t.fx), (T::one() - t.fy) * t.fx);
                let (w10, w11) = (t.fy * (T::one() - t.fx), t.fy * t.fx);
                let (mut gfx, mut gfy) = (T::zero(), T::zero());
                for ch in 0..d.c {
                    let base = (b * d.c + ch) * plane;
                    let g = grad[base + p];
                    if let Some(gi) = gi.as_mut() {
                        gi[base + a] += w00 * g;
                        gi[base + a + 1] += w01 * g;
                        gi[base + bb] += w10 * g;
                        gi[base + bb + 1] += w11 * g;
                    }
                    if go.is_some() {
                        let (i00, i01, i10, i11) =
                            (img[base + a], img[base + a + 1], img[base + bb], img[base + bb + 1]);
                        gfx += g * ((T::one() - t.fy) * (i01 - i00) + t.fy * (i11 - i10));
                        gfy += g * ((T::one() - t.fx) * (i10 - i00) + t.fx * (i11 - i01));
                    }
                }
                if let Some(go) = go.as_mut() {
                    if t.dx_live {
                        go[(b * 2) * plane + p] = gfx * sx;
                    }
                    if t.dy_live {
                        go[(b * 2 + 1) * plane + p] = gfy * sy;
                    }
                }
            }
        }
    }
    (gi, go)
}

fn warp_dims(img: &[usize], off: &[usize]) -> Result<WarpDims> {
    if img.len() != 4 || off.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "warp expects NCHW, got {img:?} and {off:?}"
        )));
    }
    if off[1] != 2 || img[0] != off[0] || img[2] != off[2] || img[3] != off[3] {
        return Err(Error::ShapeMismatch(format!("image {img:?} vs offsets {off:?}")));
    }
    check_dims(img[2], img[3])?;
    Ok(WarpDims {
        n: img[0],
        c: img[1],
        h: img[2],
        w: img[3],
    })
}

/// Differentiable warp of an `(N, C, H, W)` batch by `(N, 2, H, W)` offsets:
/// `out(p) = bilinear(image, p + offsets(p))`.
pub fn warp<'g, T: Real>(image: Var<'g, T>, offsets: Var<'g, T>) -> Result<Var<'g, T>> {
    let iv = image.value();
    let ov = offsets.value();
    let d = warp_dims(iv.shape(), ov.shape())?;
    let is = iv.as_standard_layout().into_owned();
    let os = ov.as_standard_layout().into_owned();
    let out = warp_forward(is.as_slice().unwrap(), os.as_slice().unwrap(), &d);
    let out = ArrayD::from_shape_vec(IxDyn(&[d.n, d.c, d.h, d.w]), out).unwrap();
    let (ishape, oshape) = (iv.shape().to_vec(), ov.shape().to_vec());
    Ok(image.graph().op(out, &[image, offsets], move |g, need| {
        let g = g.as_standard_layout();
        let (gi, go) = warp_backward(
            is.as_slice().unwrap(),
            os.as_slice().unwrap(),
            g.as_slice().unwrap(),
            &d,
            need[0],
            need[1],
        );
        vec![
            gi.map(|v| ArrayD::from_shape_vec(IxDyn(&ishape), v).unwrap()),
            go.map(|v| ArrayD::from_shape_vec(IxDyn(&oshape), v).unwrap()),
        ]
    }))
}

/// Warps an `(H, W, C)` field through a grid.
pub fn warp_image<T: Real>(image: &Array3<T>, grid: &DeformationGrid<T>) -> Result<Array3<T>> {
    let (h, w, c) = image.dim();
    if (h, w) != (grid.height(), grid.width()) {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} vs grid {}x{}",
            grid.height(),
            grid.width()
        )));
    }
    let chw = image.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
    let off = grid.to_batch();
    let d = WarpDims { n: 1, c, h, w };
    let out = warp_forward(chw.as_slice().unwrap(), off.as_slice().unwrap(), &d);
    let out = Array3::from_shape_vec((c, h, w), out).unwrap();
    Ok(out.permuted_axes([1, 2, 0]).as_standard_layout().into_owned())
}

/// Absolute sampling positions of "follow `inner`, then `outer`", `(H, W, 2)`:
/// `outer`'s absolute-position field bilinearly sampled at `inner`'s
/// sampling locations.
pub fn compose_grids<T: Real>(outer: &DeformationGrid<T>, inner: &DeformationGrid<T>) -> Result<Array3<T>> {
    if outer.offsets.dim() != inner.offsets.dim() {
        return Err(Error::ShapeMismatch(format!(
            "grids {:?} vs {:?}",
            outer.offsets.dim(),
            inner.offsets.dim()
        )));
    }
    let (h, w) = (outer.height(), outer.width());
    let abs_outer = outer_positions(&outer.to_batch(), h, w);
    let d = WarpDims { n: 1, c: 2, h, w };
    let inner_b = inner.to_batch();
    let out = warp_forward(abs_outer.as_slice().unwrap(), inner_b.as_slice().unwrap(), &d);
    let out = Array3::from_shape_vec((2, h, w), out).unwrap();
    Ok(out.permuted_axes([1, 2, 0]).as_standard_layout().into_owned())
}

fn outer_positions<T: Real>(offsets: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    (offsets + &base_positions::<T>(h, w)).as_standard_layout().into_owned()
}

/// Graph version of [`compose_grids`] on `(N, 2, H, W)` offset batches;
/// returns absolute positions.
pub fn compose_offsets<'g, T: Real>(outer: Var<'g, T>, inner: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = outer.shape();
    if s != inner.shape() || s.len() != 4 {
        return Err(Error::ShapeMismatch(format!("grids {:?} vs {:?}", s, inner.shape())));
    }
    let base = outer.graph().constant(base_positions(s[2], s[3]));
    warp(outer + base, inner)
}

/// Anisotropic squared-difference total variation, summed over channels and
/// divided by the pixel count.
pub fn grid_tv<T: Real>(grid: &DeformationGrid<T>) -> T {
    field_tv(&grid.offsets)
}

pub(crate) fn field_tv<T: Real>(f: &Array3<T>) -> T {
    let (h, w, c) = f.dim();
    let mut acc = T::zero();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    let d = f[[i + 1, j, ch]] - f[[i, j, ch]];
                    acc += d * d;
                }
                if j + 1 < w {
                    let d = f[[i, j + 1, ch]] - f[[i, j, ch]];
                    acc += d * d;
                }
            }
        }
    }
    acc / T::lit((h * w) as f64)
}

/// Mean over pixels and channels of the squared offsets.
pub fn grid_identity_penalty<T: Real>(grid: &DeformationGrid<T>) -> T {
    let n = T::lit(grid.offsets.len() as f64);
    grid.offsets.iter().map(|&v| v * v).sum::<T>() / n
}

/// Batch mean of the per-sample total variation of an `(N, C, H, W)` field.
pub fn tv_var<'g, T: Real>(field: Var<'g, T>) -> Var<'g, T> {
    let s = field.shape();
    assert_eq!(s.len(), 4);
    let (n, h, w) = (s[0], s[2], s[3]);
    let dv = field.slice_axis(2, 1, h) - field.slice_axis(2, 0, h - 1);
    let dh = field.slice_axis(3, 1, w) - field.slice_axis(3, 0, w - 1);
    (dv.square().sum_all() + dh.square().sum_all()).scale(T::one() / T::lit((n * h * w) as f64))
}
