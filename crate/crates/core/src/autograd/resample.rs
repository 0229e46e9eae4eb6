use ndarray::{ArrayD, IxDyn};

use super::{Real, Var};

/// Source taps of a 2x bilinear upsampling along one axis (half-pixel
/// centres, edge clamped): `(i0, i1, weight_of_i1)` per output index.
fn taps<T: Real>(n_in: usize) -> Vec<(usize, usize, T)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

impl<'g, T: Real> Var<'g, T> {
    /// Bilinear x2 upsampling of an NCHW batch.
    pub fn upsample_bilinear2x(self) -> Var<'g, T> {
        let xv = self.value();
        let s = xv.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample expects NCHW");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let ty: Vec<(usize, usize, T)> = taps(h);
        let tx: Vec<(usize, usize, T)> = taps(w);
        let x = xv.as_standard_layout();
        let x = x.as_slice().unwrap();
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[s[0], s[1], ho, wo]), out).unwrap();
        self.graph.op(out, &[self], move |g, _| {
            let g = g.as_standard_layout();
            let g = g.as_slice().unwrap();
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let src = &g[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let v = src[oy * wo + ox];
                        let (vt, vb) = (v * (T::one() - fy), v * fy);
                        dst[y0 * w + x0] += vt * (T::one() - fx);
                        dst[y0 * w + x1] += vt * fx;
                        dst[y1 * w + x0] += vb * (T::one() - fx);
                        dst[y1 * w + x1] += vb * fx;
                    }
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&s), dx).unwrap())]
        })
    }

    /// Non-overlapping `k x k` average pooling; spatial dims must divide by `k`.
    pub fn avg_pool2d(self, k: usize) -> Var<'g, T> {
        let xv = self.value();
        let s = xv.shape().to_vec();
        assert_eq!(s.len(), 4, "avg_pool2d expects NCHW");
        assert!(
            s[2] % k == 0 && s[3] % k == 0,
            "avg_pool2d: {:?} not divisible by {k}",
            s
        );
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let inv = T::one() / T::lit((k * k) as f64);
        let x = xv.as_standard_layout();
        let x = x.as_slice().unwrap();
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            for iy in 0..h {
                for ix in 0..w {
                    out[p * ho * wo + (iy / k) * wo + ix / k] += x[p * h * w + iy * w + ix] * inv;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[s[0], s[1], ho, wo]), out).unwrap();
        self.graph.op(out, &[self], move |g, _| {
            let g = g.as_standard_layout();
            let g = g.as_slice().unwrap();
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for iy in 0..h {
                    for ix in 0..w {
                        dx[p * h * w + iy * w + ix] = g[p * ho * wo + (iy / k) * wo + ix / k] * inv;
                    }
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&s), dx).unwrap())]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::check_grad;
    use super::super::Graph;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn upsample_preserves_linear_ramps_in_interior() {
        let g = Graph::<f64>::new();
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |i| i[3] as f64);
        let y = g.constant(x).upsample_bilinear2x().value();
        // output column o samples source coordinate (o + 0.5)/2 - 0.5
        for o in 1..7 {
            let expect = (o as f64 + 0.5) / 2.0 - 0.5;
            assert!((y[[0, 0, 3, o]] - expect).abs() < 1e-12);
        }
        assert_eq!(y[[0, 0, 0, 0]], 0.0);
        assert_eq!(y[[0, 0, 0, 7]], 3.0);
    }

    #[test]
    fn upsample_and_pool_gradients() {
        let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 2, 3, 4]), |i| {
            ((i[1] * 12 + i[2] * 4 + i[3]) % 7) as f64 * 0.2 - 0.5
        });
        check_grad(&x0, |_, x| {
            x.upsample_bilinear2x().square().avg_pool2d(2).tanh().sum_all()
        });
    }
}
