use ndarray::{ArrayD, IxDyn};

use super::{Real, Var};

impl<'g, T: Real> Var<'g, T> {
    /// Instance normalisation with per-channel affine parameters: every
    /// `(n, c)` plane is standardised over its spatial extent (biased
    /// variance), then scaled by `gamma[c]` and shifted by `beta[c]`.
    pub fn instance_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Var<'g, T> {
        let xv = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let s = xv.shape().to_vec();
        assert_eq!(s.len(), 4, "instance_norm expects NCHW");
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        assert_eq!(gv.shape(), [c]);
        assert_eq!(bv.shape(), [c]);
        let x = xv.as_standard_layout();
        let x = x.as_slice().unwrap();
        let inv_p = T::one() / T::lit(plane as f64);
        let mut xhat = vec![T::zero(); n * c * plane];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); n * c * plane];
        for i in 0..n {
            for ch in 0..c {
                let idx = i * c + ch;
                let src = &x[idx * plane..(idx + 1) * plane];
                let mean = src.iter().copied().sum::<T>() * inv_p;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_p;
                let is = T::one() / (var + eps).sqrt();
                inv_std[idx] = is;
                let (gm, bt) = (gv[[ch]], bv[[ch]]);
                for j in 0..plane {
                    let xh = (src[j] - mean) * is;
                    xhat[idx * plane + j] = xh;
                    out[idx * plane + j] = xh * gm + bt;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&s), out).unwrap();
        self.graph.op(out, &[self, gamma, beta], move |g, need| {
            let g = g.as_standard_layout();
            let g = g.as_slice().unwrap();
            let mut dx = need[0].then(|| vec![T::zero(); n * c * plane]);
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for i in 0..n {
                for ch in 0..c {
                    let idx = i * c + ch;
                    let gs = &g[idx * plane..(idx + 1) * plane];
                    let xh = &xhat[idx * plane..(idx + 1) * plane];
                    let sum_g: T = gs.iter().copied().sum();
                    let sum_gx: T = gs.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    dg[ch] += sum_gx;
                    db[ch] += sum_g;
                    if let Some(dx) = dx.as_mut() {
                        let gm = gv[[ch]];
                        let k = gm * inv_std[idx];
                        let (mg, mgx) = (sum_g * inv_p, sum_gx * inv_p);
                        for j in 0..plane {
                            dx[idx * plane + j] = k * (gs[j] - mg - xh[j] * mgx);
                        }
                    }
                }
            }
            vec![
                dx.map(|v| ArrayD::from_shape_vec(IxDyn(&s), v).unwrap()),
                need[1].then(|| ArrayD::from_shape_vec(IxDyn(&[c]), dg.clone()).unwrap()),
                need[2].then(|| ArrayD::from_shape_vec(IxDyn(&[c]), db.clone()).unwrap()),
            ]
        })
    }
}
