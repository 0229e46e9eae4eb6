//! Training objectives.
//!
//! Every loss is a function of graph variables so that it can be
//! differentiated with respect to whichever parameters the caller bound as
//! trainable. Coefficients are applied inside each component; totals are
//! plain sums.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::Critic;
use crate::warpfield::{base_positions, compose_offsets, tv_var};

/// Loss coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_gp: f64,
    pub lambda_exp_comp: f64,
    pub lambda_exp_def: f64,
    pub lambda_cyc: f64,
    pub lambda_comp: f64,
    #[serde(rename = "lambda_eye_G")]
    pub lambda_eye_g: f64,
    #[serde(rename = "lambda_tv_G")]
    pub lambda_tv_g: f64,
    #[serde(rename = "lambda_eye_M")]
    pub lambda_eye_m: f64,
    #[serde(rename = "lambda_tv_M")]
    pub lambda_tv_m: f64,
    pub lambda_faceid: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            lambda_exp_comp: 4000.0,
            lambda_exp_def: 1000.0,
            lambda_cyc: 100.0,
            lambda_comp: 10.0,
            lambda_eye_g: 0.1,
            lambda_tv_g: 1e-5,
            lambda_eye_m: 0.1,
            lambda_tv_m: 1e-5,
            lambda_faceid: 1.0,
        }
    }
}

impl LossWeights {
    pub fn named(&self) -> [(&'static str, f64); 10] {
        [
            ("lambda_gp", self.lambda_gp),
            ("lambda_exp_comp", self.lambda_exp_comp),
            ("lambda_exp_def", self.lambda_exp_def),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_comp", self.lambda_comp),
            ("lambda_eye_G", self.lambda_eye_g),
            ("lambda_tv_G", self.lambda_tv_g),
            ("lambda_eye_M", self.lambda_eye_m),
            ("lambda_tv_M", self.lambda_tv_m),
            ("lambda_faceid", self.lambda_faceid),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss_weights.{name} = {v} must be a nonnegative number"
                )));
            }
        }
        Ok(())
    }
}

/// Generator-side components, in report order.
pub const GENERATOR_TERMS: [&str; 8] = [
    "g_critic",
    "g_exp_def",
    "g_exp_comp",
    "g_cyc",
    "g_faceid",
    "g_comp",
    "g_grid_reg",
    "g_mask_reg",
];

/// Critic-side components, in report order. `d_critic` is the Wasserstein
/// estimate and `d_gp` the gradient penalty.
pub const CRITIC_TERMS: [&str; 3] = ["d_critic", "d_gp", "d_exp"];

/// Named scalar values of one optimisation step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossReport {
    entries: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: &LossReport) {
        self.entries.extend(other.entries.iter().map(|(k, v)| (k.clone(), *v)));
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|v| v.is_finite())
    }

    /// Whichever of `g_total` and `d_total` are present equal the sums of
    /// their components to within `tol` (relative to the magnitude).
    pub fn totals_consistent(&self, tol: f64) -> bool {
        let check = |total: &str, terms: &[&str]| match self.get(total) {
            None => true,
            Some(t) => {
                let parts: Option<Vec<f64>> = terms.iter().map(|k| self.get(k)).collect();
                parts.is_some_and(|p| {
                    let s: f64 = p.iter().sum();
                    let scale = 1.0 + p.iter().map(|v| v.abs()).sum::<f64>();
                    (s - t).abs() <= tol * scale
                })
            }
        };
        check("g_total", &GENERATOR_TERMS) && check("d_total", &CRITIC_TERMS)
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.iter().map(|(k, v)| format!("{k}={v:.6e}")).collect();
        f.write_str(&parts.join(" "))
    }
}

fn sum_named(components: &BTreeMap<String, f64>, names: &[&str]) -> Result<f64> {
    names
        .iter()
        .map(|n| {
            components
                .get(*n)
                .copied()
                .ok_or_else(|| Error::MissingComponent((*n).into()))
        })
        .sum()
}

/// Generator and critic totals of already-weighted components, with a report
/// holding every component and both totals.
pub fn total_losses(components: &BTreeMap<String, f64>) -> Result<(f64, f64, LossReport)> {
    let g = sum_named(components, &GENERATOR_TERMS)?;
    let d = sum_named(components, &CRITIC_TERMS)?;
    let mut report = LossReport::new();
    for name in GENERATOR_TERMS.iter().chain(&CRITIC_TERMS) {
        report.insert(*name, components[*name]);
    }
    report.insert("g_total", g);
    report.insert("d_total", d);
    Ok((g, d, report))
}

fn same_shape<T: Real>(a: Var<'_, T>, b: Var<'_, T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn au_targets<'g, T: Real>(g: &'g Graph<T>, pred: Var<'g, T>, target: &Array2<T>) -> Result<Var<'g, T>> {
    let (n, k) = target.dim();
    if pred.shape() != [n, k] {
        return Err(Error::ShapeMismatch(format!(
            "AU predictions {:?} vs targets ({n}, {k})",
            pred.shape()
        )));
    }
    Ok(g.constant(target.clone().into_dyn()))
}

/// Batch mean of the squared AU error summed over the AU axis.
fn au_sq_error<'g, T: Real>(pred: Var<'g, T>, target: &Array2<T>) -> Result<Var<'g, T>> {
    let t = au_targets(pred.graph(), pred, target)?;
    Ok((pred - t).square().sum_axis(1, false).mean_all())
}

/// The two parts of the critic's adversarial objective.
#[derive(Clone, Copy, Debug)]
pub struct CriticLoss<'g, T: Real> {
    /// `E[D(fake)] - E[D(real)]`.
    pub wasserstein: Var<'g, T>,
    /// `lambda_gp * E[(|grad D(interp)| - 1)^2]`.
    pub penalty: Var<'g, T>,
}

impl<'g, T: Real> CriticLoss<'g, T> {
    pub fn total(&self) -> Var<'g, T> {
        self.wasserstein + self.penalty
    }
}

/// WGAN-GP critic objective. `eps` holds one interpolation weight in `[0, 1]`
/// per sample: `interp = eps * real + (1 - eps) * fake`.
///
/// Neither batch receives gradient. The penalty is evaluated without second
/// derivatives: the input gradient `g` of the critic at the interpolates is
/// computed first, then the critic's directional derivative along the fixed
/// unit vector `g / |g|` is built on the caller's graph. Its value is `|g|`
/// and its parameter gradient equals that of `|g|`.
pub fn critic_loss_d<'g, T: Real, C: Critic<T> + ?Sized>(
    critic: &C,
    p: &[Var<'g, T>],
    real: Var<'g, T>,
    fake: Var<'g, T>,
    eps: &[f64],
    w: &LossWeights,
) -> Result<CriticLoss<'g, T>> {
    same_shape(real, fake, "critic_loss_d batches")?;
    let n = real.shape()[0];
    if eps.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} interpolation weights for {n} samples",
            eps.len()
        )));
    }
    let g = real.graph();
    let (real, fake) = (real.detach(), fake.detach());
    let wasserstein = critic.scores(p, fake).mean_all() - critic.scores(p, real).mean_all();

    let (rv, fv) = (real.value(), fake.value());
    let mut interp: Tensor<T> = (*fv).clone();
    for (i, mut s) in interp.axis_iter_mut(Axis(0)).enumerate() {
        let e = T::lit(eps[i]);
        s.zip_mut_with(&rv.index_axis(Axis(0), i), |f, &r| *f = e * r + (T::one() - e) * *f);
    }

    let direction = {
        let g2 = Graph::new();
        let p2: Vec<_> = p.iter().map(|v| g2.shared(v.value(), false)).collect();
        let x = g2.leaf(interp.clone());
        let grads = g2.backward(critic.scores(&p2, x).sum_all());
        let mut u = grads.wrt_or_zeros(x);
        for mut s in u.axis_iter_mut(Axis(0)) {
            let norm = s.iter().map(|v| v.to_f64c().powi(2)).sum::<f64>().sqrt();
            let inv = if norm > 0.0 { T::lit(1.0 / norm) } else { T::zero() };
            s.mapv_inplace(|v| v * inv);
        }
        u
    };
    let (_, slope) = critic.scores_with_tangent(p, g.constant(interp), g.constant(direction));
    let penalty = slope
        .add_scalar(-T::one())
        .square()
        .mean_all()
        .scale(T::lit(w.lambda_gp));
    Ok(CriticLoss { wasserstein, penalty })
}

/// `-E[D(fake)]`.
pub fn critic_loss_g<'g, T: Real, C: Critic<T> + ?Sized>(critic: &C, p: &[Var<'g, T>], fake: Var<'g, T>) -> Var<'g, T> {
    critic.scores(p, fake).mean_all().neg()
}

/// Weighted AU errors of the deformed and final images against the target:
/// `(lambda_exp_def * E|D_exp(deformed) - y|^2, lambda_exp_comp * E|D_exp(final) - y|^2)`.
/// Bind the critic parameters as non-trainable so only the generators learn.
pub fn expression_loss_g<'g, T: Real, C: Critic<T> + ?Sized>(
    critic: &C,
    p: &[Var<'g, T>],
    deformed: Var<'g, T>,
    final_image: Var<'g, T>,
    y: &Array2<T>,
    w: &LossWeights,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    same_shape(deformed, final_image, "expression_loss_g images")?;
    let def = au_sq_error(critic.au_predictions(p, deformed), y)?;
    let comp = au_sq_error(critic.au_predictions(p, final_image), y)?;
    Ok((
        def.scale(T::lit(w.lambda_exp_def)),
        comp.scale(T::lit(w.lambda_exp_comp)),
    ))
}

/// `E|D_exp(real) - x|^2` on annotated real images (unweighted).
pub fn expression_loss_d<'g, T: Real, C: Critic<T> + ?Sized>(
    critic: &C,
    p: &[Var<'g, T>],
    real: Var<'g, T>,
    x: &Array2<T>,
) -> Result<Var<'g, T>> {
    au_sq_error(critic.au_predictions(p, real.detach()), x)
}

/// `lambda_cyc * mean |roundtrip - original|`.
pub fn cycle_loss<'g, T: Real>(roundtrip: Var<'g, T>, original: Var<'g, T>, w: &LossWeights) -> Result<Var<'g, T>> {
    same_shape(roundtrip, original, "cycle_loss")?;
    Ok((roundtrip - original).abs().mean_all().scale(T::lit(w.lambda_cyc)))
}

/// A differentiable image embedding: `(N, 3, H, W) -> (N, k)`.
pub trait Embedder<T: Real> {
    fn embed<'g>(&self, images: Var<'g, T>) -> Result<Var<'g, T>>;
}

/// Fixed embedding: grayscale intensity in `[0, 1]`, average-pooled to a
/// `size x size` thumbnail and flattened. Cosine similarity ignores scale,
/// so the vector is left unnormalised.
#[derive(Clone, Copy, Debug)]
pub struct PooledGrayEmbedder {
    pub size: usize,
}

impl Default for PooledGrayEmbedder {
    fn default() -> Self {
        Self { size: 8 }
    }
}

impl<T: Real> Embedder<T> for PooledGrayEmbedder {
    fn embed<'g>(&self, images: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] || self.size == 0 || s[2] % self.size != 0 {
            return Err(Error::ShapeMismatch(format!(
                "pooled embedder needs square (N, 3, H, W) images with H divisible by {}, got {s:?}",
                self.size
            )));
        }
        let gray = images.mean_axis(1, true).add_scalar(T::one()).scale(T::lit(0.5));
        Ok(gray
            .avg_pool2d(s[2] / self.size)
            .reshape(&[s[0], self.size * self.size]))
    }
}

/// Per-sample cosine similarity of two `(N, k)` embeddings; errors when an
/// embedding vanishes.
pub fn cosine_similarity<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(a, b, "embeddings")?;
    for v in [a, b] {
        for row in v.value().axis_iter(Axis(0)) {
            let n2: f64 = row.iter().map(|x| x.to_f64c().powi(2)).sum();
            if !(n2 > 0.0) {
                return Err(Error::ZeroEmbedding);
            }
        }
    }
    let norm = |v: Var<'g, T>| v.square().sum_axis(1, false).sqrt();
    Ok((a * b).sum_axis(1, false) / (norm(a) * norm(b)))
}

/// `lambda_faceid * E[1 - cos(embed(deformed), embed(original))]`.
pub fn face_id_loss<'g, T: Real, E: Embedder<T> + ?Sized>(
    embedder: &E,
    deformed: Var<'g, T>,
    original: Var<'g, T>,
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    same_shape(deformed, original, "face_id_loss")?;
    let cos = cosine_similarity(embedder.embed(deformed)?, embedder.embed(original)?)?;
    Ok(cos.neg().add_scalar(T::one()).mean_all().scale(T::lit(w.lambda_faceid)))
}

/// Interior mask for the composition loss: ones at least `margin` pixels
/// away from every border.
fn interior<T: Real>(h: usize, w: usize, margin: usize) -> (Tensor<T>, usize) {
    let inside = |i: usize, n: usize| i >= margin && i + margin < n;
    let m = ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |ix| {
        if inside(ix[2], h) && inside(ix[3], w) {
            T::one()
        } else {
            T::zero()
        }
    });
    let count = (h.saturating_sub(2 * margin)) * (w.saturating_sub(2 * margin));
    (m, count)
}

/// `lambda_comp * E[|compose(cyc, fwd)(p) - p|^2]` over interior pixels
/// `p`, where the squared norm sums both coordinates. Pixels closer than
/// `ceil(max_offset_px)` to a border are excluded, since there the clamped
/// sampling cannot undo a displacement. Differentiable in both fields.
pub fn composition_loss<'g, T: Real>(
    offsets_fwd: Var<'g, T>,
    offsets_cyc: Var<'g, T>,
    max_offset_px: f64,
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    same_shape(offsets_fwd, offsets_cyc, "composition_loss")?;
    let s = offsets_fwd.shape();
    let composed = compose_offsets(offsets_cyc, offsets_fwd)?;
    let g = composed.graph();
    let residual = composed - g.constant(base_positions(s[2], s[3]));
    let (mask, count) = interior::<T>(s[2], s[3], max_offset_px.ceil() as usize);
    if count == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} field has no pixels {max_offset_px} px from the border",
            s[2], s[3]
        )));
    }
    let per_sample = residual.square().mul_const(&mask).sum_per_sample();
    Ok(per_sample.mean_all().scale(T::lit(w.lambda_comp / count as f64)))
}

/// `lambda_eye_G * mean(offsets^2) + lambda_tv_G * tv(offsets)` for an
/// `(N, 2, H, W)` offset batch.
pub fn grid_reg<'g, T: Real>(offsets: Var<'g, T>, w: &LossWeights) -> Var<'g, T> {
    offsets.square().mean_all().scale(T::lit(w.lambda_eye_g)) + tv_var(offsets).scale(T::lit(w.lambda_tv_g))
}

/// `lambda_eye_M * mean(mask^2) + lambda_tv_M * tv(mask)` for an
/// `(N, 1, H, W)` mask batch with entries in `[0, 1]`.
pub fn mask_reg<'g, T: Real>(mask: Var<'g, T>, w: &LossWeights) -> Result<Var<'g, T>> {
    if let Some(v) = mask.value().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::Range(format!("mask value {v:?} outside [0, 1]")));
    }
    Ok(mask.square().mean_all().scale(T::lit(w.lambda_eye_m)) + tv_var(mask).scale(T::lit(w.lambda_tv_m)))
}

/// Every generator component on one graph.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLosses<'g, T: Real> {
    pub critic: Var<'g, T>,
    pub exp_def: Var<'g, T>,
    pub exp_comp: Var<'g, T>,
    pub cyc: Var<'g, T>,
    pub faceid: Var<'g, T>,
    pub comp: Var<'g, T>,
    pub grid_reg: Var<'g, T>,
    pub mask_reg: Var<'g, T>,
}

impl<'g, T: Real> GeneratorLosses<'g, T> {
    fn terms(&self) -> [Var<'g, T>; 8] {
        [
            self.critic,
            self.exp_def,
            self.exp_comp,
            self.cyc,
            self.faceid,
            self.comp,
            self.grid_reg,
            self.mask_reg,
        ]
    }

    pub fn total(&self) -> Var<'g, T> {
        self.critic.graph().sum_of(&self.terms())
    }

    pub fn report(&self) -> LossReport {
        let mut r = LossReport::new();
        let mut total = 0.0;
        for (name, v) in GENERATOR_TERMS.iter().zip(self.terms()) {
            let v = v.item().to_f64c();
            total += v;
            r.insert(*name, v);
        }
        r.insert("g_total", total);
        r
    }
}

/// Every critic component on one graph.
#[derive(Clone, Copy, Debug)]
pub struct CriticLosses<'g, T: Real> {
    pub critic: CriticLoss<'g, T>,
    pub exp: Var<'g, T>,
}

impl<'g, T: Real> CriticLosses<'g, T> {
    pub fn total(&self) -> Var<'g, T> {
        self.exp
            .graph()
            .sum_of(&[self.critic.wasserstein, self.critic.penalty, self.exp])
    }

    pub fn report(&self) -> LossReport {
        let mut r = LossReport::new();
        let vals = [self.critic.wasserstein, self.critic.penalty, self.exp].map(|v| v.item().to_f64c());
        for (name, v) in CRITIC_TERMS.iter().zip(vals) {
            r.insert(*name, v);
        }
        r.insert("d_total", vals.iter().sum());
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ParamStore;
    use ndarray::Array4;

    /// `D(x) = <w, x>` and `D_exp(x)` = the first `k` pixels of channel 0's
    /// top row.
    struct LinearCritic {
        params: ParamStore<f64>,
        k: usize,
    }

    impl LinearCritic {
        fn new(w: Tensor<f64>, k: usize) -> Self {
            let mut params = ParamStore::new();
            params.add("w", w);
            Self { params, k }
        }

        fn with_norm(shape: [usize; 3], norm: f64) -> Self {
            let len = shape.iter().product::<usize>();
            let raw = ArrayD::from_shape_fn(IxDyn(&[1, shape[0], shape[1], shape[2]]), |ix| {
                ((ix[1] * 7 + ix[2] * 3 + ix[3]) % 5) as f64 - 1.7
            });
            let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(len > 0);
            Self::new(raw.mapv(|v| v * norm / n), 2)
        }
    }

    impl Critic<f64> for LinearCritic {
        fn params(&self) -> &ParamStore<f64> {
            &self.params
        }

        fn scores<'g>(&self, p: &[Var<'g, f64>], x: Var<'g, f64>) -> Var<'g, f64> {
            (x * p[0]).sum_per_sample()
        }

        fn scores_with_tangent<'g>(
            &self,
            p: &[Var<'g, f64>],
            x: Var<'g, f64>,
            t: Var<'g, f64>,
        ) -> (Var<'g, f64>, Var<'g, f64>) {
            (self.scores(p, x), self.scores(p, t))
        }

        fn au_predictions<'g>(&self, _p: &[Var<'g, f64>], x: Var<'g, f64>) -> Var<'g, f64> {
            let n = x.shape()[0];
            x.slice_axis(1, 0, 1)
                .slice_axis(2, 0, 1)
                .slice_axis(3, 0, self.k)
                .reshape(&[n, self.k])
        }
    }

    fn images(n: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> Tensor<f64> {
        Array4::from_shape_fn((n, 3, 4, 4), |(a, b, c, d)| f(a, b, c, d)).into_dyn()
    }

    fn penalty_for(norm: f64) -> f64 {
        let critic = LinearCritic::with_norm([3, 4, 4], norm);
        let g = Graph::new();
        let p = critic.params.bind(&g, true);
        let real = g.constant(images(3, |a, b, c, d| ((a + b * c + d) % 3) as f64 * 0.4 - 0.5));
        let fake = g.constant(images(3, |a, b, c, d| ((a * d + b + c) % 4) as f64 * 0.3 - 0.4));
        let l = critic_loss_d(&critic, &p, real, fake, &[0.1, 0.5, 0.9], &LossWeights::default()).unwrap();
        l.penalty.item()
    }

    #[test]
    fn penalty_of_linear_critics() {
        let lambda = LossWeights::default().lambda_gp;
        assert!(penalty_for(1.0).abs() < 1e-9);
        assert!((penalty_for(2.0) - lambda).abs() < 1e-9);
        assert!((penalty_for(0.5) - 0.25 * lambda).abs() < 1e-9);
    }

    #[test]
    fn wasserstein_terms_cancel_on_identical_batches() {
        let critic = LinearCritic::with_norm([3, 4, 4], 1.3);
        let g = Graph::new();
        let p = critic.params.bind(&g, true);
        let x = g.constant(images(2, |a, b, c, d| (a + b + c + d) as f64 * 0.05));
        let l = critic_loss_d(&critic, &p, x, x, &[0.3, 0.7], &LossWeights::default()).unwrap();
        assert!(l.wasserstein.item().abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_reaches_critic_only() {
        let critic = LinearCritic::with_norm([3, 4, 4], 2.0);
        let g = Graph::new();
        let p = critic.params.bind(&g, true);
        let real = g.constant(images(2, |_, b, _, _| b as f64 * 0.1));
        let fake = g.leaf(images(2, |_, _, c, _| c as f64 * 0.1));
        let l = critic_loss_d(&critic, &p, real, fake, &[0.5, 0.5], &LossWeights::default()).unwrap();
        let grads = g.backward(l.total());
        assert!(grads.wrt(fake).is_none_or(|t| t.iter().all(|v| *v == 0.0)));
        // d/dw lambda (|w| - 1)^2 = 2 lambda (|w| - 1) w / |w|, plus the Wasserstein term
        let w = critic.params.get(0);
        let mean_diff = (&fake.value().mean_axis(Axis(0)).unwrap() - &real.value().mean_axis(Axis(0)).unwrap())
            .insert_axis(Axis(0));
        let want = w.mapv(|v| 2.0 * 10.0 * (2.0 - 1.0) * v / 2.0) + mean_diff;
        let got = grads.wrt(p[0]).unwrap();
        assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let critic = LinearCritic::with_norm([3, 4, 4], 1.0);
        let g = Graph::new();
        let p = critic.params.bind(&g, true);
        let a = g.constant(images(2, |_, _, _, _| 0.0));
        let b = g.constant(images(3, |_, _, _, _| 0.0));
        let w = LossWeights::default();
        assert!(matches!(
            critic_loss_d(&critic, &p, a, b, &[0.5; 2], &w),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            critic_loss_d(&critic, &p, a, a, &[0.5; 3], &w),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(cycle_loss(a, b, &w), Err(Error::ShapeMismatch(_))));
        let y = Array2::zeros((2, 3));
        assert!(matches!(
            expression_loss_d(&critic, &p, a, &y),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn generator_critic_term() {
        let critic = LinearCritic::with_norm([3, 4, 4], 1.0);
        let g = Graph::new();
        let p = critic.params.bind(&g, false);
        let x = g.constant(images(2, |a, b, c, d| (a * b + c * d) as f64 * 0.03));
        let lg = critic_loss_g(&critic, &p, x).item();
        let ld = critic_loss_d(&critic, &p, x, x, &[0.5, 0.5], &LossWeights::default()).unwrap();
        // first term of the critic objective, negated
        let fake_term = critic.scores(&p, x).mean_all().item();
        assert!((lg + fake_term).abs() < 1e-12);
        assert!(ld.wasserstein.item().abs() < 1e-12);
    }

    fn au_images(rows: &[[f64; 2]]) -> Tensor<f64> {
        images(
            rows.len(),
            |a, b, c, d| if b == 0 && c == 0 && d < 2 { rows[a][d] } else { 0.0 },
        )
    }

    #[test]
    fn expression_losses() {
        let critic = LinearCritic::with_norm([3, 4, 4], 1.0);
        let g = Graph::new();
        let p = critic.params.bind(&g, false);
        let y = Array2::from_shape_vec((1, 2), vec![0.3, 0.8]).unwrap();
        let w = LossWeights::default();
        let exact = g.constant(au_images(&[[0.3, 0.8]]));
        let off = g.constant(au_images(&[[0.4, 0.8]]));
        let (d, c) = expression_loss_g(&critic, &p, exact, exact, &y, &w).unwrap();
        assert_eq!((d.item(), c.item()), (0.0, 0.0));
        let (d, c) = expression_loss_g(&critic, &p, exact, off, &y, &w).unwrap();
        assert_eq!(d.item(), 0.0);
        assert!((c.item() - 4000.0 * 0.01).abs() < 1e-9);
        let unit = g.constant(au_images(&[[1.3, 0.8]]));
        let (d, c) = expression_loss_g(&critic, &p, unit, unit, &y, &w).unwrap();
        assert!((d.item() + c.item() - 5000.0).abs() < 1e-9);

        // constant 0.5 predictions against zero targets: 0.25 per AU
        let half = g.constant(au_images(&[[0.5, 0.5], [0.5, 0.5]]));
        let l = expression_loss_d(&critic, &p, half, &Array2::zeros((2, 2))).unwrap();
        assert!((l.item() - 0.5).abs() < 1e-12);
        let l = expression_loss_d(&critic, &p, exact, &y).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn cycle_loss_examples() {
        let g = Graph::new();
        let w = LossWeights::default();
        let a = images(2, |a, b, c, d| ((a + b + c + d) % 5) as f64 * 0.2 - 0.5);
        let x = g.constant(a.clone());
        assert_eq!(cycle_loss(x, x, &w).unwrap().item(), 0.0);
        let up = g.constant(a.mapv(|v| v + 0.1));
        let down = g.constant(a.mapv(|v| v - 0.1));
        assert!((cycle_loss(up, x, &w).unwrap().item() - 10.0).abs() < 1e-9);
        assert!((cycle_loss(down, x, &w).unwrap().item() - 10.0).abs() < 1e-9);
    }

    /// Embeds an image as its top-left pixel's three channels.
    struct PixelEmbedder;

    impl Embedder<f64> for PixelEmbedder {
        fn embed<'g>(&self, x: Var<'g, f64>) -> Result<Var<'g, f64>> {
            let n = x.shape()[0];
            Ok(x.slice_axis(2, 0, 1).slice_axis(3, 0, 1).reshape(&[n, 3]))
        }
    }

    fn pixel_images<'g>(g: &'g Graph<f64>, v: [f64; 3]) -> Var<'g, f64> {
        g.constant(images(1, |_, b, c, d| if c == 0 && d == 0 { v[b] } else { 0.0 }))
    }

    #[test]
    fn face_id_examples() {
        let g = Graph::new();
        let w = LossWeights {
            lambda_faceid: 1.5,
            ..LossWeights::default()
        };
        let a = pixel_images(&g, [1.0, 2.0, 0.5]);
        let anti = pixel_images(&g, [-1.0, -2.0, -0.5]);
        let ortho = pixel_images(&g, [2.0, -1.0, 0.0]);
        let zero = pixel_images(&g, [0.0, 0.0, 0.0]);
        assert!(face_id_loss(&PixelEmbedder, a, a, &w).unwrap().item().abs() < 1e-12);
        assert!((face_id_loss(&PixelEmbedder, anti, a, &w).unwrap().item() - 3.0).abs() < 1e-12);
        assert!((face_id_loss(&PixelEmbedder, ortho, a, &w).unwrap().item() - 1.5).abs() < 1e-12);
        assert!(matches!(
            face_id_loss(&PixelEmbedder, zero, a, &w),
            Err(Error::ZeroEmbedding)
        ));
    }

    #[test]
    fn pooled_embedder_shape_and_identity() {
        let g = Graph::new();
        let x = g.constant(
            Array4::from_shape_fn((2, 3, 16, 16), |(a, b, c, d)| ((a + b + c * d) % 7) as f64 / 7.0 - 0.5).into_dyn(),
        );
        let e = PooledGrayEmbedder::default().embed(x).unwrap();
        assert_eq!(e.shape(), vec![2, 64]);
        let l = face_id_loss(&PooledGrayEmbedder::default(), x, x, &LossWeights::default()).unwrap();
        assert!(l.item().abs() < 1e-12);
        let odd = g.constant(ArrayD::zeros(IxDyn(&[1, 3, 12, 12])));
        assert!(PooledGrayEmbedder::default().embed(odd).is_err());
    }

    fn constant_offsets(h: usize, w: usize, dx: f64, dy: f64) -> Tensor<f64> {
        Array4::from_shape_fn((1, 2, h, w), |(_, c, _, _)| if c == 0 { dx } else { dy }).into_dyn()
    }

    #[test]
    fn composition_examples() {
        let g = Graph::new();
        let w = LossWeights::default();
        let (h, wd) = (16, 16);
        let step = crate::warpfield::pixel_step(wd);
        let zero = g.constant(constant_offsets(h, wd, 0.0, 0.0));
        assert_eq!(composition_loss(zero, zero, 2.0, &w).unwrap().item(), 0.0);

        // shifting by d and back is exact away from the borders
        let d = 1.5 * step;
        let fwd = g.constant(constant_offsets(h, wd, d, 0.0));
        let back = g.constant(constant_offsets(h, wd, -d, 0.0));
        assert!(composition_loss(fwd, back, 2.0, &w).unwrap().item().abs() < 1e-20);

        // uncorrected shift: d^2 in the x coordinate only
        let l = composition_loss(fwd, zero, 2.0, &w).unwrap().item();
        assert!((l - w.lambda_comp * d * d).abs() < 1e-12, "{l}");
        let diag = g.constant(constant_offsets(h, wd, d, d));
        let l = composition_loss(diag, zero, 2.0, &w).unwrap().item();
        assert!((l - 2.0 * w.lambda_comp * d * d).abs() < 1e-12);

        let tiny = g.constant(constant_offsets(4, 4, 0.0, 0.0));
        assert!(composition_loss(tiny, tiny, 2.0, &w).is_err());
    }

    #[test]
    fn grid_reg_examples() {
        let g = Graph::new();
        let w = LossWeights::default();
        assert_eq!(grid_reg(g.constant(constant_offsets(5, 5, 0.0, 0.0)), &w).item(), 0.0);
        let c = 0.03;
        let l = grid_reg(g.constant(constant_offsets(5, 5, c, 0.0)), &w).item();
        assert!((l - 0.1 * c * c / 2.0).abs() < 1e-15);

        // 2x2 field with TV 0.5 and identity penalty 0.05
        let f = ArrayD::from_shape_vec(IxDyn(&[1, 2, 2, 2]), vec![0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0]).unwrap();
        let grid = crate::warpfield::DeformationGrid::new(
            f.view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap()
                .index_axis(Axis(0), 0)
                .permuted_axes([1, 2, 0])
                .to_owned(),
            1.0,
        )
        .unwrap();
        let tv = crate::warpfield::grid_tv(&grid);
        let eye = crate::warpfield::grid_identity_penalty(&grid);
        let l = grid_reg(g.constant(f), &w).item();
        assert!((l - (0.1 * eye + 1e-5 * tv)).abs() < 1e-15);
    }

    fn mask(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Array4::from_shape_fn((1, 1, h, w), |(_, _, i, j)| f(i, j)).into_dyn()
    }

    #[test]
    fn mask_reg_examples() {
        let g = Graph::new();
        let w = LossWeights::default();
        assert_eq!(mask_reg(g.constant(mask(3, 3, |_, _| 0.0)), &w).unwrap().item(), 0.0);
        let ones = mask_reg(g.constant(mask(3, 3, |_, _| 1.0)), &w).unwrap().item();
        assert!((ones - 0.1).abs() < 1e-15);
        let checker = mask_reg(g.constant(mask(2, 2, |i, j| ((i + j) % 2) as f64)), &w)
            .unwrap()
            .item();
        assert!((checker - (0.1 * 0.5 + 1e-5 * 4.0 / 4.0)).abs() < 1e-15);
        assert!(matches!(
            mask_reg(g.constant(mask(2, 2, |_, _| 1.5)), &w),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            mask_reg(g.constant(mask(2, 2, |_, _| -0.1)), &w),
            Err(Error::Range(_))
        ));
    }

    fn components(v: f64) -> BTreeMap<String, f64> {
        GENERATOR_TERMS
            .iter()
            .chain(&CRITIC_TERMS)
            .map(|k| (k.to_string(), v))
            .collect()
    }

    #[test]
    fn totals() {
        let (g, d, r) = total_losses(&components(0.0)).unwrap();
        assert_eq!((g, d), (0.0, 0.0));
        assert!(r.totals_consistent(1e-6));
        let mut c = components(1.0);
        c.insert("g_cyc".into(), 3.5);
        c.insert("d_gp".into(), -2.0);
        let (g, d, r) = total_losses(&c).unwrap();
        assert_eq!((g, d), (7.0 + 3.5, 0.0));
        assert_eq!(r.get("g_total"), Some(g));
        c.remove("g_faceid");
        assert!(matches!(total_losses(&c), Err(Error::MissingComponent(k)) if k == "g_faceid"));
    }

    #[test]
    fn weights_config() {
        let w: LossWeights = toml::from_str("lambda_cyc = 5.0\nlambda_eye_G = 0.2").unwrap();
        assert_eq!((w.lambda_cyc, w.lambda_eye_g, w.lambda_exp_comp), (5.0, 0.2, 4000.0));
        assert!(toml::from_str::<LossWeights>("lambda_cycle = 5.0").is_err());
        let bad = LossWeights {
            lambda_tv_m: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
