//! Evaluation: AU sweeps, difference maps, identity distance, a Fréchet
//! feature distance and target-AU error judged by an independently trained
//! regressor.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aucode::{interpolate_au, AuVector};
use crate::autograd::{Graph, Tensor};
use crate::dataio::{sample_batch, AnnotatedDataset};
use crate::error::{Error, Result};
use crate::imageio::{grid_image, mask_image, save_image};
use crate::losses::{Embedder, PooledGrayEmbedder};
use crate::nets::{au_matrix, Critic, EditResult, ImageTensor, ModelBundle, ModelConfig, ParamStore, PatchCritic};
use crate::trainer::{step_rng, Adam};

/// Eigenvalues above `-EIG_TOL * scale` are clipped to zero.
pub const EIG_TOL: f64 = 1e-10;
const PSD_RETRY_EPS: f64 = 1e-6;

/// One edit per `alpha`, towards `interpolate_au(x, y, alpha)`.
pub fn au_sweep(
    bundle: &ModelBundle<f32>,
    image: &ImageTensor,
    x: &AuVector,
    y: &AuVector,
    alphas: &[f64],
) -> Result<Vec<EditResult>> {
    alphas
        .iter()
        .map(|&a| bundle.g_comp(image, x, &interpolate_au(x, y, a)?))
        .collect()
}

/// Filmstrip of a sweep: one column per result, rows deformed, mask, final.
pub fn filmstrip(results: &[EditResult]) -> Result<ImageTensor> {
    let rows = vec![
        results.iter().map(|r| r.deformed.clone()).collect(),
        results
            .iter()
            .map(|r| mask_image(&r.mask))
            .collect::<Result<Vec<_>>>()?,
        results.iter().map(|r| r.final_image.clone()).collect(),
    ];
    grid_image(&rows, 2)
}

pub fn write_filmstrip(results: &[EditResult], path: &Path) -> Result<()> {
    save_image(&filmstrip(results)?, path)
}

/// Per-pixel channel mean of `|edited - original|` (`H x W x 1`, values in
/// `[0, 2]`) and its overall mean.
pub fn difference_image(edited: &ImageTensor, original: &ImageTensor) -> Result<(Array3<f32>, f64)> {
    let (a, b) = (edited.pixels(), original.pixels());
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let map = (a - b)
        .mapv(f32::abs)
        .mean_axis(Axis(2))
        .expect("three channels")
        .insert_axis(Axis(2));
    let mean = map.iter().map(|&v| v as f64).sum::<f64>() / map.len() as f64;
    Ok((map, mean))
}

/// Embeddings of images, one row each.
pub fn embed_images(embedder: &dyn Embedder<f64>, images: &[ImageTensor]) -> Result<Array2<f64>> {
    let g = Graph::new();
    let e = embedder.embed(g.constant(ImageTensor::to_batch::<f64>(images)?))?;
    let v = e.value();
    let n = images.len();
    Ok(v.to_shape((n, v.len() / n.max(1))).expect("contiguous").to_owned())
}

fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroEmbedding);
    }
    // |a/|a| - b/|b||^2 / 2 equals 1 - cos and is exactly zero for a == b
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x / na - y / nb).powi(2)).sum();
    Ok((d2 / 2.0).clamp(0.0, 2.0))
}

/// `1 - cos` between the embeddings of `a` and `b`.
pub fn embedding_distance(embedder: &dyn Embedder<f64>, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let e = embed_images(embedder, &[a.clone(), b.clone()])?;
    cosine_distance(e.row(0).as_slice().expect("row"), e.row(1).as_slice().expect("row"))
}

/// Maps an image set to one feature row per image.
pub trait FeatureExtractor {
    fn features(&self, images: &[ImageTensor]) -> Result<Array2<f64>>;
}

impl FeatureExtractor for PooledGrayEmbedder {
    fn features(&self, images: &[ImageTensor]) -> Result<Array2<f64>> {
        embed_images(self, images)
    }
}

fn moments(f: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = f.dim();
    let m = DMatrix::from_row_slice(n, d, f.as_standard_layout().as_slice().expect("contiguous"));
    let mu = m.row_mean().transpose();
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = c.transpose() * c / (n as f64 - 1.0);
    (mu, cov)
}

/// Square root of a symmetric matrix; eigenvalues below zero but above
/// `-EIG_TOL * scale` are clipped, more negative ones are `None`.
fn sqrt_psd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -EIG_TOL * scale) {
        return None;
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

fn frechet_from_moments(mu_a: &DVector<f64>, ca: &DMatrix<f64>, mu_b: &DVector<f64>, cb: &DMatrix<f64>) -> Option<f64> {
    let ra = sqrt_psd(ca)?;
    let cross = sqrt_psd(&(&ra * cb * &ra))?;
    let diff = mu_a - mu_b;
    Some((diff.norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace()).max(0.0))
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are
/// samples): `|mu_a - mu_b|^2 + tr(Ca + Cb - 2 (Ca Cb)^(1/2))`.
pub fn frechet_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let d = a.ncols();
    if b.ncols() != d {
        return Err(Error::ShapeMismatch(format!("feature widths {d} and {}", b.ncols())));
    }
    let needed = (2 * d).max(2);
    for f in [a, b] {
        if f.nrows() < needed {
            return Err(Error::InsufficientSamples { needed, got: f.nrows() });
        }
    }
    let (mu_a, ca) = moments(a);
    let (mu_b, cb) = moments(b);
    if let Some(v) = frechet_from_moments(&mu_a, &ca, &mu_b, &cb) {
        return Ok(v);
    }
    let eps = DMatrix::identity(d, d) * PSD_RETRY_EPS;
    frechet_from_moments(&mu_a, &(ca + &eps), &mu_b, &(cb + eps)).ok_or(Error::NonPsdCovariance)
}

pub fn feature_distance(extractor: &dyn FeatureExtractor, set_a: &[ImageTensor], set_b: &[ImageTensor]) -> Result<f64> {
    frechet_distance(&extractor.features(set_a)?, &extractor.features(set_b)?)
}

/// Predicts AU intensities from images.
pub trait AuPredictor {
    fn predict(&self, images: &Tensor<f32>) -> Result<Array2<f64>>;
}

/// Mean over images of the mean absolute AU error of the (clamped)
/// predictions.
pub fn target_au_error(regressor: &dyn AuPredictor, edited: &Tensor<f32>, targets: &[AuVector]) -> Result<f64> {
    let p = regressor.predict(edited)?;
    au_error_of(&p, targets, None)
}

/// Mean absolute error of `predicted` against `targets`, restricted to the
/// AU indices in `only` when given.
pub fn au_error_of(predicted: &Array2<f64>, targets: &[AuVector], only: Option<&[usize]>) -> Result<f64> {
    if predicted.nrows() != targets.len() || predicted.nrows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            predicted.nrows(),
            targets.len()
        )));
    }
    let all: Vec<usize> = (0..predicted.ncols()).collect();
    let idx = only.unwrap_or(&all);
    let mut total = 0.0;
    for (row, t) in predicted.rows().into_iter().zip(targets) {
        if t.len() != row.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predicted AUs, {} targets",
                row.len(),
                t.len()
            )));
        }
        let e: f64 = idx
            .iter()
            .map(|&k| (row[k].clamp(0.0, 1.0) - t.values()[k]).abs())
            .sum();
        total += e / idx.len() as f64;
    }
    Ok(total / targets.len() as f64)
}

/// Training settings of the independent AU regressor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorConfig {
    pub conv_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            conv_dim: 16,
            steps: 600,
            batch_size: 32,
            lr: 5e-4,
            seed: 9001,
        }
    }
}

/// Convolutional AU regressor trained on plain AU regression, separate from
/// the adversarial critic.
#[derive(Clone, Debug)]
pub struct AuRegressor {
    net: PatchCritic<f32>,
}

impl AuRegressor {
    fn model_config(n_au: usize, resolution: usize, conv_dim: usize) -> ModelConfig {
        ModelConfig {
            n_au,
            resolution,
            d_conv_dim: conv_dim,
            ..ModelConfig::default()
        }
    }

    pub fn new(n_au: usize, resolution: usize, cfg: &RegressorConfig) -> Result<Self> {
        let mc = Self::model_config(n_au, resolution, cfg.conv_dim);
        mc.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            net: PatchCritic::new(&mc, &mut rng),
        })
    }

    /// Fits the regressor to `data` with Adam on the mean squared AU error.
    pub fn train(data: &AnnotatedDataset, cfg: &RegressorConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut reg = Self::new(data.n_au, data.resolution, cfg)?;
        let mut opt = Adam::new(&[&reg.net.params], 0.9, 0.999);
        for step in 0..cfg.steps {
            let mut rng = step_rng(cfg.seed, step as u64, 0);
            let batch = sample_batch(data, cfg.batch_size, &mut rng)?;
            let lr = cfg.lr * (1.0 - step as f64 / cfg.steps as f64);
            let g = Graph::new();
            let p = reg.net.params.bind(&g, true);
            let pred = reg.net.au_predictions(&p, g.constant(batch.images));
            let loss = (pred - g.constant(batch.x.into_dyn())).square().mean_all();
            if !loss.item().is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: step as u64,
                    report: format!("regressor_mse={}", loss.item()),
                });
            }
            let grads = g.backward(loss);
            let gs: Vec<_> = p.iter().map(|&v| grads.wrt_or_zeros(v)).collect();
            drop(p);
            opt.step(&mut [&mut reg.net.params], &gs, lr);
        }
        Ok(reg)
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.net.params
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.net.params.save_npz(path)
    }

    pub fn load(path: &Path, n_au: usize, resolution: usize, conv_dim: usize) -> Result<Self> {
        let cfg = RegressorConfig {
            conv_dim,
            ..RegressorConfig::default()
        };
        let mut reg = Self::new(n_au, resolution, &cfg)?;
        reg.net.params = reg.net.params.load_npz(path)?;
        Ok(reg)
    }
}

pub const EVAL_CHUNK: usize = 32;

fn chunked<R>(n: usize, mut f: impl FnMut(std::ops::Range<usize>) -> Result<R>) -> Result<Vec<R>> {
    (0..n.div_ceil(EVAL_CHUNK))
        .map(|c| f(c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(n)))
        .collect()
}

fn stack_rows(parts: Vec<Array2<f64>>) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

fn stack_images(parts: Vec<Tensor<f32>>) -> Tensor<f32> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal shapes")
}

impl AuPredictor for AuRegressor {
    fn predict(&self, images: &Tensor<f32>) -> Result<Array2<f64>> {
        predict_with(&self.net, images)
    }
}

fn predict_with(net: &PatchCritic<f32>, images: &Tensor<f32>) -> Result<Array2<f64>> {
    let n = images.shape()[0];
    let parts = chunked(n, |r| {
        let g = Graph::new();
        let p = net.params.bind(&g, false);
        let x = g.constant(images.slice_axis(Axis(0), ndarray::Slice::from(r)).to_owned());
        let v = net.au_predictions(&p, x).value();
        Ok(v.mapv(|t| t as f64).into_dimensionality().expect("2-D"))
    })?;
    Ok(stack_rows(parts))
}

/// The critic's AU head as a predictor.
pub struct CriticAuHead<'a>(pub &'a ModelBundle<f32>);

impl AuPredictor for CriticAuHead<'_> {
    fn predict(&self, images: &Tensor<f32>) -> Result<Array2<f64>> {
        predict_with(&self.0.d, images)
    }
}

/// Batched edits: `(deformed, output)` image tensors.
pub fn edit_batch(
    bundle: &ModelBundle<f32>,
    images: &Tensor<f32>,
    x: &[AuVector],
    y: &[AuVector],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let n = images.shape()[0];
    if x.len() != n || y.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} images, {} sources, {} targets",
            x.len(),
            y.len()
        )));
    }
    let parts = chunked(n, |r| {
        let g = Graph::new();
        let pd = bundle.g_def.params.bind(&g, false);
        let pt = bundle.g_tex.params.bind(&g, false);
        let imgs = g.constant(images.slice_axis(Axis(0), ndarray::Slice::from(r.clone())).to_owned());
        let e = bundle.edit(&pd, &pt, imgs, &au_matrix(&x[r.clone()]), &au_matrix(&y[r]))?;
        Ok(((*e.deformed.value()).clone(), (*e.output.value()).clone()))
    })?;
    let (d, o): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok((stack_images(d), stack_images(o)))
}

/// Scalar summary of a trained model on held-out data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    /// Squared AU error of the critic's AU head summed over AUs, mean over images.
    pub d_exp_mse: f64,
    /// Regressor error of the regressor on the unedited images.
    pub regressor_error: f64,
    pub target_au_error: f64,
    pub cycle_l1: f64,
    /// Target-AU error on the motion AUs before editing and after the
    /// deformation stage alone.
    pub motion_error_input: f64,
    pub motion_error_deformed: f64,
    pub identity_distance: f64,
    pub difference_mean: f64,
    pub feature_distance: f64,
}

impl EvalReport {
    /// Relative error reduction of the deformation stage on the motion AUs.
    pub fn motion_reduction(&self) -> f64 {
        1.0 - self.motion_error_deformed / self.motion_error_input
    }

    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("n_images", self.n_images as f64),
            ("d_exp_mse", self.d_exp_mse),
            ("regressor_error", self.regressor_error),
            ("target_au_error", self.target_au_error),
            ("cycle_l1", self.cycle_l1),
            ("motion_error_input", self.motion_error_input),
            ("motion_error_deformed", self.motion_error_deformed),
            ("motion_reduction", self.motion_reduction()),
            ("identity_distance", self.identity_distance),
            ("difference_mean", self.difference_mean),
            ("feature_distance", self.feature_distance),
        ]
    }

    /// Two-column `metric,value` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.fields() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_csv())?)
    }
}

/// Evaluates `bundle` on `data`: every image is edited towards the AUs of
/// another randomly chosen image of the set (seeded), then back.
/// `motion_aus` are the indices of AUs expressible by motion alone.
/// Smallest evaluation set: the feature distance fits a 16-dimensional
/// Gaussian to each side.
pub const MIN_EVAL_IMAGES: usize = 32;

pub fn check_eval_size(n: usize) -> Result<()> {
    if n < MIN_EVAL_IMAGES {
        return Err(Error::InsufficientSamples {
            needed: MIN_EVAL_IMAGES,
            got: n,
        });
    }
    Ok(())
}

pub fn evaluate(
    bundle: &ModelBundle<f32>,
    regressor: &dyn AuPredictor,
    data: &AnnotatedDataset,
    motion_aus: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    let n = data.len();
    check_eval_size(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..n).collect();
    let targets: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..n)).collect();
    let images: Tensor<f32> = data.image_batch(&idx)?;
    let x: Vec<AuVector> = data.records.iter().map(|r| r.au.clone()).collect();
    let y: Vec<AuVector> = targets.iter().map(|&t| x[t].clone()).collect();

    let (deformed, output) = edit_batch(bundle, &images, &x, &y)?;
    let (_, back) = edit_batch(bundle, &output, &y, &x)?;

    let d_pred = CriticAuHead(bundle).predict(&images)?;
    let d_exp_mse = d_pred
        .rows()
        .into_iter()
        .zip(&x)
        .map(|(p, t)| p.iter().zip(t.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n as f64;

    let reg_input = regressor.predict(&images)?;
    let reg_deformed = regressor.predict(&deformed)?;
    let reg_output = regressor.predict(&output)?;

    let to_images =
        |t: &Tensor<f32>| -> Result<Vec<ImageTensor>> { (0..n).map(|i| ImageTensor::from_batch(t, i)).collect() };
    let originals = to_images(&images)?;
    let edited = to_images(&output)?;
    let emb = PooledGrayEmbedder::default();
    let (ea, eb) = (embed_images(&emb, &originals)?, embed_images(&emb, &edited)?);
    let mut identity = 0.0;
    for i in 0..n {
        identity += cosine_distance(ea.row(i).as_slice().expect("row"), eb.row(i).as_slice().expect("row"))?;
    }
    let mut diff = 0.0;
    for (e, o) in edited.iter().zip(&originals) {
        diff += difference_image(e, o)?.1;
    }
    let cycle_l1 = (&back - &images).mapv(|v| v.abs() as f64).mean().unwrap_or(0.0);

    Ok(EvalReport {
        n_images: n,
        d_exp_mse,
        regressor_error: au_error_of(&reg_input, &x, None)?,
        target_au_error: au_error_of(&reg_output, &y, None)?,
        cycle_l1,
        motion_error_input: au_error_of(&reg_input, &y, Some(motion_aus))?,
        motion_error_deformed: au_error_of(&reg_deformed, &y, Some(motion_aus))?,
        identity_distance: identity / n as f64,
        difference_mean: diff / n as f64,
        feature_distance: feature_distance(&PooledGrayEmbedder { size: 4 }, &originals, &edited)?,
    })
}

/// Crops a batch tensor to its first `n` images.
pub fn head(t: &Tensor<f32>, n: usize) -> Tensor<f32> {
    t.slice_axis(Axis(0), ndarray::Slice::from(..n.min(t.shape()[0])))
        .to_owned()
}
