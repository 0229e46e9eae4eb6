//! Python bindings: load or initialise models, edit images, warp, train and
//! evaluate. Images cross the boundary as `float32` `(H, W, 3)` arrays in
//! `[-1, 1]`; AU vectors as sequences of floats in `[0, 1]`.

use std::path::PathBuf;

use defgan_core::aucode::{interpolate_au, preset_expression, validate_au, AuVector};
use defgan_core::dataio::{load_dataset_with, synth_sprites as core_synth, LoadOptions};
use defgan_core::evalkit::{self, AuRegressor, RegressorConfig};
use defgan_core::nets::{EditResult, ImageTensor, ModelBundle, ModelConfig};
use defgan_core::trainer::{self, Checkpoint, TrainConfig};
use defgan_core::warpfield::{self, DeformationGrid};
use defgan_core::Error;
use ndarray::{Array2, Array3};
use numpy::{IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::NonFiniteLoss { .. } | Error::NonPsdCovariance | Error::Checkpoint(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_image(a: PyReadonlyArray3<'_, f32>) -> PyResult<ImageTensor> {
    ImageTensor::new(a.as_array().to_owned()).map_err(py_err)
}

fn au(v: &[f64], n: usize) -> PyResult<AuVector> {
    validate_au(v, n).map_err(py_err)
}

/// A trained or freshly initialised model: deformation generator, texture
/// generator and critic.
#[pyclass(module = "defgan", frozen)]
struct Model {
    bundle: ModelBundle<f32>,
}

#[pymethods]
impl Model {
    /// Random initialisation.
    #[staticmethod]
    #[pyo3(signature = (n_au=17, resolution=128, max_offset_px=5.0, g_conv_dim=64, d_conv_dim=64, g_res_blocks=6, seed=0))]
    fn init(
        n_au: usize,
        resolution: usize,
        max_offset_px: f64,
        g_conv_dim: usize,
        d_conv_dim: usize,
        g_res_blocks: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            n_au,
            resolution,
            max_offset_px,
            g_conv_dim,
            d_conv_dim,
            g_res_blocks,
        };
        Ok(Self {
            bundle: ModelBundle::init(&cfg, seed).map_err(py_err)?,
        })
    }

    /// Loads the model weights of a checkpoint directory.
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&checkpoint).map_err(py_err)?;
        Ok(Self { bundle: ck.bundle })
    }

    #[getter]
    fn n_au(&self) -> usize {
        self.bundle.n_au()
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.bundle.resolution()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.bundle.param_count()
    }

    /// Layer manifest of the three networks as text.
    fn manifest(&self) -> String {
        self.bundle.manifest_text()
    }

    /// Edits `image` from AU vector `source` towards `target`.
    fn edit(&self, image: PyReadonlyArray3<'_, f32>, source: Vec<f64>, target: Vec<f64>) -> PyResult<Edit> {
        let n = self.bundle.n_au();
        let img = to_image(image)?;
        let r = self
            .bundle
            .g_comp(&img, &au(&source, n)?, &au(&target, n)?)
            .map_err(py_err)?;
        Ok(Edit(r))
    }

    /// Patch scores `(h, w)` and AU predictions of the critic.
    fn critic<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'_, f32>,
    ) -> PyResult<(Bound<'py, PyArray2<f32>>, Vec<f32>)> {
        let (scores, aus) = self.bundle.d_forward(&to_image(image)?).map_err(py_err)?;
        Ok((scores.into_pyarray(py), aus))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(n_au={}, resolution={}, params={})",
            self.bundle.n_au(),
            self.bundle.resolution(),
            self.bundle.param_count()
        )
    }
}

/// All stages of one edit.
#[pyclass(module = "defgan", frozen)]
struct Edit(EditResult);

#[pymethods]
impl Edit {
    #[getter]
    fn final_image<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.0.final_image.pixels().clone().into_pyarray(py)
    }

    #[getter]
    fn deformed<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.0.deformed.pixels().clone().into_pyarray(py)
    }

    #[getter]
    fn texture<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.0.texture.pixels().clone().into_pyarray(py)
    }

    /// Blend mask, `(H, W, 1)`.
    #[getter]
    fn mask<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.0.mask.clone().into_pyarray(py)
    }

    /// Offset field, `(H, W, 2)`, in normalised coordinates (x first).
    #[getter]
    fn offsets<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.0.grid.offsets().clone().into_pyarray(py)
    }

    /// Largest deviation of the output from the mask blend of its stages.
    fn blend_residual(&self) -> f64 {
        self.0.blend_residual()
    }
}

/// All-zero offset field `(h, w, 2)`.
#[pyfunction]
fn identity_grid<'py>(py: Python<'py>, h: usize, w: usize) -> PyResult<Bound<'py, PyArray3<f64>>> {
    Ok(warpfield::identity_grid(h, w)
        .map_err(py_err)?
        .offsets()
        .clone()
        .into_pyarray(py))
}

/// Bilinear warp of an `(H, W, C)` image by an `(H, W, 2)` offset field.
#[pyfunction]
#[pyo3(signature = (image, offsets, max_offset_px=5.0))]
fn warp_image<'py>(
    py: Python<'py>,
    image: PyReadonlyArray3<'_, f64>,
    offsets: PyReadonlyArray3<'_, f64>,
    max_offset_px: f64,
) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let grid = DeformationGrid::new(offsets.as_array().to_owned(), max_offset_px).map_err(py_err)?;
    let out: Array3<f64> = warpfield::warp_image(&image.as_array().to_owned(), &grid).map_err(py_err)?;
    Ok(out.into_pyarray(py))
}

#[pyfunction]
fn interpolate(x: Vec<f64>, y: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let n = x.len();
    Ok(interpolate_au(&au(&x, n)?, &au(&y, n)?, alpha)
        .map_err(py_err)?
        .values()
        .to_vec())
}

/// AU vector of a named expression from a presets CSV.
#[pyfunction]
fn expression(name: &str, presets: PathBuf) -> PyResult<Vec<f64>> {
    Ok(preset_expression(name, &presets).map_err(py_err)?.values().to_vec())
}

/// Renders `n` annotated sprite faces under `out`; returns the count.
#[pyfunction]
#[pyo3(signature = (out, n, resolution=64, seed=0))]
fn synth_sprites(out: PathBuf, n: usize, resolution: usize, seed: u64) -> PyResult<usize> {
    Ok(core_synth(&out, n, resolution, seed).map_err(py_err)?.len())
}

/// Trains from a config file; returns the final `(epoch, global_step)`.
#[pyfunction]
#[pyo3(signature = (config, out, resume=None, train_dir=None))]
fn train(
    py: Python<'_>,
    config: PathBuf,
    out: PathBuf,
    resume: Option<PathBuf>,
    train_dir: Option<PathBuf>,
) -> PyResult<(usize, u64)> {
    let mut cfg = TrainConfig::load(&config).map_err(py_err)?;
    if let Some(d) = train_dir {
        cfg.data.train_dir = d;
    }
    let ck = py
        .detach(|| trainer::train(&cfg, &out, resume.as_deref()))
        .map_err(py_err)?;
    Ok((ck.epoch, ck.global_step))
}

/// Evaluates a checkpoint on a dataset directory. The AU regressor is read
/// from `regressor` when that file exists, otherwise trained on the
/// checkpoint's training split (and saved there when a path is given).
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, regressor=None, regressor_steps=None, seed=0))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    dataset: PathBuf,
    regressor: Option<PathBuf>,
    regressor_steps: Option<usize>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let report = py
        .detach(|| -> defgan_core::Result<evalkit::EvalReport> {
            let ck = Checkpoint::load(&checkpoint)?;
            let (m, d) = (&ck.config.model, &ck.config.data);
            let opts = LoadOptions { rescale: d.rescale_au };
            let data = load_dataset_with(&dataset, m.resolution, m.n_au, opts)?;
            evalkit::check_eval_size(data.len())?;
            let mut rc = RegressorConfig::default();
            if let Some(s) = regressor_steps {
                rc.steps = s;
            }
            let reg = match &regressor {
                Some(p) if p.is_file() => AuRegressor::load(p, m.n_au, m.resolution, rc.conv_dim)?,
                other => {
                    let full = load_dataset_with(&d.train_dir, m.resolution, m.n_au, opts)?;
                    let r = AuRegressor::train(&full.split_tail(d.holdout).0, &rc)?;
                    if let Some(p) = other {
                        r.save(p)?;
                    }
                    r
                }
            };
            let motion: Vec<usize> = defgan_core::cli::SPRITE_MOTION_AUS
                .iter()
                .copied()
                .filter(|&k| k < m.n_au)
                .collect();
            evalkit::evaluate(&ck.bundle, &reg, &data, &motion, seed)
        })
        .map_err(py_err)?;
    let out = PyDict::new(py);
    for (k, v) in report.fields() {
        out.set_item(k, v)?;
    }
    Ok(out)
}

/// Frechet distance between two `(n, d)` feature sets.
#[pyfunction]
fn frechet_distance(a: PyReadonlyArray2<'_, f64>, b: PyReadonlyArray2<'_, f64>) -> PyResult<f64> {
    let (a, b): (Array2<f64>, Array2<f64>) = (a.as_array().to_owned(), b.as_array().to_owned());
    evalkit::frechet_distance(&a, &b).map_err(py_err)
}

/// Per-pixel mean absolute channel difference `(H, W, 1)` and its mean.
#[pyfunction]
fn difference_image<'py>(
    py: Python<'py>,
    edited: PyReadonlyArray3<'_, f32>,
    original: PyReadonlyArray3<'_, f32>,
) -> PyResult<(Bound<'py, PyArray3<f32>>, f64)> {
    let (map, mean) = evalkit::difference_image(&to_image(edited)?, &to_image(original)?).map_err(py_err)?;
    Ok((map.into_pyarray(py), mean))
}

#[pymodule]
fn defgan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Edit>()?;
    m.add_function(wrap_pyfunction!(identity_grid, m)?)?;
    m.add_function(wrap_pyfunction!(warp_image, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(expression, m)?)?;
    m.add_function(wrap_pyfunction!(synth_sprites, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(difference_image, m)?)?;
    Ok(())
}
