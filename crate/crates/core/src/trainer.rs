//! Adversarial training: Adam with a linear learning-rate decay, several
//! critic updates per joint generator update, checkpoints and a metrics log.
//!
//! All randomness of a step is drawn from a generator keyed by
//! `(seed, global step, slot)`, so a run is reproducible from its
//! configuration and resumable from any checkpoint.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD};
use ndarray_npy::{NpzReader, NpzWriter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aucode::AuVector;
use crate::autograd::{Graph, Real, Tensor, Var};
use crate::dataio::{load_dataset_with, sample_batch, AnnotatedDataset, Batch, LoadOptions};
use crate::error::{Error, Result};
use crate::losses::{
    composition_loss, critic_loss_d, critic_loss_g, cycle_loss, expression_loss_d, expression_loss_g, face_id_loss,
    grid_reg, mask_reg, CriticLosses, Embedder, GeneratorLosses, LossReport, LossWeights, PooledGrayEmbedder,
};
use crate::nets::{EditResult, EditVars, ImageTensor, ModelBundle, ModelConfig, ParamStore};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ADAM_EPS: f64 = 1e-8;

/// Optimiser schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub lr_init: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_start_epoch: usize,
    pub critic_steps_per_gen_step: usize,
    pub seed: u64,
    /// Generator steps per epoch; 0 means one pass over the training set.
    pub steps_per_epoch: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 25,
            epochs: 40,
            decay_start_epoch: 20,
            critic_steps_per_gen_step: 10,
            seed: 0,
            steps_per_epoch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root with `images/` and `annotations.csv`.
    pub train_dir: PathBuf,
    /// Divide raw `[0, 5]` annotations by 5.
    pub rescale_au: bool,
    /// Trailing records kept out of training for evaluation.
    pub holdout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: PathBuf::from("data"),
            rescale_au: true,
            holdout: 0,
        }
    }
}

/// Complete training configuration, as stored in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub train: Schedule,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            train: Schedule::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.critic_steps_per_gen_step == 0 {
            return bad("train.batch_size and train.critic_steps_per_gen_step must be positive".into());
        }
        if t.decay_start_epoch > t.epochs {
            return bad(format!(
                "train.decay_start_epoch = {} exceeds train.epochs = {}",
                t.decay_start_epoch, t.epochs
            ));
        }
        if !(t.lr_init >= 0.0 && t.lr_init.is_finite()) {
            return bad(format!("train.lr_init = {} must be nonnegative", t.lr_init));
        }
        for (name, b) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("train.{name} = {b} must be in [0, 1)"));
            }
        }
        self.model.validate()?;
        self.loss_weights.validate()
    }

    /// Generator steps per epoch for a training set of `n` records.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        if self.train.steps_per_epoch > 0 {
            self.train.steps_per_epoch
        } else {
            n.div_ceil(self.train.batch_size).max(1)
        }
    }
}

/// Learning rate during `epoch`: constant, then linear decay reaching zero
/// at `epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    let t = &cfg.train;
    if epoch > t.epochs {
        return Err(Error::Range(format!(
            "epoch {epoch} beyond the {}-epoch schedule",
            t.epochs
        )));
    }
    if epoch < t.decay_start_epoch {
        return Ok(t.lr_init);
    }
    let span = (t.epochs - t.decay_start_epoch) as f64;
    Ok(t.lr_init * (t.epochs - epoch) as f64 / span)
}

/// Adam over the concatenated parameters of one or more stores.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub t: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(stores: &[&ParamStore<f32>], beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor<f32>> = stores
            .iter()
            .flat_map(|s| s.iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())))
            .collect();
        Self {
            beta1,
            beta2,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads` follows the stores' parameter order.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<f32>], grads: &[Tensor<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let (b1, b2, c2) = (b1 as f32, b2 as f32, c2 as f32);
        let mut k = 0;
        for store in stores.iter_mut() {
            for i in 0..store.len() {
                let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
                let p = store.get_mut(i);
                ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / ((*v / c2).sqrt() + ADAM_EPS as f32);
                });
                k += 1;
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let ck = |e: &dyn std::fmt::Display| Error::Checkpoint(format!("{}: {e}", path.display()));
        let mut npz = NpzWriter::new(File::create(path)?);
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            npz.add_array(format!("m{i:04}"), m).map_err(|e| ck(&e))?;
            npz.add_array(format!("v{i:04}"), v).map_err(|e| ck(&e))?;
        }
        npz.finish().map_err(|e| ck(&e))?;
        Ok(())
    }

    fn load(&mut self, path: &Path, t: u64) -> Result<()> {
        let ck = |e: &dyn std::fmt::Display| Error::Checkpoint(format!("{}: {e}", path.display()));
        let mut npz = NpzReader::new(File::open(path)?).map_err(|e| ck(&e))?;
        for i in 0..self.m.len() {
            let m: Tensor<f32> = npz.by_name(&format!("m{i:04}")).map_err(|e| ck(&e))?;
            let v: Tensor<f32> = npz.by_name(&format!("v{i:04}")).map_err(|e| ck(&e))?;
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(ck(&format!("optimiser slot {i} has the wrong shape")));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        self.t = t;
        Ok(())
    }
}

/// Random stream for one purpose (`slot`) of one step.
pub fn step_rng(seed: u64, step: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng.set_word_pos(u128::from(slot) << 40);
    rng
}

/// Every generator-side loss for a batch, on the caller's graph. `pd` and
/// `pt` are the bound generator parameters, `pc` the critic's.
#[allow(clippy::too_many_arguments)]
pub fn generator_losses<'g, T: Real>(
    bundle: &ModelBundle<T>,
    pd: &[Var<'g, T>],
    pt: &[Var<'g, T>],
    pc: &[Var<'g, T>],
    images: Var<'g, T>,
    x: &Array2<T>,
    y: &Array2<T>,
    embedder: &dyn Embedder<T>,
    w: &LossWeights,
) -> Result<(GeneratorLosses<'g, T>, EditVars<'g, T>, EditVars<'g, T>)> {
    let fwd = bundle.edit(pd, pt, images, x, y)?;
    let back = bundle.edit(pd, pt, fwd.output, y, x)?;
    let (exp_def, exp_comp) = expression_loss_g(&bundle.d, pc, fwd.deformed, fwd.output, y, w)?;
    let losses = GeneratorLosses {
        critic: critic_loss_g(&bundle.d, pc, fwd.output),
        exp_def,
        exp_comp,
        cyc: cycle_loss(back.output, images, w)?,
        faceid: face_id_loss(embedder, fwd.deformed, images, w)?,
        comp: composition_loss(fwd.offsets, back.offsets, bundle.config.max_offset_px, w)?,
        grid_reg: grid_reg(fwd.offsets, w),
        mask_reg: mask_reg(fwd.mask, w)?,
    };
    Ok((losses, fwd, back))
}

/// Every critic-side loss for a batch of real images `real` annotated with
/// `x` and a detached fake batch.
pub fn critic_losses<'g, T: Real>(
    bundle: &ModelBundle<T>,
    pc: &[Var<'g, T>],
    real: Var<'g, T>,
    fake: Var<'g, T>,
    x: &Array2<T>,
    eps: &[f64],
    w: &LossWeights,
) -> Result<CriticLosses<'g, T>> {
    Ok(CriticLosses {
        critic: critic_loss_d(&bundle.d, pc, real, fake, eps, w)?,
        exp: expression_loss_d(&bundle.d, pc, real, x)?,
    })
}

/// Edits towards `y` and back towards `x`; the second grid is the cycle
/// grid of the composition loss.
pub fn cycle_pass<T: Real>(
    bundle: &ModelBundle<T>,
    image: &ImageTensor,
    x: &AuVector,
    y: &AuVector,
) -> Result<(EditResult, EditResult)> {
    let fwd = bundle.g_comp(image, x, y)?;
    let back = bundle.g_comp(&fwd.final_image, y, x)?;
    Ok((fwd, back))
}

/// Model and optimiser state at an epoch boundary.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub bundle: ModelBundle<f32>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub epoch: usize,
    pub global_step: u64,
    pub config: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    epoch: usize,
    global_step: u64,
    rng_seed: u64,
    rng_counter: u64,
    adam_steps_g: u64,
    adam_steps_d: u64,
    config: TrainConfig,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl Checkpoint {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::<f32>::init(&config.model, config.train.seed)?;
        let t = &config.train;
        Ok(Self {
            opt_g: Adam::new(&[&bundle.g_def.params, &bundle.g_tex.params], t.beta1, t.beta2),
            opt_d: Adam::new(&[&bundle.d.params], t.beta1, t.beta2),
            bundle,
            epoch: 0,
            global_step: 0,
            config: config.clone(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.bundle.g_def.params.save_npz(&dir.join("g_def.npz"))?;
        self.bundle.g_tex.params.save_npz(&dir.join("g_tex.npz"))?;
        self.bundle.d.params.save_npz(&dir.join("d.npz"))?;
        self.opt_g.save(&dir.join("opt_g.npz"))?;
        self.opt_d.save(&dir.join("opt_d.npz"))?;
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            epoch: self.epoch,
            global_step: self.global_step,
            rng_seed: self.config.train.seed,
            rng_counter: self.global_step,
            adam_steps_g: self.opt_g.t,
            adam_steps_d: self.opt_d.t,
            config: self.config.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        fs::write(dir.join("layers.txt"), self.bundle.manifest_text())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if m.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} (this build reads {CHECKPOINT_FORMAT_VERSION})",
                path.display(),
                m.format_version
            )));
        }
        let mut ck = Checkpoint::init(&m.config)?;
        let b = &mut ck.bundle;
        b.g_def.params = b.g_def.params.load_npz(&dir.join("g_def.npz"))?;
        b.g_tex.params = b.g_tex.params.load_npz(&dir.join("g_tex.npz"))?;
        b.d.params = b.d.params.load_npz(&dir.join("d.npz"))?;
        ck.opt_g.load(&dir.join("opt_g.npz"), m.adam_steps_g)?;
        ck.opt_d.load(&dir.join("opt_d.npz"), m.adam_steps_d)?;
        ck.epoch = m.epoch;
        ck.global_step = m.global_step;
        Ok(ck)
    }
}

fn non_finite(step: u64, report: &LossReport) -> Error {
    Error::NonFiniteLoss {
        step,
        report: report.to_string(),
    }
}

fn grads_of<'g>(
    g: &'g Graph<f32>,
    root: Var<'g, f32>,
    params: &[Var<'g, f32>],
    step: u64,
    report: &LossReport,
) -> Result<Vec<Tensor<f32>>> {
    let mut grads = g.backward(root);
    let out: Vec<Tensor<f32>> = params
        .iter()
        .map(|&p| grads.take(p).unwrap_or_else(|| ArrayD::zeros(p.value().raw_dim())))
        .collect();
    if out.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        let mut r = report.clone();
        r.insert("non_finite_gradient", 1.0);
        return Err(non_finite(step, &r));
    }
    Ok(out)
}

/// The training loop over an in-memory dataset.
pub struct Trainer {
    pub state: Checkpoint,
    pub data: AnnotatedDataset,
    pub embedder: PooledGrayEmbedder,
}

/// Counters of one generator step, for tests and logs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepTicks {
    pub critic: u64,
    pub generator: u64,
}

impl Trainer {
    pub fn new(state: Checkpoint, data: AnnotatedDataset) -> Result<Self> {
        let m = &state.config.model;
        if data.n_au != m.n_au || data.resolution != m.resolution {
            return Err(Error::Config(format!(
                "dataset is {}x{} with {} AUs, model expects {}x{} with {}",
                data.resolution, data.resolution, data.n_au, m.resolution, m.resolution, m.n_au
            )));
        }
        Ok(Self {
            state,
            data,
            embedder: PooledGrayEmbedder::default(),
        })
    }

    fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config().steps_per_epoch(self.data.len())
    }

    fn batch(&self, slot: u64) -> Result<Batch> {
        let cfg = self.config();
        let mut rng = step_rng(cfg.train.seed, self.state.global_step, slot);
        sample_batch(&self.data, cfg.train.batch_size, &mut rng)
    }

    fn critic_step(&mut self, slot: u64, lr: f64) -> Result<LossReport> {
        let batch = self.batch(slot)?;
        let bundle = &self.state.bundle;
        let w = &self.state.config.loss_weights;
        let fake = {
            let g = Graph::new();
            let pd = bundle.g_def.params.bind(&g, false);
            let pt = bundle.g_tex.params.bind(&g, false);
            let e = bundle.edit(&pd, &pt, g.constant(batch.images.clone()), &batch.x, &batch.y)?;
            (*e.output.value()).clone()
        };
        let mut rng = step_rng(self.state.config.train.seed, self.state.global_step, slot + (1 << 20));
        let eps: Vec<f64> = (0..batch.indices.len()).map(|_| rng.random::<f64>()).collect();
        let g = Graph::new();
        let pc = bundle.d.params.bind(&g, true);
        let l = critic_losses(
            bundle,
            &pc,
            g.constant(batch.images),
            g.constant(fake),
            &batch.x,
            &eps,
            w,
        )?;
        let report = l.report();
        if !report.all_finite() {
            return Err(non_finite(self.state.global_step, &report));
        }
        let grads = grads_of(&g, l.total(), &pc, self.state.global_step, &report)?;
        drop(pc);
        self.state
            .opt_d
            .step(&mut [&mut self.state.bundle.d.params], &grads, lr);
        Ok(report)
    }

    fn generator_step(&mut self, slot: u64, lr: f64) -> Result<LossReport> {
        let batch = self.batch(slot)?;
        let bundle = &self.state.bundle;
        let w = &self.state.config.loss_weights;
        let g = Graph::new();
        let pd = bundle.g_def.params.bind(&g, true);
        let pt = bundle.g_tex.params.bind(&g, true);
        let pc = bundle.d.params.bind(&g, false);
        let images = g.constant(batch.images);
        let (l, _, _) = generator_losses(bundle, &pd, &pt, &pc, images, &batch.x, &batch.y, &self.embedder, w)?;
        let report = l.report();
        if !report.all_finite() {
            return Err(non_finite(self.state.global_step, &report));
        }
        let params: Vec<_> = pd.iter().chain(&pt).copied().collect();
        let grads = grads_of(&g, l.total(), &params, self.state.global_step, &report)?;
        drop((pd, pt, pc, params));
        let b = &mut self.state.bundle;
        self.state
            .opt_g
            .step(&mut [&mut b.g_def.params, &mut b.g_tex.params], &grads, lr);
        Ok(report)
    }

    /// Critic updates, each on a fresh batch, then one joint generator
    /// update. Returns the generator report extended with the last critic
    /// report.
    pub fn train_step(&mut self) -> Result<(LossReport, StepTicks)> {
        let lr = lr_at(self.state.epoch, self.config())?;
        let n_critic = self.config().train.critic_steps_per_gen_step as u64;
        let mut ticks = StepTicks::default();
        let mut critic_report = LossReport::new();
        for k in 0..n_critic {
            critic_report = self.critic_step(k, lr)?;
            ticks.critic += 1;
        }
        let mut report = self.generator_step(n_critic, lr)?;
        ticks.generator += 1;
        report.extend(&critic_report);
        report.insert("lr", lr);
        self.state.global_step += 1;
        Ok((report, ticks))
    }

    /// Runs the remaining epochs, calling `on_step` after every generator
    /// step and `on_epoch` after every epoch.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&Checkpoint, &LossReport) -> Result<()>,
        mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<()> {
        let per_epoch = self.steps_per_epoch() as u64;
        while self.state.epoch < self.config().train.epochs {
            let done_in_epoch = self
                .state
                .global_step
                .saturating_sub(self.state.epoch as u64 * per_epoch);
            for _ in done_in_epoch..per_epoch {
                let (report, _) = self.train_step()?;
                on_step(&self.state, &report)?;
            }
            self.state.epoch += 1;
            on_epoch(&self.state)?;
        }
        Ok(())
    }
}

/// One metrics-log record.
pub fn metrics_line(state: &Checkpoint, report: &LossReport) -> String {
    let mut rec: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    rec.insert("step".into(), state.global_step.into());
    rec.insert("epoch".into(), state.epoch.into());
    for (k, v) in report.iter() {
        rec.insert(k.into(), serde_json::Value::from(v));
    }
    serde_json::to_string(&rec).expect("metrics serialise")
}

/// Reads a metrics log back as one map per record.
pub fn read_metrics(path: &Path) -> Result<Vec<BTreeMap<String, f64>>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: BTreeMap<String, serde_json::Value> =
                serde_json::from_str(l).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
            Ok(v.into_iter().filter_map(|(k, v)| v.as_f64().map(|f| (k, f))).collect())
        })
        .collect()
}

pub fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("ckpt_epoch_{epoch:03}"))
}

/// Trains from `config` (or continues from the checkpoint in `resume`),
/// writing a checkpoint per epoch and the metrics log under `out`. Returns
/// the final state.
pub fn train(config: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<Checkpoint> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let state = match resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            if ck.config.model != config.model || ck.config.train.seed != config.train.seed {
                return Err(Error::Checkpoint(format!(
                    "{} was written with a different model or seed",
                    dir.display()
                )));
            }
            Checkpoint {
                config: config.clone(),
                ..ck
            }
        }
        None => Checkpoint::init(config)?,
    };
    if config.train.epochs == 0 || state.epoch >= config.train.epochs {
        if resume.is_none() {
            state.save(&checkpoint_dir(out, state.epoch))?;
        }
        return Ok(state);
    }
    let d = &config.data;
    let full = load_dataset_with(
        &d.train_dir,
        config.model.resolution,
        config.model.n_au,
        LoadOptions { rescale: d.rescale_au },
    )?;
    let (train_set, _) = full.split_tail(d.holdout);
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    log::info!(
        "training on {} images, {} steps per epoch, from epoch {}",
        train_set.len(),
        config.steps_per_epoch(train_set.len()),
        state.epoch
    );
    let metrics = std::cell::RefCell::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join(METRICS_FILE))?,
    );
    let mut trainer = Trainer::new(state, train_set)?;
    trainer.run(
        |st, report| {
            writeln!(metrics.borrow_mut(), "{}", metrics_line(st, report))?;
            if st.global_step % 25 == 0 {
                log::info!("step {} epoch {}: {report}", st.global_step, st.epoch);
            }
            Ok(())
        },
        |st| {
            metrics.borrow_mut().flush()?;
            st.save(&checkpoint_dir(out, st.epoch))
        },
    )?;
    Ok(trainer.state)
}
