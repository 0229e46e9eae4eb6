//! Command-line interface of the `defgan` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::aucode::{preset_expression, validate_au, AuVector};
use crate::dataio::{load_dataset_with, synth_sprites, LoadOptions};
use crate::error::{Error, Result};
use crate::evalkit::{
    au_sweep, check_eval_size, difference_image, evaluate, write_filmstrip, AuRegressor, RegressorConfig,
};
use crate::imageio::{flow_image, heatmap, load_image, mask_image, read_rgb, rgb_to_image_tensor, save_image};
use crate::trainer::{train, Checkpoint, TrainConfig};

/// Indices of the sprite AUs that move facial parts without new texture.
pub const SPRITE_MOTION_AUS: [usize; 2] = [0, 2];

#[derive(Debug, Parser)]
#[command(
    name = "defgan",
    version,
    about = "Deformation-then-texture facial expression editing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sprite-face dataset.
    SynthData(SynthArgs),
    /// Train from a config file.
    Train(TrainArgs),
    /// Edit one image towards a target expression.
    Edit(EditArgs),
    /// Render an intensity sweep as a filmstrip.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Heatmap of the absolute difference of two images.
    Diff(DiffArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExpressionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Expression name or a CSV file holding one AU vector.
    #[arg(long)]
    pub target: String,
    /// Expression of the input image, as for --target.
    #[arg(long, default_value = "neutral")]
    pub source: String,
    /// Presets table; defaults to presets/sprites4.csv for 4 AUs and
    /// presets/au<N>.csv otherwise.
    #[arg(long)]
    pub presets: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub expr: ExpressionArgs,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the deformed image, mask and offset field next to --out.
    #[arg(long)]
    pub debug_stages: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub expr: ExpressionArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated metric names to keep; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    /// Metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// AU regressor weights; trained on the checkpoint's training data and
    /// saved here when the file does not exist.
    #[arg(long)]
    pub regressor: Option<PathBuf>,
    /// Training steps of a freshly trained regressor.
    #[arg(long, default_value_t = RegressorConfig::default().steps)]
    pub regressor_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Heatmap PNG; the mean is written to the same path with a .csv extension.
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::NonFiniteLoss { .. } | Error::NonPsdCovariance | Error::NonFiniteInput(_) => 3,
        _ => 1,
    }
}

pub fn default_presets(n_au: usize) -> PathBuf {
    if n_au == 4 {
        PathBuf::from("presets/sprites4.csv")
    } else {
        PathBuf::from(format!("presets/au{n_au}.csv"))
    }
}

/// Reads one AU vector from a CSV file (an optional `au_*` header line,
/// then comma-separated values).
pub fn read_au_file(path: &Path, n_au: usize) -> Result<AuVector> {
    let text = fs::read_to_string(path)?;
    let line = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("au_"))
        .next_back()
        .ok_or_else(|| Error::Csv(format!("{}: no AU values", path.display())))?;
    let vals = line
        .split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::Csv(format!("{}: {f:?}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_au(&vals, n_au)
}

/// Resolves an expression name or AU file.
pub fn resolve_target(spec: &str, n_au: usize, presets: Option<&Path>) -> Result<AuVector> {
    let p = Path::new(spec);
    if p.is_file() {
        return read_au_file(p, n_au);
    }
    let table = presets.map(Path::to_path_buf).unwrap_or_else(|| default_presets(n_au));
    let v = preset_expression(spec, &table)?;
    if v.len() != n_au {
        return Err(Error::DimensionMismatch {
            expected: n_au,
            got: v.len(),
        });
    }
    Ok(v)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}_{suffix}.png"))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn expression_inputs(a: &ExpressionArgs) -> Result<(Checkpoint, crate::nets::ImageTensor, AuVector, AuVector)> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let n = ck.bundle.n_au();
    let image = load_image(&a.image, ck.bundle.resolution())?;
    let x = resolve_target(&a.source, n, a.presets.as_deref())?;
    let y = resolve_target(&a.target, n, a.presets.as_deref())?;
    Ok((ck, image, x, y))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => {
            let ds = synth_sprites(&a.out, a.n, a.resolution, a.seed)?;
            println!("wrote {} sprites to {}", ds.len(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = TrainConfig::load(&a.config)?;
            let t = &cfg.train;
            println!(
                "config: lr={} batch={} epochs={} critic_steps={} decay_start={} seed={}",
                t.lr_init, t.batch_size, t.epochs, t.critic_steps_per_gen_step, t.decay_start_epoch, t.seed
            );
            let ck = train(&cfg, &a.out, a.resume.as_deref())?;
            println!("finished at epoch {} after {} steps", ck.epoch, ck.global_step);
        }
        Command::Edit(a) => {
            let (ck, image, x, y) = expression_inputs(&a.expr)?;
            let r = au_sweep(&ck.bundle, &image, &x, &y, &[a.alpha])?.remove(0);
            create_parent(&a.out)?;
            save_image(&r.final_image, &a.out)?;
            if a.debug_stages {
                save_image(&r.deformed, &with_suffix(&a.out, "deformed"))?;
                save_image(&r.texture, &with_suffix(&a.out, "texture"))?;
                save_image(&mask_image(&r.mask)?, &with_suffix(&a.out, "mask"))?;
                save_image(&flow_image(&r.grid)?, &with_suffix(&a.out, "grid"))?;
            }
        }
        Command::Sweep(a) => {
            let (ck, image, x, y) = expression_inputs(&a.expr)?;
            let results = au_sweep(&ck.bundle, &image, &x, &y, &a.alphas)?;
            create_parent(&a.out)?;
            write_filmstrip(&results, &a.out)?;
        }
        Command::Eval(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let (m, d) = (&ck.config.model, &ck.config.data);
            let opts = LoadOptions { rescale: d.rescale_au };
            let data = load_dataset_with(&a.dataset, m.resolution, m.n_au, opts)?;
            check_eval_size(data.len())?;
            let reg_cfg = RegressorConfig {
                steps: a.regressor_steps,
                ..RegressorConfig::default()
            };
            let regressor = match &a.regressor {
                Some(p) if p.is_file() => AuRegressor::load(p, m.n_au, m.resolution, reg_cfg.conv_dim)?,
                other => {
                    let full = load_dataset_with(&d.train_dir, m.resolution, m.n_au, opts)?;
                    let (train_set, _) = full.split_tail(d.holdout);
                    let r = AuRegressor::train(&train_set, &reg_cfg)?;
                    if let Some(p) = other {
                        r.save(p)?;
                    }
                    r
                }
            };
            let motion: Vec<usize> = SPRITE_MOTION_AUS.iter().copied().filter(|&k| k < m.n_au).collect();
            let report = evaluate(&ck.bundle, &regressor, &data, &motion, a.seed)?;
            let mut csv = String::from("metric,value\n");
            for (k, v) in report.fields() {
                if a.metrics.as_ref().is_none_or(|keep| keep.iter().any(|m| m == k)) {
                    csv.push_str(&format!("{k},{v}\n"));
                }
            }
            create_parent(&a.out)?;
            fs::write(&a.out, &csv)?;
            print!("{csv}");
        }
        Command::Diff(a) => {
            let img_a = read_rgb(&a.a)?;
            let img_b = read_rgb(&a.b)?;
            if img_a.dimensions() != img_b.dimensions() {
                return Err(Error::ShapeMismatch(format!(
                    "{:?} vs {:?}",
                    img_a.dimensions(),
                    img_b.dimensions()
                )));
            }
            let ta = rgb_to_image_tensor(&img_a)?;
            let tb = rgb_to_image_tensor(&img_b)?;
            let (map, mean) = difference_image(&ta, &tb)?;
            create_parent(&a.out)?;
            save_image(
                &heatmap(&map.index_axis(ndarray::Axis(2), 0).to_owned(), 0.0, 2.0)?,
                &a.out,
            )?;
            fs::write(
                a.out.with_extension("csv"),
                format!("metric,value\nmean_abs_diff,{mean}\n"),
            )?;
            println!("mean_abs_diff,{mean}");
        }
    }
    Ok(())
}
