#![allow(dead_code)]

pub mod gradsuite;

use defgan_core::autograd::{Real, Tensor};
use defgan_core::nets::{batch_from_fn, ModelBundle, ModelConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest bundle the architecture admits: 8x8 images, two AUs.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        n_au: 2,
        resolution: 8,
        max_offset_px: 1.0,
        g_conv_dim: 2,
        d_conv_dim: 2,
        g_res_blocks: 1,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_images<T: Real>(n: usize, res: usize, seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    let vals: Vec<f64> = (0..n * 3 * res * res).map(|_| r.random_range(-0.9..0.9)).collect();
    batch_from_fn([n, 3, res, res], |b, c, i, j| vals[((b * 3 + c) * res + i) * res + j])
}

pub fn random_aus<T: Real>(n: usize, k: usize, seed: u64) -> Array2<T> {
    let mut r = rng(seed);
    Array2::from_shape_fn((n, k), |_| T::lit(r.random_range(0.0..1.0)))
}

/// Replaces the zero-initialised offset head with small random weights, so
/// the deformation stage is not the identity and gradients reach the whole
/// generator.
pub fn randomize_offset_head<T: Real>(bundle: &mut ModelBundle<T>, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let i = bundle.g_def.offset_weight_index();
    bundle
        .g_def
        .params
        .get_mut(i)
        .mapv_inplace(|_| T::lit(r.random_range(-scale..scale)));
}

pub fn micro_bundle(seed: u64) -> ModelBundle<f64> {
    let mut b = ModelBundle::<f32>::init(&micro_config(), seed).unwrap().cast::<f64>();
    randomize_offset_head(&mut b, 0.5, seed + 1);
    b
}

/// Rescales a generator so that a fixed finite-difference step moves its
/// hidden activations `factor` times less: weights of convolutions that feed
/// an instance norm and every norm affine parameter grow by `factor`, and the
/// head convolutions (which read the last norm directly) shrink by it. Each
/// norm removes the scale of its input, so the network function is unchanged
/// up to the norm epsilon, but difference quotients stop straddling ReLU
/// kinks.
pub fn stiffen<T: Real>(store: &mut defgan_core::nets::ParamStore<T>, factor: f64, head: f64) {
    let names: Vec<String> = store.names().to_vec();
    let last_norm = names
        .iter()
        .rev()
        .find(|n| n.ends_with("_norm.gamma"))
        .map(|n| n.trim_end_matches("gamma").to_string())
        .unwrap_or_default();
    for (i, name) in names.iter().enumerate() {
        let scale = if name.ends_with(".gamma") || name.ends_with(".beta") {
            if name.starts_with(&last_norm) {
                head
            } else {
                factor
            }
        } else if let Some(layer) = name.strip_suffix(".weight") {
            let norm = match layer.rsplit_once(".conv") {
                Some((block, k)) => format!("{block}.norm{k}.gamma"),
                None => format!("{layer}_norm.gamma"),
            };
            if store.index_of(&norm).is_some() {
                factor
            } else {
                1.0 / head
            }
        } else {
            continue;
        };
        store.get_mut(i).mapv_inplace(|v| v * T::lit(scale));
    }
}

/// Random low-frequency images in (-0.9, 0.9): a few plane waves per
/// channel. Bilinear sampling of these has small slope jumps at lattice
/// lines, unlike pixel noise.
pub fn smooth_images<T: Real>(n: usize, res: usize, seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    let waves: Vec<[f64; 4]> = (0..n * 3 * 3)
        .map(|_| {
            [
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(0.0..6.3),
                r.random_range(0.1..0.3),
            ]
        })
        .collect();
    let step = std::f64::consts::PI / res as f64;
    batch_from_fn([n, 3, res, res], |b, c, i, j| {
        let w = &waves[(b * 3 + c) * 3..(b * 3 + c + 1) * 3];
        w.iter()
            .map(|[ky, kx, ph, a]| a * (ky * step * i as f64 + kx * step * j as f64 + ph).sin())
            .sum::<f64>()
    })
}

/// A config small enough to train for a few steps in a test: 16x16 sprites,
/// batches of 4, two critic steps per generator step.
pub fn tiny_train_config(train_dir: &std::path::Path) -> defgan_core::trainer::TrainConfig {
    let mut c = defgan_core::trainer::TrainConfig::default();
    c.model = ModelConfig {
        n_au: 4,
        resolution: 16,
        max_offset_px: 2.0,
        g_conv_dim: 4,
        d_conv_dim: 4,
        g_res_blocks: 1,
    };
    c.train.batch_size = 4;
    c.train.critic_steps_per_gen_step = 2;
    c.train.epochs = 2;
    c.train.decay_start_epoch = 1;
    c.train.steps_per_epoch = 3;
    c.train.seed = 5;
    c.data.train_dir = train_dir.to_path_buf();
    c.data.holdout = 0;
    c
}
