//! The finite-difference gradient suite, shared by the gradient tests and
//! the acceptance run.

use defgan_core::autograd::{Graph, Tensor, Var};
use defgan_core::gradcheck::{central_difference, grad_check_sampled, relative_error, GradCheck, FD_STEP, REL_TOL};
use defgan_core::losses::*;
use defgan_core::nets::{batch_from_fn, ModelBundle};
use defgan_core::trainer::{critic_losses, generator_losses};
use defgan_core::warpfield::{offset_bound, pixel_step, warp};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::{micro_bundle, random_aus, random_images, rng, smooth_images, stiffen};

/// Checks of one differentiable quantity, one per input.
pub struct Entry {
    pub name: String,
    pub checks: Vec<(String, GradCheck)>,
    /// Inputs under this prefix must get exactly zero gradient.
    pub unused: Option<&'static str>,
    /// Share of the other inputs that must get a nonzero gradient.
    pub min_live: f64,
}

impl Entry {
    fn new(name: &str, labels: Vec<String>, checks: Vec<GradCheck>) -> Self {
        Self {
            name: name.into(),
            checks: labels.into_iter().zip(checks).collect(),
            unused: None,
            min_live: 1.0,
        }
    }

    fn unused(mut self, prefix: &'static str) -> Self {
        self.unused = Some(prefix);
        self
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|(_, c)| c.rel_error).fold(0.0, f64::max)
    }

    /// Human-readable problems; empty when the entry passes.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut live = 0;
        let mut counted = 0;
        for (label, c) in &self.checks {
            if self.unused.is_some_and(|p| label.starts_with(p)) {
                if c.analytic_norm != 0.0 {
                    out.push(format!("{}: {label} should not receive gradient", self.name));
                }
                continue;
            }
            counted += 1;
            if c.analytic_norm > 0.0 {
                live += 1;
            }
            if !(c.rel_error < REL_TOL) {
                out.push(format!("{}: {label} relative error {:.3e}", self.name, c.rel_error));
            }
        }
        if (live as f64) < self.min_live * counted as f64 {
            out.push(format!(
                "{}: only {live} of {counted} inputs receive gradient",
                self.name
            ));
        }
        out
    }
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("input {i}")).collect()
}

pub fn weights() -> LossWeights {
    LossWeights {
        lambda_gp: 3.0,
        ..LossWeights::default()
    }
}

/// Offsets whose sample points stay at least `margin` pixels away from
/// lattice lines and inside the image.
fn off_lattice_offsets(seed: u64, n: usize, h: usize, w: usize, margin: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    let mut off = ArrayD::zeros(IxDyn(&[n, 2, h, w]));
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for (ch, (pos, size)) in [(j, w), (i, h)].into_iter().enumerate() {
                    let target = loop {
                        let t = r.random_range(0.0..(size - 1) as f64);
                        let frac = t - t.floor();
                        if frac > margin && frac < 1.0 - margin && (t - pos as f64).abs() < 2.5 {
                            break t;
                        }
                    };
                    off[[b, ch, i, j]] = (target - pos as f64) * pixel_step(size);
                }
            }
        }
    }
    off
}

pub fn warp_checks() -> Vec<Entry> {
    let mut r = rng(11);
    let (n, c, h, w) = (2, 3, 6, 7);
    let img = ArrayD::from_shape_fn(IxDyn(&[n, c, h, w]), |_| r.random_range(-1.0..1.0));
    let off = off_lattice_offsets(12, n, h, w, 1e-2);
    let mix = ArrayD::from_shape_fn(IxDyn(&[n, c, h, w]), |_| r.random_range(-1.0..1.0));
    let f = |img: &Tensor<f64>, off: &Tensor<f64>| {
        let g = Graph::new();
        warp(g.constant(img.clone()), g.constant(off.clone()))
            .unwrap()
            .mul_const(&mix)
            .sum_all()
            .item()
    };
    let g = Graph::new();
    let (iv, ov) = (g.leaf(img.clone()), g.leaf(off.clone()));
    let grads = g.backward(warp(iv, ov).unwrap().mul_const(&mix).sum_all());
    let check = |analytic: &Tensor<f64>, numeric: Vec<f64>| {
        let a: Vec<f64> = analytic.iter().copied().collect();
        GradCheck {
            rel_error: relative_error(&a, &numeric),
            analytic_norm: a.iter().map(|v| v * v).sum::<f64>().sqrt(),
            entries: a.len(),
        }
    };
    let ci = check(
        &grads.wrt(iv).unwrap(),
        central_difference(&img, None, FD_STEP, |x| f(x, &off)),
    );
    let co = check(
        &grads.wrt(ov).unwrap(),
        central_difference(&off, None, FD_STEP, |x| f(&img, x)),
    );
    vec![Entry::new(
        "warp_image",
        vec!["image".into(), "offsets".into()],
        vec![ci, co],
    )]
}

fn critic_params(b: &ModelBundle<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    (
        b.d.params.names().to_vec(),
        b.d.params.iter().map(|(_, t)| t.clone()).collect(),
    )
}

pub fn critic_side() -> Vec<Entry> {
    let b = micro_bundle(1);
    let (real, fake) = (random_images::<f64>(2, 8, 1), random_images::<f64>(2, 8, 2));
    let x = random_aus::<f64>(2, 2, 3);
    let (names, params) = critic_params(&b);
    let w = weights();
    let c = grad_check_sampled(&params, 6, |g, p| {
        critic_loss_d(
            &b.d,
            p,
            g.constant(real.clone()),
            g.constant(fake.clone()),
            &[0.25, 0.6],
            &w,
        )
        .unwrap()
        .total()
    });
    let d = Entry::new("critic_loss_d", names.clone(), c).unused("au_head");
    let c = grad_check_sampled(&params, 6, |g, p| {
        expression_loss_d(&b.d, p, g.constant(real.clone()), &x).unwrap()
    });
    let e = Entry::new("expression_loss_d", names, c).unused("critic_head");
    vec![d, e]
}

fn pc<'g>(b: &ModelBundle<f64>, g: &'g Graph<f64>) -> Vec<Var<'g, f64>> {
    b.d.params.bind(g, false)
}

pub fn generator_side() -> Vec<Entry> {
    let b = micro_bundle(2);
    let y = random_aus::<f64>(2, 2, 4);
    let inputs = [random_images::<f64>(2, 8, 5), random_images::<f64>(2, 8, 6)];
    let w = weights();
    let emb = PooledGrayEmbedder { size: 4 };
    let one = &inputs[..1];
    vec![
        Entry::new(
            "critic_loss_g",
            labels(1),
            grad_check_sampled(one, 64, |g, v| critic_loss_g(&b.d, &pc(&b, g), v[0])),
        ),
        Entry::new(
            "expression_loss_g",
            labels(2),
            grad_check_sampled(&inputs, 64, |g, v| {
                let (d, f) = expression_loss_g(&b.d, &pc(&b, g), v[0], v[1], &y, &w).unwrap();
                d + f
            }),
        ),
        Entry::new(
            "cycle_loss",
            labels(1),
            grad_check_sampled(one, 64, |g, v| {
                cycle_loss(v[0], g.constant(inputs[1].clone()), &w).unwrap()
            }),
        ),
        Entry::new(
            "face_id_loss",
            labels(1),
            grad_check_sampled(one, 64, |g, v| {
                face_id_loss(&emb, v[0], g.constant(inputs[1].clone()), &w).unwrap()
            }),
        ),
    ]
}

/// Offsets in `(N, 2, H, W)` strictly inside the bound and away from zero.
fn offsets(n: usize, res: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let bound = offset_bound(1.0, res);
    let v: Vec<f64> = (0..n * 2 * res * res)
        .map(|_| r.random_range(0.1..0.9) * bound * if r.random() { 1.0 } else { -1.0 })
        .collect();
    batch_from_fn([n, 2, res, res], |b, c, i, j| v[((b * 2 + c) * res + i) * res + j])
}

pub fn deformation_terms() -> Vec<Entry> {
    let w = LossWeights {
        lambda_tv_g: 0.5,
        lambda_tv_m: 0.5,
        ..weights()
    };
    let fields = [offsets(2, 8, 1), offsets(2, 8, 2)];
    let mut r = rng(7);
    let mask = batch_from_fn::<f64>([2, 1, 8, 8], |_, _, _, _| 0.0).mapv(|_| r.random_range(0.05..0.95));
    vec![
        Entry::new(
            "composition_loss",
            labels(2),
            grad_check_sampled(&fields, 64, |_, v| composition_loss(v[0], v[1], 1.0, &w).unwrap()),
        ),
        Entry::new(
            "grid_reg",
            labels(1),
            grad_check_sampled(&fields[..1], 64, |_, v| grid_reg(v[0], &w)),
        ),
        Entry::new(
            "mask_reg",
            labels(1),
            grad_check_sampled(&[mask], 64, |_, v| mask_reg(v[0], &w).unwrap()),
        ),
    ]
}

/// The whole generator objective on one micro bundle. ReLUs, the bilinear
/// lattice and the L1 cycle term make it piecewise smooth, so the bundle is
/// rescaled (function preserving) and fed smooth images to keep a 1e-4
/// difference step from straddling kinks.
pub fn full_generator() -> Vec<Entry> {
    let mut b = micro_bundle(3);
    stiffen(&mut b.g_def.params, 100.0, 1.5);
    stiffen(&mut b.g_tex.params, 100.0, 1.5);
    let images = smooth_images::<f64>(2, 8, 11);
    let (x, y) = (random_aus::<f64>(2, 2, 12), random_aus::<f64>(2, 2, 13));
    let n_def = b.g_def.params.len();
    let params: Vec<Tensor<f64>> = b
        .g_def
        .params
        .iter()
        .chain(b.g_tex.params.iter())
        .map(|(_, t)| t.clone())
        .collect();
    let emb = PooledGrayEmbedder { size: 4 };
    let w = weights();
    let checks = grad_check_sampled(&params, 4, |g, p| {
        let pc = b.d.params.bind(g, false);
        let (l, _, _) = generator_losses(
            &b,
            &p[..n_def],
            &p[n_def..],
            &pc,
            g.constant(images.clone()),
            &x,
            &y,
            &emb,
            &w,
        )
        .unwrap();
        l.total()
    });
    let names: Vec<String> = b
        .g_def
        .params
        .names()
        .iter()
        .map(|n| format!("g_def.{n}"))
        .chain(b.g_tex.params.names().iter().map(|n| format!("g_tex.{n}")))
        .collect();
    let mut e = Entry::new("generator objective", names, checks);
    // sampled entries of a convolution that only sees dead ReLUs are zero
    e.min_live = 0.75;
    vec![e]
}

pub fn full_critic() -> Vec<Entry> {
    let b = micro_bundle(4);
    let (real, fake) = (random_images::<f64>(3, 8, 1), random_images::<f64>(3, 8, 2));
    let x = random_aus::<f64>(3, 2, 3);
    let (names, params) = critic_params(&b);
    let w = weights();
    let checks = grad_check_sampled(&params, 6, |g, p| {
        critic_losses(
            &b,
            p,
            g.constant(real.clone()),
            g.constant(fake.clone()),
            &x,
            &[0.1, 0.5, 0.9],
            &w,
        )
        .unwrap()
        .total()
    });
    vec![Entry::new("critic objective", names, checks)]
}

pub fn all() -> Vec<Entry> {
    [
        warp_checks(),
        critic_side(),
        generator_side(),
        deformation_terms(),
        full_generator(),
        full_critic(),
    ]
    .into_iter()
    .flatten()
    .collect()
}
