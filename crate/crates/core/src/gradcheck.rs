//! Central finite-difference oracle for verifying analytic gradients.
//!
//! The oracle only ever evaluates forward passes, so it stays independent of
//! the backward closures it is used to check.

use ndarray::ArrayD;

use crate::autograd::{Graph, Tensor, Var};

/// Finite-difference step used throughout the gradient suite.
pub const FD_STEP: f64 = 1e-4;
/// Relative-error tolerance of the gradient suite.
pub const REL_TOL: f64 = 1e-3;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for the flat indices in `which`
/// (all entries when `None`).
pub fn central_difference(
    x0: &Tensor<f64>,
    which: Option<&[usize]>,
    step: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<f64> {
    let all: Vec<usize>;
    let idx = match which {
        Some(w) => w,
        None => {
            all = (0..x0.len()).collect();
            &all
        }
    };
    let mut x = x0.as_standard_layout().into_owned();
    idx.iter()
        .map(|&i| {
            let orig = x.as_slice().unwrap()[i];
            x.as_slice_mut().unwrap()[i] = orig + step;
            let fp = f(&x);
            x.as_slice_mut().unwrap()[i] = orig - step;
            let fm = f(&x);
            x.as_slice_mut().unwrap()[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// `||a - n|| / max(||a||, ||n||)`, or the absolute difference norm when both
/// are (numerically) zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub entries: usize,
}

/// Compares analytic gradients of a scalar function of several inputs
/// against central differences. `build` receives one leaf per input.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    build: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
) -> Vec<GradCheck> {
    grad_check_sampled(inputs, usize::MAX, build)
}

/// Like [`grad_check`], but differences at most `max_entries` evenly spaced
/// entries of each input (all of them when the input is small enough).
pub fn grad_check_sampled(
    inputs: &[Tensor<f64>],
    max_entries: usize,
    build: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
) -> Vec<GradCheck> {
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let leaves: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = build(&g, &leaves);
        let grads = g.backward(out);
        leaves.iter().map(|&l| grads.wrt_or_zeros(l)).collect()
    };
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let consts: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        build(&g, &consts).item()
    };
    (0..inputs.len())
        .map(|k| {
            let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
            let len = inputs[k].len();
            let idx: Vec<usize> = if len <= max_entries {
                (0..len).collect()
            } else {
                (0..max_entries).map(|i| i * len / max_entries).collect()
            };
            let numeric = central_difference(&inputs[k], Some(&idx), FD_STEP, |xk| {
                xs[k] = xk.clone();
                eval(&xs)
            });
            let flat = analytic[k].as_standard_layout();
            let flat = flat.as_slice().expect("standard layout");
            let a: Vec<f64> = idx.iter().map(|&i| flat[i]).collect();
            GradCheck {
                rel_error: relative_error(&a, &numeric),
                analytic_norm: a.iter().map(|v| v * v).sum::<f64>().sqrt(),
                entries: a.len(),
            }
        })
        .collect()
}

/// Asserting wrapper around [`grad_check`] for a single input.
pub fn check_grad(x0: &Tensor<f64>, build: impl for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>) {
    check_grad_multi(std::slice::from_ref(x0), |g, v| build(g, v[0]));
}

/// Asserting wrapper around [`grad_check`].
pub fn check_grad_multi(
    inputs: &[ArrayD<f64>],
    build: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
) {
    for (k, r) in grad_check(inputs, build).into_iter().enumerate() {
        assert!(
            r.rel_error < REL_TOL,
            "input {k}: relative gradient error {} (|analytic| = {})",
            r.rel_error,
            r.analytic_norm
        );
    }
}
