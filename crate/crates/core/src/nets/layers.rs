use std::fmt;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use crate::autograd::{Real, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// One entry of a network's layer manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerEntry {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        k: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// Bilinear x2 upsampling followed by a stride-1 convolution.
    UpsampleConv {
        k: usize,
        pad: usize,
    },
    InstanceNorm,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    /// Residual block: conv, norm, relu, conv, norm, plus identity skip.
    Residual {
        k: usize,
    },
}

impl LayerKind {
    /// Whether the layer holds a convolution kernel.
    pub fn is_conv(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. } | LayerKind::UpsampleConv { .. }
        )
    }
}

impl fmt::Display for LayerEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            LayerKind::Conv { k, stride, pad } => format!("conv k{k} s{stride} p{pad}"),
            LayerKind::ConvTranspose { k, stride, pad } => format!("conv_transpose k{k} s{stride} p{pad}"),
            LayerKind::UpsampleConv { k, pad } => format!("bilinear_up2x+conv k{k} s1 p{pad}"),
            LayerKind::InstanceNorm => "instance_norm".into(),
            LayerKind::Relu => "relu".into(),
            LayerKind::LeakyRelu => "leaky_relu".into(),
            LayerKind::Tanh => "tanh".into(),
            LayerKind::Sigmoid => "sigmoid".into(),
            LayerKind::Residual { k } => format!("residual k{k}"),
        };
        write!(
            f,
            "{:<16} {:<36} {:>4} -> {:<4}",
            self.name, kind, self.c_in, self.c_out
        )
    }
}

pub(crate) fn entry(name: &str, kind: LayerKind, c_in: usize, c_out: usize) -> LayerEntry {
    LayerEntry {
        name: name.to_string(),
        kind,
        c_in,
        c_out,
    }
}

/// How a layer's parameters start out.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    Uniform,
    /// All-zero weights; the bias (if any) is set to the given constant.
    Zero(f64),
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let b = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(rng.random_range(-b..b)))
}

/// Square-kernel convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    w: usize,
    b: Option<usize>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let shape = [c_out, c_in, k, k];
        let fan_in = c_in * k * k;
        let (wt, bt) = match init {
            Init::Uniform => (
                uniform(rng, &shape, fan_in),
                bias.then(|| uniform(rng, &[c_out], fan_in)),
            ),
            Init::Zero(b0) => (
                ArrayD::zeros(IxDyn(&shape)),
                bias.then(|| ArrayD::from_elem(IxDyn(&[c_out]), T::lit(b0))),
            ),
        };
        let w = store.add(format!("{name}.weight"), wt);
        let b = bt.map(|t| store.add(format!("{name}.bias"), t));
        Self {
            w,
            b,
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn forward<'g, T: Real>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(p[self.w], self.b.map(|b| p[b]), self.stride, self.pad)
    }

    /// Linear part only (no bias): the map applied to tangents.
    pub fn forward_linear<'g, T: Real>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(p[self.w], None, self.stride, self.pad)
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }

    pub fn bias_index(&self) -> Option<usize> {
        self.b
    }

    pub(crate) fn kind(&self) -> LayerKind {
        LayerKind::Conv {
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Square-kernel transposed convolution without bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        // fan_in taken from the second weight axis, as the usual default init does
        let w = store.add(
            format!("{name}.weight"),
            uniform(rng, &[c_in, c_out, k, k], c_out * k * k),
        );
        Self {
            w,
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn forward<'g, T: Real>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Var<'g, T> {
        x.conv_transpose2d(p[self.w], None, self.stride, self.pad)
    }

    pub(crate) fn kind(&self) -> LayerKind {
        LayerKind::ConvTranspose {
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Affine instance normalisation.
#[derive(Clone, Debug)]
pub struct Norm {
    gamma: usize,
    beta: usize,
}

impl Norm {
    pub(crate) fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[c]), T::one()));
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])));
        Self { gamma, beta }
    }

    pub fn forward<'g, T: Real>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Var<'g, T> {
        x.instance_norm(p[self.gamma], p[self.beta], T::lit(NORM_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

impl ResBlock {
    pub(crate) fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        let conv1 = Conv::new(
            store,
            rng,
            &format!("{name}.conv1"),
            c,
            c,
            3,
            1,
            1,
            false,
            Init::Uniform,
        );
        let norm1 = Norm::new(store, &format!("{name}.norm1"), c);
        let conv2 = Conv::new(
            store,
            rng,
            &format!("{name}.conv2"),
            c,
            c,
            3,
            1,
            1,
            false,
            Init::Uniform,
        );
        let norm2 = Norm::new(store, &format!("{name}.norm2"), c);
        Self {
            conv1,
            norm1,
            conv2,
            norm2,
        }
    }

    pub fn forward<'g, T: Real>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Var<'g, T> {
        let h = self.norm1.forward(p, self.conv1.forward(p, x)).relu();
        let h = self.norm2.forward(p, self.conv2.forward(p, h));
        x + h
    }

    pub fn channels(&self) -> usize {
        self.conv1.c_in
    }
}
