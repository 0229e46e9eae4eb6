use rand_chacha::ChaCha8Rng;

use super::layers::{entry, Conv, Init, LayerEntry, LayerKind};
use super::params::ParamStore;
use super::ModelConfig;
use crate::autograd::{Real, Tensor, Var};

/// Negative slope of the critic's leaky ReLUs.
pub const LEAKY_SLOPE: f64 = 0.01;

/// A critic with a Wasserstein score head and an AU regression head.
///
/// `p` is always the critic's parameter store bound onto the caller's graph
/// (see [`ParamStore::bind`]).
pub trait Critic<T: Real> {
    fn params(&self) -> &ParamStore<T>;

    /// Per-sample critic scores, `(N,)`.
    fn scores<'g>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Var<'g, T>;

    /// Scores together with their directional derivative along the input
    /// tangent `t`: `(D(x), <grad_x D(x), t>)`, both `(N,)`. The tangent
    /// output must be differentiable with respect to the parameters.
    fn scores_with_tangent<'g>(&self, p: &[Var<'g, T>], x: Var<'g, T>, t: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>);

    /// AU predictions, `(N, n_au)`.
    fn au_predictions<'g>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Var<'g, T>;

    /// Scores and AU predictions from one pass.
    fn forward<'g>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        (self.scores(p, x), self.au_predictions(p, x))
    }
}

/// PatchGAN critic: stride-2 4x4 convolutions with leaky ReLUs down to a
/// 2x2 map, a 3x3 patch-score head and an AU head spanning the whole final
/// map, both reading the last trunk layer.
#[derive(Clone, Debug)]
pub struct PatchCritic<T: Real> {
    pub params: ParamStore<T>,
    trunk: Vec<Conv>,
    critic_head: Conv,
    au_head: Conv,
    n_au: usize,
}

impl<T: Real> PatchCritic<T> {
    pub(crate) fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let depth = cfg.critic_depth();
        let mut trunk = Vec::new();
        let mut c_in = 3;
        let mut c = cfg.d_conv_dim;
        for i in 0..depth {
            trunk.push(Conv::new(
                &mut store,
                rng,
                &format!("trunk{i}"),
                c_in,
                c,
                4,
                2,
                1,
                true,
                Init::Uniform,
            ));
            c_in = c;
            c *= 2;
        }
        let final_size = cfg.resolution >> depth;
        let critic_head = Conv::new(&mut store, rng, "critic_head", c_in, 1, 3, 1, 1, false, Init::Uniform);
        let au_head = Conv::new(
            &mut store,
            rng,
            "au_head",
            c_in,
            cfg.n_au,
            final_size,
            1,
            0,
            false,
            Init::Uniform,
        );
        Self {
            params: store,
            trunk,
            critic_head,
            au_head,
            n_au: cfg.n_au,
        }
    }

    /// Penultimate features (output of the last trunk layer).
    pub fn features<'g>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Var<'g, T> {
        let slope = T::lit(LEAKY_SLOPE);
        self.trunk
            .iter()
            .fold(x, |h, conv| conv.forward(p, h).leaky_relu(slope))
    }

    /// Unbounded patch-score map, `(N, 1, h', w')`.
    pub fn patch_scores<'g>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Var<'g, T> {
        self.critic_head.forward(p, self.features(p, x))
    }

    fn au_from_features<'g>(&self, p: &[Var<'g, T>], h: Var<'g, T>) -> Var<'g, T> {
        let n = h.shape()[0];
        self.au_head.forward(p, h).reshape(&[n, self.n_au])
    }

    pub fn manifest(&self) -> Vec<LayerEntry> {
        let mut m = Vec::new();
        for (i, conv) in self.trunk.iter().enumerate() {
            m.push(entry(&format!("trunk{i}"), conv.kind(), conv.c_in, conv.c_out));
            m.push(entry(
                &format!("trunk{i}_act"),
                LayerKind::LeakyRelu,
                conv.c_out,
                conv.c_out,
            ));
        }
        m.push(entry("critic_head", self.critic_head.kind(), self.critic_head.c_in, 1));
        m.push(entry("au_head", self.au_head.kind(), self.au_head.c_in, self.n_au));
        m
    }

    pub fn n_au(&self) -> usize {
        self.n_au
    }

    pub fn cast<U: Real>(&self) -> PatchCritic<U> {
        PatchCritic {
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            critic_head: self.critic_head.clone(),
            au_head: self.au_head.clone(),
            n_au: self.n_au,
        }
    }
}

impl<T: Real> Critic<T> for PatchCritic<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn scores<'g>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Var<'g, T> {
        self.patch_scores(p, x).mean_per_sample()
    }

    fn scores_with_tangent<'g>(&self, p: &[Var<'g, T>], x: Var<'g, T>, t: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let slope = T::lit(LEAKY_SLOPE);
        let (mut h, mut dh) = (x, t);
        for conv in &self.trunk {
            let pre = conv.forward(p, h);
            // the activation pattern is locally constant in the parameters
            let gate: Tensor<T> = pre.value().mapv(|v| if v > T::zero() { T::one() } else { slope });
            dh = conv.forward_linear(p, dh).mul_const(&gate);
            h = pre.leaky_relu(slope);
        }
        (
            self.critic_head.forward(p, h).mean_per_sample(),
            self.critic_head.forward_linear(p, dh).mean_per_sample(),
        )
    }

    fn au_predictions<'g>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Var<'g, T> {
        self.au_from_features(p, self.features(p, x))
    }

    fn forward<'g>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let h = self.features(p, x);
        (
            self.critic_head.forward(p, h).mean_per_sample(),
            self.au_from_features(p, h),
        )
    }
}
