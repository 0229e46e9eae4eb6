use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use super::layers::{entry, Conv, ConvTranspose, Init, LayerEntry, LayerKind, Norm, ResBlock};
use super::params::ParamStore;
use super::ModelConfig;
use crate::autograd::{Real, Var};
use crate::warpfield::bounded_offsets;

/// Initial bias of the mask head; `sigmoid(-3)` is about 0.047.
pub const MASK_BIAS_INIT: f64 = -3.0;

/// Residual encoder shared by both generators: a 7x7 stem, two stride-2
/// downsampling convolutions and a stack of residual blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Conv,
    stem_norm: Norm,
    down: Vec<(Conv, Norm)>,
    res: Vec<ResBlock>,
}

impl Encoder {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, c_in: usize, dim: usize, n_res: usize) -> Self {
        let stem = Conv::new(store, rng, "stem", c_in, dim, 7, 1, 3, false, Init::Uniform);
        let stem_norm = Norm::new(store, "stem_norm", dim);
        let mut down = Vec::new();
        let mut c = dim;
        for i in 0..2 {
            let conv = Conv::new(store, rng, &format!("down{i}"), c, 2 * c, 4, 2, 1, false, Init::Uniform);
            down.push((conv, Norm::new(store, &format!("down{i}_norm"), 2 * c)));
            c *= 2;
        }
        let res = (0..n_res)
            .map(|i| ResBlock::new(store, rng, &format!("res{i}"), c))
            .collect();
        Self {
            stem,
            stem_norm,
            down,
            res,
        }
    }

    fn forward<'g, T: Real>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Var<'g, T> {
        let mut h = self.stem_norm.forward(p, self.stem.forward(p, x)).relu();
        for (conv, norm) in &self.down {
            h = norm.forward(p, conv.forward(p, h)).relu();
        }
        for block in &self.res {
            h = block.forward(p, h);
        }
        h
    }

    fn out_channels(&self) -> usize {
        self.down.last().map_or(self.stem.c_out, |(c, _)| c.c_out)
    }

    fn manifest(&self) -> Vec<LayerEntry> {
        let mut m = vec![
            entry("stem", self.stem.kind(), self.stem.c_in, self.stem.c_out),
            entry("stem_norm", LayerKind::InstanceNorm, self.stem.c_out, self.stem.c_out),
            entry("stem_act", LayerKind::Relu, self.stem.c_out, self.stem.c_out),
        ];
        for (i, (conv, _)) in self.down.iter().enumerate() {
            m.push(entry(&format!("down{i}"), conv.kind(), conv.c_in, conv.c_out));
            m.push(entry(
                &format!("down{i}_norm"),
                LayerKind::InstanceNorm,
                conv.c_out,
                conv.c_out,
            ));
            m.push(entry(&format!("down{i}_act"), LayerKind::Relu, conv.c_out, conv.c_out));
        }
        for (i, b) in self.res.iter().enumerate() {
            m.push(entry(
                &format!("res{i}"),
                LayerKind::Residual { k: 3 },
                b.channels(),
                b.channels(),
            ));
        }
        m
    }
}

/// Texture generator: encoder, two transposed-convolution upsampling stages,
/// and 7x7 colour (tanh) and attention-mask (sigmoid) heads.
#[derive(Clone, Debug)]
pub struct TextureGenerator<T: Real> {
    pub params: ParamStore<T>,
    encoder: Encoder,
    up: Vec<(ConvTranspose, Norm)>,
    color: Conv,
    mask: Conv,
}

impl<T: Real> TextureGenerator<T> {
    pub(crate) fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, rng, 3 + cfg.n_au, cfg.g_conv_dim, cfg.g_res_blocks);
        let mut c = encoder.out_channels();
        let mut up = Vec::new();
        for i in 0..2 {
            let conv = ConvTranspose::new(&mut store, rng, &format!("up{i}"), c, c / 2, 4, 2, 1);
            up.push((conv, Norm::new(&mut store, &format!("up{i}_norm"), c / 2)));
            c /= 2;
        }
        let color = Conv::new(&mut store, rng, "color", c, 3, 7, 1, 3, false, Init::Uniform);
        // zero weights make the mask exactly sigmoid(bias) at initialisation
        let mask = Conv::new(&mut store, rng, "mask", c, 1, 7, 1, 3, true, Init::Zero(MASK_BIAS_INIT));
        Self {
            params: store,
            encoder,
            up,
            color,
            mask,
        }
    }

    /// `(texture, mask)` for a deformed batch and tiled target planes.
    pub fn forward<'g>(
        &self,
        p: &[Var<'g, T>],
        deformed: Var<'g, T>,
        y_planes: Var<'g, T>,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let g = deformed.graph();
        let mut h = self.encoder.forward(p, g.concat(&[deformed, y_planes], 1));
        for (conv, norm) in &self.up {
            h = norm.forward(p, conv.forward(p, h)).relu();
        }
        // both heads read the same features: run them as one 4-channel conv
        let w = g.concat(&[p[self.color.weight_index()], p[self.mask.weight_index()]], 0);
        let mb = p[self.mask.bias_index().expect("mask bias")];
        let b = g.concat(&[g.constant(ArrayD::zeros(IxDyn(&[3]))), mb], 0);
        let out = h.conv2d(w, Some(b), 1, 3);
        (out.slice_axis(1, 0, 3).tanh(), out.slice_axis(1, 3, 4).sigmoid())
    }

    pub fn cast<U: Real>(&self) -> TextureGenerator<U> {
        TextureGenerator {
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            up: self.up.clone(),
            color: self.color.clone(),
            mask: self.mask.clone(),
        }
    }

    /// Index of the mask-head bias in [`TextureGenerator::params`].
    pub fn mask_bias_index(&self) -> usize {
        self.mask.bias_index().expect("mask bias")
    }

    pub fn manifest(&self) -> Vec<LayerEntry> {
        let mut m = self.encoder.manifest();
        for (i, (conv, _)) in self.up.iter().enumerate() {
            m.push(entry(&format!("up{i}"), conv.kind(), conv.c_in, conv.c_out));
            m.push(entry(
                &format!("up{i}_norm"),
                LayerKind::InstanceNorm,
                conv.c_out,
                conv.c_out,
            ));
            m.push(entry(&format!("up{i}_act"), LayerKind::Relu, conv.c_out, conv.c_out));
        }
        m.push(entry("color", self.color.kind(), self.color.c_in, 3));
        m.push(entry("color_act", LayerKind::Tanh, 3, 3));
        m.push(entry("mask", self.mask.kind(), self.mask.c_in, 1));
        m.push(entry("mask_act", LayerKind::Sigmoid, 1, 1));
        m
    }
}

/// Deformation generator: the texture generator's encoder followed by two
/// (bilinear x2, conv) upsampling stages and a 7x7 offset head whose output
/// is squashed into the offset bound.
#[derive(Clone, Debug)]
pub struct DeformationGenerator<T: Real> {
    pub params: ParamStore<T>,
    encoder: Encoder,
    up: Vec<(Conv, Norm)>,
    offset: Conv,
    max_offset_px: f64,
}

impl<T: Real> DeformationGenerator<T> {
    pub(crate) fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng, offset_init: Init) -> Self {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, rng, 3 + 2 * cfg.n_au, cfg.g_conv_dim, cfg.g_res_blocks);
        let mut c = encoder.out_channels();
        let mut up = Vec::new();
        for i in 0..2 {
            let conv = Conv::new(
                &mut store,
                rng,
                &format!("up{i}"),
                c,
                c / 2,
                3,
                1,
                1,
                false,
                Init::Uniform,
            );
            up.push((conv, Norm::new(&mut store, &format!("up{i}_norm"), c / 2)));
            c /= 2;
        }
        let offset = Conv::new(&mut store, rng, "offset", c, 2, 7, 1, 3, false, offset_init);
        Self {
            params: store,
            encoder,
            up,
            offset,
            max_offset_px: cfg.max_offset_px,
        }
    }

    /// Unbounded offset field, `(N, 2, H, W)`.
    pub fn raw_offsets<'g>(&self, p: &[Var<'g, T>], image: Var<'g, T>, xy_planes: Var<'g, T>) -> Var<'g, T> {
        let g = image.graph();
        let mut h = self.encoder.forward(p, g.concat(&[image, xy_planes], 1));
        for (conv, norm) in &self.up {
            h = norm.forward(p, conv.forward(p, h.upsample_bilinear2x())).relu();
        }
        self.offset.forward(p, h)
    }

    /// Bounded offsets in normalised coordinates, `(N, 2, H, W)`.
    pub fn forward<'g>(&self, p: &[Var<'g, T>], image: Var<'g, T>, xy_planes: Var<'g, T>) -> Var<'g, T> {
        bounded_offsets(self.raw_offsets(p, image, xy_planes), self.max_offset_px)
    }

    pub fn cast<U: Real>(&self) -> DeformationGenerator<U> {
        DeformationGenerator {
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            up: self.up.clone(),
            offset: self.offset.clone(),
            max_offset_px: self.max_offset_px,
        }
    }

    pub fn offset_weight_index(&self) -> usize {
        self.offset.weight_index()
    }

    pub fn manifest(&self) -> Vec<LayerEntry> {
        let mut m = self.encoder.manifest();
        for (i, (conv, _)) in self.up.iter().enumerate() {
            let kind = LayerKind::UpsampleConv {
                k: conv.k,
                pad: conv.pad,
            };
            m.push(entry(&format!("up{i}"), kind, conv.c_in, conv.c_out));
            m.push(entry(
                &format!("up{i}_norm"),
                LayerKind::InstanceNorm,
                conv.c_out,
                conv.c_out,
            ));
            m.push(entry(&format!("up{i}_act"), LayerKind::Relu, conv.c_out, conv.c_out));
        }
        m.push(entry("offset", self.offset.kind(), self.offset.c_in, 2));
        m.push(entry("offset_act", LayerKind::Tanh, 2, 2));
        m
    }
}
