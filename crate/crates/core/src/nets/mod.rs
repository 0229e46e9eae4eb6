//! The deformation generator, the texture generator and the patch critic.
//!
//! Networks hold their parameters in a [`ParamStore`] and run on an autograd
//! [`Graph`]: bind the store onto a graph, then call `forward` with the bound
//! variables. Convenience methods on [`ModelBundle`] wrap this for single
//! images.
//!
//! AU codes condition the generators as constant planes concatenated to the
//! image channels.

mod critic;
mod generators;
mod layers;
mod params;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use critic::{Critic, PatchCritic, LEAKY_SLOPE};
pub use generators::{DeformationGenerator, TextureGenerator, MASK_BIAS_INIT};
pub use layers::{LayerEntry, LayerKind};
pub use params::ParamStore;

use crate::aucode::{AuVector, DEFAULT_AU_COUNT};
use crate::autograd::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::warpfield::{warp, DeformationGrid, DEFAULT_MAX_OFFSET_PX};
use layers::Init;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_au: usize,
    /// Native image size (square); offsets are bounded in pixels at this size.
    pub resolution: usize,
    pub max_offset_px: f64,
    /// Width of the generators' first layer.
    pub g_conv_dim: usize,
    /// Width of the critic's first layer.
    pub d_conv_dim: usize,
    pub g_res_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_au: DEFAULT_AU_COUNT,
            resolution: 128,
            max_offset_px: DEFAULT_MAX_OFFSET_PX,
            g_conv_dim: 64,
            d_conv_dim: 64,
            g_res_blocks: 6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_au == 0 {
            return bad("model.n_au must be positive".into());
        }
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return bad(format!(
                "model.resolution = {} must be a power of two >= 8",
                self.resolution
            ));
        }
        if !(self.max_offset_px > 0.0 && self.max_offset_px.is_finite()) {
            return bad(format!("model.max_offset_px = {} must be positive", self.max_offset_px));
        }
        if self.g_conv_dim == 0 || self.d_conv_dim == 0 {
            return bad("model channel widths must be positive".into());
        }
        Ok(())
    }

    /// Number of stride-2 critic layers: down to a 2x2 map.
    pub fn critic_depth(&self) -> usize {
        self.resolution.trailing_zeros() as usize - 1
    }
}

/// An `H x W x 3` image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Array3<f32>);

/// Slack allowed on the `[-1, 1]` range check.
const IMAGE_RANGE_TOL: f32 = 1e-5;

impl ImageTensor {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        if pixels.dim().2 != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image needs 3 channels, got {:?}",
                pixels.dim()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("image".into()));
        }
        if pixels.iter().any(|v| v.abs() > 1.0 + IMAGE_RANGE_TOL) {
            return Err(Error::Range("image values outside [-1, 1]".into()));
        }
        Ok(Self(pixels.mapv(|v| v.clamp(-1.0, 1.0))))
    }

    pub fn filled(h: usize, w: usize, v: f32) -> Result<Self> {
        Self::new(Array3::from_elem((h, w, 3), v))
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    /// Stacks images into an `(N, 3, H, W)` batch.
    pub fn to_batch<T: Real>(images: &[ImageTensor]) -> Result<Tensor<T>> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        let (h, w) = (first.height(), first.width());
        let mut out = Array4::zeros((images.len(), 3, h, w));
        for (n, img) in images.iter().enumerate() {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "batch mixes {h}x{w} and {}x{}",
                    img.height(),
                    img.width()
                )));
            }
            out.index_axis_mut(Axis(0), n)
                .assign(&img.0.view().permuted_axes([2, 0, 1]).mapv(|v| T::lit(v as f64)));
        }
        Ok(out.into_dyn())
    }

    /// Sample `n` of an `(N, 3, H, W)` batch.
    pub fn from_batch<T: Real>(batch: &Tensor<T>, n: usize) -> Result<Self> {
        if batch.ndim() != 4 || batch.shape()[1] != 3 {
            return Err(Error::ShapeMismatch(format!("image batch shape {:?}", batch.shape())));
        }
        let px = batch
            .index_axis(Axis(0), n)
            .permuted_axes(IxDyn(&[1, 2, 0]))
            .mapv(|v| v.to_f64c() as f32)
            .into_dimensionality()
            .expect("3-D");
        Self::new(px)
    }
}

/// One edit with all intermediate stages.
#[derive(Clone, Debug)]
pub struct EditResult {
    pub grid: DeformationGrid<f32>,
    pub deformed: ImageTensor,
    pub texture: ImageTensor,
    /// `H x W x 1`, entries in `[0, 1]`.
    pub mask: Array3<f32>,
    pub final_image: ImageTensor,
}

impl EditResult {
    /// Largest deviation from `mask * texture + (1 - mask) * deformed`.
    pub fn blend_residual(&self) -> f64 {
        let (d, t, f) = (self.deformed.pixels(), self.texture.pixels(), self.final_image.pixels());
        let mut worst = 0.0f64;
        for ((i, j, c), &fv) in f.indexed_iter() {
            let m = self.mask[[i, j, 0]] as f64;
            let want = m * t[[i, j, c]] as f64 + (1.0 - m) * d[[i, j, c]] as f64;
            worst = worst.max((fv as f64 - want).abs());
        }
        worst
    }
}

/// Graph handles of a batched edit.
#[derive(Clone, Copy, Debug)]
pub struct EditVars<'g, T: Real> {
    /// Bounded offsets, `(N, 2, H, W)`.
    pub offsets: Var<'g, T>,
    pub deformed: Var<'g, T>,
    pub texture: Var<'g, T>,
    /// `(N, 1, H, W)`.
    pub mask: Var<'g, T>,
    pub output: Var<'g, T>,
}

impl<'g, T: Real> EditVars<'g, T> {
    /// Converts sample `n` into an [`EditResult`].
    pub fn result(&self, n: usize, max_offset_px: f64) -> Result<EditResult> {
        let to32 = |v: Var<'g, T>| v.value().mapv(|x| x.to_f32().unwrap_or(f32::NAN));
        let mask = to32(self.mask)
            .index_axis(Axis(0), n)
            .permuted_axes(IxDyn(&[1, 2, 0]))
            .to_owned()
            .into_dimensionality()
            .expect("3-D");
        Ok(EditResult {
            grid: DeformationGrid::from_batch(&to32(self.offsets), n, max_offset_px)?,
            deformed: ImageTensor::from_batch(&self.deformed.value(), n)?,
            texture: ImageTensor::from_batch(&self.texture.value(), n)?,
            mask,
            final_image: ImageTensor::from_batch(&self.output.value(), n)?,
        })
    }
}

/// AU codes `(N, n_au)` tiled into constant planes `(N, n_au, h, w)`.
pub fn au_planes<T: Real>(au: &Array2<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, k) = au.dim();
    Array4::from_shape_fn((n, k, h, w), |(i, c, _, _)| au[[i, c]]).into_dyn()
}

/// Stacks AU vectors into an `(N, n_au)` matrix.
pub fn au_matrix<T: Real>(aus: &[AuVector]) -> Array2<T> {
    let k = aus.first().map_or(0, AuVector::len);
    Array2::from_shape_fn((aus.len(), k), |(i, j)| T::lit(aus[i].values()[j]))
}

/// The three trainable networks of the editor.
#[derive(Clone, Debug)]
pub struct ModelBundle<T: Real = f32> {
    pub config: ModelConfig,
    pub g_def: DeformationGenerator<T>,
    pub g_tex: TextureGenerator<T>,
    pub d: PatchCritic<T>,
}

/// Deterministic initialisation from `seed`. The offset head starts at zero
/// (identity warp) and the mask head at `sigmoid(-3)` everywhere.
pub fn init_models(config: &ModelConfig, seed: u64) -> Result<ModelBundle<f32>> {
    ModelBundle::init(config, seed)
}

impl<T: Real> ModelBundle<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        Ok(Self {
            config: config.clone(),
            g_def: DeformationGenerator::new(config, &mut stream(1), Init::Zero(0.0)),
            g_tex: TextureGenerator::new(config, &mut stream(2)),
            d: PatchCritic::new(config, &mut stream(3)),
        })
    }

    pub fn n_au(&self) -> usize {
        self.config.n_au
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config.clone(),
            g_def: self.g_def.cast(),
            g_tex: self.g_tex.cast(),
            d: self.d.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.g_def.params.numel() + self.g_tex.params.numel() + self.d.params.numel()
    }

    fn check_initialized(&self) -> Result<()> {
        for (name, p) in [
            ("g_def", &self.g_def.params),
            ("g_tex", &self.g_tex.params),
            ("d", &self.d.params),
        ] {
            if p.is_empty() || !p.all_finite() {
                return Err(Error::UninitializedParams(name.into()));
            }
        }
        Ok(())
    }

    fn check_batch(&self, images: &[usize], aus: &[&Array2<T>]) -> Result<()> {
        let r = self.resolution();
        if images.len() != 4 || images[1] != 3 || images[2] != r || images[3] != r {
            return Err(Error::ShapeMismatch(format!(
                "expected (N, 3, {r}, {r}) images, got {images:?}"
            )));
        }
        for a in aus {
            if a.dim() != (images[0], self.n_au()) {
                return Err(Error::ShapeMismatch(format!(
                    "AU batch {:?} vs {} images with {} AUs",
                    a.dim(),
                    images[0],
                    self.n_au()
                )));
            }
        }
        Ok(())
    }

    /// Offsets and warped images for a batch: `(offsets, deformed)`.
    pub fn deform<'g>(
        &self,
        pd: &[Var<'g, T>],
        images: Var<'g, T>,
        x: &Array2<T>,
        y: &Array2<T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = images.shape();
        self.check_batch(&s, &[x, y])?;
        let g = images.graph();
        let planes = g.concat(
            &[
                g.constant(au_planes(x, s[2], s[3])),
                g.constant(au_planes(y, s[2], s[3])),
            ],
            1,
        );
        let offsets = self.g_def.forward(pd, images, planes);
        Ok((offsets, warp(images, offsets)?))
    }

    /// `(texture, mask)` for a deformed batch.
    pub fn texture<'g>(
        &self,
        pt: &[Var<'g, T>],
        deformed: Var<'g, T>,
        y: &Array2<T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = deformed.shape();
        self.check_batch(&s, &[y])?;
        let planes = deformed.graph().constant(au_planes(y, s[2], s[3]));
        Ok(self.g_tex.forward(pt, deformed, planes))
    }

    /// Full two-stage edit of a batch towards `y`.
    pub fn edit<'g>(
        &self,
        pd: &[Var<'g, T>],
        pt: &[Var<'g, T>],
        images: Var<'g, T>,
        x: &Array2<T>,
        y: &Array2<T>,
    ) -> Result<EditVars<'g, T>> {
        let (offsets, deformed) = self.deform(pd, images, x, y)?;
        let (texture, mask) = self.texture(pt, deformed, y)?;
        let output = deformed + mask * (texture - deformed);
        Ok(EditVars {
            offsets,
            deformed,
            texture,
            mask,
            output,
        })
    }

    fn single(&self, image: &ImageTensor, aus: &[&AuVector]) -> Result<(Tensor<T>, Vec<Array2<T>>)> {
        self.check_initialized()?;
        for a in aus {
            if a.len() != self.n_au() {
                return Err(Error::DimensionMismatch {
                    expected: self.n_au(),
                    got: a.len(),
                });
            }
        }
        let r = self.resolution();
        if (image.height(), image.width()) != (r, r) {
            return Err(Error::ShapeMismatch(format!(
                "image is {}x{}, model runs at {r}x{r}",
                image.height(),
                image.width()
            )));
        }
        let batch = ImageTensor::to_batch(std::slice::from_ref(image))?;
        Ok((batch, aus.iter().map(|a| au_matrix(std::slice::from_ref(*a))).collect()))
    }

    /// Deformation stage for one image: `(grid, deformed image)`.
    pub fn g_def_forward(
        &self,
        image: &ImageTensor,
        x: &AuVector,
        y: &AuVector,
    ) -> Result<(DeformationGrid<f32>, ImageTensor)> {
        let (batch, aus) = self.single(image, &[x, y])?;
        let g = Graph::new();
        let pd = self.g_def.params.bind(&g, false);
        let (off, deformed) = self.deform(&pd, g.constant(batch), &aus[0], &aus[1])?;
        let off32 = off.value().mapv(|v| v.to_f32().unwrap_or(f32::NAN));
        Ok((
            DeformationGrid::from_batch(&off32, 0, self.config.max_offset_px)?,
            ImageTensor::from_batch(&deformed.value(), 0)?,
        ))
    }

    /// Texture stage for one deformed image: `(texture, mask)`.
    pub fn g_texture_forward(&self, deformed: &ImageTensor, y: &AuVector) -> Result<(ImageTensor, Array3<f32>)> {
        let (batch, aus) = self.single(deformed, &[y])?;
        let g = Graph::new();
        let pt = self.g_tex.params.bind(&g, false);
        let (tex, mask) = self.texture(&pt, g.constant(batch), &aus[0])?;
        let m = mask
            .value()
            .index_axis(Axis(0), 0)
            .permuted_axes(IxDyn(&[1, 2, 0]))
            .mapv(|v| v.to_f64c() as f32)
            .into_dimensionality()
            .expect("3-D");
        Ok((ImageTensor::from_batch(&tex.value(), 0)?, m))
    }

    /// Both stages and the mask blend for one image.
    pub fn g_comp(&self, image: &ImageTensor, x: &AuVector, y: &AuVector) -> Result<EditResult> {
        let (batch, aus) = self.single(image, &[x, y])?;
        let g = Graph::new();
        let pd = self.g_def.params.bind(&g, false);
        let pt = self.g_tex.params.bind(&g, false);
        self.edit(&pd, &pt, g.constant(batch), &aus[0], &aus[1])?
            .result(0, self.config.max_offset_px)
    }

    /// Critic outputs for one image: `(patch scores h' x w', AU predictions)`.
    pub fn d_forward(&self, image: &ImageTensor) -> Result<(Array2<f32>, Vec<f32>)> {
        let (batch, _) = self.single(image, &[])?;
        let g = Graph::new();
        let p = self.d.params.bind(&g, false);
        let x = g.constant(batch);
        let patches = self.d.patch_scores(&p, x).value();
        let au = self.d.au_predictions(&p, x).value();
        let s = patches.shape().to_vec();
        Ok((
            Array2::from_shape_fn((s[2], s[3]), |(i, j)| patches[[0, 0, i, j]].to_f64c() as f32),
            au.iter().map(|v| v.to_f64c() as f32).collect(),
        ))
    }

    /// Plain-text layer manifests of the three networks.
    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        for (name, m) in [
            ("deformation_generator", self.g_def.manifest()),
            ("texture_generator", self.g_tex.manifest()),
            ("critic", self.d.manifest()),
        ] {
            out.push_str(&format!("[{name}]\n"));
            for e in m {
                out.push_str(&format!("{e}\n"));
            }
        }
        out
    }
}

/// Maps an `(N, C, H, W)` tensor between element types.
pub fn cast_tensor<T: Real, U: Real>(t: &Tensor<T>) -> Tensor<U> {
    t.mapv(|v| U::lit(v.to_f64c()))
}

/// Builds a batch tensor filled by `f(n, c, i, j)`.
pub fn batch_from_fn<T: Real>(shape: [usize; 4], f: impl Fn(usize, usize, usize, usize) -> f64) -> Tensor<T> {
    ArrayD::from_shape_fn(IxDyn(&shape), |ix| T::lit(f(ix[0], ix[1], ix[2], ix[3])))
}
