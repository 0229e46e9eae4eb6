//! Annotated image datasets, batch sampling and synthetic face sprites.
//!
//! A dataset directory holds `images/*.png` and `annotations.csv` with header
//! `filename,au_1,...,au_N`. Annotations are raw intensities in `[0, 5]` and
//! are divided by 5 on load unless rescaling is disabled.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aucode::{validate_au, AuVector, RAW_INTENSITY_MAX};
use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::imageio::{load_image, save_image};
use crate::nets::{au_matrix, ImageTensor};

pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const IMAGES_DIR: &str = "images";

/// Number of pseudo-AUs of the synthetic sprites.
pub const SPRITE_AUS: usize = 4;
/// Sprite pseudo-AU names, in column order.
pub const SPRITE_AU_NAMES: [&str; SPRITE_AUS] = ["brow_raise", "eye_openness", "smile_curvature", "jaw_drop"];

#[derive(Clone, Debug)]
pub struct Record {
    pub path: PathBuf,
    pub au: AuVector,
}

/// Images with their AU annotations, decoded and resized in memory.
#[derive(Clone, Debug)]
pub struct AnnotatedDataset {
    pub records: Vec<Record>,
    pub images: Vec<ImageTensor>,
    pub resolution: usize,
    pub n_au: usize,
}

impl AnnotatedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The records at `indices`, as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> AnnotatedDataset {
        AnnotatedDataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            resolution: self.resolution,
            n_au: self.n_au,
        }
    }

    /// Splits off the last `n` records: `(head, tail)`.
    pub fn split_tail(&self, n: usize) -> (AnnotatedDataset, AnnotatedDataset) {
        let cut = self.len().saturating_sub(n);
        let idx: Vec<usize> = (0..self.len()).collect();
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    pub fn annotations(&self) -> Vec<AuVector> {
        self.records.iter().map(|r| r.au.clone()).collect()
    }

    /// Images at `indices` as an `(N, 3, H, W)` tensor.
    pub fn image_batch<T: Real>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let imgs: Vec<ImageTensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        ImageTensor::to_batch(&imgs)
    }

    pub fn au_batch<T: Real>(&self, indices: &[usize]) -> Array2<T> {
        let aus: Vec<AuVector> = indices.iter().map(|&i| self.records[i].au.clone()).collect();
        if aus.is_empty() {
            return Array2::zeros((0, self.n_au));
        }
        au_matrix(&aus)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Divide raw annotations by 5; disable for data already in `[0, 1]`.
    pub rescale: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { rescale: true }
    }
}

pub fn load_dataset(root: &Path, resolution: usize, n_au: usize) -> Result<AnnotatedDataset> {
    load_dataset_with(root, resolution, n_au, LoadOptions::default())
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Csv(format!("{}: {e}", path.display()))
}

/// Parses an annotations file: `(filename, raw values)` rows in file order.
pub fn read_annotations(path: &Path, n_au: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected: Vec<String> = std::iter::once("filename".to_string())
        .chain((1..=n_au).map(|i| format!("au_{i}")))
        .collect();
    if header.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        if header.len() != n_au + 1 && header.get(0) == Some("filename") {
            return Err(Error::DimensionMismatch {
                expected: n_au,
                got: header.len().saturating_sub(1),
            });
        }
        return Err(csv_err(path, format!("header must be {}", expected.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let name = rec.get(0).unwrap_or_default().to_string();
        let vals = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| csv_err(path, format!("{name}: {f:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((name, vals));
    }
    Ok(rows)
}

/// Writes raw annotation rows with the dataset header.
pub fn write_annotations(path: &Path, n_au: usize, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = std::iter::once("filename".to_string())
        .chain((1..=n_au).map(|i| format!("au_{i}")))
        .collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (name, vals) in rows {
        let fields = std::iter::once(name.clone()).chain(vals.iter().map(|v| format!("{v}")));
        w.write_record(fields).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset_with(root: &Path, resolution: usize, n_au: usize, opts: LoadOptions) -> Result<AnnotatedDataset> {
    let csv_path = root.join(ANNOTATIONS_FILE);
    let rows = read_annotations(&csv_path, n_au)?;
    let scale = if opts.rescale { RAW_INTENSITY_MAX } else { 1.0 };
    let mut records = Vec::with_capacity(rows.len());
    let mut images = Vec::with_capacity(rows.len());
    for (name, raw) in &rows {
        if let Some((i, v)) = raw.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && **v <= scale)) {
            return Err(Error::Range(format!("{name}: au_{} = {v} outside [0, {scale}]", i + 1)));
        }
        let au = validate_au(&raw.iter().map(|v| v / scale).collect::<Vec<_>>(), n_au)?;
        let path = root.join(IMAGES_DIR).join(name);
        images.push(load_image(&path, resolution)?);
        records.push(Record { path, au });
    }
    let images_dir = root.join(IMAGES_DIR);
    if images_dir.is_dir() {
        let listed: std::collections::HashSet<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        let mut files: Vec<String> = fs::read_dir(&images_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
            .collect();
        files.sort();
        if let Some(f) = files.iter().find(|f| !listed.contains(f.as_str())) {
            return Err(Error::MissingAnnotation(f.clone()));
        }
    }
    Ok(AnnotatedDataset {
        records,
        images,
        resolution,
        n_au,
    })
}

/// One training batch: source images with their annotations and targets
/// drawn from an independent set of records.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub x: Array2<f32>,
    pub y: Array2<f32>,
}

/// Samples `batch_size` records uniformly with replacement, and as many
/// independent target records.
pub fn sample_batch(ds: &AnnotatedDataset, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..ds.len())).collect();
    let target_indices: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..ds.len())).collect();
    Ok(Batch {
        images: ds.image_batch(&indices)?,
        x: ds.au_batch(&indices),
        y: ds.au_batch(&target_indices),
        indices,
        target_indices,
    })
}

/// Sprite parameters, each in `[0, 1]`, in pseudo-AU order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpriteParams {
    pub brow: f64,
    pub eye: f64,
    pub smile: f64,
    pub jaw: f64,
}

impl SpriteParams {
    pub fn from_au(au: &[f64]) -> Self {
        Self {
            brow: au[0],
            eye: au[1],
            smile: au[2],
            jaw: au[3],
        }
    }

    pub fn to_au(self) -> [f64; SPRITE_AUS] {
        [self.brow, self.eye, self.smile, self.jaw]
    }
}

/// Appearance that does not enter the annotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpriteStyle {
    /// Skin colour in `[0, 1]` RGB.
    pub skin: [f64; 3],
    /// Head half-width in normalised units.
    pub head_rx: f64,
}

impl Default for SpriteStyle {
    fn default() -> Self {
        Self {
            skin: [0.9, 0.72, 0.58],
            head_rx: 0.62,
        }
    }
}

/// Coverage of a shape with signed distance `d` (negative inside) for a
/// pixel of width `px`.
fn coverage(d: f64, px: f64) -> f64 {
    (0.5 - d / px).clamp(0.0, 1.0)
}

/// Approximate signed distance to an axis-aligned ellipse.
fn ellipse_sd(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let (u, v) = ((x - cx) / rx, (y - cy) / ry);
    ((u * u + v * v).sqrt() - 1.0) * rx.min(ry)
}

/// Distance to a segment minus half its thickness.
fn segment_sd(x: f64, y: f64, a: (f64, f64), b: (f64, f64), half: f64) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((x - a.0) * dx + (y - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((x - a.0 - t * dx).powi(2) + (y - a.1 - t * dy).powi(2)).sqrt() - half
}

const MOUTH_HALF_WIDTH: f64 = 0.28;
const MOUTH_Y: f64 = 0.42;

/// Centre line of the mouth: corners rise with the smile.
fn mouth_line(x: f64, smile: f64) -> f64 {
    let u = (x / MOUTH_HALF_WIDTH).clamp(-1.0, 1.0);
    MOUTH_Y + 0.03 * smile - 0.13 * smile * u * u
}

fn mix(dst: &mut [f64; 3], src: [f64; 3], a: f64) {
    for c in 0..3 {
        dst[c] += a * (src[c] - dst[c]);
    }
}

/// Renders a face sprite on a `resolution x resolution` canvas. The picture
/// is a continuous function of the parameters.
pub fn render_sprite(p: SpriteParams, style: SpriteStyle, resolution: usize) -> Result<ImageTensor> {
    let px = 2.0 / resolution as f64;
    let mut out = Array3::zeros((resolution, resolution, 3));
    let brow_color = [0.25, 0.15, 0.08];
    let eye_color = [0.08, 0.08, 0.12];
    let lip_color = [0.6, 0.2, 0.22];
    let mouth_color = [0.25, 0.03, 0.06];
    for i in 0..resolution {
        for j in 0..resolution {
            let x = -1.0 + (j as f64 + 0.5) * px;
            let y = -1.0 + (i as f64 + 0.5) * px;
            let mut c = [0.82, 0.86, 0.92];
            mix(
                &mut c,
                style.skin,
                coverage(ellipse_sd(x, y, 0.0, 0.05, style.head_rx, 0.8), px),
            );
            for side in [-1.0, 1.0] {
                let ex = side * 0.26;
                let ry = 0.012 + 0.075 * p.eye;
                mix(&mut c, eye_color, coverage(ellipse_sd(x, y, ex, -0.1, 0.11, ry), px));
                let by = -0.28 - 0.14 * p.brow;
                let brow = segment_sd(x, y, (side * 0.13, by + 0.02), (side * 0.38, by - 0.01), 0.035);
                mix(&mut c, brow_color, coverage(brow, px));
            }
            let yc = mouth_line(x, p.smile);
            let open = 0.17 * p.jaw * (1.0 - (x / MOUTH_HALF_WIDTH).powi(2)).max(0.0);
            let inside = (yc - 0.01 - y)
                .max(y - (yc + 0.01 + open))
                .max(x.abs() - MOUTH_HALF_WIDTH);
            mix(&mut c, mouth_color, coverage(inside, px));
            // lips: bands along the upper and lower mouth edges
            let lip_w = 0.022;
            let upper = (y - (yc - 0.01)).abs() - lip_w;
            let lower = (y - (yc + 0.01 + open)).abs() - lip_w;
            let lips = upper.min(lower).max(x.abs() - MOUTH_HALF_WIDTH - 0.01);
            mix(&mut c, lip_color, coverage(lips, px));
            for ch in 0..3 {
                out[[i, j, ch]] = (c[ch] * 2.0 - 1.0) as f32;
            }
        }
    }
    ImageTensor::new(out)
}

fn random_style(rng: &mut impl Rng) -> SpriteStyle {
    let t: f64 = rng.random();
    SpriteStyle {
        skin: [0.95 - 0.25 * t, 0.78 - 0.3 * t, 0.64 - 0.3 * t],
        head_rx: rng.random_range(0.56..0.68),
    }
}

/// Writes `n` random sprites with their annotations (raw scale) under
/// `out`, and returns the loaded dataset. Identical seeds produce identical
/// files.
pub fn synth_sprites(out: &Path, n: usize, resolution: usize, seed: u64) -> Result<AnnotatedDataset> {
    let img_dir = out.join(IMAGES_DIR);
    fs::create_dir_all(&img_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let params = SpriteParams {
            brow: rng.random(),
            eye: rng.random(),
            smile: rng.random(),
            jaw: rng.random(),
        };
        let style = random_style(&mut rng);
        let name = format!("{k:05}.png");
        save_image(&render_sprite(params, style, resolution)?, &img_dir.join(&name))?;
        rows.push((name, params.to_au().iter().map(|v| v * RAW_INTENSITY_MAX).collect()));
    }
    write_annotations(&out.join(ANNOTATIONS_FILE), SPRITE_AUS, &rows)?;
    load_dataset(out, resolution, SPRITE_AUS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l1(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let n = a.pixels().len() as f64;
        a.pixels()
            .iter()
            .zip(b.pixels())
            .map(|(p, q)| (p - q).abs() as f64)
            .sum::<f64>()
            / n
    }

    #[test]
    fn synth_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let ds = synth_sprites(&a, 6, 32, 7).unwrap();
        synth_sprites(&b, 6, 32, 7).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.images[0].height(), 32);
        for k in 0..6 {
            let name = format!("{k:05}.png");
            let fa = fs::read(a.join(IMAGES_DIR).join(&name)).unwrap();
            assert_eq!(fa, fs::read(b.join(IMAGES_DIR).join(&name)).unwrap());
        }
        assert_eq!(
            fs::read(a.join(ANNOTATIONS_FILE)).unwrap(),
            fs::read(b.join(ANNOTATIONS_FILE)).unwrap()
        );

        // annotations survive the write/read cycle
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for r in &ds.records {
            let want = [rng.random::<f64>(), rng.random(), rng.random(), rng.random()];
            random_style(&mut rng);
            for (got, w) in r.au.values().iter().zip(want) {
                assert!((got - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_synth_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_sprites(dir.path(), 0, 16, 1).unwrap();
        assert!(ds.is_empty());
        let text = fs::read_to_string(dir.path().join(ANNOTATIONS_FILE)).unwrap();
        assert_eq!(text, "filename,au_1,au_2,au_3,au_4\n");
    }

    #[test]
    fn extreme_sprites_differ() {
        let s = SpriteStyle::default();
        let lo = render_sprite(SpriteParams::from_au(&[0.0; 4]), s, 64).unwrap();
        let hi = render_sprite(SpriteParams::from_au(&[1.0; 4]), s, 64).unwrap();
        assert!(l1(&lo, &hi) > 0.01, "{}", l1(&lo, &hi));
    }

    #[test]
    fn rendering_is_lipschitz_in_parameters() {
        let s = SpriteStyle::default();
        let base = [0.3, 0.5, 0.4, 0.6];
        let mut worst: f64 = 0.0;
        for k in 0..4 {
            for delta in [0.01, 0.02, 0.05] {
                let mut p = base;
                p[k] += delta;
                let a = render_sprite(SpriteParams::from_au(&base), s, 64).unwrap();
                let b = render_sprite(SpriteParams::from_au(&p), s, 64).unwrap();
                worst = worst.max(l1(&a, &b) / delta);
            }
        }
        // measured constant is about 0.25; the bound leaves headroom
        assert!(worst < 1.0, "{worst}");
    }

    fn write_fixture(root: &Path, rows: &[(&str, [f64; 2])], files: &[&str]) {
        fs::create_dir_all(root.join(IMAGES_DIR)).unwrap();
        for f in files {
            save_image(&ImageTensor::filled(8, 8, 0.2).unwrap(), &root.join(IMAGES_DIR).join(f)).unwrap();
        }
        let rows: Vec<(String, Vec<f64>)> = rows.iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect();
        write_annotations(&root.join(ANNOTATIONS_FILE), 2, &rows).unwrap();
    }

    #[test]
    fn load_examples() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok");
        write_fixture(
            &ok,
            &[("a.png", [0.0, 5.0]), ("b.png", [2.5, 1.0]), ("c.png", [1.0, 1.0])],
            &["a.png", "b.png", "c.png"],
        );
        let ds = load_dataset(&ok, 4, 2).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.records[1].au.values(), &[0.5, 0.2]);
        assert_eq!(ds.images[0].height(), 4);

        let raw = load_dataset_with(&ok, 4, 2, LoadOptions { rescale: false });
        assert!(matches!(raw, Err(Error::Range(_))));

        let bad = dir.path().join("bad");
        write_fixture(&bad, &[("a.png", [6.0, 0.0])], &["a.png"]);
        assert!(matches!(load_dataset(&bad, 4, 2), Err(Error::Range(_))));

        let missing = dir.path().join("missing");
        write_fixture(&missing, &[("a.png", [1.0, 0.0]), ("gone.png", [1.0, 0.0])], &["a.png"]);
        match load_dataset(&missing, 4, 2) {
            Err(Error::Decode { path, .. }) => assert!(path.ends_with("gone.png")),
            other => panic!("{other:?}"),
        }

        let extra = dir.path().join("extra");
        write_fixture(&extra, &[("a.png", [1.0, 0.0])], &["a.png", "b.png"]);
        assert!(matches!(load_dataset(&extra, 4, 2), Err(Error::MissingAnnotation(f)) if f == "b.png"));

        assert!(matches!(
            load_dataset(&ok, 4, 3),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn batches() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_sprites(dir.path(), 5, 16, 3).unwrap();
        let draw = |seed| sample_batch(&ds, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (a, b) = (draw(9), draw(9));
        assert_eq!(
            (a.indices.clone(), a.target_indices.clone()),
            (b.indices, b.target_indices)
        );
        assert_eq!(a.images, b.images);
        assert_eq!(a.images.shape(), &[4, 3, 16, 16]);
        assert!(a.x.iter().chain(a.y.iter()).all(|v| (0.0..=1.0).contains(v)));

        let one = ds.subset(&[2]);
        let b = sample_batch(&one, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.x, b.y);
        let empty = ds.subset(&[]);
        assert!(matches!(
            sample_batch(&empty, 1, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::EmptyDataset)
        ));
    }
}
