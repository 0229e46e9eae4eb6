//! PNG reading and writing, plus small visualisations (heatmaps, offset
//! fields, image grids).

use std::path::Path;

use image::imageops::{resize, FilterType};
use image::{ImageReader, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::nets::ImageTensor;
use crate::warpfield::{offset_bound, DeformationGrid};

fn decode_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Decodes any supported image file as 8-bit RGB.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let reader = ImageReader::open(path).map_err(|e| decode_err(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| decode_err(path, e))?;
    Ok(reader.decode().map_err(|e| decode_err(path, e))?.to_rgb8())
}

/// `[0, 255]` RGB to a `[-1, 1]` image tensor at the image's own size.
pub fn rgb_to_image_tensor(img: &RgbImage) -> Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
        img.get_pixel(j as u32, i as u32)[c] as f32 / 127.5 - 1.0
    });
    ImageTensor::new(px)
}

/// As [`rgb_to_image_tensor`], bilinearly resized to `size x size` when
/// needed.
pub fn rgb_to_tensor(img: &RgbImage, size: usize) -> Result<ImageTensor> {
    if img.width() as usize != size || img.height() as usize != size {
        rgb_to_image_tensor(&resize(img, size as u32, size as u32, FilterType::Triangle))
    } else {
        rgb_to_image_tensor(img)
    }
}

pub fn load_image(path: &Path, size: usize) -> Result<ImageTensor> {
    rgb_to_tensor(&read_rgb(path)?, size)
}

fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn tensor_to_rgb(img: &ImageTensor) -> RgbImage {
    let p = img.pixels();
    RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        Rgb([to_u8(p[[i, j, 0]]), to_u8(p[[i, j, 1]]), to_u8(p[[i, j, 2]])])
    })
}

pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    write_png(&tensor_to_rgb(img), path)
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Gray image of a scalar map: `lo` renders black, `hi` white.
pub fn heatmap(map: &Array2<f32>, lo: f32, hi: f32) -> Result<ImageTensor> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = map.dim();
    ImageTensor::new(Array3::from_shape_fn((h, w, 3), |(i, j, _)| {
        ((map[[i, j]] - lo) / span).clamp(0.0, 1.0) * 2.0 - 1.0
    }))
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Colour-wheel rendering of an offset field: hue is the direction,
/// saturation the magnitude relative to the offset bound. Zero offsets are
/// white.
pub fn flow_image(grid: &DeformationGrid<f32>) -> Result<ImageTensor> {
    let (h, w) = (grid.height(), grid.width());
    let bx = offset_bound(grid.max_offset_px(), w) as f32;
    let by = offset_bound(grid.max_offset_px(), h) as f32;
    let o = grid.offsets();
    ImageTensor::new(Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
        let (dx, dy) = (o[[i, j, 0]] / bx, o[[i, j, 1]] / by);
        let mag = (dx * dx + dy * dy).sqrt().min(1.0);
        let hue = dy.atan2(dx) / std::f32::consts::TAU;
        hsv_to_rgb(hue, mag, 1.0)[c] * 2.0 - 1.0
    }))
}

/// Mask `H x W x 1` in `[0, 1]` as a gray image.
pub fn mask_image(mask: &Array3<f32>) -> Result<ImageTensor> {
    heatmap(&mask.index_axis(ndarray::Axis(2), 0).to_owned(), 0.0, 1.0)
}

/// Lays out rows of equally sized images with a `gap`-pixel white border.
pub fn grid_image(rows: &[Vec<ImageTensor>], gap: usize) -> Result<ImageTensor> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::Dimension("no images to lay out".into()))?;
    let (h, w) = (first.height(), first.width());
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (oh, ow) = (rows.len() * (h + gap) + gap, ncol * (w + gap) + gap);
    let mut out = Array3::from_elem((oh, ow, 3), 1.0f32);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::ShapeMismatch("grid images must share one size".into()));
            }
            let (y0, x0) = (gap + r * (h + gap), gap + c * (w + gap));
            out.slice_mut(ndarray::s![y0..y0 + h, x0..x0 + w, ..])
                .assign(img.pixels());
        }
    }
    ImageTensor::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_on_the_8bit_lattice() {
        let dir = tempfile::tempdir().unwrap();
        let px = Array3::from_shape_fn((5, 7, 3), |(i, j, c)| {
            ((i * 31 + j * 17 + c * 5) % 256) as f32 / 127.5 - 1.0
        });
        let img = ImageTensor::new(px).unwrap();
        let path = dir.path().join("a.png");
        save_image(&img, &path).unwrap();
        let rgb = read_rgb(&path).unwrap();
        assert_eq!((rgb.width(), rgb.height()), (7, 5));
        for ((i, j, c), v) in img.pixels().indexed_iter() {
            assert_eq!(rgb.get_pixel(j as u32, i as u32)[c], to_u8(*v));
            assert!(((rgb.get_pixel(j as u32, i as u32)[c] as f32 / 127.5 - 1.0) - v).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_rgb(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }

    #[test]
    fn resize_to_square() {
        let img = RgbImage::from_pixel(10, 10, Rgb([255, 0, 128]));
        let t = rgb_to_tensor(&img, 4).unwrap();
        assert_eq!((t.height(), t.width()), (4, 4));
        assert!((t.pixels()[[2, 2, 0]] - 1.0).abs() < 1e-6);
        assert!((t.pixels()[[2, 2, 1]] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn grid_layout_size() {
        let a = ImageTensor::filled(4, 6, 0.0).unwrap();
        let g = grid_image(&[vec![a.clone(), a.clone()], vec![a]], 1).unwrap();
        assert_eq!((g.height(), g.width()), (2 * 5 + 1, 2 * 7 + 1));
    }

    #[test]
    fn flow_of_identity_is_white() {
        let grid = DeformationGrid::<f32>::identity(3, 3, 5.0).unwrap();
        assert!(flow_image(&grid)
            .unwrap()
            .pixels()
            .iter()
            .all(|v| (*v - 1.0).abs() < 1e-6));
    }
}
