//! Grayscale PNG reading/writing for images and binary masks.
//!
//! Images hold values in [0,1] and are stored as 8-bit gray PNG.
//! Masks hold values in {0,1} and are stored with pixel values {0, 255}.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use std::path::Path;

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Load any PNG as channel-major planes in [0,1] (1 or 3 channels).
pub fn load_raw(path: &Path) -> Result<Array3<f32>> {
    let img = open_image(path)?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let mut out = Array3::<f32>::zeros((1, h as usize, w as usize));
            for (x, y, p) in g.enumerate_pixels() {
                out[(0, y as usize, x as usize)] = p.0[0] as f32 / 255.0;
            }
            Ok(out)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    out[(c, y as usize, x as usize)] = p.0[c] as f32 / 255.0;
                }
            }
            Ok(out)
        }
    }
}

/// Load an 8-bit gray PNG as a [0,1] image.
pub fn load_gray(path: &Path) -> Result<Array2<f32>> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<f32>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = p.0[0] as f32 / 255.0;
    }
    Ok(out)
}

/// Load a {0,255} mask PNG as a {0,1} map. Values >= 128 count as set.
pub fn load_mask(path: &Path) -> Result<Array2<f32>> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<f32>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = if p.0[0] >= 128 { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Save a [0,1] image as 8-bit gray PNG (values rounded to 0..255).
pub fn save_gray(path: &Path, img: &Array2<f32>) -> Result<()> {
    let (h, w) = img.dim();
    let data: Vec<u8> = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, data)
        .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Save a {0,1} mask as a {0,255} PNG.
pub fn save_mask(path: &Path, mask: &Array2<f32>) -> Result<()> {
    let (h, w) = mask.dim();
    let data: Vec<u8> = mask
        .iter()
        .map(|&v| if v >= 0.5 { 255u8 } else { 0u8 })
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, data)
        .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn gray_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        let img = Array2::from_shape_fn((9, 13), |(y, x)| ((y * 13 + x) % 256) as f32 / 255.0);
        save_gray(&p, &img).unwrap();
        let back = load_gray(&p).unwrap();
        assert_eq!(img.dim(), back.dim());
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_round_trip_preserves_zero_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.png");
        let mask = Array2::from_shape_fn((7, 5), |(y, x)| ((y + x) % 2) as f32);
        save_mask(&p, &mask).unwrap();
        let back = load_mask(&p).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        let img = Array2::from_shape_fn((36, 60), |(y, x)| ((y * x) % 200) as f32 / 255.0);
        save_gray(&a, &img).unwrap();
        save_gray(&b, &img).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
