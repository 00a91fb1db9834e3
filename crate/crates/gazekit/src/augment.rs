//! Gaze-preserving stochastic image transformations.
//!
//! Six photometric/occlusion transforms; nothing geometric (no flips,
//! rotations, or affine warps), so gaze labels stay valid untouched. Each
//! transform fires independently with `transform_prob` and then draws its
//! parameters uniformly from the configured range. `sigma` ranges are on
//! the 0-255 gray scale; images themselves live in [0,1].

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const NOISE_SIGMA_MAX: f64 = 10.0;
pub const BLUR_SIGMA_MAX: f64 = 2.0;
pub const CUTOUT_SIZE_MAX: u32 = 10;
pub const DOWNSCALE_MAX: f64 = 2.0;
pub const LINE_COUNT_MAX: u32 = 2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentSpec {
    /// Gaussian noise sigma range in gray levels (0-255 scale).
    pub noise_sigma_range: (f64, f64),
    /// Gaussian blur sigma range in px; the kernel is always 3x3.
    pub blur_sigma_range: (f64, f64),
    /// Cutout rectangle side range in px.
    pub cutout_size_range: (u32, u32),
    /// Downscale factor range (resize to 1/f and back).
    pub downscale_range: (f64, f64),
    /// Lines drawn per application: uniform in 0..=line_count_max.
    pub line_count_max: u32,
    pub contrast_enabled: bool,
    /// Probability that each transform fires, drawn independently.
    pub transform_prob: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            noise_sigma_range: (0.0, NOISE_SIGMA_MAX),
            blur_sigma_range: (0.0, BLUR_SIGMA_MAX),
            cutout_size_range: (0, CUTOUT_SIZE_MAX),
            downscale_range: (1.0, DOWNSCALE_MAX),
            line_count_max: LINE_COUNT_MAX,
            contrast_enabled: true,
            transform_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    /// Spec where every transform is a no-op; `apply_random` is then a
    /// bit-exact identity.
    pub fn identity() -> Self {
        AugmentSpec {
            noise_sigma_range: (0.0, 0.0),
            blur_sigma_range: (0.0, 0.0),
            cutout_size_range: (0, 0),
            downscale_range: (1.0, 1.0),
            line_count_max: 0,
            contrast_enabled: false,
            transform_prob: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranged = |lo: f64, hi: f64, max: f64, what: &str| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < 0.0 || hi > max {
                return Err(Error::invalid(format!(
                    "{what} range ({lo}, {hi}) outside [0, {max}]"
                )));
            }
            Ok(())
        };
        ranged(
            self.noise_sigma_range.0,
            self.noise_sigma_range.1,
            NOISE_SIGMA_MAX,
            "noise sigma",
        )?;
        ranged(
            self.blur_sigma_range.0,
            self.blur_sigma_range.1,
            BLUR_SIGMA_MAX,
            "blur sigma",
        )?;
        if self.cutout_size_range.0 > self.cutout_size_range.1
            || self.cutout_size_range.1 > CUTOUT_SIZE_MAX
        {
            return Err(Error::invalid("cutout size range outside [0, 10]"));
        }
        if self.downscale_range.0 > self.downscale_range.1
            || self.downscale_range.0 < 1.0
            || self.downscale_range.1 > DOWNSCALE_MAX
        {
            return Err(Error::invalid("downscale range outside [1, 2]"));
        }
        if self.line_count_max > LINE_COUNT_MAX {
            return Err(Error::invalid("line count above 2"));
        }
        if !(0.0..=1.0).contains(&self.transform_prob) {
            return Err(Error::invalid("transform probability outside [0, 1]"));
        }
        Ok(())
    }
}

/// Bilinear resize with half-pixel centers. Same-size output copies the
/// input exactly.
pub fn bilinear_resize(src: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    assert!(h > 0 && w > 0 && oh > 0 && ow > 0);
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let wy = (fy - y0 as f64) as f32;
        let wx = (fx - x0 as f64) as f32;
        let top = src[(y0, x0)] * (1.0 - wx) + src[(y0, x1)] * wx;
        let bot = src[(y1, x0)] * (1.0 - wx) + src[(y1, x1)] * wx;
        top * (1.0 - wy) + bot * wy
    })
}

/// Additive zero-mean Gaussian noise; `sigma` on the 0-255 scale.
pub fn gaussian_noise(img: &Array2<f32>, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Array2<f32>> {
    if !(0.0..=NOISE_SIGMA_MAX).contains(&sigma) {
        return Err(Error::invalid(format!("noise sigma {sigma} outside [0, 10]")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let s = (sigma / 255.0) as f32;
    let dist = StandardNormal;
    Ok(img.mapv(|v| {
        let z: f64 = dist.sample(rng);
        (v + s * z as f32).clamp(0.0, 1.0)
    }))
}

/// 3x3 blur with kernel weights from a Gaussian of the given sigma,
/// normalized to sum 1; replicate padding at the borders.
pub fn gaussian_blur(img: &Array2<f32>, sigma: f64) -> Result<Array2<f32>> {
    if !(0.0..=BLUR_SIGMA_MAX).contains(&sigma) {
        return Err(Error::invalid(format!("blur sigma {sigma} outside [0, 2]")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = blur_kernel(sigma);
    let (h, w) = img.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0f64;
        for dy in 0..3usize {
            for dx in 0..3usize {
                let sy = (y as isize + dy as isize - 1).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize + dx as isize - 1).clamp(0, w as isize - 1) as usize;
                acc += kernel[dy * 3 + dx] * img[(sy, sx)] as f64;
            }
        }
        (acc.clamp(0.0, 1.0)) as f32
    }))
}

/// The 3x3 kernel used by [`gaussian_blur`]; sums to 1.
pub fn blur_kernel(sigma: f64) -> [f64; 9] {
    let mut k = [0.0f64; 9];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut sum = 0.0;
    for dy in -1i32..=1 {
        for dx in -1i32..=1 {
            let v = (-((dy * dy + dx * dx) as f64) * inv).exp();
            k[((dy + 1) * 3 + dx + 1) as usize] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Zero one axis-aligned rectangle of the given size at a uniform position.
pub fn cutout(img: &Array2<f32>, ch: u32, cw: u32, rng: &mut ChaCha8Rng) -> Result<Array2<f32>> {
    if ch > CUTOUT_SIZE_MAX || cw > CUTOUT_SIZE_MAX {
        return Err(Error::invalid("cutout size above 10 px"));
    }
    let (h, w) = img.dim();
    let ch = (ch as usize).min(h);
    let cw = (cw as usize).min(w);
    if ch == 0 || cw == 0 {
        return Ok(img.clone());
    }
    let top = rng.random_range(0..=(h - ch));
    let left = rng.random_range(0..=(w - cw));
    let mut out = img.clone();
    for y in top..top + ch {
        for x in left..left + cw {
            out[(y, x)] = 0.0;
        }
    }
    Ok(out)
}

/// Resize to `(H/f, W/f)` and back, both bilinear.
pub fn downscale(img: &Array2<f32>, factor: f64) -> Result<Array2<f32>> {
    if !(1.0..=DOWNSCALE_MAX).contains(&factor) {
        return Err(Error::invalid(format!("downscale factor {factor} outside [1, 2]")));
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let (h, w) = img.dim();
    let ih = ((h as f64 / factor).round() as usize).max(1);
    let iw = ((w as f64 / factor).round() as usize).max(1);
    let small = bilinear_resize(img, ih, iw);
    Ok(bilinear_resize(&small, h, w).mapv(|v| v.clamp(0.0, 1.0)))
}

/// Draw `n` one-px-wide lines with uniform endpoints and gray level.
pub fn random_lines(img: &Array2<f32>, n: u32, rng: &mut ChaCha8Rng) -> Result<Array2<f32>> {
    if n > LINE_COUNT_MAX {
        return Err(Error::invalid("line count above 2"));
    }
    let (h, w) = img.dim();
    let mut out = img.clone();
    for _ in 0..n {
        let x0 = rng.random_range(0..w) as isize;
        let y0 = rng.random_range(0..h) as isize;
        let x1 = rng.random_range(0..w) as isize;
        let y1 = rng.random_range(0..h) as isize;
        let level = rng.random_range(0.0..1.0f32);
        // Bresenham
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let (mut x, mut y) = (x0, y0);
        let mut err = dx + dy;
        loop {
            out[(y as usize, x as usize)] = level;
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
    Ok(out)
}

/// `x -> clamp(alpha (x - mean) + mean)` with the image's own mean.
pub fn contrast_with(img: &Array2<f32>, alpha: f64) -> Array2<f32> {
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
    let m = mean as f32;
    let a = alpha as f32;
    img.mapv(|v| (a * (v - m) + m).clamp(0.0, 1.0))
}

/// Contrast change with alpha drawn uniformly from [0.5, 1.5].
pub fn contrast(img: &Array2<f32>, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let alpha = rng.random_range(0.5..=1.5f64);
    contrast_with(img, alpha)
}

/// Apply the composed transform set in a fixed order (noise, blur, cutout,
/// downscale, lines, contrast). Deterministic given the rng state; the
/// all-identity spec returns the input bit-exactly.
pub fn apply_random(img: &Array2<f32>, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Array2<f32> {
    debug_assert!(spec.validate().is_ok());
    let mut out = img.clone();
    let p = spec.transform_prob;

    if rng.random_range(0.0..1.0) < p {
        let sigma = rng.random_range(spec.noise_sigma_range.0..=spec.noise_sigma_range.1);
        if sigma > 0.0 {
            out = gaussian_noise(&out, sigma, rng).expect("validated range");
        }
    }
    if rng.random_range(0.0..1.0) < p {
        let sigma = rng.random_range(spec.blur_sigma_range.0..=spec.blur_sigma_range.1);
        if sigma > 0.0 {
            out = gaussian_blur(&out, sigma).expect("validated range");
        }
    }
    if rng.random_range(0.0..1.0) < p {
        let ch = rng.random_range(spec.cutout_size_range.0..=spec.cutout_size_range.1);
        let cw = rng.random_range(spec.cutout_size_range.0..=spec.cutout_size_range.1);
        if ch > 0 && cw > 0 {
            out = cutout(&out, ch, cw, rng).expect("validated range");
        }
    }
    if rng.random_range(0.0..1.0) < p {
        let f = rng.random_range(spec.downscale_range.0..=spec.downscale_range.1);
        if f > 1.0 {
            out = downscale(&out, f).expect("validated range");
        }
    }
    if rng.random_range(0.0..1.0) < p {
        let n = rng.random_range(0..=spec.line_count_max);
        if n > 0 {
            out = random_lines(&out, n, rng).expect("validated range");
        }
    }
    if spec.contrast_enabled && rng.random_range(0.0..1.0) < p {
        out = contrast(&out, rng);
    }
    out
}
