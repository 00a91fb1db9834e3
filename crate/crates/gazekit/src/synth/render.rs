//! Procedural eye-region renderer.
//!
//! Layered 2D model: skin outside the eyelid opening, sclera inside, iris
//! and pupil disks displaced by gaze, plus value-noise texture. The iris
//! center offset from the eyeball center is
//! `eyeball_radius * (sin(yaw) cos(pitch), -sin(pitch))` with image y
//! pointing down, so gaze is recoverable from the landmarks exactly.

use super::raster::{landmarks_to_masks, LandmarkSet};
use super::EyeSceneParams;
use crate::error::{Error, Result};
use ndarray::Array2;

pub const EYELID_POINTS: usize = 64;

fn hash01(ix: i64, iy: i64, seed: u64) -> f32 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 40) as f32 / (1u64 << 24) as f32
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Two-octave value noise in [-1, 1].
fn value_noise(x: f64, y: f64, seed: u64) -> f32 {
    let mut total = 0.0f32;
    let mut amp = 0.67f32;
    for (octave, freq) in [0.18f64, 0.45].iter().enumerate() {
        let fx = x * freq;
        let fy = y * freq;
        let ix = fx.floor() as i64;
        let iy = fy.floor() as i64;
        let tx = smooth((fx - ix as f64) as f32);
        let ty = smooth((fy - iy as f64) as f32);
        let s = seed.wrapping_add(octave as u64);
        let v00 = hash01(ix, iy, s);
        let v10 = hash01(ix + 1, iy, s);
        let v01 = hash01(ix, iy + 1, s);
        let v11 = hash01(ix + 1, iy + 1, s);
        let v = v00 * (1.0 - tx) * (1.0 - ty)
            + v10 * tx * (1.0 - ty)
            + v01 * (1.0 - tx) * ty
            + v11 * tx * ty;
        total += amp * (2.0 * v - 1.0);
        amp *= 0.5;
    }
    total
}

/// Eyelid opening as an ellipse around the eyeball: full circle at
/// aperture 1, squeezed vertically otherwise.
pub fn eyelid_polygon(p: &EyeSceneParams, cx: f64, cy: f64) -> Vec<(f64, f64)> {
    let r = p.eyeball_radius_px;
    (0..EYELID_POINTS)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / EYELID_POINTS as f64;
            (cx + r * t.cos(), cy + p.eyelid_aperture * r * t.sin())
        })
        .collect()
}

/// Iris center from gaze and eyeball geometry.
pub fn iris_center(p: &EyeSceneParams, cx: f64, cy: f64) -> (f64, f64) {
    let (theta, phi) = (p.gaze.pitch, p.gaze.yaw);
    (
        cx + p.eyeball_radius_px * phi.sin() * theta.cos(),
        cy - p.eyeball_radius_px * theta.sin(),
    )
}

/// Render one eye image with its landmarks.
pub fn render_eye(p: &EyeSceneParams, h: usize, w: usize) -> Result<(Array2<f32>, LandmarkSet)> {
    if h < 16 || w < 16 {
        return Err(Error::invalid(format!("image {h}x{w} below 16x16 minimum")));
    }
    p.validate()?;
    let cx = w as f64 / 2.0;
    let cy = h as f64 / 2.0;
    let landmarks = LandmarkSet {
        eyelid_polygon: eyelid_polygon(p, cx, cy),
        iris_center: iris_center(p, cx, cy),
        iris_radius: p.iris_radius_px,
    };
    // Paint on top of the rasterized regions so image and masks agree.
    let regions = landmarks_to_masks(&landmarks, h, w)?;
    let (icx, icy) = landmarks.iris_center;
    let iris_r2 = p.iris_radius_px * p.iris_radius_px;
    let pupil_r2 = p.pupil_radius_px * p.pupil_radius_px;
    let pupil_shade = p.iris_shade * 0.3;
    let img = Array2::from_shape_fn((h, w), |(y, x)| {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;
        let inside = regions.masks.eyeball[(y, x)] == 1.0;
        let base: f64 = if inside {
            let dx = px - icx;
            let dy = py - icy;
            let d2 = dx * dx + dy * dy;
            if d2 <= pupil_r2 {
                pupil_shade
            } else if d2 <= iris_r2 {
                // slight radial lightening toward the iris rim
                p.iris_shade * (0.85 + 0.3 * d2 / iris_r2)
            } else {
                // sclera darkens toward the eye corners
                let corner = ((px - cx).abs() / p.eyeball_radius_px).min(1.0);
                p.sclera_shade * (1.0 - 0.18 * corner * corner)
            }
        } else {
            // skin with a soft vertical gradient
            p.skin_shade * (1.0 - 0.1 * (py - cy).abs() / h as f64)
        };
        let n = value_noise(px, py, p.noise_seed) as f64 * 0.035;
        ((base + n).clamp(0.0, 1.0)) as f32
    });
    Ok((img, landmarks))
}
