//! Procedural synthetic eye-region data: scene sampling, rendering,
//! landmark rasterization, and dataset packing.

pub mod dataset;
pub mod raster;
pub mod render;

pub use dataset::{generate_dataset, DatasetSpec};
pub use raster::{landmarks_to_masks, LandmarkSet, MaskPair, RasterizedMasks};
pub use render::render_eye;

use crate::error::{Error, Result};
use crate::geometry::GazeAngles;
use crate::rng::rng_for;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Gaze sampling range: pitch +-25 deg, yaw +-35 deg, chosen to keep the
/// iris visible inside the eyelid opening.
pub const PITCH_RANGE_RAD: f64 = 25.0 * std::f64::consts::PI / 180.0;
pub const YAW_RANGE_RAD: f64 = 35.0 * std::f64::consts::PI / 180.0;

/// Everything that determines one rendered eye.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeSceneParams {
    pub gaze: GazeAngles,
    /// Fraction of the eyeball height left visible by the eyelids, (0, 1].
    pub eyelid_aperture: f64,
    pub eyeball_radius_px: f64,
    pub iris_radius_px: f64,
    pub pupil_radius_px: f64,
    pub sclera_shade: f64,
    pub iris_shade: f64,
    pub skin_shade: f64,
    pub noise_seed: u64,
}

impl EyeSceneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pupil_radius_px > 0.0
            && self.pupil_radius_px < self.iris_radius_px
            && self.iris_radius_px < self.eyeball_radius_px)
        {
            return Err(Error::invalid(
                "radii must satisfy 0 < pupil < iris < eyeball",
            ));
        }
        if !(self.eyelid_aperture > 0.0 && self.eyelid_aperture <= 1.0) {
            return Err(Error::invalid("eyelid aperture outside (0, 1]"));
        }
        for (name, v) in [
            ("sclera", self.sclera_shade),
            ("iris", self.iris_shade),
            ("skin", self.skin_shade),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} shade {v} outside [0, 1]")));
            }
        }
        if self.gaze.pitch.abs() > PITCH_RANGE_RAD + 1e-12
            || self.gaze.yaw.abs() > YAW_RANGE_RAD + 1e-12
        {
            return Err(Error::invalid("gaze outside the sampling range"));
        }
        Ok(())
    }
}

/// Draw scene parameters; deterministic in the seed.
pub fn sample_scene(rng_seed: u64) -> EyeSceneParams {
    let mut rng = rng_for(rng_seed, "scene-params", 0);
    let pitch = rng.random_range(-PITCH_RANGE_RAD..=PITCH_RANGE_RAD);
    let yaw = rng.random_range(-YAW_RANGE_RAD..=YAW_RANGE_RAD);
    let eyeball = rng.random_range(11.0..=15.0);
    let iris = eyeball * rng.random_range(0.38..=0.48);
    let pupil = iris * rng.random_range(0.35..=0.50);
    EyeSceneParams {
        gaze: GazeAngles::new(pitch, yaw).expect("sampled in range"),
        eyelid_aperture: rng.random_range(0.55..=1.0),
        eyeball_radius_px: eyeball,
        iris_radius_px: iris,
        pupil_radius_px: pupil,
        sclera_shade: rng.random_range(0.75..=0.95),
        iris_shade: rng.random_range(0.05..=0.35),
        skin_shade: rng.random_range(0.40..=0.75),
        noise_seed: rng.random(),
    }
}
