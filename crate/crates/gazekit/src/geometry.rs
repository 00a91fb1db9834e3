//! Gaze representations and the angular-error metric.
//!
//! Convention: gaze `(0, 0)` looks straight into the camera along `-z`;
//! pitch is vertical (positive up), yaw horizontal. Angles are radians
//! everywhere inside the library; degrees appear only in reports.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Pitch/yaw gaze direction in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeAngles {
    pub pitch: f64,
    pub yaw: f64,
}

impl GazeAngles {
    /// Validates finiteness and range: pitch in [-pi/2, pi/2], yaw in (-pi, pi].
    pub fn new(pitch: f64, yaw: f64) -> Result<Self> {
        if !pitch.is_finite() || !yaw.is_finite() {
            return Err(Error::invalid("gaze angles must be finite"));
        }
        if !(-std::f64::consts::FRAC_PI_2..=std::f64::consts::FRAC_PI_2).contains(&pitch) {
            return Err(Error::invalid(format!(
                "pitch {pitch} outside [-pi/2, pi/2]"
            )));
        }
        if yaw <= -std::f64::consts::PI || yaw > std::f64::consts::PI {
            return Err(Error::invalid(format!("yaw {yaw} outside (-pi, pi]")));
        }
        Ok(GazeAngles { pitch, yaw })
    }

    pub fn to_vector(self) -> GazeVector {
        let [x, y, z] = direction(self.pitch, self.yaw);
        GazeVector { x, y, z }
    }
}

/// Unit 3D gaze direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl GazeVector {
    /// Validates unit norm within 1e-9.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("not a unit vector (norm {n})")));
        }
        Ok(GazeVector { x, y, z })
    }

    /// Normalizes an arbitrary nonzero vector.
    pub fn normalized(x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::invalid("cannot normalize zero or non-finite vector"));
        }
        Ok(GazeVector {
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Raw direction formula; total over all finite angles.
#[inline]
pub fn direction(pitch: f64, yaw: f64) -> [f64; 3] {
    [
        -pitch.cos() * yaw.sin(),
        -pitch.sin(),
        -pitch.cos() * yaw.cos(),
    ]
}

/// Pitch/yaw -> unit direction: `(-cos p * sin y, -sin p, -cos p * cos y)`.
pub fn angles_to_vector(a: GazeAngles) -> GazeVector {
    a.to_vector()
}

/// Unit direction -> pitch/yaw: `pitch = -asin(y)`, `yaw = atan2(-x, -z)`.
///
/// Errors on vectors that are not unit within 1e-6.
pub fn vector_to_angles(v: &GazeVector) -> Result<GazeAngles> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::invalid("zero vector has no gaze direction"));
    }
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "vector norm {n} not unit within 1e-6"
        )));
    }
    let pitch = (-v.y).asin();
    let mut yaw = (-v.x).atan2(-v.z);
    if yaw <= -std::f64::consts::PI {
        yaw = std::f64::consts::PI;
    }
    GazeAngles::new(pitch, yaw)
}

/// Angle between two gaze directions, in degrees.
///
/// The dot product is clamped to [-1, 1] before `acos`, so numerically
/// slightly-off-unit inputs never produce NaN.
pub fn angular_error(a: GazeAngles, b: GazeAngles) -> f64 {
    angular_error_raw(a.pitch, a.yaw, b.pitch, b.yaw)
}

/// Same metric on raw pitch/yaw pairs (e.g. unclamped network output).
///
/// Evaluated as `atan2(|u x v|, u . v)`, the stable form of the clamped
/// arccos: identical inputs give exactly 0 and the result is exactly
/// symmetric, while agreeing with the arccos form to well below 1e-9 deg
/// away from the degenerate endpoints.
pub fn angular_error_raw(pitch_a: f64, yaw_a: f64, pitch_b: f64, yaw_b: f64) -> f64 {
    let u = direction(pitch_a, yaw_a);
    let v = direction(pitch_b, yaw_b);
    let dot = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]).clamp(-1.0, 1.0);
    let cx = u[1] * v[2] - u[2] * v[1];
    let cy = u[2] * v[0] - u[0] * v[2];
    let cz = u[0] * v[1] - u[1] * v[0];
    let cross = (cx * cx + cy * cy + cz * cz).sqrt();
    cross.atan2(dot).to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn forward_anchor_cases() {
        let v = angles_to_vector(GazeAngles::new(0.0, 0.0).unwrap());
        assert_eq!((v.x, v.y, v.z), (0.0, 0.0, -1.0));
        let v = angles_to_vector(GazeAngles::new(0.0, FRAC_PI_2).unwrap());
        assert_abs_diff_eq!(v.x, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.z, 0.0, epsilon = 1e-15);
    }

    // Frozen from a 30-digit evaluation of the trig formula at (0.1, 0.2).
    #[test]
    fn forward_matches_high_precision_oracle() {
        let v = angles_to_vector(GazeAngles::new(0.1, 0.2).unwrap());
        assert_abs_diff_eq!(v.x, -0.19767681165408386371, epsilon = 1e-15);
        assert_abs_diff_eq!(v.y, -0.099833416646828152307, epsilon = 1e-15);
        assert_abs_diff_eq!(v.z, -0.97517032720181589287, epsilon = 1e-15);
        assert_abs_diff_eq!(v.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn inverse_anchor_cases() {
        let a = vector_to_angles(&GazeVector::new(0.0, 0.0, -1.0).unwrap()).unwrap();
        assert_eq!((a.pitch, a.yaw), (0.0, 0.0));
        let a = vector_to_angles(&GazeVector::new(-1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(a.pitch, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.yaw, FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn zero_vector_rejected() {
        assert!(GazeVector::normalized(0.0, 0.0, 0.0).is_err());
        let bad = GazeVector {
            x: 0.0,
            y: 0.0,
            z: 0.0,
        };
        assert!(vector_to_angles(&bad).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(GazeAngles::new(f64::NAN, 0.0).is_err());
        assert!(GazeAngles::new(0.0, f64::INFINITY).is_err());
        assert!(GazeAngles::new(2.0, 0.0).is_err());
    }

    #[test]
    fn angular_error_anchors() {
        let a = GazeAngles::new(0.3, -0.4).unwrap();
        assert_eq!(angular_error(a, a), 0.0);
        let o = GazeAngles::new(0.0, 0.0).unwrap();
        let r = GazeAngles::new(0.0, FRAC_PI_2).unwrap();
        assert_abs_diff_eq!(angular_error(o, r), 90.0, epsilon = 1e-9);
    }

    // Frozen from a 30-digit dot-product/acos evaluation.
    #[test]
    fn angular_error_matches_high_precision_oracle() {
        let o = GazeAngles::new(0.0, 0.0).unwrap();
        let b = GazeAngles::new(0.1, 0.2).unwrap();
        assert_abs_diff_eq!(angular_error(o, b), 12.794574962566410005, epsilon = 1e-12);
    }

    #[test]
    fn clamp_prevents_nan_for_antiparallel() {
        let a = GazeAngles::new(0.0, 0.0).unwrap();
        let b = GazeAngles::new(0.0, std::f64::consts::PI).unwrap();
        let e = angular_error(a, b);
        assert!(e.is_finite());
        assert_abs_diff_eq!(e, 180.0, epsilon = 1e-9);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_identity(
                x in -1.0f64..1.0,
                y in -1.0f64..1.0,
                z in -1.0f64..0.0,
            ) {
                prop_assume!(x * x + y * y + z * z > 1e-6);
                let v = GazeVector::normalized(x, y, z).unwrap();
                let a = vector_to_angles(&v).unwrap();
                let w = angles_to_vector(a);
                prop_assert!((w.x - v.x).abs() < 1e-6);
                prop_assert!((w.y - v.y).abs() < 1e-6);
                prop_assert!((w.z - v.z).abs() < 1e-6);
            }

            #[test]
            fn error_symmetric_and_zero_on_self(
                p1 in -1.5f64..1.5,
                y1 in -3.1f64..3.1,
                p2 in -1.5f64..1.5,
                y2 in -3.1f64..3.1,
            ) {
                let a = GazeAngles::new(p1, y1).unwrap();
                let b = GazeAngles::new(p2, y2).unwrap();
                let ab = angular_error(a, b);
                let ba = angular_error(b, a);
                prop_assert!((ab - ba).abs() < 1e-9);
                prop_assert!(angular_error(a, a) < 1e-9);
                prop_assert!((0.0..=180.0).contains(&ab));
            }
        }
    }
}
