//! Landmark rasterization: eyelid-polygon interior and iris disk.
//!
//! Rule: a pixel belongs to a region iff its center is inside; points
//! exactly on the boundary count as inside. The implementation is a
//! scanline fill; tests compare it against a per-pixel brute-force
//! point-in-region check.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Eyelid polygon (closed, implicit last-to-first edge) plus iris circle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub eyelid_polygon: Vec<(f64, f64)>,
    pub iris_center: (f64, f64),
    pub iris_radius: f64,
}

impl LandmarkSet {
    /// Structural checks: point count, proper self-intersections, radius.
    /// Bounds of the iris center are checked against the target image size
    /// in [`landmarks_to_masks`].
    pub fn validate(&self) -> Result<()> {
        if self.eyelid_polygon.len() < 8 {
            return Err(Error::invalid(format!(
                "eyelid polygon needs >= 8 points, got {}",
                self.eyelid_polygon.len()
            )));
        }
        if !self.iris_radius.is_finite() || self.iris_radius <= 0.0 {
            return Err(Error::invalid("iris radius must be positive"));
        }
        if self.self_intersects() {
            return Err(Error::invalid("eyelid polygon self-intersects"));
        }
        Ok(())
    }

    /// O(n^2) proper-crossing test between non-adjacent edges.
    fn self_intersects(&self) -> bool {
        let pts = &self.eyelid_polygon;
        let n = pts.len();
        let seg = |i: usize| (pts[i], pts[(i + 1) % n]);
        for i in 0..n {
            for j in i + 1..n {
                // skip adjacent edges (share a vertex)
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let (a, b) = seg(i);
                let (c, d) = seg(j);
                if proper_crossing(a, b, c, d) {
                    return true;
                }
            }
        }
        false
    }
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn proper_crossing(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let d1 = orient(a, b, c);
    let d2 = orient(a, b, d);
    let d3 = orient(c, d, a);
    let d4 = orient(c, d, b);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

/// Shoelace area (absolute).
pub fn polygon_area(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = pts[i];
        let (x1, y1) = pts[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() * 0.5
}

/// Two aligned single-channel binary maps; `iris <= eyeball` pixelwise.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub eyeball: Array2<f32>,
    pub iris: Array2<f32>,
}

impl MaskPair {
    pub fn validate(&self) -> Result<()> {
        if self.eyeball.dim() != self.iris.dim() {
            return Err(Error::invalid("mask shapes differ"));
        }
        for (&e, &i) in self.eyeball.iter().zip(self.iris.iter()) {
            if !(e == 0.0 || e == 1.0) || !(i == 0.0 || i == 1.0) {
                return Err(Error::invalid("masks must be binary"));
            }
            if i > e {
                return Err(Error::invalid("iris mask escapes eyeball mask"));
            }
        }
        Ok(())
    }

    pub fn containment_holds(&self) -> bool {
        self.eyeball
            .iter()
            .zip(self.iris.iter())
            .all(|(&e, &i)| i <= e)
    }
}

/// Rasterization output; `degenerate` flags a zero-area polygon, for which
/// both masks are all-zero.
#[derive(Debug, Clone)]
pub struct RasterizedMasks {
    pub masks: MaskPair,
    pub degenerate: bool,
}

/// Per-row x-intersections of polygon edges with the horizontal line
/// `y = yc`, using the half-open rule `min(y) <= yc < max(y)`.
fn row_crossings(pts: &[(f64, f64)], yc: f64, xs: &mut Vec<f64>) {
    xs.clear();
    let n = pts.len();
    for i in 0..n {
        let (x0, y0) = pts[i];
        let (x1, y1) = pts[(i + 1) % n];
        if (y0 <= yc && yc < y1) || (y1 <= yc && yc < y0) {
            xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
        }
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
}

/// Rasterize the eyelid interior and the eyelid-clipped iris disk.
pub fn landmarks_to_masks(l: &LandmarkSet, h: usize, w: usize) -> Result<RasterizedMasks> {
    l.validate()?;
    let (icx, icy) = l.iris_center;
    if icx < 0.0 || icx >= w as f64 || icy < 0.0 || icy >= h as f64 {
        return Err(Error::invalid(format!(
            "iris center ({icx}, {icy}) outside {h}x{w} image"
        )));
    }
    let mut eyeball = Array2::<f32>::zeros((h, w));
    let mut iris = Array2::<f32>::zeros((h, w));
    let degenerate = polygon_area(&l.eyelid_polygon) < 1e-9;
    if degenerate {
        return Ok(RasterizedMasks {
            masks: MaskPair { eyeball, iris },
            degenerate: true,
        });
    }
    let r2 = l.iris_radius * l.iris_radius;
    let mut xs: Vec<f64> = Vec::with_capacity(8);
    for y in 0..h {
        let yc = y as f64 + 0.5;
        row_crossings(&l.eyelid_polygon, yc, &mut xs);
        let mut i = 0;
        while i + 1 < xs.len() {
            let (xa, xb) = (xs[i], xs[i + 1]);
            // pixel centers in [xa, xb], boundary ties inside
            let lo = (xa - 0.5).ceil().max(0.0) as usize;
            let hi = (xb - 0.5).floor().min(w as f64 - 1.0);
            if hi >= 0.0 {
                for x in lo..=hi as usize {
                    eyeball[(y, x)] = 1.0;
                    let dx = x as f64 + 0.5 - icx;
                    let dy = yc - icy;
                    if dx * dx + dy * dy <= r2 {
                        iris[(y, x)] = 1.0;
                    }
                }
            }
            i += 2;
        }
    }
    Ok(RasterizedMasks {
        masks: MaskPair { eyeball, iris },
        degenerate: false,
    })
}
