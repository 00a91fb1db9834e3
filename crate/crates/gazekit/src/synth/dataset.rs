//! Synthetic dataset packing: render N samples, write PNGs and a
//! JSON-lines manifest.

use super::{render_eye, sample_scene, EyeSceneParams};
use crate::datapipe::{write_manifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::pngio;
use crate::rng::{derive_master, rng_for};
use rand::Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Synthetic subjects; sample i belongs to subject `i % subjects`.
    pub subjects: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            count: 60_000,
            seed: 0,
            height: 36,
            width: 60,
            subjects: 10,
        }
    }
}

/// Per-subject appearance nudges so folds split over visually distinct
/// "people" rather than interchangeable draws.
fn apply_subject_style(mut p: EyeSceneParams, seed: u64, subject: usize) -> EyeSceneParams {
    let mut rng = rng_for(seed, "subject-style", subject as u64);
    let radius_shift: f64 = rng.random_range(-1.2..=1.2);
    let skin_shift: f64 = rng.random_range(-0.08..=0.08);
    let sclera_shift: f64 = rng.random_range(-0.04..=0.04);
    let iris_shift: f64 = rng.random_range(-0.05..=0.05);
    p.eyeball_radius_px = (p.eyeball_radius_px + radius_shift).clamp(10.0, 16.0);
    p.iris_radius_px = p.iris_radius_px.min(p.eyeball_radius_px * 0.5);
    p.skin_shade = (p.skin_shade + skin_shift).clamp(0.0, 1.0);
    p.sclera_shade = (p.sclera_shade + sclera_shift).clamp(0.5, 1.0);
    p.iris_shade = (p.iris_shade + iris_shift).clamp(0.0, 0.45);
    p
}

/// Render `spec.count` samples into `out_dir` and return the manifest path.
/// Deterministic in the seed; reruns produce byte-identical output.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<PathBuf> {
    if spec.subjects == 0 {
        return Err(Error::invalid("subjects must be >= 1"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<Result<ManifestRecord>> = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let subject = i % spec.subjects;
            let scene_seed = derive_master(spec.seed, "sample-scene", i as u64);
            let params = apply_subject_style(sample_scene(scene_seed), spec.seed, subject);
            params.validate()?;
            let (img, landmarks) = render_eye(&params, spec.height, spec.width)?;
            let rast = super::landmarks_to_masks(&landmarks, spec.height, spec.width)?;
            let image = format!("img_{i:06}.png");
            let eyeball = format!("eyeball_{i:06}.png");
            let iris = format!("iris_{i:06}.png");
            pngio::save_gray(&out_dir.join(&image), &img)?;
            pngio::save_mask(&out_dir.join(&eyeball), &rast.masks.eyeball)?;
            pngio::save_mask(&out_dir.join(&iris), &rast.masks.iris)?;
            Ok(ManifestRecord {
                image,
                eyeball_mask: Some(eyeball),
                iris_mask: Some(iris),
                pitch_rad: Some(params.gaze.pitch),
                yaw_rad: Some(params.gaze.yaw),
                subject_id: format!("s{subject:02}"),
                extra: serde_json::Map::new(),
            })
        })
        .collect();
    let mut records = Vec::with_capacity(spec.count);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                return Err(Error::Training(format!(
                    "dataset generation aborted at sample {i} after {} complete samples: {e}",
                    records.len()
                )))
            }
        }
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
