//! Dataset ingestion: JSON-lines manifests, preprocessing to the fixed
//! 36x60 grayscale input format, subject-aware split plans, and label
//! subsampling for the ablation runs.

use crate::augment::bilinear_resize;
use crate::error::{Error, Result};
use crate::geometry::GazeAngles;
use crate::pngio;
use crate::rng::rng_for;
use crate::synth::MaskPair;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

pub const INPUT_H: usize = 36;
pub const INPUT_W: usize = 60;

/// One JSON-lines manifest record. Paths are relative to the manifest's
/// directory. Unknown fields are preserved on rewrite.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eyeball_mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iris_mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pitch_rad: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub yaw_rad: Option<f64>,
    pub subject_id: String,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Lazily-loadable sample: manifest record plus its base directory.
#[derive(Debug, Clone)]
pub struct SampleDescriptor {
    pub record: ManifestRecord,
    pub base_dir: PathBuf,
    /// 1-based line number in the source manifest.
    pub line: usize,
}

/// Fully loaded and preprocessed sample.
#[derive(Debug, Clone)]
pub struct EyeSample {
    pub image: Array2<f32>,
    pub masks: Option<MaskPair>,
    pub gaze: Option<GazeAngles>,
    pub subject_id: String,
    pub source_path: PathBuf,
}

impl SampleDescriptor {
    pub fn image_path(&self) -> PathBuf {
        self.base_dir.join(&self.record.image)
    }

    pub fn gaze(&self) -> Option<GazeAngles> {
        match (self.record.pitch_rad, self.record.yaw_rad) {
            (Some(p), Some(y)) => GazeAngles::new(p, y).ok(),
            _ => None,
        }
    }

    /// Load and preprocess the image; load masks when present.
    pub fn load(&self) -> Result<EyeSample> {
        let path = self.image_path();
        let raw = pngio::load_raw(&path)?;
        let image = preprocess(&raw)?;
        let masks = match (&self.record.eyeball_mask, &self.record.iris_mask) {
            (Some(e), Some(i)) => {
                let eyeball = pngio::load_mask(&self.base_dir.join(e))?;
                let iris = pngio::load_mask(&self.base_dir.join(i))?;
                if eyeball.dim() != image.dim() || iris.dim() != image.dim() {
                    return Err(Error::invalid(format!(
                        "mask shape mismatch for {}",
                        self.record.image
                    )));
                }
                Some(MaskPair { eyeball, iris })
            }
            (None, None) => None,
            _ => {
                return Err(Error::invalid(format!(
                    "{}: both masks or neither must be present",
                    self.record.image
                )))
            }
        };
        Ok(EyeSample {
            image,
            masks,
            gaze: self.gaze(),
            subject_id: self.record.subject_id.clone(),
            source_path: path,
        })
    }
}

/// Grayscale (0.299, 0.587, 0.114), bilinear resize to 36x60, then 256-bin
/// histogram equalization. Output values in [0,1].
pub fn preprocess(raw: &Array3<f32>) -> Result<Array2<f32>> {
    let (c, h, w) = raw.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("empty image"));
    }
    if h < 8 || w < 8 {
        return Err(Error::invalid(format!("image {h}x{w} below 8x8 minimum")));
    }
    let gray: Array2<f32> = match c {
        1 => raw.index_axis(ndarray::Axis(0), 0).to_owned(),
        3 => {
            let r = raw.index_axis(ndarray::Axis(0), 0);
            let g = raw.index_axis(ndarray::Axis(0), 1);
            let b = raw.index_axis(ndarray::Axis(0), 2);
            Array2::from_shape_fn((h, w), |(y, x)| {
                0.299 * r[(y, x)] + 0.587 * g[(y, x)] + 0.114 * b[(y, x)]
            })
        }
        other => {
            return Err(Error::invalid(format!(
                "unsupported channel count {other} (expected 1 or 3)"
            )))
        }
    };
    let resized = if gray.dim() == (INPUT_H, INPUT_W) {
        gray
    } else {
        bilinear_resize(&gray, INPUT_H, INPUT_W)
    };
    Ok(equalize_histogram(&resized))
}

/// 256-bin histogram equalization. The lowest occupied bin maps to 0 and
/// the mapping is monotone; a single-bin (constant) image is returned
/// unchanged.
pub fn equalize_histogram(img: &Array2<f32>) -> Array2<f32> {
    let mut hist = [0u64; 256];
    let bin_of = |v: f32| -> usize { ((v.clamp(0.0, 1.0) * 255.0).round() as usize).min(255) };
    for &v in img.iter() {
        hist[bin_of(v)] += 1;
    }
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    if occupied <= 1 {
        return img.clone();
    }
    let n: u64 = img.len() as u64;
    let mut cdf = [0u64; 256];
    let mut acc = 0u64;
    for (b, &c) in hist.iter().enumerate() {
        acc += c;
        cdf[b] = acc;
    }
    let cdf_min = hist.iter().find(|&&c| c > 0).copied().unwrap_or(0);
    let denom = (n - cdf_min) as f64;
    let mut lut = [0.0f32; 256];
    for b in 0..256 {
        lut[b] = (((cdf[b] - cdf_min.min(cdf[b])) as f64) / denom) as f32;
    }
    img.mapv(|v| lut[bin_of(v)])
}

/// Write records as JSON lines.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for r in records {
        serde_json::to_writer(&mut f, r)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse a JSON-lines manifest into descriptors. Schema errors name the
/// 1-based line; referenced files must exist.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleDescriptor>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut out = Vec::new();
    let mut missing: Vec<PathBuf> = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if record.subject_id.is_empty() {
            return Err(Error::ManifestParse {
                line: i + 1,
                msg: "empty subject_id".into(),
            });
        }
        if record.pitch_rad.is_some() != record.yaw_rad.is_some() {
            return Err(Error::ManifestParse {
                line: i + 1,
                msg: "pitch_rad and yaw_rad must appear together".into(),
            });
        }
        if record.eyeball_mask.is_some() != record.iris_mask.is_some() {
            return Err(Error::ManifestParse {
                line: i + 1,
                msg: "eyeball_mask and iris_mask must appear together".into(),
            });
        }
        for rel in [
            Some(&record.image),
            record.eyeball_mask.as_ref(),
            record.iris_mask.as_ref(),
        ]
        .into_iter()
        .flatten()
        {
            let p = base_dir.join(rel);
            if !p.exists() {
                missing.push(p);
            }
        }
        out.push(SampleDescriptor {
            record,
            base_dir: base_dir.clone(),
            line: i + 1,
        });
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(out)
}

/// Load many samples in parallel, preserving order.
pub fn load_samples(descs: &[SampleDescriptor]) -> Result<Vec<EyeSample>> {
    descs.par_iter().map(|d| d.load()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Loso,
    Kfold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train_subjects: BTreeSet<String>,
    pub test_subjects: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub protocol: Protocol,
    pub k: usize,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    /// Test sets are disjoint, partition the subject universe, and never
    /// overlap their own train set.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeSet<&String> = BTreeSet::new();
        let mut universe: BTreeSet<&String> = BTreeSet::new();
        for fold in &self.folds {
            for s in &fold.test_subjects {
                if !seen.insert(s) {
                    return Err(Error::invalid(format!("subject {s} tested twice")));
                }
                if fold.train_subjects.contains(s) {
                    return Err(Error::invalid(format!("subject {s} in train and test")));
                }
            }
            universe.extend(fold.train_subjects.iter());
            universe.extend(fold.test_subjects.iter());
        }
        if seen != universe {
            return Err(Error::invalid("test sets do not partition the subjects"));
        }
        Ok(())
    }
}

fn subject_universe(descs: &[SampleDescriptor]) -> Vec<String> {
    let set: BTreeSet<String> = descs.iter().map(|d| d.record.subject_id.clone()).collect();
    set.into_iter().collect()
}

/// Build a subject-level split plan.
///
/// LOSO: one fold per subject. KFOLD: subjects shuffled by seed, then cut
/// into k near-equal groups.
pub fn make_splits(
    descs: &[SampleDescriptor],
    protocol: Protocol,
    k: usize,
    seed: u64,
) -> Result<SplitPlan> {
    let subjects = subject_universe(descs);
    match protocol {
        Protocol::Loso => {
            if subjects.len() < 2 {
                return Err(Error::precondition(format!(
                    "LOSO needs >= 2 subjects, got {}",
                    subjects.len()
                )));
            }
            let all: BTreeSet<String> = subjects.iter().cloned().collect();
            let folds = subjects
                .iter()
                .map(|s| {
                    let mut train = all.clone();
                    train.remove(s);
                    Fold {
                        train_subjects: train,
                        test_subjects: BTreeSet::from([s.clone()]),
                    }
                })
                .collect();
            let plan = SplitPlan {
                protocol,
                k: subjects.len(),
                folds,
            };
            plan.validate()?;
            Ok(plan)
        }
        Protocol::Kfold => {
            if k < 2 {
                return Err(Error::precondition("k-fold needs k >= 2"));
            }
            if subjects.len() < k {
                return Err(Error::precondition(format!(
                    "k-fold needs >= {k} subjects, got {}",
                    subjects.len()
                )));
            }
            let mut shuffled = subjects.clone();
            let mut rng = rng_for(seed, "kfold-shuffle", 0);
            shuffled.shuffle(&mut rng);
            let n = shuffled.len();
            let base = n / k;
            let extra = n % k;
            let all: BTreeSet<String> = subjects.iter().cloned().collect();
            let mut folds = Vec::with_capacity(k);
            let mut at = 0usize;
            for fi in 0..k {
                let size = base + usize::from(fi < extra);
                let test: BTreeSet<String> = shuffled[at..at + size].iter().cloned().collect();
                at += size;
                let train: BTreeSet<String> = all.difference(&test).cloned().collect();
                folds.push(Fold {
                    train_subjects: train,
                    test_subjects: test,
                });
            }
            let plan = SplitPlan { protocol, k, folds };
            plan.validate()?;
            Ok(plan)
        }
    }
}

/// Select `ceil(fraction * N)` labeled samples, stratified by subject via
/// largest-remainder quotas. Returns sorted indices into `descs`.
pub fn subsample_labels(
    descs: &[SampleDescriptor],
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if descs.is_empty() {
        return Err(Error::precondition("cannot subsample an empty train set"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let target = (fraction * descs.len() as f64).ceil() as usize;
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in descs.iter().enumerate() {
        by_subject
            .entry(d.record.subject_id.as_str())
            .or_default()
            .push(i);
    }
    // largest-remainder quota per subject
    let mut quotas: Vec<(usize, usize, f64)> = Vec::new(); // (subject pos, base, remainder)
    let mut assigned = 0usize;
    for (pos, (_s, idxs)) in by_subject.iter().enumerate() {
        let exact = fraction * idxs.len() as f64;
        let base = (exact.floor() as usize).min(idxs.len());
        assigned += base;
        quotas.push((pos, base, exact - base as f64));
    }
    let mut leftover = target.saturating_sub(assigned);
    quotas.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut final_quota: BTreeMap<usize, usize> = quotas.iter().map(|&(p, b, _)| (p, b)).collect();
    for &(pos, base, _) in &quotas {
        if leftover == 0 {
            break;
        }
        let cap = by_subject.iter().nth(pos).unwrap().1.len();
        if base < cap {
            *final_quota.get_mut(&pos).unwrap() += 1;
            leftover -= 1;
        }
    }
    let mut selected = Vec::with_capacity(target);
    for (pos, (_s, idxs)) in by_subject.iter().enumerate() {
        let q = final_quota[&pos].min(idxs.len());
        let mut shuffled = idxs.clone();
        let mut rng = rng_for(seed, "label-subsample", pos as u64);
        shuffled.shuffle(&mut rng);
        selected.extend_from_slice(&shuffled[..q]);
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Preprocess with a PNG cache: `cache_dir/<n>.png` plus `index.jsonl`
/// mapping sources to cache entries.
pub fn preprocess_cached(desc: &SampleDescriptor, cache_dir: &Path) -> Result<Array2<f32>> {
    #[derive(Serialize, Deserialize)]
    struct CacheEntry {
        source: String,
        file: String,
    }
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let index_path = cache_dir.join("index.jsonl");
    let source = desc.image_path().to_string_lossy().into_owned();
    if index_path.exists() {
        let content =
            std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        for line in content.lines() {
            let entry: CacheEntry = serde_json::from_str(line)
                .map_err(|e| Error::io(&index_path, std::io::Error::other(e)))?;
            if entry.source == source {
                return pngio::load_gray(&cache_dir.join(entry.file));
            }
        }
    }
    let img = preprocess(&pngio::load_raw(&desc.image_path())?)?;
    let n = if index_path.exists() {
        std::fs::read_to_string(&index_path)
            .map_err(|e| Error::io(&index_path, e))?
            .lines()
            .count()
    } else {
        0
    };
    let file = format!("{n:08}.png");
    pngio::save_gray(&cache_dir.join(&file), &img)?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&index_path)
        .map_err(|e| Error::io(&index_path, e))?;
    let entry = CacheEntry { source, file };
    writeln!(f, "{}", serde_json::to_string(&entry).unwrap()).map_err(|e| Error::io(&index_path, e))?;
    // cached copy is 8-bit quantized
    pngio::load_gray(&cache_dir.join(format!("{n:08}.png")))
}
