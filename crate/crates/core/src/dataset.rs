//! Paired small/large renders for outpainter training.
//!
//! Each pair is a single large-FOV render plus its exact central crop. Images are
//! quantized to 8 bits as soon as they are produced so that what is trained on, what is
//! written to disk and what is read back are the same values.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NeoError, Result};
use crate::field::{RenderConfig, VoxelRadianceField};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::ImageBuffer;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAIRS_DIR: &str = "pairs";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub small: ImageBuffer,
    pub large: ImageBuffer,
    pub pose: Pose,
    pub blur_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    /// Relative to the dataset directory.
    pub small_path: String,
    pub large_path: String,
    pub pose: Pose,
    pub blur_score: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub small_intrinsics: CameraIntrinsics,
    pub large_intrinsics: CameraIntrinsics,
    pub config_hash: String,
    pub seed: u64,
    pub records: Vec<PairRecord>,
}

impl DatasetManifest {
    pub fn kept(&self) -> impl Iterator<Item = &PairRecord> {
        self.records.iter().filter(|r| r.kept)
    }

    pub fn kept_count(&self) -> usize {
        self.kept().count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(NeoError::Dataset {
                pair: "-".into(),
                message: format!("unsupported manifest version {}", self.version),
            });
        }
        self.large_intrinsics.center_offset(&self.small_intrinsics)?;
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(NeoError::Dataset {
                    pair: r.id.clone(),
                    message: "duplicate pair id".into(),
                });
            }
            if !(r.blur_score >= 0.0 && r.blur_score.is_finite()) {
                return Err(NeoError::Dataset {
                    pair: r.id.clone(),
                    message: format!("invalid blur score {}", r.blur_score),
                });
            }
        }
        Ok(())
    }
}

/// A manifest together with its images, aligned with `manifest.records`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<TrainingPair>,
}

pub fn pair_id(index: usize) -> String {
    format!("{index:06}")
}

impl Dataset {
    /// Wrap already-built pairs; every pair starts out kept.
    pub fn from_pairs(
        pairs: Vec<TrainingPair>,
        small_intr: CameraIntrinsics,
        large_intr: CameraIntrinsics,
        config_hash: String,
        seed: u64,
    ) -> Result<Self> {
        large_intr.center_offset(&small_intr)?;
        for (i, p) in pairs.iter().enumerate() {
            if p.small.dims() != (small_intr.width, small_intr.height)
                || p.large.dims() != (large_intr.width, large_intr.height)
            {
                return Err(NeoError::Dataset {
                    pair: pair_id(i),
                    message: "image dimensions do not match intrinsics".into(),
                });
            }
        }
        let records = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let id = pair_id(i);
                PairRecord {
                    small_path: format!("{PAIRS_DIR}/{id}_small.png"),
                    large_path: format!("{PAIRS_DIR}/{id}_large.png"),
                    id,
                    pose: p.pose,
                    blur_score: p.blur_score,
                    kept: true,
                }
            })
            .collect();
        Ok(Dataset {
            manifest: DatasetManifest {
                version: MANIFEST_VERSION,
                small_intrinsics: small_intr,
                large_intrinsics: large_intr,
                config_hash,
                seed,
                records,
            },
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs whose record is flagged kept.
    pub fn kept_pairs(&self) -> Vec<&TrainingPair> {
        self.manifest
            .records
            .iter()
            .zip(&self.pairs)
            .filter(|(r, _)| r.kept)
            .map(|(_, p)| p)
            .collect()
    }
}

/// Build a pair from one large image: the small image is its central crop.
pub fn make_pair(large: ImageBuffer, small_intr: &CameraIntrinsics, pose: Pose) -> Result<TrainingPair> {
    let large = large.quantized();
    let small = large.center_crop(small_intr.width, small_intr.height)?;
    let blur_score = blur_score(&large)?;
    Ok(TrainingPair {
        small,
        large,
        pose,
        blur_score,
    })
}

/// Render one large view per pose and crop the small view out of it.
pub fn generate_pairs(
    field: &VoxelRadianceField,
    poses: &[Pose],
    small_intr: &CameraIntrinsics,
    large_intr: &CameraIntrinsics,
    render: &RenderConfig,
    config_hash: &str,
    seed: u64,
) -> Result<Dataset> {
    small_intr.validate()?;
    large_intr.validate()?;
    large_intr.center_offset(small_intr)?;
    render.validate()?;
    let pairs = poses
        .par_iter()
        .map(|pose| make_pair(field.render_view(pose, large_intr, render), small_intr, *pose))
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_pairs(pairs, *small_intr, *large_intr, config_hash.to_string(), seed)
}

/// Variance of the 4-neighbour Laplacian of the luma over interior pixels.
pub fn blur_score(img: &ImageBuffer) -> Result<f64> {
    let (w, h) = img.dims();
    if w < 3 || h < 3 {
        return Err(NeoError::InvalidArgument(format!(
            "blur score needs at least 3x3 pixels, got {w}x{h}"
        )));
    }
    let l = img.luma();
    let n = ((w - 2) * (h - 2)) as f64;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let r = l[i - 1] + l[i + 1] + l[i - w] + l[i + w] - 4.0 * l[i];
            sum += r;
            sum2 += r * r;
        }
    }
    let mean = sum / n;
    Ok((sum2 / n - mean * mean).max(0.0))
}

/// Flag records kept iff their blur score reaches `threshold`. Records are never removed.
pub fn filter_blurry(manifest: &mut DatasetManifest, threshold: f64) -> Result<()> {
    if !(threshold >= 0.0) {
        return Err(NeoError::InvalidArgument(format!(
            "blur threshold must be non-negative, got {threshold}"
        )));
    }
    for r in &mut manifest.records {
        r.kept = r.blur_score >= threshold;
    }
    Ok(())
}

/// Linear-interpolated percentile, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return Err(NeoError::InvalidArgument("percentile of empty set or q outside [0, 100]".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BlurPolicy {
    Disabled,
    Fixed { threshold: f64 },
    /// Percentile of the blur scores of renders at the training poses.
    TrainingPercentile { percentile: f64 },
}

impl Default for BlurPolicy {
    fn default() -> Self {
        BlurPolicy::TrainingPercentile { percentile: 20.0 }
    }
}

impl BlurPolicy {
    pub fn threshold(&self, training_scores: &[f64]) -> Result<f64> {
        match *self {
            BlurPolicy::Disabled => Ok(0.0),
            BlurPolicy::Fixed { threshold } => Ok(threshold),
            BlurPolicy::TrainingPercentile { percentile: q } => percentile(training_scores, q),
        }
    }
}

fn dataset_err(pair: &str, message: impl Into<String>) -> NeoError {
    NeoError::Dataset {
        pair: pair.to_string(),
        message: message.into(),
    }
}

/// Write all images and `manifest.json` under `dir`.
pub fn persist(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.manifest.validate()?;
    if dataset.pairs.len() != dataset.manifest.records.len() {
        return Err(NeoError::InvalidArgument("records and images out of step".into()));
    }
    let pairs_dir = dir.join(PAIRS_DIR);
    fs::create_dir_all(&pairs_dir).map_err(|e| NeoError::io(&pairs_dir, e))?;
    dataset
        .manifest
        .records
        .par_iter()
        .zip(&dataset.pairs)
        .try_for_each(|(r, p)| -> Result<()> {
            p.small.save_png(&dir.join(&r.small_path))?;
            p.large.save_png(&dir.join(&r.large_path))
        })?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| NeoError::json(&path, e))?;
    fs::write(&path, json).map_err(|e| NeoError::io(&path, e))
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| NeoError::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| NeoError::json(&path, e))?;
    m.validate()?;
    Ok(m)
}

fn load_checked(dir: &Path, rel: &str, id: &str, intr: &CameraIntrinsics) -> Result<ImageBuffer> {
    let path: PathBuf = dir.join(rel);
    if !path.exists() {
        return Err(dataset_err(id, format!("missing file {}", path.display())));
    }
    let img = ImageBuffer::load_png(&path).map_err(|e| dataset_err(id, e.to_string()))?;
    if img.dims() != (intr.width, intr.height) {
        return Err(dataset_err(
            id,
            format!(
                "{} is {}x{}, expected {}x{}",
                path.display(),
                img.width(),
                img.height(),
                intr.width,
                intr.height
            ),
        ));
    }
    Ok(img)
}

/// Load the manifest and every image it lists.
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let pairs = manifest
        .records
        .par_iter()
        .map(|r| {
            let small = load_checked(dir, &r.small_path, &r.id, &manifest.small_intrinsics)?;
            let large = load_checked(dir, &r.large_path, &r.id, &manifest.large_intrinsics)?;
            Ok(TrainingPair {
                small,
                large,
                pose: r.pose,
                blur_score: r.blur_score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, pairs })
}
