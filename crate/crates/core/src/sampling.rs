//! Dense pose sampling: grid positions over the walkable area, a yaw sweep, free degrees
//! of freedom drawn from distributions fitted to the training poses, and an optional
//! planar coverage constraint.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NeoError, Result};
use crate::geometry::{Pose, Vec3};
use crate::scene::WalkableArea;
use crate::seeds::derive_seed_n;

/// Distribution of one degree of freedom. Angles are in degrees, lengths in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dof {
    /// Determined by the grid (x, y) or the yaw sweep.
    Free,
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, stddev: f64 },
}

/// Gaussian draws are clamped to this many standard deviations.
pub const GAUSSIAN_CLAMP: f64 = 4.0;

impl Dof {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Dof::Free => true,
            Dof::Fixed { value } => value.is_finite(),
            Dof::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            Dof::Gaussian { mean, stddev } => mean.is_finite() && stddev.is_finite() && stddev >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(NeoError::InvalidArgument(format!("invalid distribution {self:?}")))
        }
    }

    /// Draw a value; `Free` has no value of its own and yields `None`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Option<f64> {
        match *self {
            Dof::Free => None,
            Dof::Fixed { value } => Some(value),
            Dof::Uniform { lo, hi } => Some(if hi > lo { rng.gen_range(lo..=hi) } else { lo }),
            Dof::Gaussian { mean, stddev } => {
                let z: f64 = StandardNormal.sample(rng);
                Some(mean + stddev * z.clamp(-GAUSSIAN_CLAMP, GAUSSIAN_CLAMP))
            }
        }
    }

    /// Whether `v` lies in the support (Gaussian support is the clamped interval).
    pub fn contains(&self, v: f64) -> bool {
        let tol = 1e-9;
        match *self {
            Dof::Free => true,
            Dof::Fixed { value } => (v - value).abs() <= tol,
            Dof::Uniform { lo, hi } => v >= lo - tol && v <= hi + tol,
            Dof::Gaussian { mean, stddev } => (v - mean).abs() <= GAUSSIAN_CLAMP * stddev + tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DofDistribution {
    pub z: Dof,
    pub pitch: Dof,
    pub roll: Dof,
    pub yaw: Dof,
    pub x: Dof,
    pub y: Dof,
}

impl DofDistribution {
    /// Level camera at a fixed height with grid positions and swept yaw.
    pub fn level(height: f64) -> Self {
        DofDistribution {
            z: Dof::Fixed { value: height },
            pitch: Dof::Fixed { value: 0.0 },
            roll: Dof::Fixed { value: 0.0 },
            yaw: Dof::Free,
            x: Dof::Free,
            y: Dof::Free,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for d in [self.z, self.pitch, self.roll, self.yaw, self.x, self.y] {
            d.validate()?;
        }
        for (name, d) in [("z", self.z), ("pitch", self.pitch), ("roll", self.roll)] {
            if d == Dof::Free {
                return Err(NeoError::InvalidArgument(format!("{name} cannot be free")));
            }
        }
        Ok(())
    }
}

/// Which family each degree of freedom gets when fitted to training poses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DofKind {
    Free,
    Fixed,
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DofSpec {
    pub z: DofKind,
    pub pitch: DofKind,
    pub roll: DofKind,
    pub yaw: DofKind,
    pub x: DofKind,
    pub y: DofKind,
}

impl Default for DofSpec {
    fn default() -> Self {
        DofSpec {
            z: DofKind::Gaussian,
            pitch: DofKind::Gaussian,
            roll: DofKind::Gaussian,
            yaw: DofKind::Free,
            x: DofKind::Free,
            y: DofKind::Free,
        }
    }
}

fn fit_one(name: &str, kind: DofKind, values: &[f64]) -> Result<Dof> {
    let n = values.len() as f64;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / n;
    Ok(match kind {
        DofKind::Free => Dof::Free,
        DofKind::Fixed => {
            if hi - lo > 1e-6 {
                return Err(NeoError::SpecViolation(format!(
                    "{name} declared fixed but observed range [{lo}, {hi}]"
                )));
            }
            Dof::Fixed { value: mean }
        }
        DofKind::Uniform => Dof::Uniform { lo, hi },
        DofKind::Gaussian => {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Dof::Gaussian {
                mean,
                stddev: var.sqrt(),
            }
        }
    })
}

/// Fit per-DoF distributions to training poses (angles in degrees).
pub fn fit_dof_distribution(poses: &[Pose], spec: &DofSpec) -> Result<DofDistribution> {
    if poses.len() < 2 {
        return Err(NeoError::InvalidArgument("need at least two training poses".into()));
    }
    let mut cols: [Vec<f64>; 6] = Default::default();
    for p in poses {
        let (yaw, pitch, roll) = p.yaw_pitch_roll();
        let t = p.position();
        let vals = [t.z, pitch.to_degrees(), roll.to_degrees(), yaw.to_degrees(), t.x, t.y];
        for (c, v) in cols.iter_mut().zip(vals) {
            c.push(v);
        }
    }
    Ok(DofDistribution {
        z: fit_one("z", spec.z, &cols[0])?,
        pitch: fit_one("pitch", spec.pitch, &cols[1])?,
        roll: fit_one("roll", spec.roll, &cols[2])?,
        yaw: fit_one("yaw", spec.yaw, &cols[3])?,
        x: fit_one("x", spec.x, &cols[4])?,
        y: fit_one("y", spec.y, &cols[5])?,
    })
}

/// Lattice `min + i·interval` over the walkable bounding box (half-open along each axis),
/// keeping the points whose cell is walkable. Row-major in (y, x).
pub fn grid_positions(walkable: &WalkableArea, interval: f64) -> Result<Vec<[f64; 2]>> {
    Ok(grid_lattice(walkable, interval)?.into_iter().map(|(_, p)| p).collect())
}

/// Walkable lattice points with their row-major lattice index.
fn grid_lattice(walkable: &WalkableArea, interval: f64) -> Result<Vec<(usize, [f64; 2])>> {
    if !(interval > 0.0 && interval.is_finite()) {
        return Err(NeoError::InvalidArgument(format!("grid interval {interval} must be > 0")));
    }
    let Some((lo, hi)) = walkable.bounding_box() else {
        return Ok(Vec::new());
    };
    let count = |extent: f64| ((extent / interval) - 1e-9).ceil().max(1.0) as usize;
    let (nx, ny) = (count(hi[0] - lo[0]), count(hi[1] - lo[1]));
    let mut out = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let p = [lo[0] + i as f64 * interval, lo[1] + j as f64 * interval];
            if walkable.is_walkable(p[0], p[1]) {
                out.push((j * nx + i, p));
            }
        }
    }
    Ok(out)
}

/// `k` evenly spaced yaw angles in degrees, starting at 0.
pub fn yaw_sweep(k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(NeoError::InvalidArgument("yaw count must be >= 1".into()));
    }
    Ok((0..k).map(|i| i as f64 * 360.0 / k as f64).collect())
}

/// Uniform hash grid over anchor positions for nearest-within-threshold queries.
struct CoverageIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<[f64; 2]>>,
    threshold: f64,
}

impl CoverageIndex {
    fn new(anchors: &[Pose], threshold: f64) -> Self {
        // very large thresholds would overflow the bucket keys; one bucket suffices then
        let cell = threshold.min(1e6);
        let mut buckets: HashMap<(i64, i64), Vec<[f64; 2]>> = HashMap::new();
        for a in anchors {
            let p = a.position();
            buckets.entry(key(p.x, p.y, cell)).or_default().push([p.x, p.y]);
        }
        CoverageIndex {
            cell,
            buckets,
            threshold,
        }
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        if self.threshold >= 1e6 {
            return !self.buckets.is_empty();
        }
        let (ci, cj) = key(x, y, self.cell);
        let t2 = self.threshold * self.threshold;
        for dj in -1..=1 {
            for di in -1..=1 {
                if let Some(b) = self.buckets.get(&(ci + di, cj + dj)) {
                    if b.iter().any(|a| (a[0] - x).powi(2) + (a[1] - y).powi(2) <= t2) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

fn key(x: f64, y: f64, cell: f64) -> (i64, i64) {
    ((x / cell).floor() as i64, (y / cell).floor() as i64)
}

/// Keep candidates whose x-y distance to the nearest anchor is at most `threshold`.
pub fn coverage_filter(candidates: &[Pose], anchors: &[Pose], threshold: f64) -> Result<Vec<Pose>> {
    if !(threshold > 0.0) {
        return Err(NeoError::InvalidArgument(format!("coverage threshold {threshold} must be > 0")));
    }
    let index = CoverageIndex::new(anchors, threshold);
    Ok(candidates
        .iter()
        .filter(|p| {
            let t = p.position();
            index.covers(t.x, t.y)
        })
        .copied()
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub interval: f64,
    pub yaw_count: usize,
    pub coverage_threshold: Option<f64>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.interval > 0.0) || self.yaw_count == 0 || self.coverage_threshold.is_some_and(|t| !(t > 0.0)) {
            return Err(NeoError::InvalidArgument(format!("invalid sampler config {self:?}")));
        }
        Ok(())
    }
}

/// A sampled pose with the lattice indices it came from. `position_index` counts all
/// lattice sites of the bounding box, walkable or not, so editing the walkable area does
/// not renumber other positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledPose {
    pub position_index: usize,
    pub yaw_index: usize,
    pub pose: Pose,
}

/// Grid positions × yaw sweep with free DoFs drawn per (position, yaw) from a
/// counter-based generator, coverage-filtered against `anchors` when a threshold is set.
/// Positions outside the x/y support are skipped.
pub fn sample_poses(
    walkable: &WalkableArea,
    cfg: &SamplerConfig,
    dof: &DofDistribution,
    anchors: Option<&[Pose]>,
) -> Result<Vec<SampledPose>> {
    cfg.validate()?;
    dof.validate()?;
    let positions = grid_lattice(walkable, cfg.interval)?;
    let sweep = yaw_sweep(cfg.yaw_count)?;
    let coverage = match (cfg.coverage_threshold, anchors) {
        (Some(t), Some(a)) => Some(CoverageIndex::new(a, t)),
        _ => None,
    };
    let mut out = Vec::new();
    for &(pi, p) in &positions {
        if !dof.x.contains(p[0]) || !dof.y.contains(p[1]) {
            continue;
        }
        if let Some(c) = &coverage {
            if !c.covers(p[0], p[1]) {
                continue;
            }
        }
        for (yi, &sweep_yaw) in sweep.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_n(cfg.seed, &[pi as u64, yi as u64]));
            let z = dof.z.sample(&mut rng).expect("validated");
            let pitch = dof.pitch.sample(&mut rng).expect("validated");
            let roll = dof.roll.sample(&mut rng).expect("validated");
            let yaw = match dof.yaw {
                Dof::Free => sweep_yaw,
                Dof::Fixed { value } => sweep_yaw + value,
                d => d.sample(&mut rng).expect("not free"),
            };
            let pose = Pose::from_position_ypr(
                Vec3::new(p[0], p[1], z),
                yaw.to_radians(),
                pitch.to_radians(),
                roll.to_radians(),
            );
            out.push(SampledPose {
                position_index: pi,
                yaw_index: yi,
                pose,
            });
        }
    }
    Ok(out)
}

pub fn write_pose_list(path: &Path, poses: &[SampledPose]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| NeoError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for p in poses {
        serde_json::to_writer(&mut w, p).map_err(|e| NeoError::json(path, e))?;
        w.write_all(b"\n").map_err(|e| NeoError::io(path, e))?;
    }
    w.flush().map_err(|e| NeoError::io(path, e))
}

pub fn read_pose_list(path: &Path) -> Result<Vec<SampledPose>> {
    let f = std::fs::File::open(path).map_err(|e| NeoError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| NeoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| NeoError::json(path, e))?);
    }
    Ok(out)
}
