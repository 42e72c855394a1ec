//! Procedural box-room scenes, an exact ray-cast renderer, walkable-area derivation and
//! camera trajectories for training and test imagery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{NeoError, Result};
use crate::geometry::{pixel_ray, CameraIntrinsics, Pose, Ray, Vec3};
use crate::image::ImageBuffer;
use crate::seeds::splitmix64;

/// Axis-aligned box in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Aabb { min, max }
    }

    /// Slab test; returns the parametric entry/exit distances (entry may be negative when
    /// the origin is inside).
    #[inline]
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64, usize, usize)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        let (mut enter_face, mut exit_face) = (0, 0);
        for a in 0..3 {
            let o = ray.origin[a];
            let d = ray.direction[a];
            if d.abs() < 1e-300 {
                if o < self.min[a] || o > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut ta, mut tb) = ((self.min[a] - o) * inv, (self.max[a] - o) * inv);
            // face index: 2a for the min side, 2a+1 for the max side
            let (mut fa, mut fb) = (2 * a, 2 * a + 1);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
                std::mem::swap(&mut fa, &mut fb);
            }
            if ta > t0 {
                t0 = ta;
                enter_face = fa;
            }
            if tb < t1 {
                t1 = tb;
                exit_face = fb;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1, enter_face, exit_face))
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn contains_strict(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }

    pub fn overlaps_xy(&self, other: &Aabb, gap: f64) -> bool {
        (0..2).all(|a| self.min[a] < other.max[a] + gap && other.min[a] < self.max[a] + gap)
    }

    pub fn expanded(&self, m: f64) -> Aabb {
        Aabb {
            min: [self.min[0] - m, self.min[1] - m, self.min[2] - m],
            max: [self.max[0] + m, self.max[1] + m, self.max[2] + m],
        }
    }

    pub fn diagonal(&self) -> f64 {
        (0..3).map(|a| (self.max[a] - self.min[a]).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureKind {
    Checker,
    Stripes,
    Gradient,
    SeededValueNoise,
}

/// Surface pattern evaluated in face-local meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub kind: TextureKind,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    /// Checker square side, stripe width, gradient period or noise lattice spacing.
    pub scale: f64,
    pub seed: u64,
}

fn lattice_value(seed: u64, i: i64, j: i64) -> f64 {
    let h = splitmix64(seed ^ splitmix64((i as u64).wrapping_mul(0x1000_0000_01B3) ^ splitmix64(j as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl Texture {
    pub fn constant(color: [f64; 3]) -> Self {
        Texture {
            kind: TextureKind::Gradient,
            color_a: color,
            color_b: color,
            scale: 1.0,
            seed: 0,
        }
    }

    /// Blend factor in [0, 1] between `color_a` and `color_b`.
    pub fn mix(&self, u: f64, v: f64) -> f64 {
        let (su, sv) = (u / self.scale, v / self.scale);
        match self.kind {
            TextureKind::Checker => ((su.floor() as i64 + sv.floor() as i64).rem_euclid(2)) as f64,
            TextureKind::Stripes => (su.floor() as i64).rem_euclid(2) as f64,
            TextureKind::Gradient => {
                // triangle wave: continuous, period 2·scale
                let t = (su * 0.5).rem_euclid(1.0);
                1.0 - (2.0 * t - 1.0).abs()
            }
            TextureKind::SeededValueNoise => {
                let (i, j) = (su.floor(), sv.floor());
                let (fu, fv) = (smooth(su - i), smooth(sv - j));
                let (i, j) = (i as i64, j as i64);
                let a = lattice_value(self.seed, i, j);
                let b = lattice_value(self.seed, i + 1, j);
                let c = lattice_value(self.seed, i, j + 1);
                let d = lattice_value(self.seed, i + 1, j + 1);
                let top = a + (b - a) * fu;
                let bot = c + (d - c) * fu;
                top + (bot - top) * fv
            }
        }
    }

    pub fn eval(&self, u: f64, v: f64) -> [f64; 3] {
        let m = self.mix(u, v);
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = (self.color_a[k] * (1.0 - m) + self.color_b[k] * m).clamp(0.0, 1.0);
        }
        c
    }
}

/// Face-local (u, v) for a point on face `face` (2·axis + side) of a box.
fn face_uv(face: usize, p: &Vec3, b: &Aabb) -> (f64, f64) {
    match face / 2 {
        0 => (p.y - b.min[1], p.z - b.min[2]),
        1 => (p.x - b.min[0], p.z - b.min[2]),
        _ => (p.x - b.min[0], p.y - b.min[1]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TexturedBox {
    pub bounds: Aabb,
    /// Indexed by face: -x, +x, -y, +y, -z, +z.
    pub textures: [Texture; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Room extent (x, y, z) in meters.
    pub room_size: [f64; 3],
    pub obstacle_count: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            room_size: [3.6, 3.6, 2.5],
            obstacle_count: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub room: TexturedBox,
    pub obstacles: Vec<TexturedBox>,
}

const OBSTACLE_GAP: f64 = 0.15;
const PLACEMENT_RETRIES: usize = 2000;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct TexturePalette {
    rng: ChaCha8Rng,
    hue: f64,
}

impl TexturePalette {
    fn next(&mut self) -> Texture {
        // golden-ratio hue walk keeps neighbouring faces apart in color
        self.hue = (self.hue + 0.618_033_988_75).rem_euclid(1.0);
        let sat = self.rng.gen_range(0.35..0.65);
        let val = self.rng.gen_range(0.45..0.8);
        let color_a = hsv(self.hue, sat, val);
        let contrast = self.rng.gen_range(0.18..0.3);
        let color_b = hsv(self.hue + self.rng.gen_range(-0.06..0.06), sat * 0.8, (val - contrast).max(0.1));
        let (kind, scale) = match self.rng.gen_range(0..4) {
            0 => (TextureKind::Checker, self.rng.gen_range(0.45..0.7)),
            1 => (TextureKind::Stripes, self.rng.gen_range(0.3..0.5)),
            2 => (TextureKind::Gradient, self.rng.gen_range(0.5..1.0)),
            _ => (TextureKind::SeededValueNoise, self.rng.gen_range(0.3..0.6)),
        };
        Texture {
            kind,
            color_a,
            color_b,
            scale,
            seed: self.rng.gen(),
        }
    }

    fn six(&mut self) -> [Texture; 6] {
        std::array::from_fn(|_| self.next())
    }
}

impl Scene {
    /// Deterministic room with `obstacle_count` disjoint boxes standing on the floor.
    pub fn build(seed: u64, config: &SceneConfig) -> Result<Scene> {
        let [lx, ly, lz] = config.room_size;
        if lx < 3.0 || ly < 3.0 || lz < 2.5 {
            return Err(NeoError::SceneGeneration(format!(
                "room {lx}x{ly}x{lz} m is below the 3x3x2.5 m minimum"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut palette = TexturePalette {
            rng: ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x7E87)),
            hue: rng.gen(),
        };
        let room = TexturedBox {
            bounds: Aabb::new([0.0; 3], config.room_size),
            textures: palette.six(),
        };
        let mut obstacles: Vec<TexturedBox> = Vec::with_capacity(config.obstacle_count);
        let margin = 0.3;
        for k in 0..config.obstacle_count {
            let mut placed = None;
            for _ in 0..PLACEMENT_RETRIES {
                let sx = rng.gen_range(0.3..0.8);
                let sy = rng.gen_range(0.3..0.8);
                let h: f64 = if rng.gen_bool(0.5) {
                    rng.gen_range(0.5..1.1)
                } else {
                    rng.gen_range(1.7..2.2)
                };
                if lx - 2.0 * margin <= sx || ly - 2.0 * margin <= sy {
                    break;
                }
                let x0 = rng.gen_range(margin..lx - margin - sx);
                let y0 = rng.gen_range(margin..ly - margin - sy);
                let cand = Aabb::new([x0, y0, 0.0], [x0 + sx, y0 + sy, h.min(lz - 0.1)]);
                if obstacles.iter().all(|o| !o.bounds.overlaps_xy(&cand, OBSTACLE_GAP)) {
                    placed = Some(cand);
                    break;
                }
            }
            let bounds = placed.ok_or_else(|| {
                NeoError::SceneGeneration(format!(
                    "could not place obstacle {} of {} after {PLACEMENT_RETRIES} tries",
                    k + 1,
                    config.obstacle_count
                ))
            })?;
            obstacles.push(TexturedBox {
                bounds,
                textures: palette.six(),
            });
        }
        Ok(Scene {
            seed,
            room,
            obstacles,
        })
    }

    pub fn bounds(&self) -> Aabb {
        self.room.bounds
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| NeoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Scene> {
        let s = std::fs::read_to_string(path).map_err(|e| NeoError::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| NeoError::json(path, e))
    }

    /// Nearest surface hit: distance along the ray and surface color.
    #[inline]
    pub fn trace(&self, ray: &Ray) -> Option<(f64, [f64; 3])> {
        let mut best: Option<(f64, usize, &TexturedBox)> = None;
        if let Some((t0, t1, _, exit)) = self.room.bounds.intersect(ray) {
            if t1 > 0.0 && t0 <= 0.0 {
                best = Some((t1, exit, &self.room));
            }
        }
        for ob in &self.obstacles {
            if let Some((t0, t1, enter, _)) = ob.bounds.intersect(ray) {
                if t0 > 0.0 && t0 <= t1 && best.map_or(true, |(bt, _, _)| t0 < bt) {
                    best = Some((t0, enter, ob));
                }
            }
        }
        best.map(|(t, face, b)| {
            let p = ray.at(t);
            let (u, v) = face_uv(face, &p, &b.bounds);
            (t, b.textures[face].eval(u, v))
        })
    }

    /// Whether a camera can sit at `p`: inside the room and outside every obstacle.
    pub fn is_free(&self, p: &Vec3) -> bool {
        self.room.bounds.contains_strict(p) && self.obstacles.iter().all(|o| !o.bounds.contains(p))
    }

    /// Unlit render with per-pixel hit distance.
    pub fn render(&self, pose: &Pose, intr: &CameraIntrinsics) -> Result<(ImageBuffer, DepthBuffer)> {
        intr.validate()?;
        if !self.is_free(&pose.position()) {
            return Err(NeoError::InvalidPose(format!(
                "camera at {:?} is outside the free space of the room",
                pose.position().as_slice()
            )));
        }
        let (w, h) = (intr.width, intr.height);
        let pixels: Vec<([f32; 3], f32)> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let ray = pixel_ray(pose, intr, i % w, i / w);
                match self.trace(&ray) {
                    Some((t, c)) => ([c[0] as f32, c[1] as f32, c[2] as f32], t as f32),
                    None => ([0.0; 3], f32::INFINITY),
                }
            })
            .collect();
        let data = pixels.iter().flat_map(|(c, _)| *c).collect();
        let depth = pixels.iter().map(|(_, d)| *d).collect();
        Ok((
            ImageBuffer::from_raw(w, h, data)?,
            DepthBuffer {
                width: w,
                height: h,
                data: depth,
            },
        ))
    }

    /// Occupancy grid of camera positions at `camera_height` keeping `margin` from walls
    /// and obstacles.
    pub fn walkable_area(&self, cell: f64, camera_height: f64, margin: f64) -> WalkableArea {
        let b = self.room.bounds;
        let nx = ((b.max[0] - b.min[0]) / cell).floor() as usize;
        let ny = ((b.max[1] - b.min[1]) / cell).floor() as usize;
        let mut cells = vec![false; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let cx = b.min[0] + (i as f64 + 0.5) * cell;
                let cy = b.min[1] + (j as f64 + 0.5) * cell;
                let inside = cx - b.min[0] >= margin
                    && b.max[0] - cx >= margin
                    && cy - b.min[1] >= margin
                    && b.max[1] - cy >= margin
                    && camera_height > b.min[2]
                    && camera_height < b.max[2];
                // the camera column spans floor..camera_height; obstacles stand on the floor
                let clear = self.obstacles.iter().all(|o| {
                    let e = o.bounds;
                    !(cx > e.min[0] - margin
                        && cx < e.max[0] + margin
                        && cy > e.min[1] - margin
                        && cy < e.max[1] + margin
                        && e.min[2] <= camera_height)
                });
                cells[j * nx + i] = inside && clear;
            }
        }
        WalkableArea {
            origin: [b.min[0], b.min[1]],
            cell,
            nx,
            ny,
            cells,
        }
    }
}

/// Per-pixel hit distance in meters; +∞ where nothing was hit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct DepthSidecar {
    width: usize,
    height: usize,
}

impl DepthBuffer {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn center_crop(&self, width: usize, height: usize) -> DepthBuffer {
        let (x0, y0) = ((self.width - width) / 2, (self.height - height) / 2);
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + width]);
        }
        DepthBuffer {
            width,
            height,
            data,
        }
    }

    /// Raw little-endian f32 at `path` plus `<path>.json` with the dimensions.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(path, bytes).map_err(|e| NeoError::io(path, e))?;
        let side = sidecar_path(path);
        let js = serde_json::to_string(&DepthSidecar {
            width: self.width,
            height: self.height,
        })
        .expect("sidecar serializes");
        std::fs::write(&side, js).map_err(|e| NeoError::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<DepthBuffer> {
        let side = sidecar_path(path);
        let js = std::fs::read_to_string(&side).map_err(|e| NeoError::io(&side, e))?;
        let meta: DepthSidecar = serde_json::from_str(&js).map_err(|e| NeoError::json(&side, e))?;
        let bytes = std::fs::read(path).map_err(|e| NeoError::io(path, e))?;
        if bytes.len() != meta.width * meta.height * 4 {
            return Err(NeoError::InvalidArgument(format!(
                "{}: {} bytes for {}x{} depth",
                path.display(),
                bytes.len(),
                meta.width,
                meta.height
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(DepthBuffer {
            width: meta.width,
            height: meta.height,
            data,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Floor occupancy grid; cells are half-open squares `[origin + i·cell, origin + (i+1)·cell)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkableArea {
    pub origin: [f64; 2],
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
    pub cells: Vec<bool>,
}

impl WalkableArea {
    pub fn from_cells(origin: [f64; 2], cell: f64, nx: usize, ny: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != nx * ny || !(cell > 0.0) {
            return Err(NeoError::InvalidArgument("walkable grid shape mismatch".into()));
        }
        Ok(WalkableArea {
            origin,
            cell,
            nx,
            ny,
            cells,
        })
    }

    pub fn full(origin: [f64; 2], cell: f64, nx: usize, ny: usize) -> Self {
        WalkableArea {
            origin,
            cell,
            nx,
            ny,
            cells: vec![true; nx * ny],
        }
    }

    /// Cell containing planar point (x, y), if any. A tiny tolerance snaps points that sit
    /// on a cell edge up to rounding onto the upper cell.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let qx = ((x - self.origin[0]) / self.cell + 1e-9).floor();
        let qy = ((y - self.origin[1]) / self.cell + 1e-9).floor();
        if qx < 0.0 || qy < 0.0 || qx >= self.nx as f64 || qy >= self.ny as f64 {
            return None;
        }
        Some((qx as usize, qy as usize))
    }

    pub fn is_walkable(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some_and(|(i, j)| self.cells[j * self.nx + i])
    }

    pub fn walkable_cells(&self) -> Vec<(usize, usize)> {
        (0..self.ny)
            .flat_map(|j| (0..self.nx).map(move |i| (i, j)))
            .filter(|&(i, j)| self.cells[j * self.nx + i])
            .collect()
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.cell,
            self.origin[1] + (j as f64 + 0.5) * self.cell,
        ]
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    /// Bounding box of the walkable cells as ((min_x, min_y), (max_x, max_y)), cell edges.
    pub fn bounding_box(&self) -> Option<([f64; 2], [f64; 2])> {
        let cells = self.walkable_cells();
        let (i0, i1) = (cells.iter().map(|c| c.0).min()?, cells.iter().map(|c| c.0).max()?);
        let (j0, j1) = (cells.iter().map(|c| c.1).min()?, cells.iter().map(|c| c.1).max()?);
        Some((
            [self.origin[0] + i0 as f64 * self.cell, self.origin[1] + j0 as f64 * self.cell],
            [
                self.origin[0] + (i1 + 1) as f64 * self.cell,
                self.origin[1] + (j1 + 1) as f64 * self.cell,
            ],
        ))
    }
}

/// `n` level cameras at `height`, uniform over walkable cells with uniform yaw.
pub fn sample_training_trajectory(walkable: &WalkableArea, n: usize, height: f64, seed: u64) -> Result<Vec<Pose>> {
    if n == 0 {
        return Err(NeoError::InvalidArgument("trajectory length must be positive".into()));
    }
    let cells = walkable.walkable_cells();
    if cells.is_empty() {
        return Err(NeoError::InvalidArgument("walkable area is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let (i, j) = cells[rng.gen_range(0..cells.len())];
            let x = walkable.origin[0] + (i as f64 + rng.gen_range(0.05..0.95)) * walkable.cell;
            let y = walkable.origin[1] + (j as f64 + rng.gen_range(0.05..0.95)) * walkable.cell;
            let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
            Pose::from_position_ypr(Vec3::new(x, y, height), yaw, 0.0, 0.0)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub step: f64,
    /// Max absolute yaw change per step, degrees.
    pub max_turn_deg: f64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            step: 0.15,
            max_turn_deg: 20.0,
        }
    }
}

/// Random-walk test paths: each step turns by a uniform yaw increment and moves forward;
/// moves into non-walkable cells are rejected and re-drawn (eventually turning in place).
pub fn sample_test_paths(
    walkable: &WalkableArea,
    paths: usize,
    per_path: usize,
    height: f64,
    walk: &WalkConfig,
    seed: u64,
) -> Result<Vec<Vec<Pose>>> {
    if paths == 0 || per_path == 0 {
        return Err(NeoError::InvalidArgument("path counts must be positive".into()));
    }
    let cells = walkable.walkable_cells();
    if cells.is_empty() {
        return Err(NeoError::InvalidArgument("walkable area is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_turn = walk.max_turn_deg.to_radians();
    let mut out = Vec::with_capacity(paths);
    for _ in 0..paths {
        let (i, j) = cells[rng.gen_range(0..cells.len())];
        let [mut x, mut y] = walkable.cell_center(i, j);
        let mut yaw = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut path = Vec::with_capacity(per_path);
        path.push(Pose::from_position_ypr(Vec3::new(x, y, height), yaw, 0.0, 0.0));
        while path.len() < per_path {
            let mut moved = false;
            for attempt in 0..32 {
                let turn = if attempt < 8 {
                    rng.gen_range(-max_turn..=max_turn)
                } else {
                    // blocked: look for any free direction
                    rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)
                };
                let ny = yaw + turn;
                let (nx_, ny_) = (x + walk.step * ny.cos(), y + walk.step * ny.sin());
                if walkable.is_walkable(nx_, ny_) {
                    x = nx_;
                    y = ny_;
                    yaw = ny;
                    moved = true;
                    break;
                }
            }
            if !moved {
                yaw += rng.gen_range(-max_turn..=max_turn);
            }
            path.push(Pose::from_position_ypr(
                Vec3::new(x, y, height),
                yaw.rem_euclid(std::f64::consts::TAU),
                0.0,
                0.0,
            ));
        }
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, ray_for_pixel};

    fn intr(f: f64, w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(f, w, h).unwrap()
    }

    fn plain_room(tex: Texture) -> Scene {
        Scene {
            seed: 0,
            room: TexturedBox {
                bounds: Aabb::new([0.0; 3], [4.0, 4.0, 3.0]),
                textures: [tex; 6],
            },
            obstacles: vec![],
        }
    }

    #[test]
    fn bare_room_and_determinism() {
        let cfg = SceneConfig {
            room_size: [4.0, 4.0, 2.5],
            obstacle_count: 0,
        };
        let a = Scene::build(7, &cfg).unwrap();
        assert!(a.obstacles.is_empty());
        assert_eq!(a.to_json(), Scene::build(7, &cfg).unwrap().to_json());
        assert_ne!(a.to_json(), Scene::build(8, &cfg).unwrap().to_json());
    }

    #[test]
    fn obstacles_are_disjoint_and_inside() {
        let cfg = SceneConfig {
            room_size: [4.0, 4.0, 2.5],
            obstacle_count: 3,
        };
        let s = Scene::build(7, &cfg).unwrap();
        assert_eq!(s.obstacles.len(), 3);
        for (i, a) in s.obstacles.iter().enumerate() {
            for ax in 0..2 {
                assert!(a.bounds.min[ax] > 0.0 && a.bounds.max[ax] < cfg.room_size[ax]);
            }
            assert!(a.bounds.max[2] < cfg.room_size[2]);
            for b in &s.obstacles[i + 1..] {
                // interval overlap test on x and y independently
                let ox = a.bounds.min[0] < b.bounds.max[0] && b.bounds.min[0] < a.bounds.max[0];
                let oy = a.bounds.min[1] < b.bounds.max[1] && b.bounds.min[1] < a.bounds.max[1];
                assert!(!(ox && oy));
            }
        }
        let textures: Vec<_> = s
            .obstacles
            .iter()
            .chain(std::iter::once(&s.room))
            .flat_map(|b| b.textures.iter().map(|t| format!("{:?}", t.color_a)))
            .collect();
        let mut uniq = textures.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), textures.len());
    }

    #[test]
    fn infeasible_packing_is_an_error() {
        let cfg = SceneConfig {
            room_size: [3.0, 3.0, 2.5],
            obstacle_count: 60,
        };
        assert!(matches!(Scene::build(1, &cfg), Err(NeoError::SceneGeneration(_))));
        let tiny = SceneConfig {
            room_size: [2.0, 3.0, 2.5],
            obstacle_count: 0,
        };
        assert!(Scene::build(1, &tiny).is_err());
    }

    #[test]
    fn constant_wall_depth_is_perpendicular_over_cosine() {
        let s = plain_room(Texture::constant([0.3, 0.6, 0.9]));
        let pose = Pose::from_position_ypr(Vec3::new(2.0, 2.0, 1.5), 0.0, 0.0, 0.0);
        let i = intr(32.0, 32, 32);
        let (img, depth) = s.render(&pose, &i).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(img.get(x, y), [0.3, 0.6, 0.9]);
                let r = ray_for_pixel(&pose, &i, x, y).unwrap();
                let cos = r.direction.x;
                assert!((depth.get(x, y) as f64 - 2.0 / cos).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn checker_phase_matches_projection() {
        // Wall at x = 4 (2 m ahead), checker squares of 0.5 m -> 1 m period.
        let mut tex = Texture::constant([0.0; 3]);
        tex.kind = TextureKind::Checker;
        tex.color_a = [0.1, 0.1, 0.1];
        tex.color_b = [0.9, 0.9, 0.9];
        tex.scale = 0.5;
        let s = plain_room(tex);
        let pose = Pose::from_position_ypr(Vec3::new(2.0, 2.0, 1.5), 0.0, 0.0, 0.0);
        let i = intr(32.0, 64, 64);
        let (img, _) = s.render(&pose, &i).unwrap();
        // On the +x wall u = y, v = z. Pixel (x, y): camera right is world -y, down is -z.
        for (px, py) in [(10usize, 20usize), (40, 33), (55, 8)] {
            let dx = (px as f64 + 0.5 - 32.0) / 32.0;
            let dy = (py as f64 + 0.5 - 32.0) / 32.0;
            let wy = 2.0 - 2.0 * dx;
            let wz = 1.5 - 2.0 * dy;
            let parity = ((wy / 0.5).floor() as i64 + (wz / 0.5).floor() as i64).rem_euclid(2);
            let expect = if parity == 0 { 0.1 } else { 0.9 };
            assert!((img.get(px, py)[0] - expect).abs() < 1e-6, "pixel ({px},{py})");
        }
    }

    #[test]
    fn small_render_is_center_crop_of_large() {
        let s = Scene::build(3, &SceneConfig::default()).unwrap();
        let w = s.walkable_area(0.05, 1.5, 0.2);
        let poses = sample_training_trajectory(&w, 5, 1.5, 11).unwrap();
        let small = intr(16.0, 32, 32);
        let large = intr(16.0, 64, 64);
        for p in &poses {
            let (a, da) = s.render(p, &small).unwrap();
            let (b, db) = s.render(p, &large).unwrap();
            assert_eq!(a, b.center_crop(32, 32).unwrap());
            assert_eq!(da, db.center_crop(32, 32));
        }
    }

    #[test]
    fn depth_reprojection_agrees() {
        let s = Scene::build(5, &SceneConfig::default()).unwrap();
        let w = s.walkable_area(0.05, 1.5, 0.2);
        let poses = sample_training_trajectory(&w, 6, 1.5, 2).unwrap();
        let i = intr(24.0, 48, 48);
        let mut checked = 0;
        for pair in poses.windows(2) {
            let (_, da) = s.render(&pair[0], &i).unwrap();
            for y in (0..48).step_by(3) {
                for x in (0..48).step_by(3) {
                    let r = ray_for_pixel(&pair[0], &i, x, y).unwrap();
                    let p = r.at(da.get(x, y) as f64);
                    let Some((u, v, _)) = project(&pair[1], &i, &p) else { continue };
                    if u < 0.0 || v < 0.0 || u >= 48.0 || v >= 48.0 {
                        continue;
                    }
                    let rb = crate::geometry::ray_through(&pair[1], &i, u, v);
                    let dist_b = (p - pair[1].position()).norm();
                    let (t, _) = s.trace(&rb).unwrap();
                    if t < dist_b - 1e-3 {
                        continue; // occluded in B
                    }
                    assert!((t - dist_b).abs() < 1e-4, "{t} vs {dist_b}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn camera_inside_obstacle_is_rejected() {
        let s = Scene::build(7, &SceneConfig::default()).unwrap();
        let b = s.obstacles[0].bounds;
        let inside = Vec3::new((b.min[0] + b.max[0]) / 2.0, (b.min[1] + b.max[1]) / 2.0, b.max[2] / 2.0);
        let pose = Pose::from_position_ypr(inside, 0.0, 0.0, 0.0);
        assert!(matches!(s.render(&pose, &intr(8.0, 16, 16)), Err(NeoError::InvalidPose(_))));
    }

    #[test]
    fn walkable_cells_are_clear() {
        let s = Scene::build(7, &SceneConfig::default()).unwrap();
        let w = s.walkable_area(0.05, 1.5, 0.2);
        assert_eq!(w.nx, 72);
        assert!(!w.is_empty());
        for (i, j) in w.walkable_cells() {
            let [x, y] = w.cell_center(i, j);
            assert!(s.is_free(&Vec3::new(x, y, 1.5)));
            assert!(s.is_free(&Vec3::new(x, y, 0.01)));
            assert!(x >= 0.2 && y >= 0.2 && x <= 3.4 && y <= 3.4);
        }
    }

    #[test]
    fn trajectories() {
        let s = Scene::build(7, &SceneConfig::default()).unwrap();
        let w = s.walkable_area(0.05, 1.5, 0.2);
        assert!(sample_training_trajectory(&w, 0, 1.5, 1).is_err());
        let poses = sample_training_trajectory(&w, 200, 1.5, 1).unwrap();
        assert_eq!(poses, sample_training_trajectory(&w, 200, 1.5, 1).unwrap());
        for p in &poses {
            let t = p.position();
            assert!(w.is_walkable(t.x, t.y));
            assert_eq!(t.z, 1.5);
            let (_, pitch, roll) = p.yaw_pitch_roll();
            assert!(pitch.abs() < 1e-12 && roll.abs() < 1e-12);
        }

        let paths = sample_test_paths(&w, 8, 25, 1.5, &WalkConfig::default(), 3).unwrap();
        assert_eq!(paths.iter().map(Vec::len).sum::<usize>(), 200);
        for path in &paths {
            for pair in path.windows(2) {
                let d = (pair[0].position() - pair[1].position()).norm();
                assert!(d <= 0.15 + 1e-9);
                let t = pair[1].position();
                assert!(w.is_walkable(t.x, t.y));
            }
        }
    }

    #[test]
    fn yaw_is_uniform_chi_square() {
        let w = WalkableArea::full([0.0, 0.0], 0.1, 10, 10);
        let poses = sample_training_trajectory(&w, 10_000, 1.5, 99).unwrap();
        let bins = 36;
        let mut counts = vec![0usize; bins];
        for p in &poses {
            let (yaw, _, _) = p.yaw_pitch_roll();
            let b = (yaw.rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let e = 10_000.0 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // chi-square critical value, 35 degrees of freedom, alpha = 0.01
        assert!(chi2 < 57.342, "chi2 = {chi2}");
    }

    #[test]
    fn depth_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.f32");
        let d = DepthBuffer {
            width: 3,
            height: 2,
            data: vec![1.0, 2.5, 3.25, 0.5, f32::INFINITY, 7.0],
        };
        d.save(&p).unwrap();
        assert_eq!(DepthBuffer::load(&p).unwrap(), d);
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("d.f32.json")).unwrap()).unwrap();
        assert_eq!(side["width"], 3);
    }

    #[test]
    fn texture_is_pure_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pal = TexturePalette { rng: ChaCha8Rng::seed_from_u64(2), hue: 0.1 };
        for _ in 0..40 {
            let t = pal.next();
            for _ in 0..50 {
                let (u, v) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
                let c = t.eval(u, v);
                assert_eq!(c, t.eval(u, v));
                assert!(c.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }
}
