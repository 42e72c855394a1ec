//! Dense voxel radiance field: trilinear raw grids with post-interpolation activations,
//! quadrature volume rendering, analytic gradients and Adam fitting.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NeoError, Result};
use crate::geometry::{pixel_ray, CameraIntrinsics, Pose, Ray, Vec3};
use crate::image::ImageBuffer;
use crate::optim::{Adam, AdamConfig};
use crate::scene::Aabb;
use crate::seeds::derive_seed;

/// Activated density of a freshly initialized grid (per meter).
pub const INIT_DENSITY: f64 = 0.01;

/// Cells whose eight corners all have raw density at or below this value
/// (softplus ≈ 3e-7 per meter) are skipped while marching.
pub const EMPTY_RAW: f32 = -15.0;

/// Raw density written into pruned lattice points.
pub const PRUNED_RAW: f32 = -20.0;

const CHECKPOINT_MAGIC: &[u8; 4] = b"NEOF";
const CHECKPOINT_VERSION: u32 = 1;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Marching stops once transmittance drops below this value (0 disables).
    pub stop_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples: 192,
            near: 0.05,
            far: 5.6,
            background: [0.0; 3],
            stop_transmittance: 1e-4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near >= 0.0 && self.near < self.far) || self.samples < 2 {
            return Err(NeoError::InvalidArgument(format!(
                "render config needs 0 <= near < far and samples >= 2 (near={}, far={}, samples={})",
                self.near, self.far, self.samples
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.far - self.near) / self.samples as f64
    }
}

/// Result of marching one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayRender {
    pub color: [f64; 3],
    /// Transmittance left after the last sample (weight of the background).
    pub transmittance: f64,
    pub weight_sum: f64,
}

/// Trilinear stencil of a point: eight lattice indices and weights.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    cell: usize,
    idx: [usize; 8],
    w: [f64; 8],
}

#[derive(Debug, Clone)]
pub struct VoxelRadianceField {
    bounds: Aabb,
    dims: [usize; 3],
    spacing: [f64; 3],
    /// Four raw values per lattice point: density, red, green, blue.
    params: Vec<f32>,
    /// One bit per cell; a clear bit guarantees all eight corners are at or below
    /// [`EMPTY_RAW`]. Set bits may be stale in the conservative direction.
    active: Vec<u64>,
}

impl PartialEq for VoxelRadianceField {
    fn eq(&self, other: &Self) -> bool {
        self.bounds == other.bounds && self.dims == other.dims && self.params == other.params
    }
}

impl VoxelRadianceField {
    /// Field with lattice points on the corners and interior of `bounds`, initialized to
    /// density [`INIT_DENSITY`] and mid-gray color.
    pub fn new(bounds: Aabb, dims: [usize; 3]) -> Result<Self> {
        let raw_density = softplus_inverse(INIT_DENSITY) as f32;
        Self::filled(bounds, dims, [raw_density, 0.0, 0.0, 0.0])
    }

    pub fn filled(bounds: Aabb, dims: [usize; 3], raw: [f32; 4]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(NeoError::InvalidArgument(format!("grid dims {dims:?} must be >= 2")));
        }
        if (0..3).any(|a| !(bounds.max[a] > bounds.min[a])) {
            return Err(NeoError::InvalidArgument("degenerate field bounds".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        let mut params = Vec::with_capacity(4 * n);
        for _ in 0..n {
            params.extend_from_slice(&raw);
        }
        let cells = (dims[0] - 1) * (dims[1] - 1) * (dims[2] - 1);
        let mut f = VoxelRadianceField {
            bounds,
            dims,
            spacing: spacing(&bounds, &dims),
            params,
            active: vec![0; cells.div_ceil(64)],
        };
        f.refresh_activity();
        Ok(f)
    }

    /// Build from separate raw grids (`color` holds three values per lattice point).
    pub fn from_grids(bounds: Aabb, dims: [usize; 3], density: &[f32], color: &[f32]) -> Result<Self> {
        let mut f = Self::filled(bounds, dims, [0.0; 4])?;
        let n = f.len();
        if density.len() != n || color.len() != 3 * n {
            return Err(NeoError::InvalidArgument("grid lengths do not match dims".into()));
        }
        if !density.iter().chain(color).all(|v| v.is_finite()) {
            return Err(NeoError::InvalidArgument("non-finite grid value".into()));
        }
        for i in 0..n {
            f.params[4 * i] = density[i];
            f.params[4 * i + 1..4 * i + 4].copy_from_slice(&color[3 * i..3 * i + 3]);
        }
        f.refresh_activity();
        Ok(f)
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Number of lattice points.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lattice_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn lattice_point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.bounds.min[0] + i as f64 * self.spacing[0],
            self.bounds.min[1] + j as f64 * self.spacing[1],
            self.bounds.min[2] + k as f64 * self.spacing[2],
        )
    }

    pub fn raw(&self, idx: usize) -> [f32; 4] {
        let p = &self.params[4 * idx..4 * idx + 4];
        [p[0], p[1], p[2], p[3]]
    }

    pub fn set_raw(&mut self, idx: usize, raw: [f32; 4]) {
        self.params[4 * idx..4 * idx + 4].copy_from_slice(&raw);
        if raw[0] > EMPTY_RAW {
            self.mark_active_around(idx);
        }
    }

    /// Set one flat parameter (four per lattice point).
    pub fn set_param(&mut self, p: usize, value: f32) {
        self.params[p] = value;
        if p % 4 == 0 && value > EMPTY_RAW {
            self.mark_active_around(p / 4);
        }
    }

    /// Flat raw parameters, four per lattice point.
    pub fn params(&self) -> &[f32] {
        &self.params
    }

    #[inline]
    fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * (self.dims[1] - 1) + j) * (self.dims[0] - 1) + i
    }

    #[inline]
    fn is_active(&self, cell: usize) -> bool {
        self.active[cell / 64] >> (cell % 64) & 1 == 1
    }

    fn mark_active_around(&mut self, idx: usize) {
        let [dx, dy, dz] = self.dims;
        let (i, j, k) = (idx % dx, (idx / dx) % dy, idx / (dx * dy));
        for ck in k.saturating_sub(1)..k.min(dz - 2) + 1 {
            for cj in j.saturating_sub(1)..j.min(dy - 2) + 1 {
                for ci in i.saturating_sub(1)..i.min(dx - 2) + 1 {
                    let c = self.cell_index(ci, cj, ck);
                    self.active[c / 64] |= 1 << (c % 64);
                }
            }
        }
    }

    /// Recompute the per-cell activity bits from the raw densities.
    pub fn refresh_activity(&mut self) {
        let [dx, dy, dz] = self.dims;
        self.active.fill(0);
        for k in 0..dz - 1 {
            for j in 0..dy - 1 {
                for i in 0..dx - 1 {
                    let b = self.lattice_index(i, j, k);
                    let busy = [0, 1, dx, dx + 1, dx * dy, dx * dy + 1, dx * dy + dx, dx * dy + dx + 1]
                        .iter()
                        .any(|o| self.params[4 * (b + o)] > EMPTY_RAW);
                    if busy {
                        let c = self.cell_index(i, j, k);
                        self.active[c / 64] |= 1 << (c % 64);
                    }
                }
            }
        }
    }

    /// Set the raw density of lattice points with activated density below `min_density`
    /// to [`PRUNED_RAW`]; returns how many were pruned.
    pub fn prune(&mut self, min_density: f64) -> usize {
        let cut = softplus_inverse(min_density) as f32;
        let mut n = 0;
        for i in 0..self.len() {
            if self.params[4 * i] < cut && self.params[4 * i] != PRUNED_RAW {
                self.params[4 * i] = PRUNED_RAW;
                n += 1;
            }
        }
        self.refresh_activity();
        n
    }

    /// Fraction of cells that may hold density.
    pub fn active_fraction(&self) -> f64 {
        let cells = (self.dims[0] - 1) * (self.dims[1] - 1) * (self.dims[2] - 1);
        let on: u32 = self.active.iter().map(|w| w.count_ones()).sum();
        on as f64 / cells as f64
    }

    #[inline]
    fn stencil(&self, p: &Vec3) -> Option<Stencil> {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let top = (self.dims[a] - 1) as f64;
            let s = (p[a] - self.bounds.min[a]) / self.spacing[a];
            if !(s >= -1e-9 && s <= top + 1e-9) {
                return None;
            }
            let s = s.clamp(0.0, top);
            let i0 = (s.floor() as usize).min(self.dims[a] - 2);
            base[a] = i0;
            frac[a] = s - i0 as f64;
        }
        let sx = 1;
        let sy = self.dims[0];
        let sz = self.dims[0] * self.dims[1];
        let b = base[2] * sz + base[1] * sy + base[0];
        let [fx, fy, fz] = frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        Some(Stencil {
            cell: self.cell_index(base[0], base[1], base[2]),
            idx: [
                b,
                b + sx,
                b + sy,
                b + sx + sy,
                b + sz,
                b + sx + sz,
                b + sy + sz,
                b + sx + sy + sz,
            ],
            w: [
                gx * gy * gz,
                fx * gy * gz,
                gx * fy * gz,
                fx * fy * gz,
                gx * gy * fz,
                fx * gy * fz,
                gx * fy * fz,
                fx * fy * fz,
            ],
        })
    }

    #[inline]
    fn interp(&self, s: &Stencil) -> [f64; 4] {
        let mut acc = [0.0f64; 4];
        for c in 0..8 {
            let p = &self.params[4 * s.idx[c]..4 * s.idx[c] + 4];
            let w = s.w[c];
            acc[0] += w * p[0] as f64;
            acc[1] += w * p[1] as f64;
            acc[2] += w * p[2] as f64;
            acc[3] += w * p[3] as f64;
        }
        acc
    }

    /// Interpolated raw values at a point (`None` outside the bounds).
    pub fn query_raw(&self, p: &Vec3) -> Option<[f64; 4]> {
        self.stencil(p).map(|s| self.interp(&s))
    }

    /// Activated density and color; zero density outside the bounds.
    pub fn query(&self, p: &Vec3) -> (f64, [f64; 3]) {
        match self.query_raw(p) {
            Some(r) => (softplus(r[0]), [logistic(r[1]), logistic(r[2]), logistic(r[3])]),
            None => (0.0, [0.5; 3]),
        }
    }

    /// Quadrature volume rendering along `ray` with midpoint samples.
    pub fn volume_render(&self, ray: &Ray, cfg: &RenderConfig) -> RayRender {
        let delta = cfg.step();
        let mut trans = 1.0f64;
        let mut color = [0.0f64; 3];
        let mut weight_sum = 0.0;
        for i in 0..cfg.samples {
            if trans < cfg.stop_transmittance {
                break;
            }
            let t = cfg.near + (i as f64 + 0.5) * delta;
            let Some(s) = self.stencil(&ray.at(t)) else { continue };
            if !self.is_active(s.cell) {
                continue;
            }
            let r = self.interp(&s);
            let sigma = softplus(r[0]);
            let keep = (-sigma * delta).exp();
            let w = trans * (1.0 - keep);
            for k in 0..3 {
                color[k] += w * logistic(r[k + 1]);
            }
            weight_sum += w;
            trans *= keep;
        }
        for k in 0..3 {
            color[k] += trans * cfg.background[k];
        }
        RayRender {
            color,
            transmittance: trans,
            weight_sum,
        }
    }

    pub fn render_view(&self, pose: &Pose, intr: &CameraIntrinsics, cfg: &RenderConfig) -> ImageBuffer {
        let (w, h) = (intr.width, intr.height);
        let rows: Vec<Vec<f32>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut row = Vec::with_capacity(w * 3);
                for x in 0..w {
                    let c = self.volume_render(&pixel_ray(pose, intr, x, y), cfg).color;
                    row.extend(c.iter().map(|v| v.clamp(0.0, 1.0) as f32));
                }
                row
            })
            .collect();
        ImageBuffer::from_raw(w, h, rows.concat()).expect("rendered colors are in range")
    }

    /// Mean over lattice points of the squared raw-density differences to the +x, +y and
    /// +z neighbours.
    pub fn total_variation(&self) -> f64 {
        let [dx, dy, dz] = self.dims;
        let mut s = 0.0;
        for k in 0..dz {
            for j in 0..dy {
                for i in 0..dx {
                    let a = self.params[4 * self.lattice_index(i, j, k)] as f64;
                    if i + 1 < dx {
                        s += (a - self.params[4 * self.lattice_index(i + 1, j, k)] as f64).powi(2);
                    }
                    if j + 1 < dy {
                        s += (a - self.params[4 * self.lattice_index(i, j + 1, k)] as f64).powi(2);
                    }
                    if k + 1 < dz {
                        s += (a - self.params[4 * self.lattice_index(i, j, k + 1)] as f64).powi(2);
                    }
                }
            }
        }
        s / self.len() as f64
    }

    /// d TV / d raw density at lattice point `idx`.
    fn tv_grad(&self, idx: usize) -> f64 {
        let [dx, dy, _] = self.dims;
        let i = idx % dx;
        let j = (idx / dx) % dy;
        let k = idx / (dx * dy);
        let a = self.params[4 * idx] as f64;
        let mut g = 0.0;
        let mut add = |n: usize| g += a - self.params[4 * n] as f64;
        let strides = [1, dx, dx * dy];
        let coords = [i, j, k];
        for ax in 0..3 {
            if coords[ax] > 0 {
                add(idx - strides[ax]);
            }
            if coords[ax] + 1 < self.dims[ax] {
                add(idx + strides[ax]);
            }
        }
        2.0 * g / self.len() as f64
    }

    /// Trilinearly resample onto a new lattice over the same bounds.
    pub fn resampled(&self, dims: [usize; 3]) -> Result<Self> {
        let mut out = Self::filled(self.bounds, dims, [0.0; 4])?;
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let mut p = out.lattice_point(i, j, k);
                    // snap the far faces inside against rounding
                    for a in 0..3 {
                        p[a] = p[a].clamp(self.bounds.min[a], self.bounds.max[a]);
                    }
                    let r = self.query_raw(&p).expect("point inside bounds");
                    let idx = out.lattice_index(i, j, k);
                    out.set_raw(idx, [r[0] as f32, r[1] as f32, r[2] as f32, r[3] as f32]);
                }
            }
        }
        Ok(out)
    }

    /// Forward pass for one ray, plus the backward pass when `grad` is given as
    /// (1/(3·batch), accumulator). Returns the render, the squared color error summed over
    /// channels and the weighted per-sample error Σ w_i·mean_k (c_ik − y_k)².
    fn backprop_ray(
        &self,
        ray: &Ray,
        cfg: &RenderConfig,
        target: &[f64; 3],
        per_sample: f64,
        grad: Option<(f64, &mut GradAccumulator)>,
        scratch: &mut Vec<SampleRecord>,
    ) -> (RayRender, f64, f64) {
        scratch.clear();
        let delta = cfg.step();
        let mut trans = 1.0f64;
        let mut color = [0.0f64; 3];
        let mut weight_sum = 0.0;
        let mut per = 0.0;
        for i in 0..cfg.samples {
            if trans < cfg.stop_transmittance {
                break;
            }
            let t = cfg.near + (i as f64 + 0.5) * delta;
            let Some(s) = self.stencil(&ray.at(t)) else { continue };
            if !self.is_active(s.cell) {
                continue;
            }
            let r = self.interp(&s);
            let sigma = softplus(r[0]);
            let keep = (-sigma * delta).exp();
            let w = trans * (1.0 - keep);
            let c = [logistic(r[1]), logistic(r[2]), logistic(r[3])];
            let mut err = 0.0;
            for k in 0..3 {
                color[k] += w * c[k];
                err += (c[k] - target[k]).powi(2);
            }
            err /= 3.0;
            per += w * err;
            weight_sum += w;
            trans *= keep;
            scratch.push(SampleRecord {
                stencil: s,
                raw_density: r[0],
                color: c,
                err,
                weight: w,
                trans_after: trans,
            });
        }
        for k in 0..3 {
            color[k] += trans * cfg.background[k];
        }
        let sq: f64 = (0..3).map(|k| (color[k] - target[k]).powi(2)).sum();
        let render = RayRender {
            color,
            transmittance: trans,
            weight_sum,
        };
        let Some((scale, acc)) = grad else {
            return (render, sq, per);
        };
        let dl_dc: [f64; 3] = std::array::from_fn(|k| 2.0 * (color[k] - target[k]) * scale);
        let ps = 3.0 * per_sample * scale;
        // Walk backwards keeping the suffix sums Σ_{j>i} w_j c_j + T_final·bg and Σ_{j>i} w_j e_j.
        let mut rest = [trans * cfg.background[0], trans * cfg.background[1], trans * cfg.background[2]];
        let mut rest_err = 0.0;
        for rec in scratch.iter().rev() {
            let mut dsigma = ps * delta * (rec.trans_after * rec.err - rest_err);
            rest_err += rec.weight * rec.err;
            let mut draw_c = [0.0; 3];
            for k in 0..3 {
                let ck = rec.color[k];
                dsigma += dl_dc[k] * delta * (rec.trans_after * ck - rest[k]);
                let dc = dl_dc[k] * rec.weight + ps * rec.weight * (2.0 / 3.0) * (ck - target[k]);
                draw_c[k] = dc * ck * (1.0 - ck);
                rest[k] += rec.weight * ck;
            }
            let draw_d = dsigma * logistic(rec.raw_density);
            for c in 0..8 {
                let w = rec.stencil.w[c];
                acc.add(rec.stencil.idx[c], [w * draw_d, w * draw_c[0], w * draw_c[1], w * draw_c[2]]);
            }
        }
        (render, sq, per)
    }

    /// Gradient of the fitting objective over `rays` (mean squared color error per channel,
    /// plus the weighted per-sample and TV terms) accumulated into `acc`; TV terms only at
    /// touched lattice points. Returns the mean squared color error alone.
    pub fn loss_and_grad(
        &self,
        rays: &[(Ray, [f64; 3])],
        cfg: &RenderConfig,
        weights: &LossWeights,
        acc: &mut GradAccumulator,
    ) -> f64 {
        self.loss_and_grad_with_backgrounds(rays, None, cfg, weights, acc)
    }

    fn loss_and_grad_with_backgrounds(
        &self,
        rays: &[(Ray, [f64; 3])],
        backgrounds: Option<&[[f64; 3]]>,
        cfg: &RenderConfig,
        weights: &LossWeights,
        acc: &mut GradAccumulator,
    ) -> f64 {
        acc.reset();
        let scale = 1.0 / (3.0 * rays.len() as f64);
        let mut scratch = Vec::with_capacity(cfg.samples);
        let mut sq = 0.0;
        let mut ray_cfg = *cfg;
        for (n, (ray, target)) in rays.iter().enumerate() {
            if let Some(bg) = backgrounds {
                ray_cfg.background = bg[n];
            }
            sq += self
                .backprop_ray(ray, &ray_cfg, target, weights.per_sample, Some((scale, &mut *acc)), &mut scratch)
                .1;
        }
        if weights.tv > 0.0 {
            for n in 0..acc.touched.len() {
                let idx = acc.touched[n] as usize;
                acc.grad[4 * idx] += weights.tv * self.tv_grad(idx);
            }
        }
        sq * scale
    }

    /// Full objective matching [`VoxelRadianceField::loss_and_grad`], with dense TV.
    pub fn objective(&self, rays: &[(Ray, [f64; 3])], cfg: &RenderConfig, weights: &LossWeights) -> f64 {
        let mut scratch = Vec::with_capacity(cfg.samples);
        let (mut sq, mut per) = (0.0, 0.0);
        for (ray, target) in rays {
            let (_, s, p) = self.backprop_ray(ray, cfg, target, weights.per_sample, None, &mut scratch);
            sq += s;
            per += p;
        }
        let n = rays.len() as f64;
        let tv = if weights.tv > 0.0 { weights.tv * self.total_variation() } else { 0.0 };
        sq / (3.0 * n) + weights.per_sample * per / n + tv
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.params.len() * 4);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in self.bounds.min.iter().chain(&self.bounds.max) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for d in self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for i in 0..self.len() {
            buf.extend_from_slice(&self.params[4 * i].to_le_bytes());
        }
        for i in 0..self.len() {
            for k in 1..4 {
                buf.extend_from_slice(&self.params[4 * i + k].to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| NeoError::io(path, e))?;
        f.write_all(&buf).map_err(|e| NeoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| NeoError::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| NeoError::Checkpoint(format!("field checkpoint: {m}"));
        let header = 4 + 4 + 48 + 12;
        if buf.len() < header {
            return Err(bad("truncated header"));
        }
        if &buf[0..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let f64_at = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let min = [f64_at(8), f64_at(16), f64_at(24)];
        let max = [f64_at(32), f64_at(40), f64_at(48)];
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
        let dims = [u32_at(56), u32_at(60), u32_at(64)];
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| bad("dims overflow"))?;
        if buf.len() != header + 16 * n {
            return Err(bad(&format!("expected {} bytes, found {}", header + 16 * n, buf.len())));
        }
        let floats: Vec<f32> = buf[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_grids(Aabb::new(min, max), dims, &floats[..n], &floats[n..])
    }
}

fn spacing(b: &Aabb, dims: &[usize; 3]) -> [f64; 3] {
    std::array::from_fn(|a| (b.max[a] - b.min[a]) / (dims[a] - 1) as f64)
}

#[derive(Debug, Clone, Copy)]
struct SampleRecord {
    stencil: Stencil,
    raw_density: f64,
    color: [f64; 3],
    err: f64,
    weight: f64,
    trans_after: f64,
}

/// Sparse-aware gradient buffer: dense storage plus the list of touched lattice points.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    grad: Vec<f64>,
    stamp: Vec<u32>,
    epoch: u32,
    touched: Vec<u32>,
}

impl GradAccumulator {
    pub fn new(points: usize) -> Self {
        GradAccumulator {
            grad: vec![0.0; 4 * points],
            stamp: vec![0; points],
            epoch: 1,
            touched: Vec::new(),
        }
    }

    fn reset(&mut self) {
        for &i in &self.touched {
            let i = i as usize;
            self.grad[4 * i..4 * i + 4].fill(0.0);
        }
        self.touched.clear();
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.fill(0);
            self.epoch = 1;
        }
    }

    #[inline]
    fn add(&mut self, idx: usize, g: [f64; 4]) {
        if self.stamp[idx] != self.epoch {
            self.stamp[idx] = self.epoch;
            self.touched.push(idx as u32);
        }
        let s = &mut self.grad[4 * idx..4 * idx + 4];
        s[0] += g[0];
        s[1] += g[1];
        s[2] += g[2];
        s[3] += g[3];
    }

    /// Lattice points touched since the last reset, in first-touch order.
    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    /// Gradient with respect to flat parameter `p` (4 per lattice point).
    pub fn grad(&self, p: usize) -> f64 {
        self.grad[p]
    }
}

/// Regularization weights of the fitting objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Total variation of the raw density grid.
    pub tv: f64,
    /// Per-sample color error weighted by compositing weight; discourages semi-transparent
    /// haze whose samples only match the pixel on average.
    pub per_sample: f64,
}

/// A posed training image.
#[derive(Debug, Clone)]
pub struct View {
    pub image: ImageBuffer,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub lr_density: f64,
    pub lr_color: f64,
    /// Learning rates decay exponentially to this fraction at the last iteration.
    pub lr_final_fraction: f64,
    pub adam: AdamConfig,
    /// (first iteration, lattice points per axis); applied in order.
    pub schedule: Vec<(usize, usize)>,
    pub tv_weight: f64,
    pub per_sample_weight: f64,
    /// Composite each training ray over a random background color so that leftover
    /// transmittance cannot match the target.
    pub random_background: bool,
    /// Every `prune_every` iterations (0 disables), lattice points below `prune_density`
    /// are emptied so that marching can skip them.
    pub prune_every: usize,
    pub prune_density: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 8000,
            rays_per_batch: 1024,
            lr_density: 0.3,
            lr_color: 0.1,
            lr_final_fraction: 0.1,
            adam: AdamConfig::default(),
            schedule: vec![(0, 32), (2000, 64), (4000, 128)],
            tv_weight: 1e-6,
            per_sample_weight: 1.0,
            random_background: false,
            prune_every: 500,
            prune_density: 0.05,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.rays_per_batch > 0
            && self.lr_density > 0.0
            && self.lr_color > 0.0
            && self.lr_final_fraction > 0.0
            && self.tv_weight >= 0.0
            && self.per_sample_weight >= 0.0;
        let monotone = self.schedule.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        if !positive || !monotone || self.schedule.iter().any(|s| s.1 < 2) {
            return Err(NeoError::InvalidArgument(format!("invalid fit config {self:?}")));
        }
        Ok(())
    }
}

/// Canonical order of views, independent of the order they were passed in.
fn canonical_order(views: &[View]) -> Vec<usize> {
    let key = |v: &View| {
        let mut k: Vec<u64> = v.pose.translation().iter().map(|x| x.to_bits()).collect();
        k.extend(v.pose.rotation().iter().map(|x| x.to_bits()));
        k.push(v.intrinsics.width as u64);
        k.push(v.intrinsics.height as u64);
        k.push(v.intrinsics.focal_px.to_bits());
        k.extend(v.image.data().iter().take(64).map(|x| x.to_bits() as u64));
        k
    };
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by_key(|&i| key(&views[i]));
    order
}

/// Fit raw grids to posed images by minimizing per-ray squared color error with Adam.
/// Returns the fitted field and the per-iteration photometric MSE.
pub fn fit(
    mut field: VoxelRadianceField,
    views: &[View],
    cfg: &FitConfig,
    render: &RenderConfig,
    seed: u64,
) -> Result<(VoxelRadianceField, Vec<f64>)> {
    cfg.validate()?;
    render.validate()?;
    if views.len() < 2 {
        return Err(NeoError::InvalidArgument("fitting needs at least two views".into()));
    }
    if cfg.iterations == 0 {
        return Ok((field, Vec::new()));
    }
    let order = canonical_order(views);
    let mut offsets = Vec::with_capacity(views.len() + 1);
    offsets.push(0usize);
    for &v in &order {
        let i = &views[v].intrinsics;
        offsets.push(offsets.last().unwrap() + i.width * i.height);
    }
    let total_pixels = *offsets.last().unwrap();

    let mut adam = Adam::<f32>::new(field.params.len(), cfg.adam);
    let mut acc = GradAccumulator::new(field.len());
    let mut schedule = cfg.schedule.iter().peekable();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut batch = Vec::with_capacity(cfg.rays_per_batch);
    let mut backgrounds = Vec::new();
    let weights = LossWeights {
        tv: cfg.tv_weight,
        per_sample: cfg.per_sample_weight,
    };
    let decay = cfg.lr_final_fraction.powf(1.0 / cfg.iterations.max(1) as f64);

    for it in 0..cfg.iterations {
        while let Some(&&(start, res)) = schedule.peek() {
            if start > it {
                break;
            }
            schedule.next();
            if field.dims != [res; 3] {
                log::debug!("field: resampling to {res}^3 at iteration {it}");
                field = field.resampled([res; 3])?;
                adam = Adam::new(field.params.len(), cfg.adam);
                acc = GradAccumulator::new(field.len());
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, it as u64));
        batch.clear();
        for _ in 0..cfg.rays_per_batch {
            let g = rng.gen_range(0..total_pixels);
            let slot = offsets.partition_point(|&o| o <= g) - 1;
            let view = &views[order[slot]];
            let local = g - offsets[slot];
            let (x, y) = (local % view.intrinsics.width, local / view.intrinsics.width);
            let c = view.image.get(x, y);
            batch.push((
                pixel_ray(&view.pose, &view.intrinsics, x, y),
                [c[0] as f64, c[1] as f64, c[2] as f64],
            ));
        }

        let loss = if cfg.random_background {
            backgrounds.clear();
            backgrounds.extend((0..batch.len()).map(|_| [rng.gen(), rng.gen(), rng.gen()]));
            field.loss_and_grad_with_backgrounds(&batch, Some(&backgrounds), render, &weights, &mut acc)
        } else {
            field.loss_and_grad(&batch, render, &weights, &mut acc)
        };
        if !loss.is_finite() {
            return Err(NeoError::FitDiverged { iteration: it, loss });
        }
        trace.push(loss);

        let lr_scale = decay.powi(it as i32);
        let lr_d = (cfg.lr_density * lr_scale) as f32;
        let lr_c = (cfg.lr_color * lr_scale) as f32;
        adam.begin_step();
        for &idx in acc.touched() {
            let base = 4 * idx as usize;
            let was_empty = field.params[base] <= EMPTY_RAW;
            for k in 0..4 {
                let lr = if k == 0 { lr_d } else { lr_c };
                let g = acc.grad[base + k] as f32;
                adam.update(base + k, &mut field.params[base + k], g, lr);
            }
            if was_empty && field.params[base] > EMPTY_RAW {
                field.mark_active_around(idx as usize);
            }
        }
        if cfg.prune_every > 0 && cfg.prune_density > 0.0 && it > 0 && it % cfg.prune_every == 0 {
            let n = field.prune(cfg.prune_density);
            log::debug!("field: pruned {n} points, {:.3} of cells active", field.active_fraction());
        }
        if it % 250 == 0 {
            log::info!("field: iteration {it}/{} loss {loss:.5}", cfg.iterations);
        }
    }
    if let Some(bad) = field.params.iter().position(|v| !v.is_finite()) {
        return Err(NeoError::FitDiverged {
            iteration: cfg.iterations,
            loss: field.params[bad] as f64,
        });
    }
    Ok((field, trace))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub max_params: usize,
    pub step: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Denominator floor of the relative error. Finite differences of an O(1) loss lose
    /// about 1e-12 absolute to cancellation, so gradients much smaller than this floor
    /// cannot be checked relatively.
    pub abs_floor: f64,
    /// Scale the analytic gradient of the largest checked parameter (negative control).
    pub corrupt_factor: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            max_params: 1000,
            step: 1e-4,
            weights: LossWeights::default(),
            seed: 0,
            abs_floor: 1e-6,
            corrupt_factor: None,
        }
    }
}

/// Relative error between two derivative estimates; magnitudes below `floor` are
/// compared in absolute terms.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between analytic gradients and central finite differences over
/// randomly chosen parameters touched by `rays`.
pub fn grad_check(field: &VoxelRadianceField, rays: &[(Ray, [f64; 3])], cfg: &RenderConfig, opts: &GradCheckOptions) -> f64 {
    let mut acc = GradAccumulator::new(field.len());
    field.loss_and_grad(rays, cfg, &opts.weights, &mut acc);
    let mut candidates: Vec<usize> = acc
        .touched()
        .iter()
        .flat_map(|&i| (0..4).map(move |k| 4 * i as usize + k))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // partial Fisher-Yates
    let n = opts.max_params.min(candidates.len());
    for i in 0..n {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
    }
    candidates.truncate(n);

    let corrupted = candidates
        .iter()
        .copied()
        .max_by(|&a, &b| acc.grad(a).abs().total_cmp(&acc.grad(b).abs()));

    let full_loss = |f: &VoxelRadianceField| f.objective(rays, cfg, &opts.weights);
    let mut probe = field.clone();
    let mut worst = 0.0f64;
    for &p in &candidates {
        let orig = field.params[p];
        let plus = (orig as f64 + opts.step) as f32;
        let minus = (orig as f64 - opts.step) as f32;
        probe.set_param(p, plus);
        let lp = full_loss(&probe);
        probe.set_param(p, minus);
        let lm = full_loss(&probe);
        probe.set_param(p, orig);
        let numeric = (lp - lm) / (plus as f64 - minus as f64);
        let mut analytic = acc.grad(p);
        if let (Some(f), Some(c)) = (opts.corrupt_factor, corrupted) {
            if c == p {
                analytic *= f;
            }
        }
        worst = worst.max(relative_error(analytic, numeric, opts.abs_floor));
    }
    worst
}
