//! Comparison methods for FOV extrapolation: naive outpainting data, depth-based warping
//! from neighbouring views, rendering at a relocalized pose, and rendering at the true
//! pose. Every method returns the real test image in the center.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_pair, Dataset};
use crate::error::{NeoError, Result};
use crate::field::{RenderConfig, View, VoxelRadianceField};
use crate::geometry::{pixel_ray, project, CameraIntrinsics, Pose};
use crate::image::ImageBuffer;
use crate::scene::DepthBuffer;

pub const THUMB: usize = 16;

/// Naive outpainting data: upscale each real image to the large size and crop its
/// center, so the pair spans a narrower FOV than the cameras the model will be used on.
pub fn naive_dataset(
    views: &[View],
    small_intr: &CameraIntrinsics,
    large_intr: &CameraIntrinsics,
    config_hash: &str,
    seed: u64,
) -> Result<Dataset> {
    let (w, h) = (small_intr.width, small_intr.height);
    let (lw, lh) = (large_intr.width, large_intr.height);
    if lw * h != lh * w {
        return Err(NeoError::InvalidArgument(format!(
            "resize ratio differs between axes: {w}x{h} -> {lw}x{lh}"
        )));
    }
    let pairs = views
        .par_iter()
        .map(|v| {
            if v.image.dims() != (w, h) {
                return Err(NeoError::InvalidArgument(format!(
                    "training image is {}x{}, expected {w}x{h}",
                    v.image.width(),
                    v.image.height()
                )));
            }
            make_pair(v.image.resize_bilinear(lw, lh), small_intr, v.pose)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_pairs(pairs, *small_intr, *large_intr, config_hash.to_string(), seed)
}

/// Quantize `render` and put `center` in its middle.
pub fn with_center(render: &ImageBuffer, center: &ImageBuffer) -> Result<ImageBuffer> {
    let mut out = render.quantized();
    out.paste_center(center)?;
    Ok(out)
}

/// Render at the ground-truth pose; only the border is synthesized.
pub fn oracle_nerf(
    field: &VoxelRadianceField,
    gt_pose: &Pose,
    large_intr: &CameraIntrinsics,
    center: &ImageBuffer,
    render: &RenderConfig,
) -> Result<ImageBuffer> {
    with_center(&field.render_view(gt_pose, large_intr, render), center)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub poses: Vec<Pose>,
    /// Row-major 16×16 luma thumbnails, one per view.
    pub thumbnails: Vec<Vec<f32>>,
}

pub fn thumbnail(img: &ImageBuffer) -> Vec<f32> {
    img.downsample_area(THUMB, THUMB)
        .luma()
        .into_iter()
        .map(|v| v as f32)
        .collect()
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum()
}

pub fn build_retrieval_index(views: &[View]) -> Result<RetrievalIndex> {
    if views.is_empty() {
        return Err(NeoError::InvalidArgument("retrieval index needs at least one view".into()));
    }
    Ok(RetrievalIndex {
        poses: views.iter().map(|v| v.pose).collect(),
        thumbnails: views.par_iter().map(|v| thumbnail(&v.image)).collect(),
    })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Indices of the `k` closest thumbnails, nearest first (ties by index).
    pub fn nearest(&self, img: &ImageBuffer, k: usize) -> Vec<usize> {
        let q = thumbnail(img);
        let mut d: Vec<(f64, usize)> = self.thumbnails.iter().map(|t| l2(&q, t)).zip(0..).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|(_, i)| i).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelocConfig {
    /// Resolution divisors of the test image, coarse first.
    pub pyramid: Vec<usize>,
    /// Maximum objective evaluations per level, excluding gradient probes.
    pub iterations: Vec<usize>,
    /// Finite-difference step for rotation (rad) and translation (m) components.
    pub fd_step: f64,
    /// Length scale of one normalized step unit, rad and m.
    pub step_scale: f64,
    pub render: RenderConfig,
    /// Residual MSE above which the pose is flagged as a failure.
    pub failure_mse: f64,
}

impl Default for RelocConfig {
    fn default() -> Self {
        RelocConfig {
            pyramid: vec![2, 1],
            iterations: vec![20, 10],
            fd_step: 1e-3,
            step_scale: 0.05,
            render: RenderConfig {
                samples: 96,
                ..RenderConfig::default()
            },
            failure_mse: 0.01,
        }
    }
}

impl RelocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid.is_empty()
            || self.pyramid.len() != self.iterations.len()
            || self.pyramid.iter().any(|&d| d == 0)
            || !(self.fd_step > 0.0 && self.step_scale > 0.0 && self.failure_mse > 0.0)
        {
            return Err(NeoError::InvalidArgument(format!("bad relocalization config {self:?}")));
        }
        self.render.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relocalization {
    pub pose: Pose,
    pub initial_pose: Pose,
    /// Index entry used for initialization, if retrieval was used.
    pub retrieved: Option<usize>,
    /// Full-resolution MSE before refinement and after every pyramid level.
    pub residuals: Vec<f64>,
    pub failed: bool,
}

impl Relocalization {
    pub fn residual(&self) -> f64 {
        *self.residuals.last().expect("at least the initial residual")
    }
}

fn mse(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

fn twist(x: &[f64; 6], scale: f64) -> [f64; 6] {
    x.map(|v| v * scale)
}

/// Photometric pose refinement from `init` by gradient descent on the render MSE with
/// forward-difference gradients and an adaptive step, coarse to fine. A level whose
/// result is worse at full resolution than its start is discarded.
pub fn refine_pose(
    field: &VoxelRadianceField,
    test: &ImageBuffer,
    intr: &CameraIntrinsics,
    init: &Pose,
    cfg: &RelocConfig,
) -> Result<Relocalization> {
    cfg.validate()?;
    if test.dims() != (intr.width, intr.height) {
        return Err(NeoError::InvalidArgument("test image does not match intrinsics".into()));
    }
    let full = |p: &Pose| mse(&field.render_view(p, intr, &cfg.render), test);
    let mut pose = *init;
    let mut residuals = vec![full(&pose)];
    for (&div, &iters) in cfg.pyramid.iter().zip(&cfg.iterations) {
        let (w, h) = ((intr.width / div).max(1), (intr.height / div).max(1));
        let li = intr.scaled(w, h);
        let target = if div == 1 {
            test.clone()
        } else {
            test.downsample_area(w, h)
        };
        let f = |p: &Pose| mse(&field.render_view(p, &li, &cfg.render), &target);
        let start = pose;
        let mut cur = f(&pose);
        let mut step = 0.5;
        let h_norm = cfg.fd_step / cfg.step_scale;
        let mut evals = 0;
        while evals < iters && step > 1e-3 {
            let mut g = [0.0; 6];
            for (i, gi) in g.iter_mut().enumerate() {
                let mut e = [0.0; 6];
                e[i] = h_norm;
                *gi = (f(&pose.perturb(&twist(&e, cfg.step_scale))) - cur) / h_norm;
            }
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                break;
            }
            // shrink until the objective drops or the budget runs out
            loop {
                let x = g.map(|v| -step * v / norm);
                let cand = pose.perturb(&twist(&x, cfg.step_scale)).reorthonormalize();
                let val = f(&cand);
                evals += 1;
                if val < cur {
                    pose = cand;
                    cur = val;
                    step = (step * 1.5).min(2.0);
                    break;
                }
                step *= 0.5;
                if evals >= iters || step <= 1e-3 {
                    break;
                }
            }
        }
        let r = full(&pose);
        if r > *residuals.last().unwrap() {
            pose = start;
            residuals.push(*residuals.last().unwrap());
        } else {
            residuals.push(r);
        }
    }
    let failed = *residuals.last().unwrap() > cfg.failure_mse;
    Ok(Relocalization {
        pose,
        initial_pose: *init,
        retrieved: None,
        residuals,
        failed,
    })
}

/// Initialize from the nearest thumbnail in `index`, then refine.
pub fn relocalize(
    field: &VoxelRadianceField,
    test: &ImageBuffer,
    index: &RetrievalIndex,
    intr: &CameraIntrinsics,
    cfg: &RelocConfig,
) -> Result<Relocalization> {
    if index.is_empty() {
        return Err(NeoError::InvalidArgument("retrieval index is empty".into()));
    }
    let i = index.nearest(test, 1)[0];
    let mut r = refine_pose(field, test, intr, &index.poses[i], cfg)?;
    r.retrieved = Some(i);
    Ok(r)
}

/// Render the large view at a relocalized pose around the real test image.
pub fn relocalized_nerf(
    field: &VoxelRadianceField,
    test: &ImageBuffer,
    index: &RetrievalIndex,
    small_intr: &CameraIntrinsics,
    large_intr: &CameraIntrinsics,
    cfg: &RelocConfig,
    render: &RenderConfig,
) -> Result<(ImageBuffer, Relocalization)> {
    let r = relocalize(field, test, index, small_intr, cfg)?;
    let img = with_center(&field.render_view(&r.pose, large_intr, render), test)?;
    Ok((img, r))
}

/// A source view for warping, with per-pixel hit distance.
#[derive(Debug, Clone)]
pub struct DepthView {
    pub image: ImageBuffer,
    pub depth: DepthBuffer,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub image: ImageBuffer,
    /// Row-major; true where the pixel came from the center or a splat.
    pub valid: Vec<bool>,
}

impl WarpResult {
    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|v| **v).count() as f64 / self.valid.len() as f64
    }
}

/// Forward-splat every neighbour pixel through its depth into the target view, keeping
/// the nearest surface per pixel, then paste the test image in the center. Holes take
/// the mean color of the valid pixels.
pub fn warp_fuse(
    test: &ImageBuffer,
    neighbors: &[DepthView],
    target_pose: &Pose,
    large_intr: &CameraIntrinsics,
) -> Result<WarpResult> {
    if neighbors.is_empty() {
        return Err(NeoError::InvalidArgument("warping needs at least one neighbour".into()));
    }
    let (w, h) = (large_intr.width, large_intr.height);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut color = vec![[0.0f32; 3]; w * h];
    for n in neighbors {
        let (nw, nh) = n.image.dims();
        if (n.depth.width, n.depth.height) != (nw, nh) || (n.intrinsics.width, n.intrinsics.height) != (nw, nh) {
            return Err(NeoError::InvalidArgument("neighbour image, depth and intrinsics disagree".into()));
        }
        for y in 0..nh {
            for x in 0..nw {
                let t = n.depth.get(x, y);
                if !t.is_finite() {
                    continue;
                }
                let world = pixel_ray(&n.pose, &n.intrinsics, x, y).at(t as f64);
                let Some((u, v, z)) = project(target_pose, large_intr, &world) else {
                    continue;
                };
                if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
                    continue;
                }
                let i = v as usize * w + u as usize;
                if z < zbuf[i] {
                    zbuf[i] = z;
                    color[i] = n.image.get(x, y);
                }
            }
        }
    }
    let mut valid: Vec<bool> = zbuf.iter().map(|z| z.is_finite()).collect();
    let (x0, y0) = large_intr.center_offset(&CameraIntrinsics::new(
        large_intr.focal_px,
        test.width(),
        test.height(),
    )?)?;
    for y in 0..test.height() {
        for x in 0..test.width() {
            let i = (y + y0) * w + x + x0;
            valid[i] = true;
            color[i] = test.get(x, y);
        }
    }
    let mut mean = [0.0f64; 3];
    let count = valid.iter().filter(|v| **v).count() as f64;
    for (c, _) in color.iter().zip(&valid).filter(|(_, v)| **v) {
        for k in 0..3 {
            mean[k] += c[k] as f64 / count;
        }
    }
    let fill = [mean[0] as f32, mean[1] as f32, mean[2] as f32];
    let mut img = ImageBuffer::from_fn(w, h, |x, y| {
        let i = y * w + x;
        if valid[i] {
            color[i]
        } else {
            fill
        }
    })
    .quantized();
    img.paste_center(test)?;
    Ok(WarpResult { image: img, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Aabb, Scene, Texture, TextureKind, TexturedBox};
    use crate::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr(f: f64, w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(f, w, h).unwrap()
    }

    /// Hollow box field: opaque shell with smoothly varying color, empty inside.
    fn shell_field() -> VoxelRadianceField {
        let b = Aabb::new([-1.2, -1.2, -1.2], [1.2, 1.2, 1.2]);
        let n = 25;
        let mut f = VoxelRadianceField::filled(b, [n, n, n], [-20.0, 0.0, 0.0, 0.0]).unwrap();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let p = f.lattice_point(i, j, k);
                    let shell = p.x.abs().max(p.y.abs()).max(p.z.abs()) > 0.95;
                    let raw = if shell { 4.0 } else { -20.0 };
                    let c = [
                        (3.0 * p.x + 1.7 * p.z).sin() * 2.0,
                        (2.3 * p.y - 1.1 * p.x).cos() * 2.0,
                        (2.9 * p.z + 0.7 * p.y).sin() * 2.0,
                    ];
                    f.set_raw(f.lattice_index(i, j, k), [raw, c[0] as f32, c[1] as f32, c[2] as f32]);
                }
            }
        }
        f.refresh_activity();
        f
    }

    fn render_cfg() -> RenderConfig {
        RenderConfig {
            samples: 96,
            far: 4.5,
            ..RenderConfig::default()
        }
    }

    fn reloc_cfg() -> RelocConfig {
        RelocConfig {
            render: render_cfg(),
            iterations: vec![30, 15],
            ..RelocConfig::default()
        }
    }

    fn face_colored_room() -> Scene {
        let faces: [Texture; 6] = std::array::from_fn(|i| Texture::constant([0.1 + 0.13 * i as f64, 0.5, 0.9 - 0.1 * i as f64]));
        Scene {
            seed: 0,
            room: TexturedBox {
                bounds: Aabb::new([0.0; 3], [4.0, 4.0, 3.0]),
                textures: faces,
            },
            obstacles: vec![],
        }
    }

    #[test]
    fn naive_pair_is_zoomed_center() {
        let views = vec![View {
            image: ImageBuffer::new(8, 8, [0.4, 0.2, 0.9]),
            pose: Pose::identity(),
            intrinsics: intr(4.0, 8, 8),
        }];
        let d = naive_dataset(&views, &intr(4.0, 8, 8), &intr(4.0, 16, 16), "", 0).unwrap();
        assert_eq!(d.len(), 1);
        let c = ImageBuffer::new(8, 8, [0.4, 0.2, 0.9]).quantized();
        assert_eq!(d.pairs[0].small, c);
        assert!(naive_dataset(&views, &intr(4.0, 8, 8), &intr(4.0, 16, 12), "", 0).is_err());
        // the crop of a 2x upscale spans half the tangent extent of the original
        let beta = 2.0 * ((90f64.to_radians() / 2.0).tan() / 2.0).atan();
        assert!((beta.to_degrees() - 53.13).abs() < 0.01);
    }

    #[test]
    fn naive_crop_shows_middle_half() {
        let img = ImageBuffer::from_fn(8, 8, |x, y| [x as f32 / 7.0, y as f32 / 7.0, 0.0]);
        let views: Vec<View> = (0..3)
            .map(|_| View {
                image: img.clone(),
                pose: Pose::identity(),
                intrinsics: intr(4.0, 8, 8),
            })
            .collect();
        let d = naive_dataset(&views, &intr(4.0, 8, 8), &intr(4.0, 16, 16), "", 0).unwrap();
        assert_eq!(d.len(), 3);
        let s = &d.pairs[0].small;
        // leftmost small column samples the original around x = 2, the rightmost around x = 5
        assert!(s.get(0, 4)[0] > 1.5 / 7.0 && s.get(0, 4)[0] < 2.5 / 7.0);
        assert!(s.get(7, 4)[0] > 4.5 / 7.0 && s.get(7, 4)[0] < 5.5 / 7.0);
    }

    #[test]
    fn oracle_on_exact_field_and_center_passthrough() {
        let f = VoxelRadianceField::filled(
            Aabb::new([-2.0; 3], [2.0; 3]),
            [4, 4, 4],
            [5.0, 0.0, 1.0, -1.0],
        )
        .unwrap();
        let cfg = RenderConfig {
            samples: 64,
            far: 3.0,
            ..RenderConfig::default()
        };
        let li = intr(4.0, 8, 8);
        let gt = f.render_view(&Pose::identity(), &li, &cfg).quantized();
        let center = gt.center_crop(4, 4).unwrap();
        let out = oracle_nerf(&f, &Pose::identity(), &li, &center, &cfg).unwrap();
        assert_eq!(out, gt);
        let odd_center = ImageBuffer::new(4, 4, [0.123, 0.0, 1.0]);
        let out = oracle_nerf(&f, &Pose::identity(), &li, &odd_center, &cfg).unwrap();
        assert_eq!(out.center_crop(4, 4).unwrap(), odd_center);
    }

    fn index_views() -> Vec<View> {
        let f = shell_field();
        let li = intr(8.0, 16, 16);
        (0..6)
            .map(|i| {
                let pose = Pose::from_position_ypr(Vec3::new(0.1 * i as f64 - 0.3, 0.0, 0.0), i as f64, 0.0, 0.0);
                View {
                    image: f.render_view(&pose, &li, &render_cfg()),
                    pose,
                    intrinsics: li,
                }
            })
            .collect()
    }

    #[test]
    fn retrieval_finds_itself_even_with_noise() {
        let views = index_views();
        let idx = build_retrieval_index(&views).unwrap();
        assert_eq!(idx.len(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (i, v) in views.iter().enumerate() {
            assert_eq!(idx.nearest(&v.image, 1), vec![i]);
            let noisy = ImageBuffer::from_raw(
                16,
                16,
                v.image.data().iter().map(|x| (x + rng.gen_range(-2.0..2.0) / 255.0).clamp(0.0, 1.0)).collect(),
            )
            .unwrap();
            assert_eq!(idx.nearest(&noisy, 1), vec![i]);
        }
        assert!(build_retrieval_index(&[]).is_err());
    }

    #[test]
    fn refinement_fixed_point_at_true_pose() {
        let f = shell_field();
        let li = intr(8.0, 16, 16);
        let pose = Pose::from_position_ypr(Vec3::new(0.2, -0.1, 0.05), 0.7, 0.1, 0.0);
        let test = f.render_view(&pose, &li, &render_cfg());
        let r = refine_pose(&f, &test, &li, &pose, &reloc_cfg()).unwrap();
        let (ang, dist) = r.pose.distance(&pose);
        assert!(dist < 1e-3 && ang.to_degrees() < 0.1, "{dist} {ang}");
        assert!(!r.failed);
    }

    #[test]
    fn refinement_recovers_small_perturbation_and_residuals_do_not_rise() {
        let f = shell_field();
        let li = intr(8.0, 16, 16);
        let pose = Pose::from_position_ypr(Vec3::new(0.2, -0.1, 0.05), 0.7, 0.1, 0.0);
        let test = f.render_view(&pose, &li, &render_cfg());
        let init = pose.perturb(&[0.0, 0.0, 3f64.to_radians(), 0.05, -0.03, 0.02]);
        let r = refine_pose(&f, &test, &li, &init, &reloc_cfg()).unwrap();
        let (a0, d0) = init.distance(&pose);
        let (a1, d1) = r.pose.distance(&pose);
        assert!(a1 < a0 && d1 < d0, "{a0} {d0} -> {a1} {d1}");
        assert!(r.residuals.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.residual() < r.residuals[0]);
    }

    #[test]
    fn far_initialization_is_flagged() {
        let f = shell_field();
        let li = intr(8.0, 16, 16);
        let pose = Pose::from_position_ypr(Vec3::new(0.5, 0.5, 0.0), 0.3, 0.0, 0.0);
        let test = f.render_view(&pose, &li, &render_cfg());
        let init = Pose::from_position_ypr(Vec3::new(-0.6, -0.6, 0.3), 3.5, 0.0, 0.0);
        let cfg = RelocConfig {
            iterations: vec![4, 2],
            failure_mse: 1e-3,
            ..reloc_cfg()
        };
        assert!(refine_pose(&f, &test, &li, &init, &cfg).unwrap().failed);
    }

    #[test]
    fn relocalized_with_perfect_pose_matches_oracle() {
        let f = shell_field();
        let views = index_views();
        let idx = build_retrieval_index(&views).unwrap();
        let small = intr(8.0, 16, 16);
        let large = intr(8.0, 24, 24);
        let test = views[2].image.quantized();
        let (img, r) = relocalized_nerf(&f, &test, &idx, &small, &large, &reloc_cfg(), &render_cfg()).unwrap();
        assert_eq!(r.retrieved, Some(2));
        assert_eq!(img.center_crop(16, 16).unwrap(), test);
        let oracle = oracle_nerf(&f, &r.pose, &large, &test, &render_cfg()).unwrap();
        assert_eq!(img, oracle);
    }

    #[test]
    fn yaw_error_shifts_the_band() {
        // a yaw error of 2 deg moves image content by about f·tan(2°) pixels
        let f = 128.0;
        let shift = f * 2f64.to_radians().tan();
        assert!((shift - 4.47).abs() < 0.01);
        let li = intr(f, 64, 64);
        let p = Pose::from_position_ypr(Vec3::zeros(), 0.0, 0.0, 0.0);
        let q = Pose::from_position_ypr(Vec3::zeros(), 2f64.to_radians(), 0.0, 0.0);
        let world = pixel_ray(&p, &li, 32, 32).at(3.0);
        let (u0, ..) = project(&p, &li, &world).unwrap();
        let (u1, ..) = project(&q, &li, &world).unwrap();
        assert!(((u1 - u0).abs() - shift).abs() < 0.05);
    }

    fn depth_view(scene: &Scene, pose: Pose, li: CameraIntrinsics) -> DepthView {
        let (image, depth) = scene.render(&pose, &li).unwrap();
        DepthView {
            image: image.quantized(),
            depth,
            pose,
            intrinsics: li,
        }
    }

    #[test]
    fn identity_neighbor_fills_its_own_footprint() {
        let scene = face_colored_room();
        let pose = Pose::from_position_ypr(Vec3::new(2.0, 2.0, 1.5), 0.3, 0.0, 0.0);
        let small = intr(16.0, 16, 16);
        let large = intr(16.0, 32, 32);
        let n = depth_view(&scene, pose, small);
        let r = warp_fuse(&n.image, &[n.clone()], &pose, &large).unwrap();
        assert!(r.valid_fraction() >= 0.25);
        assert_eq!(r.image.center_crop(16, 16).unwrap(), n.image);
        let wide = depth_view(&scene, pose, large);
        let r = warp_fuse(&n.image, &[wide], &pose, &large).unwrap();
        assert_eq!(r.valid_fraction(), 1.0);
        assert!(warp_fuse(&n.image, &[], &pose, &large).is_err());
    }

    #[test]
    fn warped_pixels_match_ground_truth() {
        let scene = face_colored_room();
        let target = Pose::from_position_ypr(Vec3::new(2.0, 2.0, 1.5), 0.3, 0.0, 0.0);
        let large = intr(16.0, 32, 32);
        let src = intr(16.0, 32, 32);
        let neighbors: Vec<DepthView> = [
            Pose::from_position_ypr(Vec3::new(1.8, 2.1, 1.4), 0.6, 0.0, 0.0),
            Pose::from_position_ypr(Vec3::new(2.2, 1.9, 1.6), -0.2, 0.1, 0.0),
        ]
        .into_iter()
        .map(|p| depth_view(&scene, p, src))
        .collect();
        let (gt, _) = scene.render(&target, &large).unwrap();
        let gt = gt.quantized();
        let test = gt.center_crop(16, 16).unwrap();
        let r = warp_fuse(&test, &neighbors, &target, &large).unwrap();
        let mut compared = 0;
        for y in 1..31 {
            for x in 1..31 {
                // skip face boundaries, where a nearest-pixel splat may land on the other face
                let c = gt.get(x, y);
                let flat = (-1i32..=1).all(|dy| (-1i32..=1).all(|dx| gt.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) == c));
                if flat && r.valid[y * 32 + x] {
                    compared += 1;
                    for (a, b) in r.image.get(x, y).iter().zip(c) {
                        assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
                    }
                }
            }
        }
        assert!(compared > 200, "{compared}");
    }

    #[test]
    fn validity_grows_with_more_neighbors() {
        let scene = Scene {
            room: TexturedBox {
                bounds: Aabb::new([0.0; 3], [4.0, 4.0, 3.0]),
                textures: std::array::from_fn(|i| Texture {
                    kind: TextureKind::Checker,
                    color_a: [0.2, 0.1 * i as f64, 0.5],
                    color_b: [0.8, 0.3, 0.1],
                    scale: 0.5,
                    seed: i as u64,
                }),
            },
            ..face_colored_room()
        };
        let target = Pose::from_position_ypr(Vec3::new(2.0, 2.0, 1.5), 0.0, 0.0, 0.0);
        let li = intr(16.0, 16, 16);
        let large = intr(16.0, 32, 32);
        let test = scene.render(&target, &li).unwrap().0.quantized();
        let all: Vec<DepthView> = (0..5)
            .map(|i| depth_view(&scene, Pose::from_position_ypr(Vec3::new(2.0, 2.0, 1.5), -0.8 + 0.4 * i as f64, 0.0, 0.0), li))
            .collect();
        let mut prev = 0.0;
        for k in 1..=5 {
            let v = warp_fuse(&test, &all[..k], &target, &large).unwrap().valid_fraction();
            assert!(v >= prev);
            prev = v;
        }
        assert!(prev < 1.0);
    }
}
