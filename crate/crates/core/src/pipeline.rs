//! End-to-end experiment: scene, training renders, field fit, pose sampling, paired
//! dataset, outpainter training, baselines, evaluation and ablations.
//!
//! Every stage writes into its own directory and finishes by writing `provenance.json`
//! with a hash of everything that determines its output. A stage whose provenance hash
//! already matches is skipped. A stage refuses to read upstream artifacts whose hash
//! differs from what the current config implies, unless forced.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    build_retrieval_index, naive_dataset, oracle_nerf, relocalized_nerf, warp_fuse, DepthView, RelocConfig,
    Relocalization,
};
use crate::dataset::{self, filter_blurry, generate_pairs, make_pair, BlurPolicy, Dataset};
use crate::error::{NeoError, Result};
use crate::field::{fit, FitConfig, RenderConfig, View, VoxelRadianceField};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::ImageBuffer;
use crate::metrics::{band_mask, evaluate_method, psnr, MetricReport};
use crate::outpaint::{write_loss_trace, Architecture, OutpaintModel, TrainConfig, TrainingSet};
use crate::sampling::{fit_dof_distribution, read_pose_list, sample_poses, write_pose_list, DofSpec, SamplerConfig};
use crate::scene::{sample_test_paths, sample_training_trajectory, DepthBuffer, Scene, SceneConfig, WalkConfig};
use crate::seeds::derive_seed;

pub const PROVENANCE_FILE: &str = "provenance.json";

pub const NAIVE: &str = "NaiveOutpainting";
pub const WARP: &str = "WarpFusion";
pub const RELOC: &str = "RelocalizedNeRF";
pub const ORACLE: &str = "OracleNeRF";
pub const NEO: &str = "NEO";
pub const ALL_METHODS: [&str; 5] = [NAIVE, WARP, RELOC, ORACLE, NEO];

// fixed offsets for per-stage seeds
const SEED_TRAIN_POSES: u64 = 1;
const SEED_TEST_PATHS: u64 = 2;
const SEED_FIT: u64 = 3;
const SEED_SAMPLER: u64 = 4;
const SEED_OUTPAINTER: u64 = 5;
const SEED_NAIVE: u64 = 6;
const SEED_FOV_ORIGINAL: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSection {
    pub seed: u64,
    pub config: SceneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSection {
    /// Camera of the training captures and of the test inputs.
    pub train: CameraIntrinsics,
    /// Input FOV at outpainting resolution; same FOV as `train`.
    pub small: CameraIntrinsics,
    /// Extended FOV, same focal length as `small`.
    pub large: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySection {
    pub train_count: usize,
    pub camera_height: f64,
    pub walkable_cell: f64,
    pub walkable_margin: f64,
    pub test_paths: usize,
    pub test_per_path: usize,
    pub walk: WalkConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSection {
    pub fit: FitConfig,
    pub render: RenderConfig,
    /// Field bounds are the room bounds grown by this margin.
    pub bounds_margin: f64,
    /// Minimum mean per-view PSNR (dB) of held-out renders, from the calibration run.
    pub fidelity_threshold_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSection {
    pub interval: f64,
    pub yaw_count: usize,
    pub coverage_threshold: Option<f64>,
    pub dof: DofSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub blur: BlurPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutpainterSection {
    pub architecture: Architecture,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSection {
    pub neighbors: usize,
    pub reloc: RelocConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub methods: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSection {
    pub intervals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scene: SceneSection,
    pub camera: CameraSection,
    pub trajectory: TrajectorySection,
    pub field: FieldSection,
    pub sampler: SamplerSection,
    pub dataset: DatasetSection,
    pub outpainter: OutpainterSection,
    pub baselines: BaselineSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl PipelineConfig {
    /// Desk-scale experiment: 3.6 m room, 64×64 training views at 90°, outpainting from
    /// 32×32 to 48×48 at the same focal length.
    pub fn desk() -> Self {
        let scene = SceneConfig::default();
        let [sx, sy, sz] = scene.room_size;
        let diag = (sx * sx + sy * sy + sz * sz).sqrt();
        let render = RenderConfig {
            samples: 192,
            near: 0.05,
            far: diag,
            background: [0.0; 3],
            stop_transmittance: 1e-3,
        };
        PipelineConfig {
            seed: 2024,
            scene: SceneSection { seed: 7, config: scene },
            camera: CameraSection {
                train: CameraIntrinsics::new(32.0, 64, 64).expect("valid"),
                small: CameraIntrinsics::new(16.0, 32, 32).expect("valid"),
                large: CameraIntrinsics::new(16.0, 48, 48).expect("valid"),
            },
            trajectory: TrajectorySection {
                train_count: 200,
                camera_height: 1.5,
                walkable_cell: 0.05,
                walkable_margin: 0.2,
                test_paths: 10,
                test_per_path: 20,
                walk: WalkConfig::default(),
            },
            field: FieldSection {
                fit: FitConfig::default(),
                render,
                bounds_margin: 0.1,
                fidelity_threshold_db: 34.0,
            },
            sampler: SamplerSection {
                interval: 0.1,
                yaw_count: 8,
                coverage_threshold: Some(0.3),
                dof: DofSpec::default(),
            },
            dataset: DatasetSection {
                blur: BlurPolicy::default(),
            },
            outpainter: OutpainterSection {
                architecture: Architecture::default(),
                train: TrainConfig {
                    learning_rate: 5e-3,
                    ..TrainConfig::default()
                },
            },
            baselines: BaselineSection {
                neighbors: 3,
                reloc: RelocConfig {
                    render: RenderConfig { samples: 96, ..render },
                    ..RelocConfig::default()
                },
            },
            eval: EvalSection {
                methods: ALL_METHODS.iter().map(|s| s.to_string()).collect(),
            },
            ablation: AblationSection {
                intervals: vec![0.4, 0.2, 0.1],
            },
        }
    }

    /// Minutes-scale smoke configuration: a handful of low-resolution views, short
    /// fits and a few hundred training steps.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.camera = CameraSection {
            train: CameraIntrinsics::new(20.0, 40, 40).expect("valid"),
            small: CameraIntrinsics::new(10.0, 20, 20).expect("valid"),
            large: CameraIntrinsics::new(10.0, 32, 32).expect("valid"),
        };
        c.trajectory.train_count = 40;
        c.trajectory.test_paths = 2;
        c.trajectory.test_per_path = 4;
        c.field.fit = FitConfig {
            iterations: 400,
            rays_per_batch: 256,
            schedule: vec![(0, 24)],
            prune_every: 0,
            ..FitConfig::default()
        };
        c.field.render.samples = 64;
        c.field.fidelity_threshold_db = 0.0;
        c.sampler.interval = 0.5;
        c.sampler.yaw_count = 4;
        c.outpainter.train.iterations = 60;
        c.outpainter.train.batch_size = 4;
        c.baselines.reloc.pyramid = vec![1];
        c.baselines.reloc.iterations = vec![3];
        c.baselines.reloc.render.samples = 32;
        c.ablation.intervals = vec![0.8, 0.5];
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NeoError::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| NeoError::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| NeoError::json(path, e))?;
        fs::write(path, json).map_err(|e| NeoError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.camera;
        for i in [&c.train, &c.small, &c.large] {
            i.validate()?;
        }
        let (tx, ty) = c.train.fov_degrees()?;
        let (sx, sy) = c.small.fov_degrees()?;
        if (tx - sx).abs() > 1e-9 || (ty - sy).abs() > 1e-9 {
            return Err(NeoError::Config(format!(
                "training camera FOV ({tx}°, {ty}°) differs from input FOV ({sx}°, {sy}°)"
            )));
        }
        let (lx, ly) = c.large.fov_degrees()?;
        let derived = c.small.extend_to_fov(lx, ly)?;
        if derived != c.large {
            return Err(NeoError::Config(format!(
                "large intrinsics {:?} are not the extension of {:?} (expected {:?})",
                c.large, c.small, derived
            )));
        }
        let f = self.outpainter.architecture.downsample_factor();
        if c.large.width % f != 0 || c.large.height % f != 0 {
            return Err(NeoError::Config(format!("large image sides must be divisible by {f}")));
        }
        self.outpainter.architecture.validate()?;
        self.outpainter.train.validate()?;
        self.field.fit.validate()?;
        self.field.render.validate()?;
        self.baselines.reloc.validate()?;
        let t = &self.trajectory;
        if t.train_count < 2 || t.test_paths == 0 || t.test_per_path == 0 || self.baselines.neighbors == 0 {
            return Err(NeoError::Config("trajectory and neighbour counts must be positive".into()));
        }
        for m in &self.eval.methods {
            if !ALL_METHODS.contains(&m.as_str()) {
                return Err(NeoError::Config(format!("unknown method {m}")));
            }
        }
        SamplerConfig {
            interval: self.sampler.interval,
            yaw_count: self.sampler.yaw_count,
            coverage_threshold: self.sampler.coverage_threshold,
            seed: 0,
        }
        .validate()
    }

    pub fn stage_seed(&self, offset: u64) -> u64 {
        derive_seed(self.seed, offset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    SceneGen,
    RenderTrain,
    FitField,
    SamplePoses,
    GenDataset,
    TrainOutpainter,
    TrainNaive,
    RunBaselines,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::SceneGen => "scene-gen",
            Stage::RenderTrain => "render-train",
            Stage::FitField => "fit-field",
            Stage::SamplePoses => "sample-poses",
            Stage::GenDataset => "gen-dataset",
            Stage::TrainOutpainter => "train-outpainter",
            Stage::TrainNaive => "train-naive",
            Stage::RunBaselines => "run-baselines",
            Stage::Eval => "eval",
        }
    }

    /// Bumped whenever a stage's output format or algorithm changes.
    fn version(self) -> u32 {
        1
    }

    fn dir(self) -> &'static str {
        match self {
            Stage::SceneGen => "scene",
            Stage::RenderTrain => "renders",
            Stage::FitField => "field",
            Stage::SamplePoses => "poses",
            Stage::GenDataset => "dataset",
            Stage::TrainOutpainter => "outpainter",
            Stage::TrainNaive => "naive",
            Stage::RunBaselines => "results",
            Stage::Eval => "eval",
        }
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::SceneGen => &[],
            Stage::RenderTrain => &[Stage::SceneGen],
            Stage::FitField => &[Stage::RenderTrain],
            Stage::SamplePoses => &[Stage::SceneGen, Stage::RenderTrain],
            Stage::GenDataset => &[Stage::FitField, Stage::SamplePoses],
            Stage::TrainOutpainter => &[Stage::GenDataset],
            Stage::TrainNaive => &[Stage::RenderTrain],
            Stage::RunBaselines => &[Stage::RenderTrain, Stage::FitField, Stage::TrainNaive],
            Stage::Eval => &[Stage::RenderTrain, Stage::TrainOutpainter, Stage::RunBaselines],
        }
    }

    pub const ALL: [Stage; 9] = [
        Stage::SceneGen,
        Stage::RenderTrain,
        Stage::FitField,
        Stage::SamplePoses,
        Stage::GenDataset,
        Stage::TrainOutpainter,
        Stage::TrainNaive,
        Stage::RunBaselines,
        Stage::Eval,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub stage_version: u32,
    pub config_hash: String,
    pub seed: u64,
    /// Hashes of the upstream artifacts actually read.
    pub inputs: Vec<(String, String)>,
    /// Wall time of the run that produced the artifact.
    #[serde(default)]
    pub seconds: f64,
    pub forced: bool,
    #[serde(default)]
    pub notes: serde_json::Value,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(NeoError::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| NeoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| NeoError::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| NeoError::json(path, e))?;
    fs::write(path, text).map_err(|e| NeoError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| NeoError::io(path, e))
}

pub fn read_provenance(dir: &Path) -> Result<Provenance> {
    read_json(&dir.join(PROVENANCE_FILE))
}

struct StageRun {
    inputs: Vec<(String, String)>,
    start: Instant,
}

/// Whether a stage ran or was found up to date.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TestPose {
    path: usize,
    step: usize,
    pose: Pose,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fidelity {
    pub views: usize,
    pub mean_psnr_db: f64,
    pub pooled_psnr_db: f64,
    pub threshold_db: f64,
    pub fit_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlurSummary {
    pub threshold: f64,
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResultMeta {
    id: String,
    estimated_pose: Option<Pose>,
    residual: Option<f64>,
    relocalization_failed: Option<bool>,
    valid_fraction: Option<f64>,
}

/// Test inputs and ground truths.
pub struct TestSet {
    pub poses: Vec<Pose>,
    pub truths: Vec<ImageBuffer>,
    pub inputs: Vec<ImageBuffer>,
}

pub fn test_id(i: usize) -> String {
    format!("{i:04}")
}

/// Where each stage lives; ablations redirect part of the graph.
#[derive(Debug, Clone)]
struct Layout {
    dirs: Vec<(Stage, PathBuf)>,
}

impl Layout {
    fn standard(root: &Path) -> Self {
        Layout {
            dirs: Stage::ALL.iter().map(|s| (*s, root.join(s.dir()))).collect(),
        }
    }

    fn get(&self, s: Stage) -> &Path {
        &self.dirs.iter().find(|(k, _)| *k == s).expect("every stage has a dir").1
    }

    fn set(&mut self, s: Stage, p: PathBuf) {
        self.dirs.iter_mut().find(|(k, _)| *k == s).expect("every stage has a dir").1 = p;
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    root: PathBuf,
    layout: Layout,
    force: bool,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, out: &Path, force: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline {
            layout: Layout::standard(out),
            root: out.to_path_buf(),
            cfg,
            force,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, s: Stage) -> &Path {
        self.layout.get(s)
    }

    /// Config sections a stage depends on directly.
    fn sections(&self, s: Stage) -> serde_json::Value {
        let c = &self.cfg;
        let v = |x: &dyn erased::Ser| x.value();
        match s {
            Stage::SceneGen => v(&c.scene),
            Stage::RenderTrain => serde_json::json!({ "camera": v(&c.camera), "trajectory": v(&c.trajectory), "seed": c.seed }),
            Stage::FitField => serde_json::json!({ "field": v(&c.field), "seed": c.seed }),
            Stage::SamplePoses => serde_json::json!({ "sampler": v(&c.sampler), "seed": c.seed }),
            Stage::GenDataset => serde_json::json!({ "dataset": v(&c.dataset), "camera": v(&c.camera) }),
            Stage::TrainOutpainter => serde_json::json!({ "outpainter": v(&c.outpainter), "seed": c.seed }),
            Stage::TrainNaive => serde_json::json!({ "outpainter": v(&c.outpainter), "seed": c.seed }),
            Stage::RunBaselines => serde_json::json!({ "baselines": v(&c.baselines) }),
            Stage::Eval => serde_json::json!({ "eval": v(&c.eval) }),
        }
    }

    /// Hash implied by the config for a stage, including everything upstream.
    pub fn expected_hash(&self, s: Stage) -> String {
        let ups: Vec<String> = s.upstream().iter().map(|u| self.expected_hash(*u)).collect();
        let doc = serde_json::json!({
            "stage": s.name(),
            "version": s.version(),
            "sections": self.sections(s),
            "upstream": ups,
        });
        sha256_hex(doc.to_string().as_bytes())
    }

    fn is_current(&self, s: Stage) -> bool {
        read_provenance(self.layout.get(s)).is_ok_and(|p| p.config_hash == self.expected_hash(s))
    }

    /// Check an upstream artifact before reading it.
    fn require(&self, s: Stage) -> Result<(String, String)> {
        let dir = self.layout.get(s);
        let p = read_provenance(dir).map_err(|e| match e {
            NeoError::MissingArtifact(_) => NeoError::MissingArtifact(dir.to_path_buf()),
            other => other,
        })?;
        let expected = self.expected_hash(s);
        if p.config_hash != expected && !self.force {
            return Err(NeoError::StaleArtifact {
                path: dir.to_path_buf(),
                expected,
                found: p.config_hash,
            });
        }
        Ok((s.name().to_string(), p.config_hash))
    }

    fn begin(&self, s: Stage) -> Result<Option<StageRun>> {
        let inputs = s.upstream().iter().map(|u| self.require(*u)).collect::<Result<Vec<_>>>()?;
        if self.is_current(s) {
            info!("{}: up to date", s.name());
            return Ok(None);
        }
        let dir = self.layout.get(s);
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| NeoError::io(dir, e))?;
        }
        create_dir(dir)?;
        info!("{}: running", s.name());
        Ok(Some(StageRun {
            inputs,
            start: Instant::now(),
        }))
    }

    fn finish(&self, s: Stage, run: StageRun, notes: serde_json::Value) -> Result<Outcome> {
        let p = Provenance {
            stage: s.name().to_string(),
            stage_version: s.version(),
            config_hash: self.expected_hash(s),
            seed: self.cfg.seed,
            inputs: run.inputs,
            seconds: run.start.elapsed().as_secs_f64(),
            forced: self.force,
            notes,
        };
        write_json(&self.layout.get(s).join(PROVENANCE_FILE), &p)?;
        Ok(Outcome::Ran)
    }

    fn load_scene(&self) -> Result<Scene> {
        Scene::load(&self.layout.get(Stage::SceneGen).join("scene.json"))
    }

    pub fn scene_gen(&self) -> Result<Outcome> {
        let Some(inputs) = self.begin(Stage::SceneGen)? else {
            return Ok(Outcome::UpToDate);
        };
        let scene = Scene::build(self.cfg.scene.seed, &self.cfg.scene.config)?;
        scene.save(&self.layout.get(Stage::SceneGen).join("scene.json"))?;
        self.finish(Stage::SceneGen, inputs, serde_json::Value::Null)
    }

    fn walkable(&self, scene: &Scene) -> crate::scene::WalkableArea {
        let t = &self.cfg.trajectory;
        scene.walkable_area(t.walkable_cell, t.camera_height, t.walkable_margin)
    }

    pub fn render_train(&self) -> Result<Outcome> {
        let Some(inputs) = self.begin(Stage::RenderTrain)? else {
            return Ok(Outcome::UpToDate);
        };
        let dir = self.layout.get(Stage::RenderTrain);
        let scene = self.load_scene()?;
        let walk = self.walkable(&scene);
        let t = &self.cfg.trajectory;
        let cam = &self.cfg.camera;
        let train = sample_training_trajectory(&walk, t.train_count, t.camera_height, self.cfg.stage_seed(SEED_TRAIN_POSES))?;
        let paths = sample_test_paths(
            &walk,
            t.test_paths,
            t.test_per_path,
            t.camera_height,
            &t.walk,
            self.cfg.stage_seed(SEED_TEST_PATHS),
        )?;
        for sub in ["train", "test_gt", "test_holdout"] {
            create_dir(&dir.join(sub))?;
        }
        train.par_iter().enumerate().try_for_each(|(i, pose)| -> Result<()> {
            let (img, depth) = scene.render(pose, &cam.train)?;
            img.save_png(&dir.join(format!("train/{i:04}.png")))?;
            depth.save(&dir.join(format!("train/{i:04}.depth")))
        })?;
        write_json(&dir.join("train_poses.json"), &train)?;
        let tests: Vec<TestPose> = paths
            .iter()
            .enumerate()
            .flat_map(|(p, path)| path.iter().enumerate().map(move |(s, pose)| TestPose { path: p, step: s, pose: *pose }))
            .collect();
        tests.par_iter().enumerate().try_for_each(|(i, tp)| -> Result<()> {
            scene.render(&tp.pose, &cam.large)?.0.save_png(&dir.join(format!("test_gt/{}.png", test_id(i))))?;
            scene
                .render(&tp.pose, &cam.train)?
                .0
                .save_png(&dir.join(format!("test_holdout/{}.png", test_id(i))))
        })?;
        write_json(&dir.join("test_poses.json"), &tests)?;
        self.finish(
            Stage::RenderTrain,
            inputs,
            serde_json::json!({ "train_views": train.len(), "test_views": tests.len() }),
        )
    }

    fn train_poses(&self) -> Result<Vec<Pose>> {
        read_json(&self.layout.get(Stage::RenderTrain).join("train_poses.json"))
    }

    pub fn train_views(&self) -> Result<Vec<View>> {
        let dir = self.layout.get(Stage::RenderTrain);
        let poses = self.train_poses()?;
        poses
            .par_iter()
            .enumerate()
            .map(|(i, pose)| {
                Ok(View {
                    image: ImageBuffer::load_png(&dir.join(format!("train/{i:04}.png")))?,
                    pose: *pose,
                    intrinsics: self.cfg.camera.train,
                })
            })
            .collect()
    }

    fn train_depths(&self, indices: &[usize]) -> Result<Vec<DepthBuffer>> {
        let dir = self.layout.get(Stage::RenderTrain);
        indices
            .iter()
            .map(|i| DepthBuffer::load(&dir.join(format!("train/{i:04}.depth"))))
            .collect()
    }

    fn test_poses(&self) -> Result<Vec<Pose>> {
        let t: Vec<TestPose> = read_json(&self.layout.get(Stage::RenderTrain).join("test_poses.json"))?;
        Ok(t.into_iter().map(|t| t.pose).collect())
    }

    pub fn test_set(&self) -> Result<TestSet> {
        let dir = self.layout.get(Stage::RenderTrain);
        let poses = self.test_poses()?;
        let s = &self.cfg.camera.small;
        let truths = (0..poses.len())
            .into_par_iter()
            .map(|i| ImageBuffer::load_png(&dir.join(format!("test_gt/{}.png", test_id(i)))))
            .collect::<Result<Vec<_>>>()?;
        let inputs = truths
            .iter()
            .map(|t| t.center_crop(s.width, s.height))
            .collect::<Result<Vec<_>>>()?;
        Ok(TestSet { poses, truths, inputs })
    }

    fn field_bounds(&self) -> crate::scene::Aabb {
        let [x, y, z] = self.cfg.scene.config.room_size;
        crate::scene::Aabb::new([0.0; 3], [x, y, z]).expanded(self.cfg.field.bounds_margin)
    }

    pub fn fit_field(&self) -> Result<Outcome> {
        let Some(inputs) = self.begin(Stage::FitField)? else {
            return Ok(Outcome::UpToDate);
        };
        let dir = self.layout.get(Stage::FitField);
        let scene = self.load_scene()?;
        if scene.bounds() != crate::scene::Aabb::new([0.0; 3], self.cfg.scene.config.room_size) {
            return Err(NeoError::Config("scene bounds do not match the configured room size".into()));
        }
        let views = self.train_views()?;
        let f = &self.cfg.field;
        let start_res = f.fit.schedule.first().map_or(32, |s| s.1);
        let init = VoxelRadianceField::new(self.field_bounds(), [start_res; 3])?;
        let t0 = Instant::now();
        let (field, trace) = fit(init, &views, &f.fit, &f.render, self.cfg.stage_seed(SEED_FIT))?;
        let fit_seconds = t0.elapsed().as_secs_f64();
        field.save(&dir.join("field.neof"))?;
        write_loss_trace(&dir.join("fit_trace.csv"), &trace)?;
        let fidelity = self.measure_fidelity(&field, fit_seconds)?;
        info!(
            "fit-field: {:.1} s, held-out mean PSNR {:.2} dB (pooled {:.2} dB)",
            fit_seconds, fidelity.mean_psnr_db, fidelity.pooled_psnr_db
        );
        write_json(&dir.join("fidelity.json"), &fidelity)?;
        self.finish(Stage::FitField, inputs, serde_json::to_value(&fidelity).expect("plain struct"))
    }

    fn measure_fidelity(&self, field: &VoxelRadianceField, fit_seconds: f64) -> Result<Fidelity> {
        let dir = self.layout.get(Stage::RenderTrain);
        let poses = self.test_poses()?;
        let mut per_view = Vec::with_capacity(poses.len());
        let mut sq = 0.0;
        let mut n = 0usize;
        for (i, pose) in poses.iter().enumerate() {
            let gt = ImageBuffer::load_png(&dir.join(format!("test_holdout/{}.png", test_id(i))))?;
            let r = field.render_view(pose, &self.cfg.camera.train, &self.cfg.field.render).quantized();
            per_view.push(psnr(&r, &gt, None)?);
            for (a, b) in r.data().iter().zip(gt.data()) {
                sq += ((a - b) as f64).powi(2);
            }
            n += r.data().len();
        }
        Ok(Fidelity {
            views: poses.len(),
            mean_psnr_db: per_view.iter().sum::<f64>() / per_view.len() as f64,
            pooled_psnr_db: 10.0 * (n as f64 / sq).log10(),
            threshold_db: self.cfg.field.fidelity_threshold_db,
            fit_seconds,
        })
    }

    pub fn fidelity(&self) -> Result<Fidelity> {
        read_json(&self.layout.get(Stage::FitField).join("fidelity.json"))
    }

    pub fn load_field(&self) -> Result<VoxelRadianceField> {
        VoxelRadianceField::load(&self.layout.get(Stage::FitField).join("field.neof"))
    }

    pub fn sample_poses(&self) -> Result<Outcome> {
        let Some(inputs) = self.begin(Stage::SamplePoses)? else {
            return Ok(Outcome::UpToDate);
        };
        let scene = self.load_scene()?;
        let walk = self.walkable(&scene);
        let train = self.train_poses()?;
        let dof = fit_dof_distribution(&train, &self.cfg.sampler.dof)?;
        let s = &self.cfg.sampler;
        let cfg = SamplerConfig {
            interval: s.interval,
            yaw_count: s.yaw_count,
            coverage_threshold: s.coverage_threshold,
            seed: self.cfg.stage_seed(SEED_SAMPLER),
        };
        let poses = sample_poses(&walk, &cfg, &dof, Some(&train))?;
        info!("sample-poses: {} poses at {} m", poses.len(), s.interval);
        write_pose_list(&self.layout.get(Stage::SamplePoses).join("poses.jsonl"), &poses)?;
        self.finish(
            Stage::SamplePoses,
            inputs,
            serde_json::json!({ "poses": poses.len(), "dof": dof }),
        )
    }

    pub fn gen_dataset(&self) -> Result<Outcome> {
        let Some(inputs) = self.begin(Stage::GenDataset)? else {
            return Ok(Outcome::UpToDate);
        };
        let dir = self.layout.get(Stage::GenDataset);
        let field = self.load_field()?;
        let poses: Vec<Pose> = read_pose_list(&self.layout.get(Stage::SamplePoses).join("poses.jsonl"))?
            .into_iter()
            .map(|p| p.pose)
            .collect();
        let cam = &self.cfg.camera;
        let render = &self.cfg.field.render;
        let hash = self.expected_hash(Stage::GenDataset);
        let mut data = generate_pairs(&field, &poses, &cam.small, &cam.large, render, &hash, self.cfg.seed)?;
        let train_scores = match self.cfg.dataset.blur {
            BlurPolicy::TrainingPercentile { .. } => self
                .train_poses()?
                .par_iter()
                .map(|p| dataset::blur_score(&field.render_view(p, &cam.large, render).quantized()))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        let threshold = self.cfg.dataset.blur.threshold(&train_scores)?;
        filter_blurry(&mut data.manifest, threshold)?;
        let kept = data.manifest.kept_count();
        if kept == 0 {
            return Err(NeoError::Dataset {
                pair: "-".into(),
                message: format!("blur threshold {threshold} drops every pair"),
            });
        }
        dataset::persist(&data, dir)?;
        let summary = BlurSummary {
            threshold,
            total: data.len(),
            kept,
            dropped: data.len() - kept,
        };
        info!("gen-dataset: {} pairs, {} dropped as blurry", summary.total, summary.dropped);
        write_json(&dir.join("blur.json"), &summary)?;
        self.finish(Stage::GenDataset, inputs, serde_json::to_value(&summary).expect("plain struct"))
    }

    fn train_model(&self, data: &Dataset, dir: &Path, seed: u64) -> Result<f64> {
        let kept = data.kept_pairs();
        let set = TrainingSet::<f32>::new(&kept, &data.manifest.large_intrinsics)?;
        let o = &self.cfg.outpainter;
        let init = OutpaintModel::<f32>::new(o.architecture.clone(), derive_seed(seed, 0))?;
        let t0 = Instant::now();
        let (model, trace) = crate::outpaint::train(&init, &set, &o.train, derive_seed(seed, 1))?;
        let secs = t0.elapsed().as_secs_f64();
        info!(
            "trained on {} pairs in {:.1} s, final loss {:.5}",
            set.len(),
            secs,
            trace.last().copied().unwrap_or(f64::NAN)
        );
        model.save(&dir.join("model.neom"))?;
        write_loss_trace(&dir.join("loss.csv"), &trace)?;
        Ok(secs)
    }

    pub fn train_outpainter(&self) -> Result<Outcome> {
        let Some(inputs) = self.begin(Stage::TrainOutpainter)? else {
            return Ok(Outcome::UpToDate);
        };
        let data = dataset::load(self.layout.get(Stage::GenDataset))?;
        let secs = self.train_model(&data, self.layout.get(Stage::TrainOutpainter), self.cfg.stage_seed(SEED_OUTPAINTER))?;
        self.finish(Stage::TrainOutpainter, inputs, serde_json::json!({ "pairs": data.manifest.kept_count(), "seconds": secs }))
    }

    /// Training images at the input resolution (same FOV, area-downsampled).
    fn train_inputs(&self) -> Result<Vec<View>> {
        let s = self.cfg.camera.small;
        Ok(self
            .train_views()?
            .into_iter()
            .map(|v| View {
                image: v.image.downsample_area(s.width, s.height).quantized(),
                pose: v.pose,
                intrinsics: s,
            })
            .collect())
    }

    pub fn train_naive(&self) -> Result<Outcome> {
        let Some(inputs) = self.begin(Stage::TrainNaive)? else {
            return Ok(Outcome::UpToDate);
        };
        let dir = self.layout.get(Stage::TrainNaive);
        let cam = &self.cfg.camera;
        let data = naive_dataset(
            &self.train_inputs()?,
            &cam.small,
            &cam.large,
            &self.expected_hash(Stage::TrainNaive),
            self.cfg.seed,
        )?;
        dataset::persist(&data, &dir.join("dataset"))?;
        let secs = self.train_model(&data, dir, self.cfg.stage_seed(SEED_NAIVE))?;
        self.finish(Stage::TrainNaive, inputs, serde_json::json!({ "pairs": data.len(), "seconds": secs }))
    }

    pub fn load_model(&self, stage: Stage) -> Result<OutpaintModel<f32>> {
        OutpaintModel::load(&self.layout.get(stage).join("model.neom"))
    }

    fn write_results(&self, method: &str, images: &[ImageBuffer], meta: &[ResultMeta]) -> Result<()> {
        let dir = self.layout.get(Stage::RunBaselines).join(method);
        create_dir(&dir)?;
        images
            .par_iter()
            .enumerate()
            .try_for_each(|(i, img)| img.save_png(&dir.join(format!("{}.png", test_id(i)))))?;
        write_json(&dir.join("meta.json"), &meta)
    }

    pub fn run_baselines(&self) -> Result<Outcome> {
        let Some(inputs) = self.begin(Stage::RunBaselines)? else {
            return Ok(Outcome::UpToDate);
        };
        let cam = &self.cfg.camera;
        let render = &self.cfg.field.render;
        let tests = self.test_set()?;
        let field = self.load_field()?;
        let naive = self.load_model(Stage::TrainNaive)?;
        let train = self.train_views()?;
        let index = build_retrieval_index(&train)?;
        let plain = |i: usize| ResultMeta {
            id: test_id(i),
            estimated_pose: None,
            residual: None,
            relocalization_failed: None,
            valid_fraction: None,
        };
        let t0 = Instant::now();
        let out = tests
            .inputs
            .par_iter()
            .map(|s| naive.outpaint(s, &cam.large))
            .collect::<Result<Vec<_>>>()?;
        self.write_results(NAIVE, &out, &(0..out.len()).map(plain).collect::<Vec<_>>())?;
        info!("run-baselines: naive done ({:.1} s)", t0.elapsed().as_secs_f64());

        let out = tests
            .poses
            .par_iter()
            .zip(&tests.inputs)
            .map(|(p, s)| oracle_nerf(&field, p, &cam.large, s, render))
            .collect::<Result<Vec<_>>>()?;
        self.write_results(ORACLE, &out, &(0..out.len()).map(plain).collect::<Vec<_>>())?;
        info!("run-baselines: oracle done ({:.1} s)", t0.elapsed().as_secs_f64());

        let k = self.cfg.baselines.neighbors;
        let warped = tests
            .poses
            .iter()
            .zip(&tests.inputs)
            .map(|(p, s)| {
                // neighbours are retrieved from the input image, as a real system would
                let near = index.nearest(s, k);
                let depths = self.train_depths(&near)?;
                let views: Vec<DepthView> = near
                    .iter()
                    .zip(depths)
                    .map(|(&i, depth)| DepthView {
                        image: train[i].image.clone(),
                        depth,
                        pose: train[i].pose,
                        intrinsics: cam.train,
                    })
                    .collect();
                warp_fuse(s, &views, p, &cam.large)
            })
            .collect::<Result<Vec<_>>>()?;
        let band = band_mask(cam.large.width, cam.large.height, cam.small.width, cam.small.height);
        let meta: Vec<ResultMeta> = warped
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let band_valid = w.valid.iter().zip(&band).filter(|(v, b)| **v && **b).count() as f64
                    / band.iter().filter(|b| **b).count() as f64;
                ResultMeta {
                    valid_fraction: Some(band_valid),
                    ..plain(i)
                }
            })
            .collect();
        let mean_valid = meta.iter().filter_map(|m| m.valid_fraction).sum::<f64>() / meta.len() as f64;
        let images: Vec<ImageBuffer> = warped.into_iter().map(|w| w.image).collect();
        self.write_results(WARP, &images, &meta)?;
        info!(
            "run-baselines: warp done, mean band coverage {:.3} ({:.1} s)",
            mean_valid,
            t0.elapsed().as_secs_f64()
        );

        let reloc = tests
            .inputs
            .par_iter()
            .map(|s| relocalized_nerf(&field, s, &index, &cam.small, &cam.large, &self.cfg.baselines.reloc, render))
            .collect::<Result<Vec<(ImageBuffer, Relocalization)>>>()?;
        let meta: Vec<ResultMeta> = reloc
            .iter()
            .enumerate()
            .map(|(i, (_, r))| ResultMeta {
                estimated_pose: Some(r.pose),
                residual: Some(r.residual()),
                relocalization_failed: Some(r.failed),
                ..plain(i)
            })
            .collect();
        let failures = meta.iter().filter(|m| m.relocalization_failed == Some(true)).count();
        let errors: Vec<(f64, f64)> = reloc.iter().zip(&tests.poses).map(|((_, r), p)| r.pose.distance(p)).collect();
        let mean_rot = errors.iter().map(|e| e.0.to_degrees()).sum::<f64>() / errors.len() as f64;
        let mean_t = errors.iter().map(|e| e.1).sum::<f64>() / errors.len() as f64;
        let images: Vec<ImageBuffer> = reloc.into_iter().map(|r| r.0).collect();
        self.write_results(RELOC, &images, &meta)?;
        info!(
            "run-baselines: relocalization done, {failures} flagged, mean error {mean_rot:.2}° / {mean_t:.3} m ({:.1} s)",
            t0.elapsed().as_secs_f64()
        );
        self.finish(
            Stage::RunBaselines,
            inputs,
            serde_json::json!({
                "warp_band_coverage": mean_valid,
                "relocalization_failures": failures,
                "relocalization_mean_rotation_error_deg": mean_rot,
                "relocalization_mean_translation_error_m": mean_t,
            }),
        )
    }

    pub fn load_results(&self, method: &str) -> Result<Vec<ImageBuffer>> {
        let n = self.test_poses()?.len();
        let dir = if method == NEO {
            self.layout.get(Stage::Eval).join(NEO)
        } else {
            self.layout.get(Stage::RunBaselines).join(method)
        };
        (0..n)
            .into_par_iter()
            .map(|i| {
                let p = dir.join(format!("{}.png", test_id(i)));
                if !p.exists() {
                    return Err(NeoError::MissingArtifact(p));
                }
                ImageBuffer::load_png(&p)
            })
            .collect()
    }

    fn neo_outputs(&self, model: &OutpaintModel<f32>, tests: &TestSet) -> Result<Vec<ImageBuffer>> {
        tests
            .inputs
            .par_iter()
            .map(|s| model.outpaint(s, &self.cfg.camera.large).map(|o| o.quantized()))
            .collect()
    }

    fn band(&self) -> Vec<bool> {
        let c = &self.cfg.camera;
        band_mask(c.large.width, c.large.height, c.small.width, c.small.height)
    }

    pub fn eval(&self) -> Result<Outcome> {
        let Some(inputs) = self.begin(Stage::Eval)? else {
            return Ok(Outcome::UpToDate);
        };
        let dir = self.layout.get(Stage::Eval);
        let tests = self.test_set()?;
        let model = self.load_model(Stage::TrainOutpainter)?;
        let neo = self.neo_outputs(&model, &tests)?;
        create_dir(&dir.join(NEO))?;
        neo.par_iter()
            .enumerate()
            .try_for_each(|(i, img)| img.save_png(&dir.join(NEO).join(format!("{}.png", test_id(i)))))?;
        let band = self.band();
        let mut rows = Vec::new();
        for m in &self.cfg.eval.methods {
            let out = self.load_results(m)?;
            rows.push(evaluate_method(m, &out, &tests.truths, &band)?);
        }
        let report = MetricReport::new(&self.expected_hash(Stage::Eval), rows)?;
        self.write_report(dir, &report, "FOV extrapolation on held-out test paths")?;
        self.finish(Stage::Eval, inputs, serde_json::Value::Null)
    }

    fn write_report(&self, dir: &Path, report: &MetricReport, title: &str) -> Result<()> {
        let json = dir.join("report.json");
        fs::write(&json, report.to_json()).map_err(|e| NeoError::io(&json, e))?;
        let md = dir.join("report.md");
        fs::write(&md, report.to_markdown(title)).map_err(|e| NeoError::io(&md, e))
    }

    pub fn report(&self) -> Result<MetricReport> {
        let p = self.layout.get(Stage::Eval).join("report.json");
        if !p.exists() {
            return Err(NeoError::MissingArtifact(p));
        }
        let text = fs::read_to_string(&p).map_err(|e| NeoError::io(&p, e))?;
        MetricReport::from_json(&text)
    }

    pub fn run_stage(&self, s: Stage) -> Result<Outcome> {
        match s {
            Stage::SceneGen => self.scene_gen(),
            Stage::RenderTrain => self.render_train(),
            Stage::FitField => self.fit_field(),
            Stage::SamplePoses => self.sample_poses(),
            Stage::GenDataset => self.gen_dataset(),
            Stage::TrainOutpainter => self.train_outpainter(),
            Stage::TrainNaive => self.train_naive(),
            Stage::RunBaselines => self.run_baselines(),
            Stage::Eval => self.eval(),
        }
    }

    pub fn run_all(&self) -> Result<MetricReport> {
        for s in Stage::ALL {
            let t0 = Instant::now();
            self.run_stage(s).map_err(|e| tag(s.name(), e))?;
            info!("{} finished in {:.1} s", s.name(), t0.elapsed().as_secs_f64());
        }
        self.report()
    }

    /// Rerun sampling → dataset → training → NEO evaluation at each interval. Scene,
    /// renders and field are shared with the main run.
    pub fn ablate_density(&self, intervals: &[f64]) -> Result<MetricReport> {
        if intervals.is_empty() {
            return Err(NeoError::Config("no intervals given".into()));
        }
        let root = self.root.join("ablate").join("density");
        let tests = self.test_set()?;
        let band = self.band();
        let mut rows = Vec::new();
        for &interval in intervals {
            let mut cfg = self.cfg.clone();
            cfg.sampler.interval = interval;
            let sub = if cfg == self.cfg {
                self.with_config(cfg, self.layout.clone())?
            } else {
                let mut layout = self.layout.clone();
                let d = root.join(format!("interval_{interval}"));
                for s in [Stage::SamplePoses, Stage::GenDataset, Stage::TrainOutpainter] {
                    layout.set(s, d.join(s.dir()));
                }
                self.with_config(cfg, layout)?
            };
            for s in [Stage::SamplePoses, Stage::GenDataset, Stage::TrainOutpainter] {
                sub.run_stage(s).map_err(|e| tag(s.name(), e))?;
            }
            sub.require(Stage::TrainOutpainter)?;
            let model = sub.load_model(Stage::TrainOutpainter)?;
            let out = sub.neo_outputs(&model, &tests)?;
            rows.push(evaluate_method(&format!("interval {interval} m"), &out, &tests.truths, &band)?);
        }
        let report = MetricReport::new(&self.expected_hash(Stage::RenderTrain), rows)?;
        create_dir(&root)?;
        self.write_report(&root, &report, "Sampling density ablation (NEO, band metrics)")?;
        Ok(report)
    }

    /// Extended-FOV pairs (the main NEO model) versus original-FOV pairs obtained by
    /// upscaling and center-cropping the small renders of the same dataset.
    pub fn ablate_fov(&self) -> Result<MetricReport> {
        let root = self.root.join("ablate").join("fov");
        self.require(Stage::GenDataset)?;
        let (_, main_hash) = self.require(Stage::TrainOutpainter)?;
        let tests = self.test_set()?;
        let band = self.band();
        let model_dir = root.join("original");
        let stamp = sha256_hex(format!("fov-original:{main_hash}").as_bytes());
        let current = read_provenance(&model_dir).is_ok_and(|p| p.config_hash == stamp);
        if !current {
            if model_dir.exists() {
                fs::remove_dir_all(&model_dir).map_err(|e| NeoError::io(&model_dir, e))?;
            }
            create_dir(&model_dir)?;
            let start = Instant::now();
            let data = dataset::load(self.layout.get(Stage::GenDataset))?;
            let cam = &self.cfg.camera;
            let pairs = data
                .pairs
                .par_iter()
                .zip(&data.manifest.records)
                .filter(|(_, r)| r.kept)
                .map(|(p, _)| make_pair(p.small.resize_bilinear(cam.large.width, cam.large.height), &cam.small, p.pose))
                .collect::<Result<Vec<_>>>()?;
            let orig = Dataset::from_pairs(pairs, cam.small, cam.large, stamp.clone(), self.cfg.seed)?;
            self.train_model(&orig, &model_dir, self.cfg.stage_seed(SEED_FOV_ORIGINAL))?;
            write_json(
                &model_dir.join(PROVENANCE_FILE),
                &Provenance {
                    stage: "ablate-fov".into(),
                    stage_version: 1,
                    config_hash: stamp,
                    seed: self.cfg.seed,
                    inputs: vec![(Stage::TrainOutpainter.name().into(), main_hash)],
                    seconds: start.elapsed().as_secs_f64(),
                    forced: self.force,
                    notes: serde_json::Value::Null,
                },
            )?;
        }
        let extended = self.load_model(Stage::TrainOutpainter)?;
        let original = OutpaintModel::<f32>::load(&model_dir.join("model.neom"))?;
        let rows = vec![
            evaluate_method("original FOV", &self.neo_outputs(&original, &tests)?, &tests.truths, &band)?,
            evaluate_method("extended FOV", &self.neo_outputs(&extended, &tests)?, &tests.truths, &band)?,
        ];
        let report = MetricReport::new(&self.expected_hash(Stage::TrainOutpainter), rows)?;
        self.write_report(&root, &report, "Training FOV ablation (NEO, band metrics)")?;
        Ok(report)
    }

    fn with_config(&self, cfg: PipelineConfig, layout: Layout) -> Result<Pipeline> {
        cfg.validate()?;
        Ok(Pipeline {
            cfg,
            root: self.root.clone(),
            layout,
            force: self.force,
        })
    }
}

/// Prefix an error with the stage that raised it.
pub fn tag(stage: &str, e: NeoError) -> NeoError {
    NeoError::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    }
}

mod erased {
    use serde::Serialize;

    pub trait Ser {
        fn value(&self) -> serde_json::Value;
    }

    impl<T: Serialize> Ser for T {
        fn value(&self) -> serde_json::Value {
            serde_json::to_value(self).expect("config sections serialize")
        }
    }
}
