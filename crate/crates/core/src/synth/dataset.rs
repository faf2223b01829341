//! Dataset synthesis: render every camera of every scene, degrade each view,
//! fuse the degraded views into ground truth and persist everything behind a
//! JSON manifest.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{degrade, render, DegradeParams, Primitive, Scene, Shape, SynthError};
use crate::camera::{CameraModel, Intrinsics, Pose, Vec3};
use crate::grid::{pnm, DepthMap, RgbImage, ValidityMask};
use crate::tsdf::{fuse_views, VolumeConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Generator behind every random draw in a dataset; recorded in manifests.
pub const RNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.3), stream = scene index";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Desk-scale work cell: table, walls, small objects around 1 m.
    #[default]
    Primary,
    /// Room-scale scenes, roughly 2-6 m deep, with larger, warmer objects.
    Secondary,
}

struct DomainLayout {
    floor_half: f64,
    wall_height: f64,
    objects: (usize, usize),
    box_half: (f64, f64),
    sphere_radius: (f64, f64),
    spread: f64,
    floor_albedo: [f64; 3],
    wall_albedo: [f64; 3],
    albedo_lo: [f64; 3],
    albedo_hi: [f64; 3],
    ring_radius: f64,
    cam_height: f64,
    target_height: f64,
    voxel_size: f64,
    noise_sigma: f64,
}

impl Domain {
    fn layout(self) -> DomainLayout {
        match self {
            Domain::Primary => DomainLayout {
                floor_half: 0.85,
                wall_height: 0.8,
                objects: (1, 3),
                box_half: (0.03, 0.1),
                sphere_radius: (0.03, 0.09),
                spread: 0.3,
                floor_albedo: [0.55, 0.55, 0.5],
                wall_albedo: [0.35, 0.4, 0.45],
                albedo_lo: [0.3, 0.3, 0.3],
                albedo_hi: [0.9, 0.9, 0.9],
                ring_radius: 0.75,
                cam_height: 0.6,
                target_height: 0.05,
                voxel_size: 0.01,
                noise_sigma: 0.003,
            },
            Domain::Secondary => DomainLayout {
                floor_half: 2.5,
                wall_height: 2.5,
                objects: (2, 4),
                box_half: (0.15, 0.4),
                sphere_radius: (0.15, 0.35),
                spread: 0.7,
                floor_albedo: [0.6, 0.45, 0.3],
                wall_albedo: [0.85, 0.8, 0.7],
                albedo_lo: [0.4, 0.2, 0.1],
                albedo_hi: [1.0, 0.8, 0.6],
                ring_radius: 2.2,
                cam_height: 1.6,
                target_height: 0.5,
                voxel_size: 0.03,
                noise_sigma: 0.01,
            },
        }
    }

    /// World box the fusion volume covers.
    fn bounds(self) -> ([f64; 3], [f64; 3]) {
        let l = self.layout();
        let m = l.floor_half + 2.0 * l.voxel_size;
        ([-m, -m, -4.0 * l.voxel_size], [m, m, l.wall_height + 2.0 * l.voxel_size])
    }

    /// Default sensor degradation for this domain.
    pub fn degrade_defaults(self) -> DegradeParams {
        DegradeParams { noise_sigma: self.layout().noise_sigma, ..DegradeParams::default() }
    }
}

fn at(p: Vec3) -> Pose {
    Pose::new(nalgebra::Matrix3::identity(), p).expect("identity rotation")
}

fn rotated(axis: Vec3, angle: f64, p: Vec3) -> Pose {
    let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
    Pose::new(*r.matrix(), p).expect("rotation matrix")
}

fn uniform3(rng: &mut ChaCha8Rng, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| rng.gen_range(lo[i]..=hi[i]))
}

fn scene_from_rng(domain: Domain, rng: &mut ChaCha8Rng) -> Scene {
    let l = domain.layout();
    let mut prims = vec![Primitive::new(
        Shape::Plane { half_size: [l.floor_half, l.floor_half] },
        Pose::identity(),
        l.floor_albedo,
    )];
    // four walls facing inward
    let (h, f) = (l.wall_height / 2.0, l.floor_half);
    for k in 0..4 {
        let yaw = k as f64 * PI / 2.0;
        let (c, s) = (yaw.cos(), yaw.sin());
        let wall = rotated(Vec3::z(), yaw, Vec3::new(f * c, f * s, h))
            .compose(&rotated(Vec3::y(), PI / 2.0, Vec3::zeros()));
        prims.push(Primitive::new(Shape::Plane { half_size: [h, f] }, wall, l.wall_albedo));
    }
    let n = rng.gen_range(l.objects.0..=l.objects.1);
    for _ in 0..n {
        let (x, y) = (rng.gen_range(-l.spread..l.spread), rng.gen_range(-l.spread..l.spread));
        let albedo = uniform3(rng, l.albedo_lo, l.albedo_hi);
        if rng.gen_bool(0.6) {
            let he = [0, 1, 2].map(|_| rng.gen_range(l.box_half.0..l.box_half.1));
            let yaw = rng.gen_range(0.0..PI);
            prims.push(Primitive::new(Shape::Box { half_extents: he }, rotated(Vec3::z(), yaw, Vec3::new(x, y, he[2])), albedo));
        } else {
            let r = rng.gen_range(l.sphere_radius.0..l.sphere_radius.1);
            prims.push(Primitive::new(Shape::Sphere { radius: r }, at(Vec3::new(x, y, r)), albedo));
        }
    }
    let light = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 1.0).normalize();
    Scene::new(prims, light).expect("generated scenes are valid")
}

/// A random scene of `domain`, reproducible from `seed`.
pub fn random_scene(domain: Domain, seed: u64) -> Scene {
    scene_from_rng(domain, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn default_intrinsics(width: usize, height: usize) -> Intrinsics {
    let f = 0.9375 * width as f64;
    Intrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height).expect("positive image size")
}

fn ring_from_rng(domain: Domain, n: usize, width: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<CameraModel> {
    let l = domain.layout();
    let k = default_intrinsics(width, height);
    let phase = rng.gen_range(0.0..2.0 * PI);
    (0..n)
        .map(|i| {
            let az = phase + 2.0 * PI * i as f64 / n as f64 + rng.gen_range(-0.1..0.1);
            let radius = l.ring_radius * rng.gen_range(0.95..1.05);
            let eye = Vec3::new(radius * az.cos(), radius * az.sin(), l.cam_height * rng.gen_range(0.95..1.05));
            let pose = Pose::look_at(eye, Vec3::new(0.0, 0.0, l.target_height), Vec3::z()).expect("camera above the floor");
            CameraModel { intrinsics: k, pose }
        })
        .collect()
}

/// `n` cameras on a jittered ring around the scene, all aimed at its center.
pub fn camera_ring(domain: Domain, n: usize, width: usize, height: usize, seed: u64) -> Vec<CameraModel> {
    ring_from_rng(domain, n, width, height, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub domain: Domain,
    pub scenes: usize,
    pub cams_per_scene: usize,
    pub width: usize,
    pub height: usize,
    /// `None` uses the domain's defaults. The seed field is ignored; every
    /// view gets its own seed from the dataset seed.
    pub degrade: Option<DegradeParams>,
    /// Fusion voxel size, meters; domain default when absent.
    pub voxel_size: Option<f64>,
    pub truncation: Option<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            domain: Domain::Primary,
            scenes: 1,
            cams_per_scene: 4,
            width: 64,
            height: 48,
            degrade: None,
            voxel_size: None,
            truncation: None,
        }
    }
}

impl DatasetConfig {
    pub fn volume(&self) -> VolumeConfig {
        let (lo, hi) = self.domain.bounds();
        VolumeConfig::covering(lo, hi, self.voxel_size.unwrap_or(self.domain.layout().voxel_size), self.truncation)
    }

    pub fn degrade_params(&self) -> DegradeParams {
        self.degrade.clone().unwrap_or_else(|| self.domain.degrade_defaults())
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.scenes == 0 || self.cams_per_scene == 0 {
            return Err(SynthError::BadParams("scene and camera counts must be at least 1".into()));
        }
        if self.width < 2 || self.height < 2 {
            return Err(SynthError::BadParams(format!("image size {}x{}", self.width, self.height)));
        }
        self.degrade_params().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub scene_id: usize,
    pub rgb: String,
    pub depth_raw: String,
    pub depth_gt: String,
    /// Analytic depth; for validating the fusion pipeline, never for training.
    pub depth_true: String,
    pub mask: String,
    pub camera: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub rng: String,
    pub seed: u64,
    pub domain: Domain,
    pub width: usize,
    pub height: usize,
    pub config: DatasetConfig,
    pub volume: VolumeConfig,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(&path, e))
    }

    pub fn save(&self, dir: &Path) -> Result<(), SynthError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| io_err(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io { path: path.display().to_string(), message: e.to_string() }
}

impl From<pnm::PnmError> for SynthError {
    fn from(e: pnm::PnmError) -> Self {
        match e {
            pnm::PnmError::Io { path, source } => SynthError::Io { path, message: source.to_string() },
            other => SynthError::Io { path: String::new(), message: other.to_string() },
        }
    }
}

/// Hole and accuracy bookkeeping over a generated dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub samples: usize,
    pub pixels: usize,
    pub raw_invalid: usize,
    pub gt_invalid: usize,
    /// Mean |raw - true| over pixels valid in both.
    pub raw_mae_vs_true: f64,
    /// Mean |gt - true| over pixels valid in both.
    pub gt_mae_vs_true: f64,
}

struct View {
    rgb: RgbImage,
    truth: DepthMap,
    raw: DepthMap,
    mask: ValidityMask,
    gt: DepthMap,
    camera: CameraModel,
}

fn synthesize_scene(cfg: &DatasetConfig, volume: &VolumeConfig, seed: u64, scene: usize) -> Result<Vec<View>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene as u64);
    let s = scene_from_rng(cfg.domain, &mut rng);
    let cams = ring_from_rng(cfg.domain, cfg.cams_per_scene, cfg.width, cfg.height, &mut rng);
    let base = cfg.degrade_params();
    let mut views = Vec::with_capacity(cams.len());
    for cam in cams {
        let (rgb, truth) = render(&s, &cam);
        let p = DegradeParams { seed: rng.gen(), ..base.clone() };
        let (raw, mask) = degrade(&truth, &rgb, &p)?;
        views.push(View { rgb, truth, raw, mask, gt: DepthMap::filled(1, 1, 0.0), camera: cam });
    }
    let frames: Vec<(DepthMap, CameraModel)> = views.iter().map(|v| (v.raw.clone(), v.camera)).collect();
    for (v, gt) in views.iter_mut().zip(fuse_views(&frames, volume)?) {
        v.gt = gt;
    }
    Ok(views)
}

fn mae_where_both_valid(a: &DepthMap, b: &DepthMap) -> (f64, usize) {
    a.data()
        .iter()
        .zip(b.data())
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .fold((0.0, 0), |(s, n), (x, y)| (s + (x - y).abs(), n + 1))
}

/// Writes a complete dataset under `out`. Identical `(cfg, seed)` produce
/// byte-identical directories.
pub fn make_dataset(cfg: &DatasetConfig, out: &Path, seed: u64) -> Result<DatasetSummary, SynthError> {
    cfg.validate()?;
    let volume = cfg.volume();
    let samples_dir = out.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| io_err(&samples_dir, e))?;

    let scenes: Vec<Vec<View>> = (0..cfg.scenes)
        .into_par_iter()
        .map(|s| synthesize_scene(cfg, &volume, seed, s))
        .collect::<Result<_, _>>()?;

    let mut entries = Vec::new();
    let mut summary = DatasetSummary::default();
    let (mut raw_err, mut raw_n, mut gt_err, mut gt_n) = (0.0, 0usize, 0.0, 0usize);
    for (scene_id, views) in scenes.iter().enumerate() {
        for (cam_idx, v) in views.iter().enumerate() {
            let id = format!("s{scene_id:04}_c{cam_idx}");
            let rel = |suffix: &str| format!("samples/{id}_{suffix}");
            let entry = SampleEntry {
                id: id.clone(),
                scene_id,
                rgb: rel("rgb.ppm"),
                depth_raw: rel("depth_raw.pgm"),
                depth_gt: rel("depth_gt.pgm"),
                depth_true: rel("depth_true.pgm"),
                mask: rel("mask.pgm"),
                camera: rel("camera.json"),
            };
            pnm::write_rgb(&out.join(&entry.rgb), &v.rgb)?;
            pnm::write_depth(&out.join(&entry.depth_raw), &v.raw)?;
            pnm::write_depth(&out.join(&entry.depth_gt), &v.gt)?;
            pnm::write_depth(&out.join(&entry.depth_true), &v.truth)?;
            pnm::write_mask(&out.join(&entry.mask), &v.mask)?;
            let cam_path: PathBuf = out.join(&entry.camera);
            let text = serde_json::to_string_pretty(&v.camera).map_err(|e| io_err(&cam_path, e))?;
            fs::write(&cam_path, text + "\n").map_err(|e| io_err(&cam_path, e))?;

            summary.samples += 1;
            summary.pixels += v.raw.len();
            summary.raw_invalid += v.mask.count_invalid();
            summary.gt_invalid += v.gt.validity().count_invalid();
            let (e, n) = mae_where_both_valid(&v.raw, &v.truth);
            raw_err += e;
            raw_n += n;
            let (e, n) = mae_where_both_valid(&v.gt, &v.truth);
            gt_err += e;
            gt_n += n;
            entries.push(entry);
        }
    }
    summary.raw_mae_vs_true = raw_err / raw_n.max(1) as f64;
    summary.gt_mae_vs_true = gt_err / gt_n.max(1) as f64;

    Manifest {
        format: 1,
        rng: RNG_NAME.to_string(),
        seed,
        domain: cfg.domain,
        width: cfg.width,
        height: cfg.height,
        config: cfg.clone(),
        volume,
        samples: entries,
    }
    .save(out)?;
    Ok(summary)
}
