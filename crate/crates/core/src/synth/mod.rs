//! Analytic RGBD scenes standing in for a captured dataset, plus the
//! degradation pipeline that turns perfect depth into sensor-like input.

mod dataset;
mod degrade;

pub use dataset::{
    camera_ring, make_dataset, random_scene, DatasetConfig, DatasetSummary, Domain, Manifest,
    SampleEntry, MANIFEST_FILE, RNG_NAME,
};
pub use degrade::{degrade, sparsify_gradient, sparsify_texture, DegradeParams};

use thiserror::Error;

use crate::camera::{CameraModel, Pose, Vec3};
use crate::grid::{DepthMap, GridError, RgbImage};

#[derive(Error, Debug)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    BadScene(String),

    #[error("invalid parameters: {0}")]
    BadParams(String),

    #[error(transparent)]
    Grid(#[from] GridError),

    #[error(transparent)]
    Tsdf(#[from] crate::tsdf::TsdfError),

    #[error(transparent)]
    Camera(#[from] crate::camera::CameraError),

    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

const AMBIENT: f64 = 0.1;
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Rectangle in the local xy plane, normal along local +z.
    Plane { half_size: [f64; 2] },
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// Local-to-world placement.
    pub placement: Pose,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn new(shape: Shape, placement: Pose, albedo: [f64; 3]) -> Self {
        Self { shape, placement, albedo }
    }

    /// Nearest hit `(t, world normal)` of `origin + t * dir`, `t > 0`.
    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        let to_local = self.placement.inverse();
        let o = to_local.transform(origin);
        let d = to_local.rotation() * dir;
        let (t, n_local) = match &self.shape {
            Shape::Plane { half_size } => {
                if d.z.abs() < 1e-15 {
                    return None;
                }
                let t = -o.z / d.z;
                let p = o + d * t;
                if t <= HIT_EPS || p.x.abs() > half_size[0] || p.y.abs() > half_size[1] {
                    return None;
                }
                (t, Vec3::new(0.0, 0.0, if d.z < 0.0 { 1.0 } else { -1.0 }))
            }
            Shape::Sphere { radius } => {
                let a = d.norm_squared();
                let b = 2.0 * o.dot(&d);
                let c = o.norm_squared() - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                let t = if t0 > HIT_EPS { t0 } else if t1 > HIT_EPS { t1 } else { return None };
                (t, (o + d * t) / *radius)
            }
            Shape::Box { half_extents } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis_in = 0;
                let mut sign_in = 1.0;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a].abs() > half_extents[a] {
                            return None;
                        }
                        continue;
                    }
                    let ta = (-half_extents[a] - o[a]) / d[a];
                    let tb = (half_extents[a] - o[a]) / d[a];
                    let (near, far, s) = if ta < tb { (ta, tb, -1.0) } else { (tb, ta, 1.0) };
                    if near > t0 {
                        t0 = near;
                        axis_in = a;
                        sign_in = s;
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t0 <= HIT_EPS {
                    return None;
                }
                let mut n = Vec3::zeros();
                n[axis_in] = sign_in;
                (t0, n)
            }
        };
        Some((t, self.placement.rotation() * n_local))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    primitives: Vec<Primitive>,
    light_dir: Vec3,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>, light_dir: Vec3) -> Result<Self, SynthError> {
        if primitives.is_empty() {
            return Err(SynthError::BadScene("scene needs at least one primitive".into()));
        }
        for p in &primitives {
            if p.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(SynthError::BadScene(format!("albedo {:?} outside [0, 1]", p.albedo)));
            }
            let ok = match &p.shape {
                Shape::Plane { half_size } => half_size.iter().all(|h| *h > 0.0),
                Shape::Sphere { radius } => *radius > 0.0,
                Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            };
            if !ok {
                return Err(SynthError::BadScene(format!("non-positive size in {:?}", p.shape)));
            }
        }
        if (light_dir.norm() - 1.0).abs() > 1e-9 {
            return Err(SynthError::BadScene(format!("light direction norm {}", light_dir.norm())));
        }
        Ok(Self { primitives, light_dir })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn light_dir(&self) -> Vec3 {
        self.light_dir
    }
}

/// Exact ray casting: depth is the camera-z of the nearest hit, color is
/// Lambertian `albedo * max(0, n . l)` plus a flat ambient term. Pixels
/// that hit nothing are black with depth 0.
pub fn render(scene: &Scene, cam: &CameraModel) -> (RgbImage, DepthMap) {
    let k = cam.intrinsics;
    let world_from_cam = cam.pose.inverse();
    let origin = world_from_cam.transform(&Vec3::zeros());
    let rot = *world_from_cam.rotation();
    let mut depth = Vec::with_capacity(k.width * k.height);
    let mut rgb = Vec::with_capacity(k.width * k.height);
    for r in 0..k.height {
        for c in 0..k.width {
            // z component 1 makes the ray parameter equal to camera depth
            let dir = rot * Vec3::new((c as f64 - k.cx) / k.fx, (r as f64 - k.cy) / k.fy, 1.0);
            let hit = scene
                .primitives
                .iter()
                .filter_map(|p| p.intersect(&origin, &dir).map(|(t, n)| (t, n, p.albedo)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            match hit {
                Some((t, n, albedo)) => {
                    let shade = n.dot(&scene.light_dir).max(0.0);
                    depth.push(t);
                    rgb.push(albedo.map(|a| (a * shade + AMBIENT).clamp(0.0, 1.0)));
                }
                None => {
                    depth.push(0.0);
                    rgb.push([0.0; 3]);
                }
            }
        }
    }
    (
        RgbImage::new(k.width, k.height, rgb).expect("shaded colors are clamped"),
        DepthMap::new(k.width, k.height, depth).expect("hit distances are positive"),
    )
}
