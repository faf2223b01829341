//! Truncated signed distance volume: projective multi-view integration and
//! depth extraction by ray marching. This is the ground-truth engine: views
//! are fused into one volume and raycast back to every original camera.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraModel, Vec3};
use crate::grid::DepthMap;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TsdfError {
    #[error("bad volume config: {0}")]
    BadConfig(String),

    #[error("depth map is {0}x{1} but camera expects {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("no frames to fuse")]
    NoFrames,
}

/// Weight cap; keeps late frames from being diluted away.
pub const DEFAULT_MAX_WEIGHT: f64 = 64.0;
pub const DEFAULT_VOXEL_SIZE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeConfig {
    /// Minimum corner of the grid, world meters.
    pub origin: [f64; 3],
    pub dims: [usize; 3],
    #[serde(default = "default_voxel")]
    pub voxel_size: f64,
    /// Defaults to four voxels.
    #[serde(default)]
    pub truncation: Option<f64>,
    #[serde(default = "default_max_weight")]
    pub max_weight: f64,
}

fn default_voxel() -> f64 {
    DEFAULT_VOXEL_SIZE
}

fn default_max_weight() -> f64 {
    DEFAULT_MAX_WEIGHT
}

impl VolumeConfig {
    pub fn new(origin: [f64; 3], dims: [usize; 3], voxel_size: f64) -> Self {
        Self { origin, dims, voxel_size, truncation: None, max_weight: DEFAULT_MAX_WEIGHT }
    }

    pub fn truncation(&self) -> f64 {
        self.truncation.unwrap_or(4.0 * self.voxel_size)
    }

    /// Smallest grid covering the world box `[lo, hi]`.
    pub fn covering(lo: [f64; 3], hi: [f64; 3], voxel_size: f64, truncation: Option<f64>) -> Self {
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / voxel_size).ceil() as usize).max(1));
        Self { origin: lo, dims, voxel_size, truncation, max_weight: DEFAULT_MAX_WEIGHT }
    }
}

#[derive(Debug, Clone)]
pub struct TsdfVolume {
    origin: Vec3,
    dims: [usize; 3],
    voxel_size: f64,
    truncation: f64,
    max_weight: f64,
    tsdf: Vec<f64>,
    weight: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(origin: Vec3, dims: [usize; 3], voxel_size: f64, truncation: f64) -> Result<Self, TsdfError> {
        Self::from_config(&VolumeConfig {
            origin: [origin.x, origin.y, origin.z],
            dims,
            voxel_size,
            truncation: Some(truncation),
            max_weight: DEFAULT_MAX_WEIGHT,
        })
    }

    pub fn from_config(cfg: &VolumeConfig) -> Result<Self, TsdfError> {
        let trunc = cfg.truncation();
        if cfg.dims.contains(&0) {
            return Err(TsdfError::BadConfig(format!("dims {:?} must be positive", cfg.dims)));
        }
        if !(cfg.voxel_size > 0.0 && cfg.voxel_size.is_finite()) {
            return Err(TsdfError::BadConfig(format!("voxel size {}", cfg.voxel_size)));
        }
        if !(trunc >= cfg.voxel_size && trunc.is_finite()) {
            return Err(TsdfError::BadConfig(format!(
                "truncation {trunc} smaller than voxel size {}",
                cfg.voxel_size
            )));
        }
        if !(cfg.max_weight >= 1.0) {
            return Err(TsdfError::BadConfig(format!("max weight {}", cfg.max_weight)));
        }
        let n = cfg.dims[0]
            .checked_mul(cfg.dims[1])
            .and_then(|v| v.checked_mul(cfg.dims[2]))
            .ok_or_else(|| TsdfError::BadConfig("volume too large".into()))?;
        Ok(Self {
            origin: Vec3::from(cfg.origin),
            dims: cfg.dims,
            voxel_size: cfg.voxel_size,
            truncation: trunc,
            max_weight: cfg.max_weight,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    /// Physical size along each axis.
    pub fn extent(&self) -> Vec3 {
        Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.voxel_size
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn tsdf_at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.tsdf[self.index(i, j, k)]
    }

    pub fn weight_at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.weight[self.index(i, j, k)]
    }

    pub fn tsdf_values(&self) -> &[f64] {
        &self.tsdf
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    /// Folds one depth frame into the running weighted mean.
    ///
    /// Signed distance is measured along the camera's z axis (projective
    /// TSDF). Voxels outside the frame, behind an invalid pixel, or more than
    /// one truncation distance behind the measured surface are left alone.
    pub fn integrate(&mut self, d: &DepthMap, cam: &CameraModel) -> Result<(), TsdfError> {
        let k = cam.intrinsics;
        if d.width() != k.width || d.height() != k.height {
            return Err(TsdfError::DimensionMismatch(d.width(), d.height(), k.width, k.height));
        }
        let [nx, ny, _] = self.dims;
        let slab = nx * ny;
        let (origin, vs, trunc, wmax) = (self.origin, self.voxel_size, self.truncation, self.max_weight);
        let pose = cam.pose;
        self.tsdf
            .par_chunks_mut(slab)
            .zip(self.weight.par_chunks_mut(slab))
            .enumerate()
            .for_each(|(kz, (tsdf, weight))| {
                let z = origin.z + (kz as f64 + 0.5) * vs;
                for j in 0..ny {
                    let y = origin.y + (j as f64 + 0.5) * vs;
                    for i in 0..nx {
                        let p = pose.transform(&Vec3::new(origin.x + (i as f64 + 0.5) * vs, y, z));
                        if p.z <= 0.0 {
                            continue;
                        }
                        let u = k.fx * p.x / p.z + k.cx;
                        let v = k.fy * p.y / p.z + k.cy;
                        let Some((r, c)) = k.pixel_of(u, v) else { continue };
                        let measured = d.at(r, c);
                        if measured <= 0.0 {
                            continue;
                        }
                        let sdf = measured - p.z;
                        if sdf < -trunc {
                            continue;
                        }
                        let t = (sdf / trunc).min(1.0);
                        let idx = j * nx + i;
                        let w = weight[idx];
                        tsdf[idx] = (w * tsdf[idx] + t) / (w + 1.0);
                        weight[idx] = (w + 1.0).min(wmax);
                    }
                }
            });
        Ok(())
    }

    /// Trilinear TSDF at a world point over the observed corner voxels only.
    /// `None` when no corner has been observed.
    fn sample(&self, p: &Vec3) -> Option<f64> {
        let g = (p - self.origin) / self.voxel_size - Vec3::new(0.5, 0.5, 0.5);
        let base = g.map(f64::floor);
        let f = g - base;
        let (bi, bj, bk) = (base.x as i64, base.y as i64, base.z as i64);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for corner in 0..8 {
            let (di, dj, dk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let (i, j, k) = (bi + di as i64, bj + dj as i64, bk + dk as i64);
            if i < 0 || j < 0 || k < 0 {
                continue;
            }
            let (i, j, k) = (i as usize, j as usize, k as usize);
            if i >= self.dims[0] || j >= self.dims[1] || k >= self.dims[2] {
                continue;
            }
            let idx = self.index(i, j, k);
            if self.weight[idx] <= 0.0 {
                continue;
            }
            let w = (if di == 1 { f.x } else { 1.0 - f.x })
                * (if dj == 1 { f.y } else { 1.0 - f.y })
                * (if dk == 1 { f.z } else { 1.0 - f.z });
            acc += w * self.tsdf[idx];
            wsum += w;
        }
        (wsum > 1e-12).then(|| acc / wsum)
    }

    /// Parameter range `[t0, t1]` where `origin + t * dir` is inside the grid.
    fn clip_ray(&self, o: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let lo = self.origin;
        let hi = self.origin + self.extent();
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if o[a] < lo[a] || o[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((lo[a] - o[a]) / dir[a], (hi[a] - o[a]) / dir[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some((t0, t1))
    }

    fn march(&self, origin: &Vec3, dir_world: &Vec3, step: f64) -> f64 {
        let Some((t0, t1)) = self.clip_ray(origin, dir_world) else { return 0.0 };
        let mut prev: Option<(f64, f64)> = None;
        let mut t = t0;
        while t <= t1 {
            match self.sample(&(origin + dir_world * t)) {
                None => prev = None,
                Some(v) => {
                    match prev {
                        Some((tp, vp)) if vp > 0.0 && v <= 0.0 => {
                            return tp + (t - tp) * vp / (vp - v);
                        }
                        // Entered a surface's back side without seeing the front.
                        _ if v < 0.0 => return 0.0,
                        _ => {}
                    }
                    prev = Some((t, v));
                }
            }
            t += step;
        }
        0.0
    }

    /// Depth image seen by `cam`: first observed `+ -> -` zero crossing along
    /// each pixel ray, sampled every half voxel and refined linearly. Pixels
    /// without a cleanly bracketed crossing come back as 0 (invalid).
    pub fn raycast_depth(&self, cam: &CameraModel) -> DepthMap {
        let k = cam.intrinsics;
        let world_from_cam = cam.pose.inverse();
        let center = world_from_cam.transform(&Vec3::zeros());
        let rot = *world_from_cam.rotation();
        let mut out = vec![0.0; k.width * k.height];
        out.par_chunks_mut(k.width).enumerate().for_each(|(r, row)| {
            for (c, px) in row.iter_mut().enumerate() {
                // Unnormalized so the ray parameter is camera-frame depth.
                let dir_cam = Vec3::new((c as f64 - k.cx) / k.fx, (r as f64 - k.cy) / k.fy, 1.0);
                let step = 0.5 * self.voxel_size / dir_cam.norm();
                *px = self.march(&center, &(rot * dir_cam), step);
            }
        });
        DepthMap::new(k.width, k.height, out).expect("ray depths are finite and non-negative")
    }
}

/// Integrates every frame into one volume and raycasts it back to each
/// input camera. Outputs are in input order and may still contain holes.
pub fn fuse_views(frames: &[(DepthMap, CameraModel)], cfg: &VolumeConfig) -> Result<Vec<DepthMap>, TsdfError> {
    if frames.is_empty() {
        return Err(TsdfError::NoFrames);
    }
    let mut vol = TsdfVolume::from_config(cfg)?;
    for (d, cam) in frames {
        vol.integrate(d, cam)?;
    }
    Ok(frames.iter().map(|(_, cam)| vol.raycast_depth(cam)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    fn plane_setup() -> (TsdfVolume, CameraModel, DepthMap) {
        let k = Intrinsics::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap();
        let cam = CameraModel { intrinsics: k, pose: Pose::identity() };
        let vol = TsdfVolume::new(Vec3::new(-0.3, -0.25, 0.4), [120, 100, 40], 0.005, 0.02).unwrap();
        (vol, cam, DepthMap::filled(64, 48, 0.5))
    }

    /// Depth of a sphere seen by `cam`, by direct ray-sphere intersection.
    fn sphere_depth(cam: &CameraModel, center: Vec3, radius: f64) -> DepthMap {
        let k = cam.intrinsics;
        let c = cam.pose.transform(&center);
        DepthMap::from_fn(k.width, k.height, |r, col| {
            let d = Vec3::new((col as f64 - k.cx) / k.fx, (r as f64 - k.cy) / k.fy, 1.0);
            // |t d - c|^2 = R^2
            let a = d.norm_squared();
            let b = -2.0 * d.dot(&c);
            let cc = c.norm_squared() - radius * radius;
            let disc = b * b - 4.0 * a * cc;
            if disc < 0.0 {
                return 0.0;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            if t > 0.0 { t } else { 0.0 }
        })
        .unwrap()
    }

    #[test]
    fn new_volume_examples() {
        let v = TsdfVolume::new(Vec3::zeros(), [1, 1, 1], 0.01, 0.01).unwrap();
        assert_eq!(v.tsdf_at(0, 0, 0), 1.0);
        assert_eq!(v.weight_at(0, 0, 0), 0.0);
        let v = TsdfVolume::new(Vec3::zeros(), [10, 10, 10], 0.01, 0.04).unwrap();
        assert!((v.extent() - Vec3::new(0.1, 0.1, 0.1)).norm() < 1e-12);
        assert!(matches!(TsdfVolume::new(Vec3::zeros(), [2, 2, 2], 0.01, 0.005), Err(TsdfError::BadConfig(_))));
        assert!(TsdfVolume::new(Vec3::zeros(), [0, 2, 2], 0.01, 0.04).is_err());
    }

    #[test]
    fn plane_integration_matches_analytic_sdf() {
        let (mut vol, cam, d) = plane_setup();
        vol.integrate(&d, &cam).unwrap();
        let (i, j) = (60, 50); // on the optical axis
        for k in 0..40 {
            let z = vol.voxel_center(i, j, k).z;
            let w = vol.weight_at(i, j, k);
            if z < 0.5 - vol.truncation() {
                assert_eq!((vol.tsdf_at(i, j, k), w), (1.0, 1.0));
            } else if z <= 0.5 + vol.truncation() {
                assert!((vol.tsdf_at(i, j, k) - (0.5 - z) / vol.truncation()).abs() < 1e-9);
            } else {
                assert_eq!(w, 0.0);
            }
        }
    }

    #[test]
    fn integrating_twice_keeps_values_and_doubles_weight() {
        let (mut vol, cam, d) = plane_setup();
        vol.integrate(&d, &cam).unwrap();
        let once = vol.clone();
        vol.integrate(&d, &cam).unwrap();
        for idx in 0..vol.tsdf.len() {
            assert!((vol.tsdf[idx] - once.tsdf[idx]).abs() < 1e-15);
            assert_eq!(vol.weight[idx], 2.0 * once.weight[idx]);
        }
    }

    #[test]
    fn weight_is_capped() {
        let (_, cam, d) = plane_setup();
        let mut vol = TsdfVolume::from_config(&VolumeConfig {
            max_weight: 3.0,
            ..VolumeConfig::new([-0.1, -0.1, 0.45], [10, 10, 20], 0.005)
        })
        .unwrap();
        for _ in 0..5 {
            vol.integrate(&d, &cam).unwrap();
        }
        assert!(vol.weights().iter().all(|w| *w == 0.0 || *w == 3.0));
    }

    #[test]
    fn invalid_frame_changes_nothing() {
        let (mut vol, cam, _) = plane_setup();
        vol.integrate(&DepthMap::filled(64, 48, 0.0), &cam).unwrap();
        assert!(vol.weights().iter().all(|w| *w == 0.0));
        assert!(vol.tsdf_values().iter().all(|t| *t == 1.0));
        assert!(matches!(vol.integrate(&DepthMap::filled(4, 4, 1.0), &cam), Err(TsdfError::DimensionMismatch(..))));
    }

    #[test]
    fn raycast_plane() {
        let (mut vol, cam, d) = plane_setup();
        vol.integrate(&d, &cam).unwrap();
        let out = vol.raycast_depth(&cam);
        let good = out.data().iter().filter(|v| (*v - 0.5).abs() <= 0.0025).count();
        assert!(good as f64 >= 0.99 * out.len() as f64, "{good} of {}", out.len());
    }

    #[test]
    fn raycast_empty_volume() {
        let (vol, cam, _) = plane_setup();
        assert!(vol.raycast_depth(&cam).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sphere_from_four_views() {
        let center = Vec3::new(0.0, 0.0, 0.6);
        let radius = 0.1;
        let k = Intrinsics::new(80.0, 80.0, 32.0, 24.0, 64, 48).unwrap();
        let front = CameraModel { intrinsics: k, pose: Pose::identity() };
        let mut frames = vec![(sphere_depth(&front, center, radius), front)];
        for eye in [Vec3::new(0.4, 0.0, 0.3), Vec3::new(-0.4, 0.0, 0.3), Vec3::new(0.0, 0.4, 0.3)] {
            let cam = CameraModel { intrinsics: k, pose: Pose::look_at(eye, center, Vec3::z()).unwrap() };
            frames.push((sphere_depth(&cam, center, radius), cam));
        }
        let cfg = VolumeConfig::covering([-0.15, -0.15, 0.45], [0.15, 0.15, 0.75], 0.005, None);
        let out = fuse_views(&frames, &cfg).unwrap();
        let depth = out[0].at(24, 32);
        assert!((depth - 0.5).abs() <= 0.005, "center depth {depth}");
    }

    #[test]
    fn fuse_needs_frames() {
        let cfg = VolumeConfig::new([0.0; 3], [2, 2, 2], 0.01);
        assert_eq!(fuse_views(&[], &cfg), Err(TsdfError::NoFrames));
    }

    #[test]
    fn fuse_never_invents_depth() {
        // Only the left half of the frame observed: the right half must stay empty.
        let (_, cam, _) = plane_setup();
        let d = DepthMap::from_fn(64, 48, |_, c| if c < 32 { 0.5 } else { 0.0 }).unwrap();
        let cfg = VolumeConfig::new([-0.3, -0.25, 0.4], [120, 100, 40], 0.005);
        let out = fuse_views(&[(d, cam)], &cfg).unwrap();
        for r in 0..48 {
            for c in 34..64 {
                assert_eq!(out[0].at(r, c), 0.0);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn integration_order_insensitive_and_clamped(
            za in 0.45f64..0.6, zb in 0.45f64..0.6, tilt in -0.2f64..0.2,
        ) {
            let k = Intrinsics::new(30.0, 30.0, 16.0, 12.0, 32, 24).unwrap();
            let a = CameraModel { intrinsics: k, pose: Pose::identity() };
            let rot = *nalgebra::Rotation3::from_euler_angles(0.0, tilt, 0.0).matrix();
            let b = CameraModel { intrinsics: k, pose: Pose::new(rot, Vec3::new(0.01, 0.0, 0.02)).unwrap() };
            let da = DepthMap::filled(32, 24, za);
            let db = DepthMap::filled(32, 24, zb);
            let cfg = VolumeConfig::new([-0.2, -0.15, 0.35], [40, 30, 40], 0.01);
            let mut v1 = TsdfVolume::from_config(&cfg).unwrap();
            v1.integrate(&da, &a).unwrap();
            v1.integrate(&db, &b).unwrap();
            let mut v2 = TsdfVolume::from_config(&cfg).unwrap();
            v2.integrate(&db, &b).unwrap();
            v2.integrate(&da, &a).unwrap();
            for (x, y) in v1.tsdf_values().iter().zip(v2.tsdf_values()) {
                prop_assert!((x - y).abs() < 1e-6);
                prop_assert!((-1.0..=1.0).contains(x));
            }
            let _ = Matrix3::<f64>::identity();
        }
    }
}
