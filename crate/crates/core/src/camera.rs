//! Pinhole cameras, rigid poses, cross-view depth reprojection and the
//! tag-grid rigid fit used to register the camera rig.
//!
//! Pixel convention: `u` is the column, `v` the row, and integer coordinates
//! are pixel centers. Camera frames are x right, y down, z forward.

use nalgebra::{Matrix3, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::DepthMap;

pub type Vec3 = Vector3<f64>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),

    #[error("invalid intrinsics: {0}")]
    BadIntrinsics(String),

    #[error("invalid pose: {0}")]
    BadPose(String),

    #[error("invalid tag grid: {0}")]
    BadGrid(String),

    #[error("degenerate rigid fit: {0}")]
    Degenerate(String),

    #[error("depth map is {0}x{1} but camera expects {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, CameraError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(CameraError::BadIntrinsics(format!("focal lengths {} {}", self.fx, self.fy)));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(CameraError::BadIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Nearest pixel for a continuous image coordinate, if inside the frame.
    #[inline]
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (c, r) = (u.round(), v.round());
        if c >= 0.0 && r >= 0.0 && c < self.width as f64 && r < self.height as f64 {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }
}

/// Rigid camera-from-world transform: `p_cam = rotation * p_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

const ORTHO_TOL: f64 = 1e-9;

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, CameraError> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(err <= ORTHO_TOL) {
            return Err(CameraError::BadPose(format!("R^T R deviates from I by {err:e}")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(CameraError::BadPose(format!("det(R) = {det}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(CameraError::BadPose("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    #[inline]
    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera looking from `eye` toward `target`, image "up" roughly along `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self, CameraError> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| CameraError::BadPose("eye equals target".into()))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| CameraError::BadPose("view direction parallel to up".into()))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self { rotation, translation: -(rotation * eye) })
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_matrix4(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_matrix4(m: &[f64]) -> Result<Self, CameraError> {
        if m.len() != 16 {
            return Err(CameraError::BadPose(format!("expected 16 numbers, got {}", m.len())));
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(CameraError::BadPose("last row must be 0 0 0 1".into()));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }

    /// Rotation angle of `self^-1 ∘ other` in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    pose: Vec<f64>,
}

impl Serialize for CameraModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let k = &self.intrinsics;
        CameraFile {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            pose: self.pose.to_matrix4().to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let f = CameraFile::deserialize(d)?;
        let intrinsics = Intrinsics::new(f.fx, f.fy, f.cx, f.cy, f.width, f.height).map_err(D::Error::custom)?;
        let pose = Pose::from_matrix4(&f.pose).map_err(D::Error::custom)?;
        Ok(CameraModel { intrinsics, pose })
    }
}

pub fn project(p: &Vec3, k: &Intrinsics) -> Result<(f64, f64, f64), CameraError> {
    if !(p.z > 0.0) {
        return Err(CameraError::BehindCamera(p.z));
    }
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
}

pub fn unproject(u: f64, v: f64, z: f64, k: &Intrinsics) -> Result<Vec3, CameraError> {
    if !(z > 0.0) {
        return Err(CameraError::NonPositiveDepth(z));
    }
    Ok(Vec3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z))
}

/// Moves a depth map from `src`'s viewpoint to `dst`'s.
///
/// Each valid source pixel is lifted to 3-D, carried into the destination
/// camera and splatted to its nearest pixel. Collisions keep the smaller
/// depth, and on exact ties the earlier source pixel (row-major) wins.
/// Destination pixels nobody lands on stay invalid.
pub fn reproject_depth(d: &DepthMap, src: &CameraModel, dst: &CameraModel) -> Result<DepthMap, CameraError> {
    let ks = &src.intrinsics;
    if d.width() != ks.width || d.height() != ks.height {
        return Err(CameraError::DimensionMismatch(d.width(), d.height(), ks.width, ks.height));
    }
    let kd = &dst.intrinsics;
    let src_to_dst = dst.pose.compose(&src.pose.inverse());
    let mut out = vec![0.0f64; kd.width * kd.height];
    for r in 0..ks.height {
        for c in 0..ks.width {
            let z = d.at(r, c);
            if z <= 0.0 {
                continue;
            }
            let p = unproject(c as f64, r as f64, z, ks)?;
            let q = src_to_dst.transform(&p);
            let Ok((u, v, zd)) = project(&q, kd) else { continue };
            if let Some((tr, tc)) = kd.pixel_of(u, v) {
                let slot = &mut out[tr * kd.width + tc];
                if *slot == 0.0 || zd < *slot {
                    *slot = zd;
                }
            }
        }
    }
    Ok(DepthMap::new(kd.width, kd.height, out).expect("projected depths are positive"))
}

/// Planar matrix of fiducial tag centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagGrid {
    pub rows: usize,
    pub cols: usize,
    /// Center-to-center distance in meters.
    pub spacing: f64,
}

impl TagGrid {
    pub fn new(rows: usize, cols: usize, spacing: f64) -> Result<Self, CameraError> {
        if rows < 2 || cols < 2 {
            return Err(CameraError::BadGrid(format!("{rows}x{cols} needs at least 2x2 tags")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(CameraError::BadGrid(format!("spacing {spacing}")));
        }
        Ok(Self { rows, cols, spacing })
    }
}

/// Tag centers `(i * spacing, j * spacing, 0)`, row index outermost.
pub fn tag_grid_points(g: &TagGrid) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(g.rows * g.cols);
    for i in 0..g.rows {
        for j in 0..g.cols {
            pts.push(Vec3::new(i as f64 * g.spacing, j as f64 * g.spacing, 0.0));
        }
    }
    pts
}

fn centroid(pts: &[Vec3]) -> Vec3 {
    pts.iter().fold(Vec3::zeros(), |acc, p| acc + p) / pts.len() as f64
}

/// Least-squares rigid transform `T` with `T(model_i) ≈ measured_i` (Kabsch,
/// with the reflection case folded back into a proper rotation).
pub fn fit_rigid(measured: &[Vec3], model: &[Vec3]) -> Result<Pose, CameraError> {
    if measured.len() != model.len() {
        return Err(CameraError::Degenerate(format!(
            "{} measured points vs {} model points",
            measured.len(),
            model.len()
        )));
    }
    if model.len() < 3 {
        return Err(CameraError::Degenerate(format!("need at least 3 points, got {}", model.len())));
    }
    let mu_model = centroid(model);
    let mu_meas = centroid(measured);

    let mut spread = Matrix3::zeros();
    let mut cov = Matrix3::zeros();
    for (a, b) in model.iter().zip(measured) {
        let ma = a - mu_model;
        spread += ma * ma.transpose();
        cov += ma * (b - mu_meas).transpose();
    }
    // Collinear model points leave a free rotation about their common line.
    let sv = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(CameraError::Degenerate("model points are collinear".into()));
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.ok_or_else(|| CameraError::Degenerate("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| CameraError::Degenerate("SVD failed".into()))?;
    let v = v_t.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let rotation = v * fix * u.transpose();
    let translation = mu_meas - rotation * mu_model;
    Pose::new(rotation, translation)
}

/// Root-mean-square distance between `pose(model_i)` and `measured_i`.
pub fn rms_residual(pose: &Pose, measured: &[Vec3], model: &[Vec3]) -> f64 {
    let sum: f64 = model.iter().zip(measured).map(|(m, p)| (pose.transform(m) - p).norm_squared()).sum();
    (sum / model.len() as f64).sqrt()
}

/// Result of registering a camera against a tag grid.
#[derive(Debug, Clone, Copy)]
pub struct Calibration {
    /// Camera-from-target transform.
    pub pose: Pose,
    pub rms: f64,
    /// `rms <= max_rms`.
    pub accepted: bool,
}

/// Acceptance threshold for [`calibrate`] when none is configured, meters RMS.
pub const DEFAULT_MAX_RMS: f64 = 0.005;

/// Fits the grid model to measured tag centers (camera frame, row-major tag
/// order) and reports whether the residual passes `max_rms`.
pub fn calibrate(measured: &[Vec3], grid: &TagGrid, max_rms: f64) -> Result<Calibration, CameraError> {
    let model = tag_grid_points(grid);
    let pose = fit_rigid(measured, &model)?;
    let rms = rms_residual(&pose, measured, &model);
    Ok(Calibration { pose, rms, accepted: rms <= max_rms })
}
