use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::grid::{check_dims, forward_differences, gradient, DepthMap, RgbImage, ValidityMask};

/// Controls for turning perfect depth into sensor-like depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeParams {
    /// Depth-gradient percentile above which pixels are dropped (occlusion
    /// boundaries). `0` disables the step.
    pub gradient_drop_percentile: f64,
    /// Fraction of lowest-texture pixels dropped (passive-stereo failure).
    pub texture_drop_percentile: f64,
    /// Random disc-shaped dropouts (specular reflections).
    pub blob_count: usize,
    pub blob_radius_px: f64,
    /// Gaussian noise on surviving pixels, meters.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            gradient_drop_percentile: 0.95,
            texture_drop_percentile: 0.30,
            blob_count: 2,
            blob_radius_px: 3.0,
            noise_sigma: 0.003,
            seed: 0,
        }
    }
}

impl DegradeParams {
    /// Everything off: `degrade` becomes the identity.
    pub fn none() -> Self {
        Self {
            gradient_drop_percentile: 0.0,
            texture_drop_percentile: 0.0,
            blob_count: 0,
            blob_radius_px: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, p) in [
            ("gradient_drop_percentile", self.gradient_drop_percentile),
            ("texture_drop_percentile", self.texture_drop_percentile),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(SynthError::BadParams(format!("{name} = {p} outside [0, 1)")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SynthError::BadParams(format!("noise_sigma = {}", self.noise_sigma)));
        }
        if !(self.blob_radius_px >= 0.0) {
            return Err(SynthError::BadParams(format!("blob_radius_px = {}", self.blob_radius_px)));
        }
        Ok(())
    }
}

fn check_percentile(p: f64) -> Result<(), SynthError> {
    if !(0.0..1.0).contains(&p) {
        return Err(SynthError::BadParams(format!("percentile {p} outside [0, 1)")));
    }
    Ok(())
}

/// Pixel indices sorted by `(value, index)`.
fn rank_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order
}

fn apply_drops(d: &DepthMap, drop: &[bool]) -> (DepthMap, ValidityMask) {
    let data: Vec<f64> = d.data().iter().zip(drop).map(|(&v, &x)| if x { 0.0 } else { v }).collect();
    let out = DepthMap::new(d.width(), d.height(), data).expect("subset of a valid map");
    let mask = out.validity();
    (out, mask)
}

/// Drops the `floor(percentile * N)` pixels with the weakest grayscale
/// gradient, ties going to the lower pixel index.
pub fn sparsify_texture(rgb: &RgbImage, d: &DepthMap, percentile: f64) -> Result<(DepthMap, ValidityMask), SynthError> {
    check_dims(rgb.width(), rgb.height(), d.width(), d.height())?;
    check_percentile(percentile)?;
    let (dx, dy) = forward_differences(rgb.width(), rgb.height(), &rgb.luminance());
    let mag: Vec<f64> = dx.iter().zip(&dy).map(|(x, y)| x.hypot(*y)).collect();
    let n_drop = (percentile * mag.len() as f64).floor() as usize;
    let mut drop = vec![false; mag.len()];
    for &i in rank_order(&mag).iter().take(n_drop) {
        drop[i] = true;
    }
    Ok(apply_drops(d, &drop))
}

/// Drops pixels whose depth-gradient magnitude is strictly above the value
/// at rank `floor(percentile * N)` of the sorted magnitudes.
pub fn sparsify_gradient(d: &DepthMap, percentile: f64) -> Result<(DepthMap, ValidityMask), SynthError> {
    check_percentile(percentile)?;
    let mag = gradient(d).magnitude();
    if mag.is_empty() {
        return Ok((d.clone(), d.validity()));
    }
    let order = rank_order(&mag);
    let k = ((percentile * mag.len() as f64).floor() as usize).min(mag.len() - 1);
    let threshold = mag[order[k]];
    let drop: Vec<bool> = mag.iter().map(|m| *m > threshold).collect();
    Ok(apply_drops(d, &drop))
}

/// Gradient dropout, then texture dropout, then random disc holes, then
/// Gaussian noise on whatever survived. A pure function of its inputs.
pub fn degrade(d: &DepthMap, rgb: &RgbImage, p: &DegradeParams) -> Result<(DepthMap, ValidityMask), SynthError> {
    check_dims(rgb.width(), rgb.height(), d.width(), d.height())?;
    p.validate()?;
    let (w, h) = (d.width(), d.height());
    let mut cur = d.clone();
    if p.gradient_drop_percentile > 0.0 {
        cur = sparsify_gradient(&cur, p.gradient_drop_percentile)?.0;
    }
    if p.texture_drop_percentile > 0.0 {
        cur = sparsify_texture(rgb, &cur, p.texture_drop_percentile)?.0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut data = cur.into_data();
    let r2 = p.blob_radius_px * p.blob_radius_px;
    for _ in 0..p.blob_count {
        let (r0, c0) = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
        for r in 0..h {
            for c in 0..w {
                let (dr, dc) = (r as f64 - r0, c as f64 - c0);
                if dr * dr + dc * dc <= r2 {
                    data[r * w + c] = 0.0;
                }
            }
        }
    }
    if p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, p.noise_sigma).map_err(|e| SynthError::BadParams(e.to_string()))?;
        for v in data.iter_mut() {
            let n = normal.sample(&mut rng);
            if *v > 0.0 {
                // stays a (positive) measurement, never turns into a hole
                *v = (*v + n).max(1e-4);
            }
        }
    }
    let out = DepthMap::new(w, h, data)?;
    let mask = out.validity();
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraModel, Intrinsics, Pose, Vec3};
    use crate::synth::{random_scene, render, Domain};

    fn checkerboard(w: usize, h: usize, cell: usize) -> RgbImage {
        let data = (0..w * h)
            .map(|i| if ((i / w) / cell + (i % w) / cell).is_multiple_of(2) { [0.9; 3] } else { [0.1; 3] })
            .collect();
        RgbImage::new(w, h, data).unwrap()
    }

    #[test]
    fn texture_uniform_image_drops_by_index() {
        let rgb = RgbImage::filled(10, 10, [0.4; 3]);
        let d = DepthMap::filled(10, 10, 1.0);
        let (out, m) = sparsify_texture(&rgb, &d, 0.3).unwrap();
        assert_eq!(m.count_invalid(), 30);
        assert!((0..30).all(|i| out.data()[i] == 0.0));
        assert!((30..100).all(|i| out.data()[i] == 1.0));
    }

    #[test]
    fn texture_zero_percentile_is_identity() {
        let rgb = checkerboard(8, 8, 2);
        let d = DepthMap::filled(8, 8, 0.7);
        let (out, m) = sparsify_texture(&rgb, &d, 0.0).unwrap();
        assert_eq!(out, d);
        assert_eq!(m.count_invalid(), 0);
    }

    #[test]
    fn texture_drops_inside_checker_squares() {
        let (w, h, cell) = (32, 32, 8);
        let rgb = checkerboard(w, h, cell);
        let (dx, dy) = forward_differences(w, h, &rgb.luminance());
        let (_, m) = sparsify_texture(&rgb, &DepthMap::filled(w, h, 1.0), 0.5).unwrap();
        for i in 0..w * h {
            if !m.data()[i] {
                assert_eq!(dx[i].hypot(dy[i]), 0.0, "pixel {i} is on an edge");
            }
        }
    }

    #[test]
    fn texture_dimension_mismatch() {
        let r = sparsify_texture(&RgbImage::filled(4, 4, [0.1; 3]), &DepthMap::filled(5, 4, 1.0), 0.2);
        assert!(matches!(r, Err(SynthError::Grid(_))));
    }

    #[test]
    fn gradient_constant_depth_drops_nothing() {
        let d = DepthMap::filled(12, 9, 0.8);
        for p in [0.0, 0.5, 0.95] {
            assert_eq!(sparsify_gradient(&d, p).unwrap().1.count_invalid(), 0);
        }
    }

    #[test]
    fn gradient_drops_step_edge() {
        let d = DepthMap::from_fn(64, 48, |_, c| if c < 30 { 0.6 } else { 0.9 }).unwrap();
        let (out, m) = sparsify_gradient(&d, 0.95).unwrap();
        assert_eq!(m.count_invalid(), 48);
        for r in 0..48 {
            assert_eq!(out.at(r, 29), 0.0);
        }
    }

    #[test]
    fn gradient_high_percentile_bounded() {
        let d = DepthMap::from_fn(64, 48, |r, c| 1.0 + 0.1 * ((r as f64) * 0.21).sin() * ((c as f64) * 0.13).cos()).unwrap();
        let (_, m) = sparsify_gradient(&d, 0.99).unwrap();
        assert!(m.count_invalid() <= (0.01 * 64.0 * 48.0) as usize + 1);
    }

    #[test]
    fn sparsifiers_never_alter_survivors() {
        let d = DepthMap::from_fn(16, 16, |r, c| 0.5 + 0.01 * (r * c) as f64).unwrap();
        let rgb = checkerboard(16, 16, 4);
        for (out, _) in [sparsify_gradient(&d, 0.7).unwrap(), sparsify_texture(&rgb, &d, 0.4).unwrap()] {
            for (a, b) in d.data().iter().zip(out.data()) {
                assert!(*b == 0.0 || a == b);
            }
        }
    }

    #[test]
    fn degrade_identity_params() {
        let d = DepthMap::from_fn(16, 12, |r, c| 0.5 + 0.02 * (r + c) as f64).unwrap();
        let rgb = checkerboard(16, 12, 3);
        let (out, m) = degrade(&d, &rgb, &DegradeParams::none()).unwrap();
        assert_eq!(out, d);
        assert_eq!(m.count_invalid(), 0);
    }

    #[test]
    fn degrade_is_deterministic() {
        let d = DepthMap::from_fn(32, 24, |r, c| 0.5 + 0.01 * (r as f64) + if c > 12 { 0.2 } else { 0.0 }).unwrap();
        let rgb = checkerboard(32, 24, 4);
        let p = DegradeParams { seed: 42, ..Default::default() };
        let a = degrade(&d, &rgb, &p).unwrap();
        let b = degrade(&d, &rgb, &p).unwrap();
        assert_eq!(a, b);
        let c = degrade(&d, &rgb, &DegradeParams { seed: 43, ..p }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn degrade_defaults_on_box_scene() {
        let k = Intrinsics::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap();
        for seed in 0..5u64 {
            let scene = random_scene(Domain::Primary, seed);
            let eye = Vec3::new(0.75, 0.0, 0.6);
            let cam = CameraModel { intrinsics: k, pose: Pose::look_at(eye, Vec3::new(0.0, 0.0, 0.05), Vec3::z()).unwrap() };
            let (rgb, d) = render(&scene, &cam);
            let (_, m) = degrade(&d, &rgb, &DegradeParams { seed, ..Default::default() }).unwrap();
            let frac = m.count_invalid() as f64 / m.data().len() as f64;
            assert!((0.05..=0.40).contains(&frac), "invalid fraction {frac}");
        }
    }

    #[test]
    fn params_validation() {
        assert!(DegradeParams { texture_drop_percentile: 1.0, ..Default::default() }.validate().is_err());
        assert!(DegradeParams { noise_sigma: -1.0, ..Default::default() }.validate().is_err());
        assert!(DegradeParams::default().validate().is_ok());
    }
}
