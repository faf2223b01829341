//! Pixel grids and the image calculus shared by the losses, the sparsifiers
//! and input preparation.
//!
//! All grids are row-major: pixel `(row, col)` lives at `row * width + col`.
//! Depth is stored in meters and `0.0` marks a missing measurement. The
//! sentinel is only a file-level convention; code that needs validity takes a
//! [`ValidityMask`] explicitly.

pub mod pnm;

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GridError {
    #[error("grid data length {len} does not match {width}x{height}")]
    BadLength { width: usize, height: usize, len: usize },

    #[error("pixel {index} holds {value}, expected a finite non-negative depth")]
    BadDepth { index: usize, value: f64 },

    #[error("pixel {index} channel value {value} outside [0, 1]")]
    BadColor { index: usize, value: f64 },

    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("mask has no valid pixel")]
    AllInvalid,

    #[error("factor {factor} is not a power of two dividing {width}x{height}")]
    BadFactor { factor: usize, width: usize, height: usize },
}

/// Depth in meters, `0.0` = invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if width * height != data.len() {
            return Err(GridError::BadLength { width, height, len: data.len() });
        }
        if let Some((index, &value)) =
            data.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(GridError::BadDepth { index, value });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(value.is_finite() && value >= 0.0, "depth must be finite and non-negative");
        Self { width, height, data: vec![value; width * height] }
    }

    /// Builds a map by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, GridError> {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Mask with `valid <=> depth > 0`.
    pub fn validity(&self) -> ValidityMask {
        ValidityMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&d| d > 0.0).collect(),
        }
    }

    /// Zeroes every pixel the mask marks invalid.
    pub fn masked(&self, mask: &ValidityMask) -> Result<Self, GridError> {
        check_dims(self.width, self.height, mask.width, mask.height)?;
        let data = self
            .data
            .iter()
            .zip(&mask.data)
            .map(|(&d, &v)| if v { d } else { 0.0 })
            .collect();
        Ok(Self { width: self.width, height: self.height, data })
    }

    /// Multiplies every depth by `factor`; zeros stay zero.
    pub fn scaled(&self, factor: f64) -> Self {
        assert!(factor.is_finite() && factor > 0.0);
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|d| d * factor).collect(),
        }
    }

    pub fn same_dims<T: Dims>(&self, other: &T) -> bool {
        self.width == other.dims().0 && self.height == other.dims().1
    }
}

/// Anything with a pixel footprint.
pub trait Dims {
    fn dims(&self) -> (usize, usize);
}

impl Dims for DepthMap {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl Dims for ValidityMask {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl Dims for RgbImage {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

pub(crate) fn check_dims(w0: usize, h0: usize, w1: usize, h1: usize) -> Result<(), GridError> {
    if w0 != w1 || h0 != h1 {
        return Err(GridError::DimensionMismatch(w0, h0, w1, h1));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, GridError> {
        if width * height != data.len() {
            return Err(GridError::BadLength { width, height, len: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn all_valid(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![true; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn count_invalid(&self) -> usize {
        self.data.len() - self.count_valid()
    }

    pub fn and(&self, other: &ValidityMask) -> Result<Self, GridError> {
        check_dims(self.width, self.height, other.width, other.height)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        Ok(Self { width: self.width, height: self.height, data })
    }
}

/// Linear RGB in `[0, 1]` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self, GridError> {
        if width * height != data.len() {
            return Err(GridError::BadLength { width, height, len: data.len() });
        }
        for (index, px) in data.iter().enumerate() {
            for &value in px {
                if !(0.0..=1.0).contains(&value) {
                    return Err(GridError::BadColor { index, value });
                }
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::new(width, height, vec![rgb; width * height]).expect("color outside [0, 1]")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }

    /// Rec. 601 luma, `0.299 R + 0.587 G + 0.114 B`.
    pub fn luminance(&self) -> Vec<f64> {
        self.data.iter().map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }
}

/// Forward differences of a depth map, meters per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl GradientField {
    pub fn magnitude(&self) -> Vec<f64> {
        self.dx.iter().zip(&self.dy).map(|(x, y)| x.hypot(*y)).collect()
    }
}

/// Plain row-major scalar grid, e.g. the Laplacian energy.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarGrid {
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Forward differences of an arbitrary row-major grid; the last column of
/// `dx` and the last row of `dy` are zero.
pub fn forward_differences(width: usize, height: usize, values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; width * height];
    let mut dy = vec![0.0; width * height];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if c + 1 < width {
                dx[i] = values[i + 1] - values[i];
            }
            if r + 1 < height {
                dy[i] = values[i + width] - values[i];
            }
        }
    }
    (dx, dy)
}

pub fn gradient(d: &DepthMap) -> GradientField {
    let (dx, dy) = forward_differences(d.width, d.height, &d.data);
    GradientField { width: d.width, height: d.height, dx, dy }
}

/// Per-pixel `d_xx^2 + d_yy^2` with central second differences; the one-pixel
/// border is zero.
pub fn laplacian_energy(d: &DepthMap) -> ScalarGrid {
    ScalarGrid {
        width: d.width,
        height: d.height,
        data: laplacian_energy_raw(d.width, d.height, &d.data),
    }
}

pub(crate) fn laplacian_energy_raw(width: usize, height: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    if width < 3 || height < 3 {
        return out;
    }
    for r in 1..height - 1 {
        for c in 1..width - 1 {
            let i = r * width + c;
            let dxx = v[i + 1] - 2.0 * v[i] + v[i - 1];
            let dyy = v[i + width] - 2.0 * v[i] + v[i - width];
            out[i] = dxx * dxx + dyy * dyy;
        }
    }
    out
}

/// Iteration controls for [`interpolate_fill_with`].
#[derive(Debug, Clone, Copy)]
pub struct FillParams {
    /// Stop once the largest per-pixel change of a sweep drops below this (meters).
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FillParams {
    fn default() -> Self {
        Self { tolerance: 1e-7, max_iterations: 10_000 }
    }
}

/// Harmonic fill of invalid pixels with the valid ones held fixed.
pub fn interpolate_fill(d: &DepthMap, m: &ValidityMask) -> Result<DepthMap, GridError> {
    interpolate_fill_with(d, m, FillParams::default())
}

/// Jacobi diffusion: every invalid pixel is repeatedly replaced by the mean of
/// its in-image 4-neighbours until the update falls below `params.tolerance`.
/// Valid pixels are Dirichlet boundary values, so results stay within the
/// range of the valid inputs.
pub fn interpolate_fill_with(
    d: &DepthMap,
    m: &ValidityMask,
    params: FillParams,
) -> Result<DepthMap, GridError> {
    check_dims(d.width, d.height, m.width, m.height)?;
    let (w, h) = (d.width, d.height);
    let valid = m.count_valid();
    if valid == 0 {
        return Err(GridError::AllInvalid);
    }
    if valid == m.data.len() {
        return Ok(d.clone());
    }

    let mean = d.data.iter().zip(&m.data).filter(|(_, v)| **v).map(|(x, _)| x).sum::<f64>()
        / valid as f64;
    let holes: Vec<usize> = (0..w * h).filter(|&i| !m.data[i]).collect();
    let mut cur: Vec<f64> =
        d.data.iter().zip(&m.data).map(|(&x, &v)| if v { x } else { mean }).collect();
    let mut next = cur.clone();

    for _ in 0..params.max_iterations {
        let mut max_update = 0.0f64;
        for &i in &holes {
            let (r, c) = (i / w, i % w);
            let mut sum = 0.0;
            let mut n = 0.0;
            if c > 0 {
                sum += cur[i - 1];
                n += 1.0;
            }
            if c + 1 < w {
                sum += cur[i + 1];
                n += 1.0;
            }
            if r > 0 {
                sum += cur[i - w];
                n += 1.0;
            }
            if r + 1 < h {
                sum += cur[i + w];
                n += 1.0;
            }
            let v = if n > 0.0 { sum / n } else { cur[i] };
            max_update = max_update.max((v - cur[i]).abs());
            next[i] = v;
        }
        std::mem::swap(&mut cur, &mut next);
        if max_update < params.tolerance {
            break;
        }
    }
    Ok(DepthMap { width: w, height: h, data: cur })
}

/// Mean of the valid pixels in each `factor x factor` block. A block without
/// valid pixels produces an invalid (zero) output pixel.
pub fn downsample_masked(
    d: &DepthMap,
    m: &ValidityMask,
    factor: usize,
) -> Result<(DepthMap, ValidityMask), GridError> {
    check_dims(d.width, d.height, m.width, m.height)?;
    let (out_w, out_h, data, mask) = downsample_raw(d.width, d.height, &d.data, &m.data, factor)?;
    Ok((
        DepthMap { width: out_w, height: out_h, data },
        ValidityMask { width: out_w, height: out_h, data: mask },
    ))
}

pub(crate) fn downsample_raw(
    width: usize,
    height: usize,
    values: &[f64],
    mask: &[bool],
    factor: usize,
) -> Result<(usize, usize, Vec<f64>, Vec<bool>), GridError> {
    if factor == 0 || !factor.is_power_of_two() || !width.is_multiple_of(factor) || !height.is_multiple_of(factor) {
        return Err(GridError::BadFactor { factor, width, height });
    }
    let (out_w, out_h) = (width / factor, height / factor);
    let mut sums = vec![0.0; out_w * out_h];
    let mut counts = vec![0usize; out_w * out_h];
    for r in 0..height {
        let orow = (r / factor) * out_w;
        for c in 0..width {
            let i = r * width + c;
            if mask[i] {
                sums[orow + c / factor] += values[i];
                counts[orow + c / factor] += 1;
            }
        }
    }
    let data = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    Ok((out_w, out_h, data, counts.iter().map(|&n| n > 0).collect()))
}
