//! Training objective and evaluation metrics.
//!
//! The objective is `w1 L_depth + w2 L_early + w3 L_rgb` with
//! `L_depth = w_p l(d^, d) + w_g l(grad d^, grad d) + w_s mean(lap d^)`.
//! Depth terms only look at pixels where the ground truth is valid; the
//! smoothness term covers the whole prediction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{ops, AutogradError, Graph, Tensor, Var};
pub use crate::autograd::DistanceKind;
use crate::grid::{downsample_masked, DepthMap, GridError, ValidityMask};
use crate::model::ModelOutput;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LossError {
    #[error("no valid ground-truth pixels")]
    NoValidPixels,

    #[error("invalid loss weights: {0}")]
    BadWeights(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(transparent)]
    Autograd(AutogradError),

    #[error(transparent)]
    Grid(#[from] GridError),
}

impl From<AutogradError> for LossError {
    fn from(e: AutogradError) -> Self {
        match e {
            AutogradError::NoValidPixels => LossError::NoValidPixels,
            other => LossError::Autograd(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w_p: f64,
    pub w_g: f64,
    pub w_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 0.5, w3: 0.25, w_p: 1.0, w_g: 0.5, w_s: 0.1 }
    }
}

impl LossWeights {
    /// Prediction term only inside the depth loss (no gradient or smoothness).
    pub fn plain() -> Self {
        Self { w_g: 0.0, w_s: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.w1, self.w2, self.w3, self.w_p, self.w_g, self.w_s];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LossError::BadWeights(format!("{self:?} must be finite and non-negative")));
        }
        if self.w1 <= 0.0 {
            return Err(LossError::BadWeights("w1 must be positive".into()));
        }
        Ok(())
    }
}

/// Masked distance between two same-shaped tensors.
pub fn distance(kind: DistanceKind, a: &Tensor, b: &Tensor, mask: &[bool]) -> Result<f64, LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(ops::distance(kind, a.data(), b.data(), mask)?.value)
}

/// Pair masks for forward differences: a pair counts when both pixels are
/// valid. Layout matches [`ops::grad_x`] / [`ops::grad_y`].
pub fn pair_masks(shape: [usize; 4], mask: &[bool]) -> (Vec<bool>, Vec<bool>) {
    let [_, _, h, w] = shape;
    let mut mx = vec![false; mask.len()];
    let mut my = vec![false; mask.len()];
    for (p, plane) in mask.chunks(h * w).enumerate() {
        let off = p * h * w;
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                mx[off + i] = c + 1 < w && plane[i] && plane[i + 1];
                my[off + i] = r + 1 < h && plane[i] && plane[i + w];
            }
        }
    }
    (mx, my)
}

/// Depth loss on the graph. `pred` is a depth prediction `[N, 1, H, W]`,
/// `gt` and `mask` the ground truth in the same layout.
pub fn depth_loss(
    g: &mut Graph,
    pred: Var,
    gt: &Tensor,
    mask: &[bool],
    w: &LossWeights,
    kind: DistanceKind,
) -> Result<Var, LossError> {
    let mut terms = vec![(g.distance(kind, pred, gt, mask)?, w.w_p)];
    if w.w_g > 0.0 {
        let (mx, my) = pair_masks(gt.shape(), mask);
        if mx.iter().chain(&my).any(|v| *v) {
            let gx = g.grad_x(pred)?;
            let gy = g.grad_y(pred)?;
            let flat = g.flatten(&[gx, gy])?;
            let mut target = ops::grad_x(gt).into_data();
            target.extend(ops::grad_y(gt).into_data());
            let n = target.len();
            let pairs: Vec<bool> = mx.into_iter().chain(my).collect();
            terms.push((g.distance(kind, flat, &Tensor::new([1, 1, 1, n], target)?, &pairs)?, w.w_g));
        }
    }
    if w.w_s > 0.0 {
        terms.push((g.laplacian_energy_mean(pred)?, w.w_s));
    }
    Ok(g.weighted_sum(&terms)?)
}

/// Everything the objective compares the network output with, for one batch.
#[derive(Debug, Clone)]
pub struct LossTarget {
    pub gt: Tensor,
    pub mask: Vec<bool>,
    /// Network input image, the target of the RGB head.
    pub rgb: Tensor,
    /// Input depth the residual heads correct; `None` for direct prediction.
    pub base: Option<Tensor>,
    /// Per early head: downsampled ground truth, its mask and the matching
    /// downsampled base.
    pub early: Vec<(Tensor, Vec<bool>, Option<Tensor>)>,
}

fn stack_maps(maps: &[DepthMap]) -> Tensor {
    let (w, h) = (maps[0].width(), maps[0].height());
    let data = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    Tensor::new([maps.len(), 1, h, w], data).expect("equal sizes")
}

impl LossTarget {
    /// `bases` are the prepared depths fed to the network, needed in
    /// residual mode.
    pub fn new(gt: &[&DepthMap], rgb: Tensor, bases: Option<&[&DepthMap]>, early_heads: usize) -> Result<Self, LossError> {
        let Some(first) = gt.first() else {
            return Err(LossError::ShapeMismatch("empty batch".into()));
        };
        if gt.iter().any(|d| !d.same_dims(*first)) || bases.is_some_and(|b| b.len() != gt.len() || b.iter().any(|d| !d.same_dims(*first))) {
            return Err(LossError::ShapeMismatch("batch maps differ in size".into()));
        }
        let masks: Vec<ValidityMask> = gt.iter().map(|d| d.validity()).collect();
        let mut early = Vec::with_capacity(early_heads);
        for i in 0..early_heads {
            let f = 1 << (i + 1);
            let mut gts = Vec::with_capacity(gt.len());
            let mut ms = Vec::new();
            for (d, m) in gt.iter().zip(&masks) {
                let (dd, dm) = downsample_masked(d, m, f)?;
                ms.extend_from_slice(dm.data());
                gts.push(dd);
            }
            let base = match bases {
                Some(b) => Some(stack_maps(
                    &b.iter().map(|d| downsample_masked(d, &d.validity(), f).map(|x| x.0)).collect::<Result<Vec<_>, _>>()?,
                )),
                None => None,
            };
            early.push((stack_maps(&gts), ms, base));
        }
        let owned: Vec<DepthMap> = gt.iter().map(|d| (*d).clone()).collect();
        Ok(Self {
            gt: stack_maps(&owned),
            mask: masks.iter().flat_map(|m| m.data().iter().copied()).collect(),
            rgb,
            base: bases.map(|b| stack_maps(&b.iter().map(|d| (*d).clone()).collect::<Vec<_>>())),
            early,
        })
    }
}

/// Loss components as recorded on the graph.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub depth: Var,
    pub early: Option<Var>,
    pub rgb: Option<Var>,
    /// Depth prediction `d^` (after the residual addition).
    pub prediction: Var,
}

/// Full objective for one batch.
pub fn total_loss(
    g: &mut Graph,
    out: &ModelOutput,
    target: &LossTarget,
    w: &LossWeights,
    kind: DistanceKind,
) -> Result<LossTerms, LossError> {
    w.validate()?;
    let prediction = match &target.base {
        Some(b) => g.add_const(out.primary, b)?,
        None => out.primary,
    };
    let depth = depth_loss(g, prediction, &target.gt, &target.mask, w, kind)?;
    let mut terms = vec![(depth, w.w1)];
    let mut early = None;
    if !out.early.is_empty() && w.w2 > 0.0 {
        if out.early.len() != target.early.len() {
            return Err(LossError::ShapeMismatch(format!("{} early heads, {} targets", out.early.len(), target.early.len())));
        }
        let mut parts = Vec::with_capacity(out.early.len());
        let share = 1.0 / out.early.len() as f64;
        for (e, (gt, mask, base)) in out.early.iter().zip(&target.early) {
            let pred = match base {
                Some(b) => g.add_const(*e, b)?,
                None => *e,
            };
            parts.push((g.distance(kind, pred, gt, mask)?, share));
        }
        let e = g.weighted_sum(&parts)?;
        terms.push((e, w.w2));
        early = Some(e);
    }
    let mut rgb = None;
    if let (Some(r), true) = (out.rgb, w.w3 > 0.0) {
        let all = vec![true; target.rgb.len()];
        let d = g.distance(kind, r, &target.rgb, &all)?;
        terms.push((d, w.w3));
        rgb = Some(d);
    }
    let total = g.weighted_sum(&terms)?;
    Ok(LossTerms { total, depth, early, rgb, prediction })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub rel: f64,
    pub n_valid: usize,
}

pub const METRICS_CSV_HEADER: &str = "experiment,split,rmse_m,mae_m,rel,n_valid";

impl MetricsReport {
    pub fn csv_row(&self, experiment: &str, split: &str) -> String {
        format!("{experiment},{split},{:.6},{:.6},{:.6},{}", self.rmse, self.mae, self.rel, self.n_valid)
    }
}

/// Running sums over valid ground-truth pixels of any number of maps.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsAccumulator {
    sq: f64,
    abs: f64,
    rel: f64,
    n: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, gt: &DepthMap, pred: &DepthMap) -> Result<(), LossError> {
        if !gt.same_dims(pred) {
            return Err(LossError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                gt.width(),
                gt.height(),
                pred.width(),
                pred.height()
            )));
        }
        for (d, p) in gt.data().iter().zip(pred.data()) {
            if *d > 0.0 {
                let e = (d - p).abs();
                self.sq += e * e;
                self.abs += e;
                self.rel += e / d;
                self.n += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricsReport, LossError> {
        if self.n == 0 {
            return Err(LossError::NoValidPixels);
        }
        let n = self.n as f64;
        Ok(MetricsReport { rmse: (self.sq / n).sqrt(), mae: self.abs / n, rel: self.rel / n, n_valid: self.n })
    }
}

/// RMSE, MAE and relative error over the valid pixels of `gt`. Invalid
/// predictions count with their stored value (0).
pub fn evaluate(gt: &DepthMap, pred: &DepthMap) -> Result<MetricsReport, LossError> {
    let mut acc = MetricsAccumulator::default();
    acc.add(gt, pred)?;
    acc.report()
}
