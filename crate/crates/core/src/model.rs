//! Encoder-decoder depth completion network and its ablation variants.
//!
//! Encoder level `k` runs a 3x3 conv (`c_k = base * 2^k` channels) and a relu,
//! keeps the activation as skip `s_k`, then max-pools. A 3x3 bottleneck conv
//! sits at the coarsest level. Decoder stage `k` (from `L-1` down to 0)
//! upsamples (max-unpool with the encoder's indices, or a 2x2 stride-2
//! transposed conv), applies a 3x3 conv + relu, adds `s_k` when U-connections
//! are on, and for `k > 0` reduces to `c_{k-1}` channels with a 1x1 conv +
//! relu. Heads are 1x1 convs: the bias-free primary head on stage 0, early
//! depth heads on stages `1..=early_heads`, and an optional RGB head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{self, AutogradError, Graph, Tensor, Var, WeightFile};
use crate::grid::{interpolate_fill, DepthMap, GridError, RgbImage, ValidityMask};

pub const DEFAULT_DEPTH_MAX: f64 = 2.0;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("model takes a validity mask input but none was given")]
    MissingMask,

    #[error("unknown {direction} experiment {name:?}")]
    UnknownExperiment { direction: String, name: String },

    #[error(transparent)]
    Autograd(#[from] AutogradError),

    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub use_unet: bool,
    /// Max-unpooling in the decoder; transposed convolutions otherwise.
    pub use_unpool: bool,
    /// Predict a correction added to the input depth.
    pub residual: bool,
    pub use_mask_input: bool,
    /// Feed the hole-filled depth instead of the raw depth.
    pub use_interp_input: bool,
    pub early_heads: usize,
    pub rgb_head: bool,
    pub base_channels: usize,
    pub depth_levels: usize,
    /// Predictions are clamped to `[0, depth_max]` meters.
    pub depth_max: f64,
}

impl Default for ModelConfig {
    /// The U-connected baseline: direct prediction from raw depth.
    fn default() -> Self {
        Self {
            use_unet: true,
            use_unpool: false,
            residual: false,
            use_mask_input: false,
            use_interp_input: false,
            early_heads: 0,
            rgb_head: false,
            base_channels: 8,
            depth_levels: 3,
            depth_max: DEFAULT_DEPTH_MAX,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth_levels < 2 {
            return Err(ModelError::BadConfig(format!("depth_levels {} < 2", self.depth_levels)));
        }
        if self.early_heads >= self.depth_levels {
            return Err(ModelError::BadConfig(format!("early_heads {} must be below depth_levels {}", self.early_heads, self.depth_levels)));
        }
        if self.base_channels < 4 {
            return Err(ModelError::BadConfig(format!("base_channels {} < 4", self.base_channels)));
        }
        if !(self.depth_max > 0.0 && self.depth_max.is_finite()) {
            return Err(ModelError::BadConfig(format!("depth_max {}", self.depth_max)));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn input_channels(&self) -> usize {
        if self.use_mask_input {
            5
        } else {
            4
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth_levels
    }

    /// `(name, shape, fan_in)` of every parameter, in storage order.
    fn layout(&self) -> Vec<(String, [usize; 4], usize)> {
        let l = self.depth_levels;
        let mut v = Vec::new();
        let mut conv = |name: &str, o: usize, i: usize, k: usize, bias: bool| {
            v.push((format!("{name}.w"), [o, i, k, k], i * k * k));
            if bias {
                v.push((format!("{name}.b"), [1, o, 1, 1], 0));
            }
        };
        for k in 0..l {
            let input = if k == 0 { self.input_channels() } else { self.channels(k - 1) };
            conv(&format!("enc{k}"), self.channels(k), input, 3, true);
        }
        conv("mid", self.channels(l - 1), self.channels(l - 1), 3, true);
        for k in (0..l).rev() {
            let c = self.channels(k);
            if !self.use_unpool {
                // transposed conv weights are [in, out, k, k]; each output sees `c` inputs
                conv(&format!("dec{k}.up"), c, c, 2, true);
            }
            conv(&format!("dec{k}"), c, c, 3, true);
            if k > 0 {
                conv(&format!("dec{k}.reduce"), self.channels(k - 1), c, 1, true);
            }
        }
        conv("head", 1, self.channels(0), 1, false);
        for i in 0..self.early_heads {
            conv(&format!("early{i}"), 1, self.channels(i + 1), 1, true);
        }
        if self.rgb_head {
            conv("rgb", 3, self.channels(0), 1, true);
        }
        for e in v.iter_mut().filter(|e| e.0.ends_with(".up.w")) {
            e.2 = e.1[0];
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Heads of one forward pass. In residual mode `primary` and `early` are
/// corrections to the input depth, otherwise depths.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub primary: Var,
    pub early: Vec<Var>,
    pub rgb: Option<Var>,
}

/// A stacked batch as the network sees it.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub rgb: Tensor,
    /// Raw or hole-filled depth, per the config.
    pub depth: Tensor,
    pub mask: Option<Tensor>,
}

/// He-initialized model, reproducible from `seed`. Biases start at zero;
/// heads use fan-in variance without the relu gain.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape, fan_in) in cfg.layout() {
        let t = if fan_in == 0 {
            Tensor::zeros(shape)
        } else {
            let gain = if name.starts_with("head") || name.starts_with("early") || name.starts_with("rgb") { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            Tensor::new(shape, (0..shape.iter().product()).map(|_| normal.sample(&mut rng)).collect())?
        };
        names.push(name);
        params.push(t);
    }
    Ok(Model { cfg: cfg.clone(), names, params })
}

/// Depth the network consumes: hole-filled when configured, raw otherwise.
pub fn prepare_depth(cfg: &ModelConfig, raw: &DepthMap, mask: &ValidityMask) -> Result<DepthMap, ModelError> {
    if cfg.use_interp_input {
        Ok(interpolate_fill(raw, mask)?)
    } else {
        Ok(raw.masked(mask)?)
    }
}

impl ModelInputs {
    /// Stacks `(rgb, prepared depth, mask)` triples into one batch.
    pub fn stack(cfg: &ModelConfig, items: &[(&RgbImage, &DepthMap, &ValidityMask)]) -> Result<Self, ModelError> {
        let Some(first) = items.first() else {
            return Err(ModelError::ShapeMismatch("empty batch".into()));
        };
        let (w, h) = (first.1.width(), first.1.height());
        let m = cfg.size_multiple();
        if w % m != 0 || h % m != 0 {
            return Err(ModelError::ShapeMismatch(format!("{w}x{h} is not a multiple of {m}")));
        }
        let mut rgb = Vec::with_capacity(items.len() * 3 * w * h);
        let mut depth = Vec::with_capacity(items.len() * w * h);
        let mut mask = Vec::with_capacity(items.len() * w * h);
        for (img, d, msk) in items {
            if (img.width(), img.height(), d.width(), d.height(), msk.width(), msk.height()) != (w, h, w, h, w, h) {
                return Err(ModelError::ShapeMismatch(format!("batch item sizes differ from {w}x{h}")));
            }
            for ch in 0..3 {
                rgb.extend(img.data().iter().map(|p| p[ch]));
            }
            depth.extend_from_slice(d.data());
            mask.extend(msk.data().iter().map(|&v| if v { 1.0 } else { 0.0 }));
        }
        let n = items.len();
        Ok(Self {
            rgb: Tensor::new([n, 3, h, w], rgb)?,
            depth: Tensor::new([n, 1, h, w], depth)?,
            mask: cfg.use_mask_input.then(|| Tensor::new([n, 1, h, w], mask)).transpose()?,
        })
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    /// Records parameters as trainable leaves.
    pub fn register(&self, g: &mut Graph) -> Result<Vec<Var>, ModelError> {
        Ok(self.params.iter().map(|p| g.param(p.clone())).collect::<Result<_, _>>()?)
    }

    /// Records parameters as constants (inference).
    pub fn register_frozen(&self, g: &mut Graph) -> Result<Vec<Var>, ModelError> {
        Ok(self.params.iter().map(|p| g.input(p.clone())).collect::<Result<_, _>>()?)
    }

    /// Builds the forward pass on `g` using parameter handles `p` (from
    /// [`Model::register`] or a gradient checker) in storage order.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: &ModelInputs) -> Result<ModelOutput, ModelError> {
        let cfg = &self.cfg;
        if p.len() != self.params.len() {
            return Err(ModelError::ShapeMismatch(format!("{} parameter handles for {} parameters", p.len(), self.params.len())));
        }
        let [n, c, h, w] = x.rgb.shape();
        if c != 3 || x.depth.shape() != [n, 1, h, w] {
            return Err(ModelError::ShapeMismatch(format!("rgb {:?} with depth {:?}", x.rgb.shape(), x.depth.shape())));
        }
        let m = cfg.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(ModelError::ShapeMismatch(format!("{w}x{h} is not a multiple of {m}")));
        }
        let rgb = g.input(x.rgb.clone())?;
        let depth = g.input(x.depth.clone())?;
        let mut stacked = g.concat_channels(rgb, depth)?;
        if cfg.use_mask_input {
            let mask = x.mask.as_ref().ok_or(ModelError::MissingMask)?;
            if mask.shape() != [n, 1, h, w] {
                return Err(ModelError::ShapeMismatch(format!("mask {:?}", mask.shape())));
            }
            let mv = g.input(mask.clone())?;
            stacked = g.concat_channels(stacked, mv)?;
        }

        let mut it = p.iter().copied();
        let mut next = || it.next().expect("layout matches parameters");
        let l = cfg.depth_levels;
        let mut skips = Vec::with_capacity(l);
        let mut pools = Vec::with_capacity(l);
        let mut a = stacked;
        for _ in 0..l {
            let (wv, bv) = (next(), next());
            let y = g.conv2d(a, wv, Some(bv), 1, 1)?;
            let s = g.relu(y)?;
            let (pooled, idx) = g.max_pool2d(s)?;
            skips.push(s);
            pools.push(idx);
            a = pooled;
        }
        let (wv, bv) = (next(), next());
        let y = g.conv2d(a, wv, Some(bv), 1, 1)?;
        a = g.relu(y)?;

        let mut stage_out = vec![None; l];
        for k in (0..l).rev() {
            let up = if cfg.use_unpool {
                g.max_unpool2d(a, &pools[k])?
            } else {
                let (wv, bv) = (next(), next());
                g.conv_transpose2d(a, wv, Some(bv), 2)?
            };
            let (wv, bv) = (next(), next());
            let y = g.conv2d(up, wv, Some(bv), 1, 1)?;
            let mut f = g.relu(y)?;
            if cfg.use_unet {
                f = g.add(f, skips[k])?;
            }
            stage_out[k] = Some(f);
            a = f;
            if k > 0 {
                let (wv, bv) = (next(), next());
                let y = g.conv2d(f, wv, Some(bv), 1, 0)?;
                a = g.relu(y)?;
            }
        }
        let feats0 = stage_out[0].expect("stage 0 ran");
        let primary = g.conv2d(feats0, next(), None, 1, 0)?;
        let mut early = Vec::with_capacity(cfg.early_heads);
        for i in 0..cfg.early_heads {
            let (wv, bv) = (next(), next());
            early.push(g.conv2d(stage_out[i + 1].expect("stage ran"), wv, Some(bv), 1, 0)?);
        }
        let rgb_out = if cfg.rgb_head {
            let (wv, bv) = (next(), next());
            Some(g.conv2d(feats0, wv, Some(bv), 1, 0)?)
        } else {
            None
        };
        Ok(ModelOutput { primary, early, rgb: rgb_out })
    }

    /// `d = d~ + f` in residual mode, `d = f` otherwise, clamped to
    /// `[0, depth_max]`.
    pub fn predict_depth(&self, rgb: &RgbImage, raw: &DepthMap, mask: &ValidityMask) -> Result<DepthMap, ModelError> {
        let base = prepare_depth(&self.cfg, raw, mask)?;
        Ok(self.predict_prepared(&[(rgb, &base, mask)])?.remove(0))
    }

    /// Batched prediction from already prepared input depths.
    pub fn predict_prepared(&self, items: &[(&RgbImage, &DepthMap, &ValidityMask)]) -> Result<Vec<DepthMap>, ModelError> {
        let x = ModelInputs::stack(&self.cfg, items)?;
        let mut g = Graph::new();
        let p = self.register_frozen(&mut g)?;
        let out = self.forward(&mut g, &p, &x)?;
        let f = g.value(out.primary).data();
        let mut maps = Vec::with_capacity(items.len());
        for (i, (_, base, _)) in items.iter().enumerate() {
            let plane = &f[i * base.len()..(i + 1) * base.len()];
            let data = base
                .data()
                .iter()
                .zip(plane)
                .map(|(d, f)| if self.cfg.residual { d + f } else { *f })
                .map(|v| v.clamp(0.0, self.cfg.depth_max))
                .collect();
            maps.push(DepthMap::new(base.width(), base.height(), data)?);
        }
        Ok(maps)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let wf = WeightFile {
            tensors: self.names.iter().cloned().zip(self.params.iter().cloned()).collect(),
            config: serde_json::to_value(&self.cfg).map_err(|e| ModelError::BadConfig(e.to_string()))?,
        };
        Ok(autograd::save_weights(path, &wf)?)
    }

    /// Loads a weight file; the embedded config decides the architecture.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let wf = autograd::load_weights(path)?;
        let cfg: ModelConfig = serde_json::from_value(wf.config).map_err(|e| ModelError::BadConfig(e.to_string()))?;
        let mut m = build_model(&cfg, 0)?;
        if wf.tensors.len() != m.params.len() {
            return Err(ModelError::ShapeMismatch(format!("file has {} tensors, config needs {}", wf.tensors.len(), m.params.len())));
        }
        for ((name, t), (want, slot)) in wf.tensors.into_iter().zip(m.names.iter().zip(m.params.iter_mut())) {
            if &name != want || t.shape() != slot.shape() {
                return Err(ModelError::ShapeMismatch(format!("tensor {name} {:?} where {want} {:?} expected", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Incremental,
    Decremental,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Incremental => "incremental",
            Direction::Decremental => "decremental",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "incremental" => Ok(Direction::Incremental),
            "decremental" => Ok(Direction::Decremental),
            _ => Err(format!("direction must be incremental or decremental, got {s:?}")),
        }
    }
}

/// One row of an ablation: the architecture and whether the composite
/// criterion (gradient, smoothness, early feedback) is used instead of plain
/// L1 on the primary output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub name: String,
    pub model: ModelConfig,
    pub composite_loss: bool,
}

pub const INCREMENTAL: [&str; 7] = ["+Unet", "criterion", "dol", "mask", "unpool", "delta", "delta-interp-mask"];
pub const DECREMENTAL: [&str; 8] = ["full", "criterion", "dol", "mask", "unpool", "delta", "interp", "delta-interp"];

/// The model with every feature on.
pub fn full_model() -> ModelConfig {
    ModelConfig {
        use_unpool: true,
        residual: true,
        use_mask_input: true,
        use_interp_input: true,
        early_heads: 2,
        ..ModelConfig::default()
    }
}

/// Incremental rows add one feature to the U-connected baseline; decremental
/// rows remove one from the full model.
pub fn ablation_config(direction: Direction, name: &str) -> Result<Ablation, ModelError> {
    let unknown = || ModelError::UnknownExperiment { direction: direction.to_string(), name: name.to_string() };
    let (model, composite_loss) = match direction {
        Direction::Incremental => {
            let base = ModelConfig::default();
            match name {
                "+Unet" => (base, false),
                "criterion" => (base, true),
                "dol" => (ModelConfig { early_heads: 2, ..base }, false),
                "mask" => (ModelConfig { use_mask_input: true, ..base }, false),
                "unpool" => (ModelConfig { use_unpool: true, ..base }, false),
                "delta" => (ModelConfig { residual: true, use_interp_input: true, ..base }, false),
                "delta-interp-mask" => (ModelConfig { residual: true, use_interp_input: true, use_mask_input: true, ..base }, false),
                _ => return Err(unknown()),
            }
        }
        Direction::Decremental => {
            let full = full_model();
            match name {
                "full" => (full, true),
                "criterion" => (full, false),
                "dol" => (ModelConfig { early_heads: 0, ..full }, true),
                "mask" => (ModelConfig { use_mask_input: false, ..full }, true),
                "unpool" => (ModelConfig { use_unpool: false, ..full }, true),
                "delta" => (ModelConfig { residual: false, ..full }, true),
                "interp" => (ModelConfig { use_interp_input: false, ..full }, true),
                "delta-interp" => (ModelConfig { residual: false, use_interp_input: false, ..full }, true),
                _ => return Err(unknown()),
            }
        }
    };
    Ok(Ablation { name: name.to_string(), model, composite_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn inputs(cfg: &ModelConfig, n: usize, h: usize, w: usize, seed: u64) -> ModelInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |c| Tensor::new([n, c, h, w], (0..n * c * h * w).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
        let (rgb, depth, mask) = (t(3), t(1), t(1));
        ModelInputs { rgb, depth, mask: cfg.use_mask_input.then_some(mask) }
    }

    fn conv(o: usize, i: usize, k: usize, bias: bool) -> usize {
        o * i * k * k + if bias { o } else { 0 }
    }

    #[test]
    fn parameter_count_closed_form() {
        let cfg = ModelConfig { depth_levels: 3, base_channels: 8, ..Default::default() };
        let m = build_model(&cfg, 0).unwrap();
        let enc = conv(8, 4, 3, true) + conv(16, 8, 3, true) + conv(32, 16, 3, true);
        let mid = conv(32, 32, 3, true);
        let up = conv(32, 32, 2, true) + conv(16, 16, 2, true) + conv(8, 8, 2, true);
        let dec = conv(32, 32, 3, true) + conv(16, 16, 3, true) + conv(8, 8, 3, true);
        let reduce = conv(16, 32, 1, true) + conv(8, 16, 1, true);
        let head = 8;
        assert_eq!(m.param_count(), enc + mid + up + dec + reduce + head);
        assert_eq!(m.param_count(), 33_608);

        let full = build_model(&ModelConfig { rgb_head: true, ..full_model() }, 0).unwrap();
        let enc = conv(8, 5, 3, true) + conv(16, 8, 3, true) + conv(32, 16, 3, true);
        let early = conv(1, 16, 1, true) + conv(1, 32, 1, true);
        assert_eq!(full.param_count(), enc + mid + dec + reduce + head + early + conv(3, 8, 1, true));
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = full_model();
        assert_eq!(build_model(&cfg, 4).unwrap(), build_model(&cfg, 4).unwrap());
        assert_ne!(build_model(&cfg, 4).unwrap(), build_model(&cfg, 5).unwrap());
    }

    #[test]
    fn config_preconditions() {
        let bad = [
            ModelConfig { early_heads: 3, ..Default::default() },
            ModelConfig { depth_levels: 1, early_heads: 0, ..Default::default() },
            ModelConfig { base_channels: 2, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(build_model(&cfg, 0), Err(ModelError::BadConfig(_))), "{cfg:?}");
        }
    }

    #[test]
    fn output_shapes() {
        let cfg = ModelConfig::default();
        let m = build_model(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let p = m.register(&mut g).unwrap();
        let out = m.forward(&mut g, &p, &inputs(&cfg, 1, 32, 32, 0)).unwrap();
        assert_eq!(g.value(out.primary).shape(), [1, 1, 32, 32]);
        assert!(out.early.is_empty() && out.rgb.is_none());

        let cfg = ModelConfig { early_heads: 2, rgb_head: true, ..full_model() };
        let m = build_model(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let p = m.register(&mut g).unwrap();
        let out = m.forward(&mut g, &p, &inputs(&cfg, 2, 32, 32, 0)).unwrap();
        assert_eq!(g.value(out.early[0]).shape(), [2, 1, 16, 16]);
        assert_eq!(g.value(out.early[1]).shape(), [2, 1, 8, 8]);
        assert_eq!(g.value(out.rgb.unwrap()).shape(), [2, 3, 32, 32]);
    }

    #[test]
    fn shape_properties_over_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..12 {
            let levels = rng.gen_range(2..4);
            let cfg = ModelConfig {
                use_unet: rng.gen(),
                use_unpool: rng.gen(),
                residual: rng.gen(),
                use_mask_input: rng.gen(),
                use_interp_input: rng.gen(),
                early_heads: rng.gen_range(0..levels),
                rgb_head: rng.gen(),
                base_channels: 4,
                depth_levels: levels,
                depth_max: 2.0,
            };
            let m = build_model(&cfg, 2).unwrap();
            let (h, w) = (cfg.size_multiple() * rng.gen_range(1..4), cfg.size_multiple() * rng.gen_range(1..4));
            let mut g = Graph::new();
            let p = m.register(&mut g).unwrap();
            let out = m.forward(&mut g, &p, &inputs(&cfg, 1, h, w, 3)).unwrap();
            assert_eq!(g.value(out.primary).shape(), [1, 1, h, w]);
            for (i, e) in out.early.iter().enumerate() {
                assert_eq!(g.value(*e).shape(), [1, 1, h >> (i + 1), w >> (i + 1)]);
            }
            assert_eq!(out.rgb.map(|r| g.value(r).shape()), cfg.rgb_head.then_some([1, 3, h, w]));
        }
    }

    #[test]
    fn missing_mask_and_bad_sizes() {
        let cfg = full_model();
        let m = build_model(&cfg, 1).unwrap();
        let mut x = inputs(&cfg, 1, 16, 16, 0);
        x.mask = None;
        let mut g = Graph::new();
        let p = m.register(&mut g).unwrap();
        assert!(matches!(m.forward(&mut g, &p, &x), Err(ModelError::MissingMask)));
        let x = inputs(&cfg, 1, 12, 16, 0);
        assert!(matches!(m.forward(&mut g, &p, &x), Err(ModelError::ShapeMismatch(_))));
    }

    fn zero_all(m: &mut Model) {
        for t in m.params_mut() {
            t.data_mut().fill(0.0);
        }
    }

    fn sample() -> (RgbImage, DepthMap, ValidityMask) {
        let rgb = RgbImage::filled(16, 16, [0.4, 0.5, 0.6]);
        let d = DepthMap::from_fn(16, 16, |r, c| if (r + 2 * c) % 7 == 0 { 0.0 } else { 0.8 + 0.01 * r as f64 }).unwrap();
        let mask = d.validity();
        (rgb, d, mask)
    }

    #[test]
    fn zero_weights() {
        let (rgb, d, mask) = sample();
        let mut direct = build_model(&ModelConfig::default(), 3).unwrap();
        zero_all(&mut direct);
        assert!(direct.predict_depth(&rgb, &d, &mask).unwrap().data().iter().all(|v| *v == 0.0));

        let cfg = full_model();
        let mut residual = build_model(&cfg, 3).unwrap();
        zero_all(&mut residual);
        let filled = interpolate_fill(&d, &mask).unwrap();
        assert_eq!(residual.predict_depth(&rgb, &d, &mask).unwrap(), filled);
    }

    #[test]
    fn residual_identity_with_only_the_head_zeroed() {
        let (rgb, d, mask) = sample();
        let mut m = build_model(&full_model(), 7).unwrap();
        m.param_mut("head.w").unwrap().data_mut().fill(0.0);
        assert_eq!(m.predict_depth(&rgb, &d, &mask).unwrap(), interpolate_fill(&d, &mask).unwrap());
    }

    #[test]
    fn prediction_is_clamped() {
        let (rgb, d, mask) = sample();
        let mut m = build_model(&ModelConfig::default(), 3).unwrap();
        // a strongly negative primary output
        let cfg = m.config().clone();
        zero_all(&mut m);
        m.param_mut("head.w").unwrap().data_mut().fill(-1.0);
        for k in 0..cfg.depth_levels {
            let b = m.param_mut(&format!("dec{k}.b")).unwrap();
            b.data_mut().fill(1.0);
        }
        let out = m.predict_depth(&rgb, &d, &mask).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unet_carries_encoder_features_past_a_dead_decoder() {
        let (rgb, d, mask) = sample();
        for (unet, expect_nonzero) in [(true, true), (false, false)] {
            let cfg = ModelConfig { use_unet: unet, ..ModelConfig::default() };
            let mut m = build_model(&cfg, 11).unwrap();
            for k in 0..cfg.depth_levels {
                m.param_mut(&format!("dec{k}.w")).unwrap().data_mut().fill(0.0);
            }
            // a positive head so relu'd features cannot cancel
            m.param_mut("head.w").unwrap().data_mut().fill(1.0);
            let out = m.predict_depth(&rgb, &d, &mask).unwrap();
            assert_eq!(out.data().iter().any(|v| *v != 0.0), expect_nonzero, "unet {unet}");
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let m = build_model(&full_model(), 5).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in back.params().iter().zip(m.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn ablation_rows() {
        for name in INCREMENTAL {
            ablation_config(Direction::Incremental, name).unwrap();
        }
        for name in DECREMENTAL {
            ablation_config(Direction::Decremental, name).unwrap();
        }
        let mask = ablation_config(Direction::Incremental, "mask").unwrap();
        assert_eq!(mask.model, ModelConfig { use_mask_input: true, ..Default::default() });
        let unpool = ablation_config(Direction::Decremental, "unpool").unwrap();
        assert_eq!(unpool.model, ModelConfig { use_unpool: false, ..full_model() });
        let dim = ablation_config(Direction::Incremental, "delta-interp-mask").unwrap();
        assert!(dim.model.residual && dim.model.use_interp_input && dim.model.use_mask_input && !dim.composite_loss);
        assert!(!ablation_config(Direction::Decremental, "criterion").unwrap().composite_loss);
        assert!(matches!(ablation_config(Direction::Incremental, "interp"), Err(ModelError::UnknownExperiment { .. })));
    }
}
