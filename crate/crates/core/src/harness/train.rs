use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{HarnessError, MixOptions, Sample};
use crate::autograd::{adam_step, lr_at_epoch, sgd_step, AdamParams, AdamState, AutogradError, Graph, Tensor};
use crate::grid::DepthMap;
use crate::losses::{total_loss, DistanceKind, LossError, LossTarget, LossWeights, MetricsAccumulator, MetricsReport};
use crate::model::{build_model, prepare_depth, Model, ModelConfig, ModelError, ModelInputs};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub kind: DistanceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// `lr * factor ^ floor(epoch / every_n_epochs)`, epochs counted from 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrDecay {
    pub factor: f64,
    pub every_n_epochs: usize,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self { factor: 0.5, every_n_epochs: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub weight_decay: f64,
    pub adam: AdamParams,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 2e-3,
            lr_decay: LrDecay::default(),
            weight_decay: 0.0,
            adam: AdamParams::default(),
        }
    }
}

/// Dataset directories a run reads. The secondary set is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub primary: Option<PathBuf>,
    pub secondary: Option<PathBuf>,
}

/// Everything one training run depends on. Serialized as the run's
/// `config.json`; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub mix: MixOptions,
    /// Depth factor applied to the secondary dataset on load.
    pub secondary_scale: f64,
    pub seed: u64,
    pub data: DataPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            epochs: 30,
            mix: MixOptions::default(),
            secondary_scale: 0.3,
            seed: 0,
            data: DataPaths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::BadConfig(m));
        let o = &self.optimizer;
        // lr = 0 is allowed: it is the "no update" reference run
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", o.lr));
        }
        if !(o.lr_decay.factor > 0.0 && o.lr_decay.factor.is_finite()) {
            return bad(format!("lr decay factor {}", o.lr_decay.factor));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return bad(format!("weight decay {}", o.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        let m = &self.mix;
        for (what, v) in [("mix ratio", m.ratio), ("val weight", m.val_weight), ("holdout", m.holdout)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{what} {v} outside [0, 1]"));
            }
        }
        if !(self.secondary_scale > 0.0 && self.secondary_scale.is_finite()) {
            return Err(HarnessError::BadFactor(self.secondary_scale));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("run name {:?} must be a plain directory name", self.name));
        }
        self.loss.weights.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    pub train: MetricsReport,
    pub val: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_s: f64,
}

impl TrainingHistory {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainingHistory,
    pub model: Model,
}

/// A sample with its network-ready input depth.
struct Prepared<'a> {
    s: &'a Sample,
    base: DepthMap,
}

fn prepare<'a>(cfg: &ModelConfig, samples: &'a [Sample]) -> Result<Vec<Prepared<'a>>, HarnessError> {
    samples
        .par_iter()
        .map(|s| Ok(Prepared { s, base: prepare_depth(cfg, &s.raw, &s.mask)? }))
        .collect()
}

fn is_non_finite(e: &HarnessError) -> bool {
    matches!(
        e,
        HarnessError::Model(ModelError::Autograd(AutogradError::NonFinite(_)))
            | HarnessError::Loss(LossError::Autograd(AutogradError::NonFinite(_)))
    )
}

fn metrics(model: &Model, items: &[Prepared], batch: usize) -> Result<MetricsReport, HarnessError> {
    // predictions in parallel, accumulation in order, so sums are reproducible
    let preds: Vec<Vec<DepthMap>> = items
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let views: Vec<_> = chunk.iter().map(|p| (&p.s.rgb, &p.base, &p.s.mask)).collect();
            model.predict_prepared(&views)
        })
        .collect::<Result<_, _>>()?;
    let mut acc = MetricsAccumulator::default();
    for (p, d) in items.iter().zip(preds.iter().flatten()) {
        acc.add(&p.s.gt, d)?;
    }
    Ok(acc.report()?)
}

/// Metrics of `model` over `samples`, which must have some valid ground truth.
pub fn evaluate_model(model: &Model, samples: &[Sample], batch: usize) -> Result<MetricsReport, HarnessError> {
    let prepared = prepare(model.config(), samples)?;
    metrics(model, &prepared, batch)
}

/// One optimizer step's loss and gradients; `None` when the batch has no
/// valid ground truth.
fn batch_gradients(model: &Model, items: &[&Prepared], w: &LossConfig) -> Result<Option<(f64, Vec<Tensor>)>, HarnessError> {
    let cfg = model.config();
    let views: Vec<_> = items.iter().map(|p| (&p.s.rgb, &p.base, &p.s.mask)).collect();
    let x = ModelInputs::stack(cfg, &views)?;
    let gts: Vec<&DepthMap> = items.iter().map(|p| &p.s.gt).collect();
    let bases: Vec<&DepthMap> = items.iter().map(|p| &p.base).collect();
    let target = LossTarget::new(&gts, x.rgb.clone(), cfg.residual.then_some(&bases[..]), cfg.early_heads)?;
    let mut g = Graph::new();
    let p = model.register(&mut g)?;
    let out = model.forward(&mut g, &p, &x)?;
    let terms = match total_loss(&mut g, &out, &target, &w.weights, w.kind) {
        Err(LossError::NoValidPixels) => return Ok(None),
        r => r?,
    };
    let loss = g.value(terms.total).item();
    let grads = g.backward(terms.total).map_err(|e| HarnessError::Loss(e.into()))?;
    let grads = p.iter().zip(model.params()).map(|(v, t)| grads.get_or_zeros(*v, t.shape())).collect();
    Ok(Some((loss, grads)))
}

/// Trains a fresh model (initialized from `cfg.seed`) and evaluates both
/// splits after every epoch. Batch order is reshuffled each epoch from the
/// seed; the result does not depend on the thread count.
pub fn train(cfg: &ExperimentConfig, train: &[Sample], val: &[Sample]) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(HarnessError::EmptyDataset("training split".into()));
    }
    if val.is_empty() {
        return Err(HarnessError::EmptyDataset("validation split".into()));
    }
    let start = Instant::now();
    let mut model = build_model(&cfg.model, cfg.seed)?;
    let tr = prepare(&cfg.model, train)?;
    let va = prepare(&cfg.model, val)?;
    let mut adam = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..tr.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let o = &cfg.optimizer;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let lr = lr_at_epoch(o.lr, o.lr_decay.factor, o.lr_decay.every_n_epochs, e);
        order.shuffle(&mut rng);
        let (mut steps, mut loss_sum) = (0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&Prepared> = idx.iter().map(|&i| &tr[i]).collect();
            let step = batch_gradients(&model, &items, &cfg.loss).map_err(|err| {
                if is_non_finite(&err) {
                    HarnessError::NonFiniteLoss { epoch: e + 1, batch: b }
                } else {
                    err
                }
            })?;
            let Some((loss, grads)) = step else { continue };
            if !loss.is_finite() {
                return Err(HarnessError::NonFiniteLoss { epoch: e + 1, batch: b });
            }
            let params = model.params_mut();
            let res = match o.kind {
                OptimizerKind::Sgd => sgd_step(params, &grads, lr, o.weight_decay),
                OptimizerKind::Adam => adam_step(&mut adam, params, &grads, lr, o.weight_decay, o.adam),
            };
            res.map_err(|err| HarnessError::Loss(err.into()))?;
            if !model.params().iter().all(Tensor::is_finite) {
                return Err(HarnessError::NonFiniteLoss { epoch: e + 1, batch: b });
            }
            steps += 1;
            loss_sum += loss;
        }
        let eval = |items: &[Prepared]| {
            metrics(&model, items, cfg.batch_size).map_err(|err| match err {
                err if is_non_finite(&err) => HarnessError::NonFiniteOutput(e + 1),
                err => err,
            })
        };
        let record = EpochRecord {
            epoch: e + 1,
            lr,
            steps,
            train_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            train: eval(&tr)?,
            val: eval(&va)?,
        };
        epochs.push(record);
    }
    let history = TrainingHistory { epochs, wall_clock_s: start.elapsed().as_secs_f64() };
    Ok(TrainOutcome { history, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{RgbImage, ValidityMask};
    use crate::synth::Domain;

    /// Slanted planes with a bump and a hole pattern, 16x16.
    fn toy(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|k| {
                let (w, h) = (16, 16);
                let tilt = 0.01 * (k % 5) as f64;
                let gt = DepthMap::from_fn(w, h, |r, c| 0.8 + tilt * c as f64 + 0.002 * r as f64).unwrap();
                let mask = ValidityMask::new(w, h, (0..w * h).map(|i| (i * 7 + k) % 5 != 0).collect()).unwrap();
                let raw = gt.masked(&mask).unwrap();
                let rgb = RgbImage::new(w, h, gt.data().iter().map(|d| [d / 2.0, 0.3, 0.5]).collect()).unwrap();
                Sample { id: format!("t{k}"), scene_id: k, domain: Domain::Primary, rgb, raw, mask, gt }
            })
            .collect()
    }

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig { base_channels: 4, depth_levels: 2, ..ModelConfig::default() },
            batch_size: 2,
            epochs: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let data = toy(4);
        let mut cfg = small_cfg();
        cfg.optimizer.lr = 0.0;
        let out = train(&cfg, &data[..3], &data[3..]).unwrap();
        assert_eq!(out.model.params(), build_model(&cfg.model, cfg.seed).unwrap().params());
        let mut sgd = cfg.clone();
        sgd.optimizer.kind = OptimizerKind::Sgd;
        let out = train(&sgd, &data[..3], &data[3..]).unwrap();
        assert_eq!(out.model.params(), build_model(&cfg.model, cfg.seed).unwrap().params());
    }

    #[test]
    fn step_count_batch_one() {
        let data = toy(5);
        let cfg = ExperimentConfig { batch_size: 1, epochs: 1, ..small_cfg() };
        let out = train(&cfg, &data[..4], &data[4..]).unwrap();
        assert_eq!(out.history.epochs.len(), 1);
        assert_eq!(out.history.epochs[0].steps, 4);
        let cfg = ExperimentConfig { batch_size: 3, epochs: 3, ..small_cfg() };
        let out = train(&cfg, &data[..4], &data[4..]).unwrap();
        assert!(out.history.epochs.iter().all(|e| e.steps == 2));
        let idx: Vec<usize> = out.history.epochs.iter().map(|e| e.epoch).collect();
        assert_eq!(idx, vec![1, 2, 3]);
    }

    #[test]
    fn deterministic_bits() {
        let data = toy(6);
        let cfg = small_cfg();
        let a = train(&cfg, &data[..4], &data[4..]).unwrap();
        let b = train(&cfg, &data[..4], &data[4..]).unwrap();
        assert_eq!(a.history.epochs, b.history.epochs);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn lr_schedule_logged() {
        let data = toy(3);
        let mut cfg = ExperimentConfig { epochs: 7, batch_size: 4, ..small_cfg() };
        cfg.optimizer.lr_decay = LrDecay { factor: 0.1, every_n_epochs: 3 };
        let out = train(&cfg, &data[..2], &data[2..]).unwrap();
        for r in &out.history.epochs {
            let want = cfg.optimizer.lr * 0.1f64.powi(((r.epoch - 1) / 3) as i32);
            assert_eq!(r.lr, want);
        }
    }

    #[test]
    fn huge_lr_aborts_with_batch() {
        let data = toy(4);
        let mut cfg = small_cfg();
        cfg.optimizer.kind = OptimizerKind::Sgd;
        cfg.optimizer.lr = 1e200;
        match train(&cfg, &data[..3], &data[3..]) {
            Err(HarnessError::NonFiniteLoss { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn config_checks() {
        let data = toy(2);
        for f in [
            |c: &mut ExperimentConfig| c.epochs = 0,
            |c: &mut ExperimentConfig| c.optimizer.lr = -1.0,
            |c: &mut ExperimentConfig| c.mix.ratio = 2.0,
            |c: &mut ExperimentConfig| c.batch_size = 0,
        ] {
            let mut cfg = small_cfg();
            f(&mut cfg);
            assert!(matches!(train(&cfg, &data[..1], &data[1..]), Err(HarnessError::BadConfig(_))));
        }
        assert!(matches!(train(&small_cfg(), &[], &data), Err(HarnessError::EmptyDataset(_))));
    }

    #[test]
    fn config_json_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"epochs": 3, "optimizer": {"lr": 0.01}}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.optimizer.lr, 0.01);
        assert_eq!(cfg.optimizer.kind, OptimizerKind::Adam);
        assert_eq!(cfg.batch_size, 8);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
