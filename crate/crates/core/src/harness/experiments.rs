use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_model, train, ExperimentConfig, HarnessError, LrDecay, Sample, TrainingHistory};
use crate::losses::{DistanceKind, LossWeights, MetricsAccumulator, MetricsReport};
use crate::model::{ablation_config, Direction, Model, DECREMENTAL, INCREMENTAL};

/// Value lists to combine; an empty list keeps the base config's value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchGrid {
    pub lr: Vec<f64>,
    pub lr_decay: Vec<LrDecay>,
    pub weight_decay: Vec<f64>,
    pub loss_weights: Vec<LossWeights>,
    pub kind: Vec<DistanceKind>,
}

impl SearchGrid {
    /// Cartesian product applied to `base`, in row-major order of the fields.
    pub fn combinations(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        fn or_base<T: Clone>(v: &[T], b: T) -> Vec<T> {
            if v.is_empty() {
                vec![b]
            } else {
                v.to_vec()
            }
        }
        let o = &base.optimizer;
        let mut out = Vec::new();
        for lr in or_base(&self.lr, o.lr) {
            for decay in or_base(&self.lr_decay, o.lr_decay) {
                for wd in or_base(&self.weight_decay, o.weight_decay) {
                    for weights in or_base(&self.loss_weights, base.loss.weights) {
                        for kind in or_base(&self.kind, base.loss.kind) {
                            let mut c = base.clone();
                            c.optimizer.lr = lr;
                            c.optimizer.lr_decay = decay;
                            c.optimizer.weight_decay = wd;
                            c.loss.weights = weights;
                            c.loss.kind = kind;
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Search trials train for a quarter of the full epoch budget (at least 1).
pub fn search_epochs(full: usize) -> usize {
    full.div_ceil(4).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub trial: usize,
    pub config: ExperimentConfig,
    /// Final validation metrics, `None` when the trial failed.
    pub val: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Winning combination with the full epoch budget restored.
    pub best: ExperimentConfig,
    pub budget_epochs: usize,
    pub budget_rule: String,
    /// Successful trials by ascending validation MAE, then failures by trial.
    pub leaderboard: Vec<LeaderboardEntry>,
}

/// Trains every grid combination with the shared seed and a reduced epoch
/// budget, ranking by final validation MAE. Diverging trials are recorded
/// as failed; it is an error only if every trial fails.
pub fn hyperparam_search(
    base: &ExperimentConfig,
    grid: &SearchGrid,
    train_set: &[Sample],
    val: &[Sample],
) -> Result<SearchResult, HarnessError> {
    let budget = search_epochs(base.epochs);
    let trials: Vec<ExperimentConfig> = grid
        .combinations(base)
        .into_iter()
        .map(|mut c| {
            c.epochs = budget;
            c
        })
        .collect();
    let results: Vec<Result<MetricsReport, HarnessError>> = trials
        .par_iter()
        .map(|c| train(c, train_set, val).map(|o| o.history.last().val))
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    let mut first_err = None;
    for (i, (cfg, r)) in trials.into_iter().zip(results).enumerate() {
        match r {
            Ok(m) => ok.push(LeaderboardEntry { trial: i, config: cfg, val: Some(m), error: None }),
            Err(e) => {
                failed.push(LeaderboardEntry { trial: i, config: cfg, val: None, error: Some(e.to_string()) });
                first_err.get_or_insert(e);
            }
        }
    }
    ok.sort_by(|a, b| {
        let (ma, mb) = (a.val.map_or(f64::INFINITY, |m| m.mae), b.val.map_or(f64::INFINITY, |m| m.mae));
        ma.total_cmp(&mb).then(a.trial.cmp(&b.trial))
    });
    let Some(winner) = ok.first() else {
        return Err(first_err.expect("grid has at least one trial"));
    };
    let mut best = winner.config.clone();
    best.epochs = base.epochs;
    ok.extend(failed);
    Ok(SearchResult { best, budget_epochs: budget, budget_rule: "ceil(25% of epochs), at least 1".into(), leaderboard: ok })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config: ExperimentConfig,
    pub val: MetricsReport,
    pub history: TrainingHistory,
}

/// The experiment configs of one ablation direction: each row's model
/// switches, everything else (sizes, optimizer, seed, data) from `base`.
/// Rows without the composite criterion zero the gradient and smoothness
/// weights.
pub fn ablation_configs(direction: Direction, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>, HarnessError> {
    let names: &[&str] = match direction {
        Direction::Incremental => &INCREMENTAL,
        Direction::Decremental => &DECREMENTAL,
    };
    names
        .iter()
        .map(|name| {
            let a = ablation_config(direction, name)?;
            let mut c = base.clone();
            c.name = format!("{}-{}", direction, a.name);
            c.model = crate::model::ModelConfig {
                base_channels: base.model.base_channels,
                depth_levels: base.model.depth_levels,
                depth_max: base.model.depth_max,
                ..a.model
            };
            if !a.composite_loss {
                c.loss.weights = LossWeights { w_g: 0.0, w_s: 0.0, ..base.loss.weights };
            }
            Ok((a.name, c))
        })
        .collect()
}

/// One training run per ablation row with identical hyperparameters and
/// seed. Rows run as independent parallel jobs; output order follows the
/// ablation table.
pub fn run_ablation(
    direction: Direction,
    base: &ExperimentConfig,
    train_set: &[Sample],
    val: &[Sample],
) -> Result<Vec<AblationRow>, HarnessError> {
    let configs = ablation_configs(direction, base)?;
    configs
        .into_par_iter()
        .map(|(name, config)| {
            let out = train(&config, train_set, val)?;
            Ok(AblationRow { name, val: out.history.last().val, history: out.history, config })
        })
        .collect()
}

/// Rows of the validation comparison: the raw input against ground truth
/// ("Input"), then each model.
pub fn compare(models: &[(String, &Model)], val: &[Sample], batch: usize) -> Result<Vec<(String, MetricsReport)>, HarnessError> {
    if val.is_empty() {
        return Err(HarnessError::EmptyDataset("validation split".into()));
    }
    let mut acc = MetricsAccumulator::default();
    for s in val {
        acc.add(&s.gt, &s.raw)?;
    }
    let mut rows = vec![("Input".to_string(), acc.report()?)];
    for (name, m) in models {
        rows.push((name.clone(), evaluate_model(m, val, batch)?));
    }
    Ok(rows)
}
