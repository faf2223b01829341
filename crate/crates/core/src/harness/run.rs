use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::{
    compare, io_err, mix_datasets, train, AblationRow, DatasetHandle, EpochRecord, ExperimentConfig, HarnessError,
    SearchResult, Sources, TrainingHistory,
};
use crate::losses::{MetricsReport, METRICS_CSV_HEADER};
use crate::model::{Direction, Model};
use crate::plot::{bar_chart, line_chart};

pub const HISTORY_CSV_HEADER: &str =
    "epoch,lr,steps,train_loss,train_rmse_m,train_mae_m,train_rel,train_n_valid,val_rmse_m,val_mae_m,val_rel,val_n_valid";

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| io_err(path, e))?;
    write(path, &(text + "\n"))
}

fn history_row(out: &mut String, r: &EpochRecord) {
    let _ = writeln!(
        out,
        "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6},{}",
        r.epoch,
        r.lr,
        r.steps,
        r.train_loss,
        r.train.rmse,
        r.train.mae,
        r.train.rel,
        r.train.n_valid,
        r.val.rmse,
        r.val.mae,
        r.val.rel,
        r.val.n_valid
    );
}

/// Per-epoch metrics only; wall-clock time goes to `timing.json` so that
/// reruns produce identical files.
pub fn write_history_csv(path: &Path, h: &TrainingHistory) -> Result<(), HarnessError> {
    let mut out = String::from(HISTORY_CSV_HEADER);
    out.push('\n');
    for r in &h.epochs {
        history_row(&mut out, r);
    }
    write(path, &out)
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_CSV_HEADER) {
        return Err(io_err(path, "not a history.csv (header mismatch)"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = |what: &str| io_err(path, format!("line {}: bad {what}", i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 12 {
                return Err(bad("field count"));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(HISTORY_CSV_HEADER.split(',').nth(k).unwrap_or("")));
            let int = |k: usize| f[k].parse::<usize>().map_err(|_| bad(HISTORY_CSV_HEADER.split(',').nth(k).unwrap_or("")));
            Ok(EpochRecord {
                epoch: int(0)?,
                lr: num(1)?,
                steps: int(2)?,
                train_loss: num(3)?,
                train: MetricsReport { rmse: num(4)?, mae: num(5)?, rel: num(6)?, n_valid: int(7)? },
                val: MetricsReport { rmse: num(8)?, mae: num(9)?, rel: num(10)?, n_valid: int(11)? },
            })
        })
        .collect()
}

/// Several runs' histories in one CSV, prefixed by the run name.
pub fn write_combined_history(path: &Path, runs: &[(String, Vec<EpochRecord>)]) -> Result<(), HarnessError> {
    let mut out = format!("run,{HISTORY_CSV_HEADER}\n");
    for (name, epochs) in runs {
        for r in epochs {
            out.push_str(name);
            out.push(',');
            history_row(&mut out, r);
        }
    }
    write(path, &out)
}

/// Training MAE and validation MAE per epoch, one chart each, one line per
/// run. Returns the two file paths.
pub fn write_learning_curves(dir: &Path, runs: &[(String, Vec<EpochRecord>)]) -> Result<[PathBuf; 2], HarnessError> {
    let series = |val: bool| -> Vec<(String, Vec<(f64, f64)>)> {
        runs.iter()
            .map(|(n, e)| (n.clone(), e.iter().map(|r| (r.epoch as f64, if val { r.val.mae } else { r.train.mae })).collect()))
            .collect()
    };
    let train_path = dir.join("train_mae.svg");
    let val_path = dir.join("val_mae.svg");
    write(&train_path, &line_chart("Training MAE", "epoch", "MAE (m)", &series(false)))?;
    write(&val_path, &line_chart("Validation MAE", "epoch", "MAE (m)", &series(true)))?;
    Ok([train_path, val_path])
}

/// Metrics table with the shared header; `split` fills the split column.
pub fn write_comparison(path: &Path, rows: &[(String, MetricsReport)], split: &str) -> Result<(), HarnessError> {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for (name, m) in rows {
        out.push_str(&m.csv_row(name, split));
        out.push('\n');
    }
    write(path, &out)
}

/// The hyperparameters every ablation row shares, as one JSON line.
fn shared_hyperparameters(base: &ExperimentConfig) -> String {
    json!({
        "optimizer": base.optimizer,
        "loss_weights": base.loss.weights,
        "distance": base.loss.kind,
        "batch_size": base.batch_size,
        "epochs": base.epochs,
        "seed": base.seed,
        "base_channels": base.model.base_channels,
        "depth_levels": base.model.depth_levels,
    })
    .to_string()
}

/// `ablation_<direction>.csv` (a `#` line with the shared hyperparameters,
/// then the metrics table of final validation errors) and a bar chart of
/// validation MAE.
pub fn write_ablation(dir: &Path, direction: Direction, base: &ExperimentConfig, rows: &[AblationRow]) -> Result<[PathBuf; 2], HarnessError> {
    let csv = dir.join(format!("ablation_{direction}.csv"));
    let svg = dir.join(format!("ablation_{direction}.svg"));
    let mut out = format!("# hyperparameters: {}\n{METRICS_CSV_HEADER}\n", shared_hyperparameters(base));
    for r in rows {
        out.push_str(&r.val.csv_row(&r.name, "val"));
        out.push('\n');
    }
    write(&csv, &out)?;
    let bars: Vec<(String, f64)> = rows.iter().map(|r| (r.name.clone(), r.val.mae)).collect();
    write(&svg, &bar_chart(&format!("Ablation ({direction}): final validation MAE"), "MAE (m)", &bars))?;
    Ok([csv, svg])
}

/// `leaderboard.csv` plus the full result as `leaderboard.json`.
pub fn write_leaderboard(dir: &Path, r: &SearchResult) -> Result<(), HarnessError> {
    let mut out = format!("# budget_epochs: {} ({})\n", r.budget_epochs, r.budget_rule);
    out.push_str("rank,trial,lr,decay_factor,decay_every_n_epochs,weight_decay,distance,val_mae_m,status\n");
    for (rank, e) in r.leaderboard.iter().enumerate() {
        let o = &e.config.optimizer;
        let kind = serde_json::to_value(e.config.loss.kind).map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            rank + 1,
            e.trial,
            o.lr,
            o.lr_decay.factor,
            o.lr_decay.every_n_epochs,
            o.weight_decay,
            kind.replace(',', ";").replace('"', ""),
            e.val.map_or(String::new(), |m| format!("{:.6}", m.mae)),
            e.error.as_deref().map_or("ok".to_string(), |m| format!("failed: {}", m.replace(',', ";")))
        );
    }
    write(&dir.join("leaderboard.csv"), &out)?;
    write_json(&dir.join("leaderboard.json"), r)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub history: TrainingHistory,
    /// Validation comparison: the Input row, then the trained model.
    pub report: Vec<(String, MetricsReport)>,
    pub model: Model,
}

/// Opens the configured datasets (the secondary one scaled by
/// `secondary_scale`).
pub fn open_sources(cfg: &ExperimentConfig) -> Result<Sources, HarnessError> {
    let Some(primary) = &cfg.data.primary else {
        return Err(HarnessError::BadConfig("data.primary is not set".into()));
    };
    let primary = DatasetHandle::open(primary)?;
    let secondary = match &cfg.data.secondary {
        Some(p) => Some(DatasetHandle::open(p)?.scale_depth(cfg.secondary_scale)?),
        None => None,
    };
    Ok(Sources { primary, secondary })
}

/// Full run: mix, train, evaluate, and write `run_dir` with `config.json`,
/// `manifest.json`, `history.csv`, `weights.bin`, `report.csv`,
/// `timing.json` and `plots/`.
pub fn run_train(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let sources = open_sources(cfg)?;
    let mix = mix_datasets(&sources.primary, sources.secondary.as_ref(), &cfg.mix, cfg.seed)?;
    let train_set = sources.load(&mix.train)?;
    let val = sources.load(&mix.val)?;
    let out = train(cfg, &train_set, &val)?;
    let report = compare(&[(cfg.name.clone(), &out.model)], &val, cfg.batch_size)?;

    fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    write_json(&run_dir.join("config.json"), cfg)?;
    let manifest = json!({
        "config": "config.json",
        "seed": cfg.seed,
        "primary": sources.primary.root(),
        "secondary": sources.secondary.as_ref().map(|s| s.root()),
        "secondary_scale": sources.secondary.as_ref().map(|s| s.scale()),
        "train": mix.train.iter().map(|r| sources.id(*r)).collect::<Vec<_>>(),
        "val": mix.val.iter().map(|r| sources.id(*r)).collect::<Vec<_>>(),
    });
    write_json(&run_dir.join("manifest.json"), &manifest)?;
    write_history_csv(&run_dir.join("history.csv"), &out.history)?;
    out.model.save(&run_dir.join("weights.bin"))?;
    write_comparison(&run_dir.join("report.csv"), &report, "val")?;
    write_json(&run_dir.join("timing.json"), &json!({ "wall_clock_s": out.history.wall_clock_s }))?;
    write_learning_curves(&run_dir.join("plots"), &[(cfg.name.clone(), out.history.epochs.clone())])?;
    Ok(RunSummary { dir: run_dir.to_path_buf(), history: out.history, report, model: out.model })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(e: usize) -> EpochRecord {
        let m = |x: f64| MetricsReport { rmse: x * 1.5, mae: x, rel: x / 2.0, n_valid: 100 + e };
        EpochRecord { epoch: e, lr: 0.001 * 0.5f64.powi(e as i32), steps: 3, train_loss: 0.25, train: m(0.125), val: m(0.0625) }
    }

    #[test]
    fn history_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = TrainingHistory { epochs: (1..4).map(record).collect(), wall_clock_s: 1.0 };
        let p = dir.path().join("h.csv");
        write_history_csv(&p, &h).unwrap();
        assert_eq!(read_history_csv(&p).unwrap(), h.epochs);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(HISTORY_CSV_HEADER));
        assert!(!text.contains("wall"));
    }

    #[test]
    fn bad_history_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(read_history_csv(&p).is_err());
        fs::write(&p, format!("{HISTORY_CSV_HEADER}\n1,x,3,0,0,0,0,0,0,0,0,0\n")).unwrap();
        assert!(read_history_csv(&p).is_err());
    }

    #[test]
    fn comparison_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let m = MetricsReport { rmse: 1.0, mae: 1.0, rel: 0.375, n_valid: 2 };
        write_comparison(&p, &[("Input".into(), m)], "val").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), format!("{METRICS_CSV_HEADER}\nInput,val,1.000000,1.000000,0.375000,2\n"));
    }

    #[test]
    fn curves_written() {
        let dir = tempfile::tempdir().unwrap();
        let [a, b] = write_learning_curves(dir.path(), &[("r".into(), (1..4).map(record).collect())]).unwrap();
        assert!(fs::read_to_string(a).unwrap().contains("<polyline"));
        assert!(fs::read_to_string(b).unwrap().contains("Validation MAE"));
    }
}
