//! The `depthwork` command line. Usage errors exit with 2, data errors with
//! 1; either way a single `error: ...` line goes to stderr.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::camera::{calibrate, tag_grid_points, CameraModel, Pose, TagGrid, Vec3, DEFAULT_MAX_RMS};
use crate::grid::{pnm, DepthMap};
use crate::harness::{
    self, hyperparam_search, mix_datasets, open_sources, read_history_csv, run_ablation, run_train, write_ablation,
    write_combined_history, write_comparison, write_learning_curves, write_leaderboard, DatasetHandle, ExperimentConfig,
    SearchGrid,
};
use crate::losses::MetricsAccumulator;
use crate::model::{Direction, Model};
use crate::synth::{make_dataset, DatasetConfig, Domain, Manifest};
use crate::tsdf::{fuse_views, VolumeConfig};

#[derive(Parser, Debug)]
#[command(name = "depthwork", version, about = "Synthetic RGBD data, TSDF ground truth and depth-completion training")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON config file (dataset config for `synth`, experiment config for `train` / `ablate`)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for every random choice; overrides the config's seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset (RGB, raw depth, mask, fused GT, cameras)
    Synth(SynthArgs),
    /// Re-fuse a dataset's raw depths into ground-truth depth maps
    Fuse(FuseArgs),
    /// Fit a rigid transform to measured tag-grid centers
    Calibrate(CalibrateArgs),
    /// Train one model and write a run directory
    Train(TrainArgs),
    /// Evaluate a model or stored predictions against ground truth
    Eval(EvalArgs),
    /// Run the incremental or decremental ablation set
    Ablate(AblateArgs),
    /// Combine run histories into one CSV and learning-curve plots
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub domain: Option<DomainArg>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub cams: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum DomainArg {
    Primary,
    Secondary,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Dataset directory (read only)
    #[arg(long)]
    pub data: PathBuf,
    /// Voxel edge in meters; the dataset's volume keeps its extent
    #[arg(long)]
    pub voxel: Option<f64>,
    /// Truncation distance in meters (default: four voxels)
    #[arg(long)]
    pub truncation: Option<f64>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// JSON file `{"measured": [[x, y, z], ...]}`, tag centers in row-major order
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub points: Option<PathBuf>,
    /// Generate the measurements from a random pose instead
    #[arg(long)]
    pub synthetic: bool,
    /// Gaussian noise (meters) added to synthetic measurements
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 6)]
    pub rows: usize,
    #[arg(long, default_value_t = 6)]
    pub cols: usize,
    /// Tag spacing in meters
    #[arg(long, default_value_t = 0.04)]
    pub spacing: f64,
    /// Largest accepted RMS residual in meters
    #[arg(long, default_value_t = DEFAULT_MAX_RMS)]
    pub max_rms: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Primary dataset directory (overrides data.primary)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Secondary dataset directory (overrides data.secondary)
    #[arg(long)]
    pub secondary: Option<PathBuf>,
    /// Run name (overrides the config's name)
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Hyperparameter grid (JSON); the best combination is then trained in full
    #[arg(long)]
    pub grid: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory with ground truth
    #[arg(long)]
    pub data: PathBuf,
    /// Weight file to evaluate
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub weights: Option<PathBuf>,
    /// Directory of predicted depth maps laid out like the dataset's GT files
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Depth factor applied to the dataset on load
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub direction: DirectionArg,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub secondary: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum DirectionArg {
    Incremental,
    Decremental,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories containing history.csv
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }

    /// One line, no trailing newline.
    pub fn message(&self) -> String {
        let m = match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        };
        format!("error: {}", m.replace('\n', " "))
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Data(e.to_string())
    }
}

fn data_err(what: impl std::fmt::Display) -> CliError {
    CliError::Data(what.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| data_err(format!("{}: {e}", d.display())))?;
    }
    fs::write(path, text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

/// Records the exact inputs of an invocation next to its outputs.
fn write_invocation(dir: &Path, command: &str, args: &[String], extra: serde_json::Value) -> Result<(), CliError> {
    let v = json!({ "command": command, "argv": args, "inputs": extra });
    write_text(&dir.join("invocation.json"), &(serde_json::to_string_pretty(&v).map_err(data_err)? + "\n"))
}

fn require_out(g: &Global) -> Result<PathBuf, CliError> {
    g.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))
}

/// Refuses to write into a directory the command reads from.
fn distinct(out: &Path, input: &Path) -> Result<(), CliError> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    if canon(out) == canon(input) {
        return Err(CliError::Usage(format!("--out {} is an input directory", out.display())));
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the text for standard output.
pub fn run(args: &[String]) -> Result<String, CliError> {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    Ok(e.render().to_string())
                }
                _ => {
                    let text = e.render().to_string();
                    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
                    Err(CliError::Usage(line.trim_start_matches("error: ").to_string()))
                }
            };
        }
    };
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        // a second call in one process (tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => cmd_synth(g, a, args),
        Command::Fuse(a) => cmd_fuse(g, a, args),
        Command::Calibrate(a) => cmd_calibrate(g, a),
        Command::Train(a) => cmd_train(g, a, args),
        Command::Eval(a) => cmd_eval(g, a, args),
        Command::Ablate(a) => cmd_ablate(g, a, args),
        Command::Report(a) => cmd_report(g, a, args),
    }
}

/// Entry point for the binary: runs, prints, and returns the exit code.
pub fn main_with_args(args: &[String]) -> i32 {
    match run(args) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.message());
            e.exit_code()
        }
    }
}

fn cmd_synth(g: &Global, a: &SynthArgs, argv: &[String]) -> Result<String, CliError> {
    let out = require_out(g)?;
    let mut cfg: DatasetConfig = match &g.config {
        Some(p) => read_json(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(d) = a.domain {
        cfg.domain = match d {
            DomainArg::Primary => Domain::Primary,
            DomainArg::Secondary => Domain::Secondary,
        };
    }
    cfg.scenes = a.scenes.unwrap_or(cfg.scenes);
    cfg.cams_per_scene = a.cams.unwrap_or(cfg.cams_per_scene);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.height = a.height.unwrap_or(cfg.height);
    let seed = g.seed.unwrap_or(0);
    let s = make_dataset(&cfg, &out, seed)?;
    write_invocation(&out, "synth", argv, json!({ "config": cfg, "seed": seed }))?;
    Ok(format!(
        "samples,pixels,raw_invalid,gt_invalid,raw_mae_vs_true_m,gt_mae_vs_true_m\n{},{},{},{},{:.6},{:.6}\n",
        s.samples, s.pixels, s.raw_invalid, s.gt_invalid, s.raw_mae_vs_true, s.gt_mae_vs_true
    ))
}

fn cmd_fuse(g: &Global, a: &FuseArgs, argv: &[String]) -> Result<String, CliError> {
    let out = require_out(g)?;
    distinct(&out, &a.data)?;
    let manifest = Manifest::load(&a.data)?;
    let mut volume = manifest.volume.clone();
    if let Some(v) = a.voxel {
        if !(v > 0.0 && v.is_finite()) {
            return Err(CliError::Usage(format!("--voxel {v} must be positive")));
        }
        let hi = [0, 1, 2].map(|k| volume.origin[k] + volume.dims[k] as f64 * volume.voxel_size);
        volume = VolumeConfig { max_weight: volume.max_weight, ..VolumeConfig::covering(volume.origin, hi, v, volume.truncation) };
        volume.truncation = None;
    }
    if let Some(t) = a.truncation {
        volume.truncation = Some(t);
    }
    let mut scenes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        scenes.entry(s.scene_id).or_default().push(i);
    }
    let (mut raw_invalid, mut gt_invalid, mut pixels) = (0usize, 0usize, 0usize);
    for idx in scenes.values() {
        let mut frames = Vec::with_capacity(idx.len());
        for &i in idx {
            let e = &manifest.samples[i];
            let raw = pnm::read_depth(&a.data.join(&e.depth_raw))?;
            let mask = pnm::read_mask(&a.data.join(&e.mask))?;
            let raw = raw.masked(&mask.and(&raw.validity())?)?;
            let cam: CameraModel = read_json(&a.data.join(&e.camera))?;
            raw_invalid += raw.validity().count_invalid();
            pixels += raw.len();
            frames.push((raw, cam));
        }
        for (&i, gt) in idx.iter().zip(fuse_views(&frames, &volume)?) {
            gt_invalid += gt.validity().count_invalid();
            let path = out.join(&manifest.samples[i].depth_gt);
            if let Some(d) = path.parent() {
                fs::create_dir_all(d).map_err(|e| data_err(format!("{}: {e}", d.display())))?;
            }
            pnm::write_depth(&path, &gt)?;
        }
    }
    write_invocation(&out, "fuse", argv, json!({ "data": a.data, "volume": volume }))?;
    Ok(format!("views,pixels,raw_invalid,gt_invalid\n{},{pixels},{raw_invalid},{gt_invalid}\n", manifest.samples.len()))
}

fn format_pose(p: &Pose) -> String {
    p.to_matrix4().chunks(4).map(|r| r.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>().join(",")).collect::<Vec<_>>().join("\n")
}

fn cmd_calibrate(g: &Global, a: &CalibrateArgs) -> Result<String, CliError> {
    let grid = TagGrid::new(a.rows, a.cols, a.spacing).map_err(|e| CliError::Usage(e.to_string()))?;
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(CliError::Usage(format!("--noise {} must be non-negative", a.noise)));
    }
    let mut truth = None;
    let measured: Vec<Vec3> = if a.synthetic {
        let mut rng = ChaCha8Rng::seed_from_u64(g.seed.unwrap_or(0));
        let axis = Unit::new_normalize(Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..1.0)));
        let rot = Rotation3::from_axis_angle(&axis, rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI));
        let t = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(0.4..1.0));
        let pose = Pose::new(*rot.matrix(), t)?;
        let noise = Normal::new(0.0, a.noise).map_err(data_err)?;
        truth = Some(pose);
        tag_grid_points(&grid)
            .iter()
            .map(|p| pose.transform(p) + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
            .collect()
    } else {
        #[derive(serde::Deserialize)]
        struct Points {
            measured: Vec<[f64; 3]>,
        }
        let path = a.points.as_ref().expect("clap requires --points without --synthetic");
        let p: Points = read_json(path)?;
        p.measured.iter().map(|v| Vec3::new(v[0], v[1], v[2])).collect()
    };
    let cal = calibrate(&measured, &grid, a.max_rms)?;
    let mut out = format!("pose (camera-from-target, row-major 4x4)\n{}\n", format_pose(&cal.pose));
    out.push_str(&format!("rms_residual_m,{:.6},{:e}\naccepted,{}\n", cal.rms, cal.rms, cal.accepted));
    if let Some(t) = truth {
        let rot_err = cal.pose.rotation_angle_to(&t).to_degrees();
        let trans_err = (cal.pose.translation() - t.translation()).norm();
        out.push_str(&format!("rotation_error_deg,{rot_err:.6}\ntranslation_error_m,{trans_err:.6}\n"));
    }
    if let Some(dir) = &g.out {
        write_text(&dir.join("calibration.txt"), &out)?;
    }
    Ok(out)
}

fn experiment_config(g: &Global) -> Result<ExperimentConfig, CliError> {
    let mut cfg: ExperimentConfig = match &g.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_train(g: &Global, a: &TrainArgs, argv: &[String]) -> Result<String, CliError> {
    let mut cfg = experiment_config(g)?;
    if let Some(d) = &a.data {
        cfg.data.primary = Some(d.clone());
    }
    if let Some(d) = &a.secondary {
        cfg.data.secondary = Some(d.clone());
    }
    if let Some(n) = &a.name {
        cfg.name = n.clone();
    }
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    if cfg.data.primary.is_none() {
        return Err(CliError::Usage("no primary dataset: pass --data or set data.primary".into()));
    }
    cfg.validate()?;
    let root = g.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let dir = root.join(&cfg.name);
    for input in cfg.data.primary.iter().chain(&cfg.data.secondary) {
        distinct(&dir, input)?;
    }
    let mut search = None;
    if let Some(gp) = &a.grid {
        let grid: SearchGrid = read_json(gp)?;
        let sources = open_sources(&cfg)?;
        let mix = mix_datasets(&sources.primary, sources.secondary.as_ref(), &cfg.mix, cfg.seed)?;
        let r = hyperparam_search(&cfg, &grid, &sources.load(&mix.train)?, &sources.load(&mix.val)?)?;
        cfg = ExperimentConfig { name: cfg.name.clone(), ..r.best.clone() };
        search = Some(r);
    }
    let summary = run_train(&cfg, &dir)?;
    if let Some(r) = &search {
        write_leaderboard(&dir, r)?;
    }
    write_invocation(&dir, "train", argv, json!({ "config": cfg, "grid": a.grid }))?;
    let mut out = format!("run,{}\n{}\n", dir.display(), crate::losses::METRICS_CSV_HEADER);
    for (name, m) in &summary.report {
        out.push_str(&m.csv_row(name, "val"));
        out.push('\n');
    }
    Ok(out)
}

fn cmd_eval(g: &Global, a: &EvalArgs, argv: &[String]) -> Result<String, CliError> {
    let out = require_out(g)?;
    distinct(&out, &a.data)?;
    if !(a.scale > 0.0 && a.scale.is_finite()) {
        return Err(CliError::Usage(format!("--scale {} must be positive", a.scale)));
    }
    let ds = DatasetHandle::open(&a.data)?.scale_depth(a.scale)?;
    let samples = ds.load_many(&(0..ds.len()).collect::<Vec<_>>())?;
    let rows = if let Some(w) = &a.weights {
        let model = Model::load(w)?;
        harness::compare(&[("model".to_string(), &model)], &samples, 8)?
    } else {
        let dir = a.predictions.as_ref().expect("clap requires --predictions without --weights");
        let (mut input, mut pred) = (MetricsAccumulator::default(), MetricsAccumulator::default());
        for (i, s) in samples.iter().enumerate() {
            let p = dir.join(&ds.manifest().samples[i].depth_gt);
            let d: DepthMap = pnm::read_depth(&p)?.scaled(a.scale);
            input.add(&s.gt, &s.raw)?;
            pred.add(&s.gt, &d)?;
        }
        vec![("Input".to_string(), input.report()?), ("predictions".to_string(), pred.report()?)]
    };
    let report = out.join("report.csv");
    write_comparison(&report, &rows, "all")?;
    write_invocation(&out, "eval", argv, json!({ "data": a.data, "weights": a.weights, "predictions": a.predictions, "scale": a.scale }))?;
    fs::read_to_string(&report).map_err(data_err)
}

fn cmd_ablate(g: &Global, a: &AblateArgs, argv: &[String]) -> Result<String, CliError> {
    let out = require_out(g)?;
    let mut cfg = experiment_config(g)?;
    if let Some(d) = &a.data {
        cfg.data.primary = Some(d.clone());
    }
    if let Some(d) = &a.secondary {
        cfg.data.secondary = Some(d.clone());
    }
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    if cfg.data.primary.is_none() {
        return Err(CliError::Usage("no primary dataset: pass --data or set data.primary".into()));
    }
    cfg.validate()?;
    let direction = match a.direction {
        DirectionArg::Incremental => Direction::Incremental,
        DirectionArg::Decremental => Direction::Decremental,
    };
    let sources = open_sources(&cfg)?;
    let mix = mix_datasets(&sources.primary, sources.secondary.as_ref(), &cfg.mix, cfg.seed)?;
    let rows = run_ablation(direction, &cfg, &sources.load(&mix.train)?, &sources.load(&mix.val)?)?;
    let [csv, _] = write_ablation(&out, direction, &cfg, &rows)?;
    let histories: Vec<_> = rows.iter().map(|r| (r.name.clone(), r.history.epochs.clone())).collect();
    write_combined_history(&out.join(format!("ablation_{direction}_history.csv")), &histories)?;
    write_invocation(&out, "ablate", argv, json!({ "direction": direction.to_string(), "config": cfg }))?;
    fs::read_to_string(&csv).map_err(data_err)
}

fn cmd_report(g: &Global, a: &ReportArgs, argv: &[String]) -> Result<String, CliError> {
    let out = require_out(g)?;
    let mut runs = Vec::with_capacity(a.runs.len());
    for dir in &a.runs {
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        runs.push((name, read_history_csv(&dir.join("history.csv"))?));
    }
    let csv = out.join("history.csv");
    write_combined_history(&csv, &runs)?;
    let [t, v] = write_learning_curves(&out, &runs)?;
    write_invocation(&out, "report", argv, json!({ "runs": a.runs }))?;
    Ok(format!("{}\n{}\n{}\n", csv.display(), t.display(), v.display()))
}
