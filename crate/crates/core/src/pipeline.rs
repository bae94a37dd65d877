//! Command implementations behind the CLI: dataset generation, training,
//! evaluation, benchmarking, ablations and sweeps. Each writes its artifacts
//! under the configured output directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::report::{fmt_f64, fmt_opt};
use crate::eval::{
    bench_latency, collapse_diagnostic, comparison_report, evaluate, gate_heatmap, run_ablation, run_sweep,
    ExperimentData, ExperimentOptions, GateHeatmap, LatencyReport, MetricsReport, Report, SweepAxis, Table, Variant,
    Verdict,
};
use crate::frontend::{assemble_dataset, generate_records, DatasetContainer, DatasetStats};
use crate::model::{load_model, Model, ModelConfig, RoutingMode};
use crate::train::{checkpoint_path, Splits, Stage, TrainReport, TrainSession};

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Records the resolved configuration next to a command's artifacts.
fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml())
}

#[derive(Debug, Clone)]
pub struct GenDataOutput {
    pub generated: usize,
    pub stats: DatasetStats,
    pub split_stats: [DatasetStats; 3],
    pub paths: [PathBuf; 3],
    pub sidecar: PathBuf,
}

fn stats_fields(r: &mut Report, prefix: &str, s: &DatasetStats) {
    r.set(format!("{prefix}.records"), s.records);
    r.set(format!("{prefix}.transitions"), s.transitions);
    r.set(format!("{prefix}.transition_fraction"), fmt_f64(s.transition_fraction()));
    for (name, c) in crate::eval::metrics::QUADRANT_NAMES.iter().zip(s.quadrant_counts) {
        r.set(format!("{prefix}.{name}"), c);
    }
}

/// Simulates, sounds and labels `data.num_sequences` UEs, filters rare
/// target beams and writes the 70/15/15 split plus a statistics sidecar.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenDataOutput> {
    let (dims, records) = generate_records(&cfg.sim, &cfg.sounding, cfg.seed, cfg.data.num_sequences)?;
    let generated = records.len();
    let ds = assemble_dataset(dims, records, cfg.data.filter())?;
    let parts = ds.split(cfg.seed);
    if parts.iter().any(DatasetContainer::is_empty) {
        return Err(Error::EmptyDataset(format!(
            "{} records after filtering leave an empty split",
            ds.len()
        )));
    }
    let dir = cfg.data_dir();
    let paths = SPLIT_NAMES.map(|s| cfg.split_path(s));
    for (p, c) in paths.iter().zip(&parts) {
        c.write(p)?;
    }
    let stats = DatasetStats::compute(&ds);
    let split_stats = [0, 1, 2].map(|i| DatasetStats::compute(&parts[i]));

    let mut r = Report::new("dataset");
    r.set("seed", cfg.seed);
    r.set("generated", generated);
    r.set("dropped", generated - ds.len());
    r.set("classes", stats.classes);
    r.set("frames", dims.frames);
    r.set("subcarriers", dims.subcarriers);
    r.set("beams", dims.beams);
    stats_fields(&mut r, "all", &stats);
    for (name, s) in SPLIT_NAMES.iter().zip(&split_stats) {
        stats_fields(&mut r, name, s);
    }
    let mut t = Table::new(&["raw_beam", "class_id", "count"]);
    for ((raw, class), (_, count)) in ds.remap.iter().zip(&stats.class_histogram) {
        t.rows.push(vec![raw.to_string(), class.to_string(), count.to_string()]);
    }
    r.table = Some(t);
    let sidecar = dir.join("stats.txt");
    r.write(&sidecar)?;
    write_config(cfg, &dir)?;
    Ok(GenDataOutput {
        generated,
        stats,
        split_stats,
        paths,
        sidecar,
    })
}

/// Reads the named split written by [`cmd_gen_data`].
pub fn load_split(cfg: &RunConfig, split: &str) -> Result<DatasetContainer> {
    let path = cfg.split_path(split);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    DatasetContainer::read(&path)
}

pub fn load_splits(cfg: &RunConfig) -> Result<[DatasetContainer; 3]> {
    let [a, b, c] = SPLIT_NAMES.map(|s| load_split(cfg, s));
    let parts = [a?, b?, c?];
    if parts.iter().any(|p| p.dims != parts[0].dims || p.remap != parts[0].remap) {
        return Err(Error::Config(format!(
            "dataset splits under {} disagree on shape or class map",
            cfg.data_dir().display()
        )));
    }
    Ok(parts)
}

/// Model configuration bound to a dataset's shape.
pub fn resolved_model(cfg: &RunConfig, data: &DatasetContainer) -> Result<ModelConfig> {
    cfg.model.resolve(data.dims, data.num_classes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    ThreeStage,
    EndToEnd,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::ThreeStage => "three_stage",
            Regime::EndToEnd => "end_to_end",
        }
    }

    /// Directory holding this regime's checkpoints and logs.
    pub fn dir(self, cfg: &RunConfig) -> PathBuf {
        cfg.output_dir.join(self.name())
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "three_stage" => Ok(Regime::ThreeStage),
            "end_to_end" => Ok(Regime::EndToEnd),
            other => Err(Error::Config(format!("unknown regime '{other}' (three_stage, end_to_end)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub reports: Vec<TrainReport>,
    pub checkpoint: PathBuf,
    pub summary: PathBuf,
}

/// Runs a regime, or one stage of it. A single curriculum stage starts from
/// the previous stage's checkpoint in the regime directory.
pub fn cmd_train(cfg: &RunConfig, regime: Regime, stage: Option<Stage>, verbose: bool) -> Result<TrainOutput> {
    let stages: Vec<Stage> = match (regime, stage) {
        (Regime::ThreeStage, None) => Stage::CURRICULUM.to_vec(),
        (Regime::ThreeStage, Some(Stage::EndToEnd)) => {
            return Err(Error::Config("end_to_end is not a curriculum stage; use --regime end_to_end".into()))
        }
        (Regime::ThreeStage, Some(s)) => vec![s],
        (Regime::EndToEnd, None | Some(Stage::EndToEnd)) => vec![Stage::EndToEnd],
        (Regime::EndToEnd, Some(s)) => {
            return Err(Error::Config(format!("{s} belongs to the three_stage regime")))
        }
    };
    let [train, val, _] = load_splits(cfg)?;
    let model_cfg = resolved_model(cfg, &train)?;
    let dir = regime.dir(cfg);
    let session = TrainSession {
        model: &model_cfg,
        train: &cfg.train,
        seed: cfg.seed,
        dir: &dir,
        verbose,
    };
    let (_, reports) = session.stages(&stages, Splits { train: &train.records, val: &val.records })?;
    write_config(cfg, &dir)?;
    for r in &reports {
        let mut rep = Report::new("train");
        rep.set("regime", regime);
        rep.set("stage", r.stage);
        rep.set("mode", r.stage.mode());
        rep.set("epochs", r.epochs.len());
        rep.set("best_epoch", r.best_epoch);
        rep.set("best_val_top1", fmt_f64(r.best_val_top1));
        rep.set(
            "stop",
            match r.stop_reason {
                crate::train::StopReason::Patience => "patience",
                crate::train::StopReason::MaxEpochs => "max_epochs",
            },
        );
        let mut t = Table::new(&["epoch", "train_loss", "val_top1", "val_transition"]);
        for e in &r.epochs {
            t.rows.push(vec![
                e.epoch.to_string(),
                fmt_f64(e.train_loss),
                fmt_f64(e.val_top1),
                fmt_opt(e.val_transition),
            ]);
        }
        rep.table = Some(t);
        rep.write(&dir.join(format!("{}_summary.txt", r.stage.name())))?;
    }
    let last = *stages.last().expect("non-empty");
    Ok(TrainOutput {
        reports,
        checkpoint: checkpoint_path(&dir, last),
        summary: dir.join(format!("{}_summary.txt", last.name())),
    })
}

/// Default evaluation checkpoint: the end of the curriculum.
pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    checkpoint_path(&Regime::ThreeStage.dir(cfg), Stage::Three)
}

/// Routing used at inference for a checkpoint trained in `stage`.
pub fn inference_mode(stage: Option<&str>) -> RoutingMode {
    stage
        .and_then(|s| s.parse::<Stage>().ok())
        .map_or(RoutingMode::Top1, Stage::mode)
}

fn load_checkpoint(cfg: &ModelConfig, path: &Path) -> Result<(Model<f32>, Option<String>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let (model, meta) = load_model(cfg, path)?;
    Ok((model, meta.map(|m| m.stage)))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub mode: RoutingMode,
    pub metrics: MetricsReport,
    pub heatmap: GateHeatmap,
    pub spread: f64,
    pub verdict: Verdict,
    /// Default-mode and override-mode rows when an override was requested.
    pub comparison: Option<Report>,
    pub paths: Vec<PathBuf>,
}

fn eval_row(label: &str, mode: RoutingMode, m: &MetricsReport) -> Vec<String> {
    let mut row = vec![label.to_string(), mode.to_string(), fmt_f64(m.top1), fmt_f64(m.top3), fmt_opt(m.transition_acc)];
    row.extend(m.scene_acc.iter().map(|a| fmt_opt(*a)));
    row
}

/// Evaluates a checkpoint on the test split. The routing mode defaults to
/// the one the checkpoint was trained for (top-1 after stage 3).
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, mode: Option<RoutingMode>) -> Result<EvalOutput> {
    let ckpt = checkpoint.map_or_else(|| default_checkpoint(cfg), Path::to_path_buf);
    let test = load_split(cfg, "test")?;
    let model_cfg = resolved_model(cfg, &test)?;
    let (model, stage) = load_checkpoint(&model_cfg, &ckpt)?;
    let default_mode = inference_mode(stage.as_deref());
    let used = mode.unwrap_or(default_mode);
    let metrics = evaluate(&model, &test.records, used)?;
    let heatmap = gate_heatmap(&model, &test.records);
    let (spread, verdict) = collapse_diagnostic(&heatmap);

    let dir = cfg.output_dir.join("eval");
    let name = stem(&ckpt);
    let mut rep = metrics.to_report();
    rep.set("checkpoint", ckpt.display());
    rep.set("stage", stage.as_deref().unwrap_or("unknown"));
    rep.set("mode", used);
    let metrics_path = dir.join(format!("{name}_{used}_metrics.txt"));
    rep.write(&metrics_path)?;
    let heatmap_path = dir.join(format!("{name}_heatmap.txt"));
    heatmap.to_report().write(&heatmap_path)?;
    let mut paths = vec![metrics_path, heatmap_path];

    let comparison = match mode.filter(|&m| m != default_mode) {
        Some(_) => {
            let base = evaluate(&model, &test.records, default_mode)?;
            let mut r = Report::new("mode_comparison");
            r.set("checkpoint", ckpt.display());
            let mut cols = vec!["label", "mode", "top1", "top3", "transition_acc"];
            cols.extend(crate::eval::metrics::QUADRANT_NAMES);
            let mut t = Table::new(&cols);
            t.rows.push(eval_row("default", default_mode, &base));
            t.rows.push(eval_row("override", used, &metrics));
            r.table = Some(t);
            let p = dir.join(format!("{name}_mode_comparison.txt"));
            r.write(&p)?;
            paths.push(p);
            Some(r)
        }
        None => None,
    };
    Ok(EvalOutput {
        mode: used,
        metrics,
        heatmap,
        spread,
        verdict,
        comparison,
        paths,
    })
}

/// Single-sample latency of a checkpoint under `eval.latency_*`.
pub fn cmd_bench(cfg: &RunConfig, checkpoint: Option<&Path>, mode: Option<RoutingMode>) -> Result<(LatencyReport, PathBuf)> {
    let ckpt = checkpoint.map_or_else(|| default_checkpoint(cfg), Path::to_path_buf);
    let test = load_split(cfg, "test")?;
    let model_cfg = resolved_model(cfg, &test)?;
    let (model, stage) = load_checkpoint(&model_cfg, &ckpt)?;
    let used = mode.unwrap_or_else(|| inference_mode(stage.as_deref()));
    let rep = bench_latency(&model, used, cfg.eval.latency_warmup, cfg.eval.latency_runs, cfg.seed)?;
    let path = cfg.output_dir.join("bench").join(format!("{}_{used}.txt", stem(&ckpt)));
    rep.to_report().write(&path)?;
    Ok((rep, path))
}

fn experiment_inputs(cfg: &RunConfig, subdir: &str, verbose: bool) -> Result<([DatasetContainer; 3], ExperimentOptions)> {
    let parts = load_splits(cfg)?;
    let opts = ExperimentOptions {
        seed: cfg.seed,
        dir: cfg.output_dir.join(subdir),
        verbose,
        latency: cfg
            .eval
            .experiment_latency
            .then_some((cfg.eval.latency_warmup, cfg.eval.latency_runs)),
    };
    Ok((parts, opts))
}

fn data_of(parts: &[DatasetContainer; 3]) -> ExperimentData<'_> {
    ExperimentData {
        dims: parts[0].dims,
        num_classes: parts[0].num_classes(),
        train: &parts[0].records,
        val: &parts[1].records,
        test: &parts[2].records,
    }
}

/// Trains and evaluates each variant; writes one comparison table.
pub fn cmd_ablate(cfg: &RunConfig, variants: &[Variant], verbose: bool) -> Result<(Report, PathBuf)> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants requested".into()));
    }
    let (parts, opts) = experiment_inputs(cfg, "ablation", verbose)?;
    let results = run_ablation(variants, &cfg.model, &cfg.train, data_of(&parts), &opts)?;
    let report = comparison_report("ablation", &results);
    let path = opts.dir.join("report.txt");
    report.write(&path)?;
    write_config(cfg, &opts.dir)?;
    Ok((report, path))
}

/// Trains and evaluates the curriculum model at each sweep value.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[usize], verbose: bool) -> Result<(Report, PathBuf)> {
    if values.is_empty() {
        return Err(Error::Config("no sweep values requested".into()));
    }
    let (parts, opts) = experiment_inputs(cfg, &format!("sweep_{axis}"), verbose)?;
    let results = run_sweep(axis, values, &cfg.model, &cfg.train, data_of(&parts), &opts)?;
    let report = comparison_report(&format!("sweep_{axis}"), &results);
    let path = opts.dir.join("report.txt");
    report.write(&path)?;
    write_config(cfg, &opts.dir)?;
    Ok((report, path))
}
