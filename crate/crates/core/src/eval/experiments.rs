//! Ablation variants and architecture sweeps.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::diagnostics::{collapse_diagnostic, gate_heatmap, GateHeatmap};
use super::latency::{bench_latency, LatencyReport};
use super::metrics::{evaluate, MetricsReport};
use super::report::{fmt_f64, fmt_opt, Report, Table};
use crate::error::{Error, Result};
use crate::frontend::{DatasetRecord, Dims};
use crate::model::{Model, ModelConfig, RoutingMode};
use crate::train::{Splits, TrainConfig, TrainReport, TrainSession};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Full architecture, three-stage curriculum.
    Full,
    /// Every MoE layer replaced by a shared FFN; end-to-end.
    NoMoe,
    /// No context features and a uniform gate; end-to-end under soft routing.
    NoContext,
    /// SE block removed; three-stage curriculum.
    NoSe,
    /// Full architecture trained end-to-end under soft routing.
    EndToEnd,
    /// Frame-independent CNN: last frame only, no transformer blocks, no context.
    CnnBaseline,
}

impl Variant {
    pub const ABLATIONS: [Variant; 5] = [Variant::Full, Variant::NoMoe, Variant::NoContext, Variant::NoSe, Variant::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMoe => "no_moe",
            Variant::NoContext => "no_context",
            Variant::NoSe => "no_se",
            Variant::EndToEnd => "end_to_end",
            Variant::CnnBaseline => "cnn_baseline",
        }
    }

    pub fn configure(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Full | Variant::EndToEnd => {}
            Variant::NoMoe => c.moe_layers.clear(),
            Variant::NoContext => {
                c.use_context = false;
                c.uniform_gate = true;
            }
            Variant::NoSe => c.use_se = false,
            Variant::CnnBaseline => {
                c.frame_window = 1;
                c.n_layers = 0;
                c.moe_layers.clear();
                c.use_context = false;
            }
        }
        c
    }

    pub fn uses_curriculum(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSe)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Variant::Full,
            Variant::NoMoe,
            Variant::NoContext,
            Variant::NoSe,
            Variant::EndToEnd,
            Variant::CnnBaseline,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Depth,
    MoeLayerCount,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(SweepAxis::Depth),
            "moe_layer_count" | "moe_count" => Ok(SweepAxis::MoeLayerCount),
            other => Err(Error::Config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Depth => "depth",
            SweepAxis::MoeLayerCount => "moe_layer_count",
        })
    }
}

/// Architecture for one sweep point.
///
/// Depth: two layers are both MoE; deeper stacks keep a dense first layer and
/// make the last `min(depth − 1, 4)` layers MoE. MoE count: the last `n` of
/// the base stack's layers.
pub fn sweep_config(axis: SweepAxis, value: usize, base: &ModelConfig) -> Result<ModelConfig> {
    let mut c = base.clone();
    match axis {
        SweepAxis::Depth => {
            if value < 2 {
                return Err(Error::Config(format!("depth {value} < 2")));
            }
            c.n_layers = value;
            let n_moe = if value == 2 { 2 } else { (value - 1).min(4) };
            c.moe_layers = (value - n_moe..value).collect();
        }
        SweepAxis::MoeLayerCount => {
            if value > c.n_layers {
                return Err(Error::Config(format!("{value} MoE layers on a {}-layer stack", c.n_layers)));
            }
            c.moe_layers = (c.n_layers - value..c.n_layers).collect();
        }
    }
    Ok(c)
}

/// Train/val/test records with their shape.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentData<'a> {
    pub dims: Dims,
    pub num_classes: usize,
    pub train: &'a [DatasetRecord],
    pub val: &'a [DatasetRecord],
    pub test: &'a [DatasetRecord],
}

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub seed: u64,
    /// Each run writes checkpoints and logs under `dir/<label>`.
    pub dir: PathBuf,
    pub verbose: bool,
    /// `(warm-ups, timed runs)`; `None` skips the latency benchmark.
    pub latency: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub label: String,
    pub curriculum: bool,
    pub eval_mode: RoutingMode,
    pub census: usize,
    pub metrics: MetricsReport,
    pub heatmap: GateHeatmap,
    pub latency: Option<LatencyReport>,
    pub reports: Vec<TrainReport>,
    pub model: Model<f32>,
}

/// Trains `cfg` under the curriculum or end-to-end and evaluates it on the test split.
/// Curriculum models are evaluated with top-1 routing, end-to-end ones with soft routing.
pub fn train_and_evaluate(
    label: &str,
    cfg: &ModelConfig,
    curriculum: bool,
    train: &TrainConfig,
    data: ExperimentData,
    opts: &ExperimentOptions,
) -> Result<VariantResult> {
    let cfg = cfg.resolve(data.dims, data.num_classes)?;
    let dir = opts.dir.join(label.replace(['=', ' ', '/'], "_"));
    let session = TrainSession {
        model: &cfg,
        train,
        seed: opts.seed,
        dir: &dir,
        verbose: opts.verbose,
    };
    let splits = Splits { train: data.train, val: data.val };
    let (model, reports) = if curriculum && !cfg.moe_layers.is_empty() && cfg.has_gate() {
        session.curriculum(splits)?
    } else {
        let (m, r) = session.end_to_end(splits)?;
        (m, vec![r])
    };
    let curriculum = reports.len() > 1;
    let eval_mode = if curriculum { RoutingMode::Top1 } else { RoutingMode::SoftDense };
    let metrics = evaluate(&model, data.test, eval_mode)?;
    let heatmap = gate_heatmap(&model, data.test);
    let latency = match opts.latency {
        Some((w, n)) => Some(bench_latency(&model, eval_mode, w, n, opts.seed)?),
        None => None,
    };
    Ok(VariantResult {
        label: label.to_string(),
        curriculum,
        eval_mode,
        census: cfg.census(),
        metrics,
        heatmap,
        latency,
        reports,
        model,
    })
}

pub fn run_variant(variant: Variant, base: &ModelConfig, train: &TrainConfig, data: ExperimentData, opts: &ExperimentOptions) -> Result<VariantResult> {
    train_and_evaluate(variant.name(), &variant.configure(base), variant.uses_curriculum(), train, data, opts)
}

pub fn run_ablation(variants: &[Variant], base: &ModelConfig, train: &TrainConfig, data: ExperimentData, opts: &ExperimentOptions) -> Result<Vec<VariantResult>> {
    variants.iter().map(|&v| run_variant(v, base, train, data, opts)).collect()
}

pub fn run_sweep(
    axis: SweepAxis,
    values: &[usize],
    base: &ModelConfig,
    train: &TrainConfig,
    data: ExperimentData,
    opts: &ExperimentOptions,
) -> Result<Vec<VariantResult>> {
    let configs = values
        .iter()
        .map(|&v| sweep_config(axis, v, base).map(|c| (v, c)))
        .collect::<Result<Vec<_>>>()?;
    configs
        .iter()
        .map(|(v, c)| train_and_evaluate(&format!("{axis}={v}"), c, true, train, data, opts))
        .collect()
}

pub const COMPARISON_COLUMNS: [&str; 18] = [
    "label",
    "regime",
    "eval_mode",
    "params",
    "top1",
    "top3",
    "transition_acc",
    "los_low",
    "los_high",
    "nlos_low",
    "nlos_high",
    "n_total",
    "n_transition",
    "agreement",
    "spread",
    "verdict",
    "mean_ms",
    "p99_ms",
];

/// One row per result, in order.
pub fn comparison_report(kind: &str, results: &[VariantResult]) -> Report {
    let mut r = Report::new(kind);
    r.set("rows", results.len());
    let mut t = Table::new(&COMPARISON_COLUMNS);
    for v in results {
        let m = &v.metrics;
        let (spread, verdict) = collapse_diagnostic(&v.heatmap);
        let mut row = vec![
            v.label.clone(),
            if v.curriculum { "three_stage" } else { "end_to_end" }.to_string(),
            v.eval_mode.to_string(),
            v.census.to_string(),
            fmt_f64(m.top1),
            fmt_f64(m.top3),
            fmt_opt(m.transition_acc),
        ];
        row.extend(m.scene_acc.iter().map(|a| fmt_opt(*a)));
        row.extend([
            m.n_total.to_string(),
            m.n_transition.to_string(),
            fmt_opt(v.heatmap.agreement),
            fmt_f64(spread),
            verdict.to_string(),
            fmt_opt(v.latency.as_ref().map(|l| l.mean_ms)),
            fmt_opt(v.latency.as_ref().map(|l| l.p99_ms)),
        ]);
        t.rows.push(row);
    }
    r.table = Some(t);
    r
}
