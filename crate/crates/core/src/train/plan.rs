//! Stage definitions, trainable sets and learning-rate groups.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::schedule::SchedulerConfig;
use crate::error::{Error, Result};
use crate::model::{Layout, RoutingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Expert pre-training under ground-truth hard routing.
    One,
    /// Gate alignment with everything else frozen.
    Two,
    /// Top-1 fine-tuning of expert second layers, gate and classifier.
    Three,
    EndToEnd,
}

impl Stage {
    pub const CURRICULUM: [Stage; 3] = [Stage::One, Stage::Two, Stage::Three];

    pub fn name(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
            Stage::Three => "stage3",
            Stage::EndToEnd => "end_to_end",
        }
    }

    pub fn mode(self) -> RoutingMode {
        match self {
            Stage::One => RoutingMode::HardMask,
            Stage::Two | Stage::EndToEnd => RoutingMode::SoftDense,
            Stage::Three => RoutingMode::Top1,
        }
    }

    pub fn code(self) -> u64 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
            Stage::EndToEnd => 4,
        }
    }

    /// Stage whose checkpoint this one starts from.
    pub fn previous(self) -> Option<Stage> {
        match self {
            Stage::Two => Some(Stage::One),
            Stage::Three => Some(Stage::Two),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "stage1" => Ok(Stage::One),
            "2" | "stage2" => Ok(Stage::Two),
            "3" | "stage3" => Ok(Stage::Three),
            "end_to_end" => Ok(Stage::EndToEnd),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

/// Named predicate over parameter tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorSet {
    All,
    /// Everything except the gate, which receives no gradient under hard routing.
    AllButGate,
    Gate,
    ExpertSecond,
    Classifier,
}

impl TensorSet {
    pub fn name(self) -> &'static str {
        match self {
            TensorSet::All => "all",
            TensorSet::AllButGate => "all_but_gate",
            TensorSet::Gate => "gate",
            TensorSet::ExpertSecond => "expert_second",
            TensorSet::Classifier => "classifier",
        }
    }

    pub fn indices(self, layout: &Layout, n_tensors: usize) -> Vec<usize> {
        match self {
            TensorSet::All => (0..n_tensors).collect(),
            TensorSet::AllButGate => {
                let gate = layout.gate_tensors();
                (0..n_tensors).filter(|i| !gate.contains(i)).collect()
            }
            TensorSet::Gate => layout.gate_tensors(),
            TensorSet::ExpertSecond => layout.expert_second_layers(),
            TensorSet::Classifier => vec![layout.cls],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSettings {
    /// Base rate; for stage 3 this is the expert second-layer rate.
    pub lr: f64,
    /// Stage 3 only: rate of the gate and classifier.
    pub lr_head: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
}

impl Default for StageSettings {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_head: None,
            max_epochs: None,
            patience: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    /// Samples per gradient work item; fixes the summation order.
    pub chunk_size: usize,
    pub scheduler: SchedulerConfig,
    pub stage1: StageSettings,
    pub stage2: StageSettings,
    pub stage3: StageSettings,
    pub end_to_end: StageSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            weight_decay: 1e-4,
            chunk_size: 8,
            scheduler: SchedulerConfig::default(),
            stage1: StageSettings { lr: 1e-4, ..Default::default() },
            stage2: StageSettings { lr: 1e-3, ..Default::default() },
            stage3: StageSettings {
                lr: 5e-5,
                lr_head: Some(2e-4),
                ..Default::default()
            },
            end_to_end: StageSettings { lr: 1e-4, ..Default::default() },
        }
    }
}

impl TrainConfig {
    pub fn settings(&self, stage: Stage) -> &StageSettings {
        match stage {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
            Stage::Three => &self.stage3,
            Stage::EndToEnd => &self.end_to_end,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::Config("batch_size and chunk_size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.scheduler.validate()?;
        for stage in [Stage::One, Stage::Two, Stage::Three, Stage::EndToEnd] {
            let s = self.settings(stage);
            let lrs = [Some(s.lr), s.lr_head];
            if lrs.iter().flatten().any(|&lr| !(lr >= 0.0) || !lr.is_finite()) {
                return Err(Error::Config(format!("{stage}: learning rates must be finite and non-negative")));
            }
            if s.max_epochs == Some(0) {
                return Err(Error::Config(format!("{stage}: max_epochs must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrGroup {
    pub set: TensorSet,
    pub lr: f64,
}

/// Everything `run_stage` needs to know about one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub mode: RoutingMode,
    pub groups: Vec<LrGroup>,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub scheduler: SchedulerConfig,
    pub batch_size: usize,
    pub chunk_size: usize,
    pub seed: u64,
}

impl StagePlan {
    pub fn new(stage: Stage, cfg: &TrainConfig, seed: u64) -> Self {
        let s = cfg.settings(stage);
        let groups = match stage {
            Stage::One => vec![LrGroup { set: TensorSet::AllButGate, lr: s.lr }],
            Stage::Two => vec![LrGroup { set: TensorSet::Gate, lr: s.lr }],
            Stage::Three => {
                let head = s.lr_head.unwrap_or(s.lr);
                vec![
                    LrGroup { set: TensorSet::ExpertSecond, lr: s.lr },
                    LrGroup { set: TensorSet::Gate, lr: head },
                    LrGroup { set: TensorSet::Classifier, lr: head },
                ]
            }
            Stage::EndToEnd => vec![LrGroup { set: TensorSet::All, lr: s.lr }],
        };
        Self {
            stage,
            mode: stage.mode(),
            groups,
            weight_decay: cfg.weight_decay,
            max_epochs: s.max_epochs.unwrap_or(cfg.max_epochs),
            patience: s.patience.unwrap_or(cfg.patience),
            scheduler: cfg.scheduler,
            batch_size: cfg.batch_size,
            chunk_size: cfg.chunk_size,
            seed,
        }
    }

    /// Union of the groups' tensor sets.
    pub fn trainable(&self, layout: &Layout, n_tensors: usize) -> Vec<bool> {
        let mut on = vec![false; n_tensors];
        for g in &self.groups {
            for i in g.set.indices(layout, n_tensors) {
                on[i] = true;
            }
        }
        on
    }

    /// Scheduled rate per tensor at `epoch`; the first matching group wins, frozen tensors get 0.
    pub fn tensor_lrs(&self, layout: &Layout, n_tensors: usize, epoch: usize) -> Vec<f64> {
        let mut lrs = vec![None; n_tensors];
        for g in &self.groups {
            let lr = self.scheduler.lr(g.lr, epoch);
            for i in g.set.indices(layout, n_tensors) {
                lrs[i].get_or_insert(lr);
            }
        }
        lrs.into_iter().map(|l| l.unwrap_or(0.0)).collect()
    }

    pub fn group_lrs(&self, epoch: usize) -> Vec<(&'static str, f64)> {
        self.groups
            .iter()
            .map(|g| (g.set.name(), self.scheduler.lr(g.lr, epoch)))
            .collect()
    }
}
