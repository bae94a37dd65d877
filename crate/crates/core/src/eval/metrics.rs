//! Top-K, transition and per-quadrant accuracy.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::{quadrant, DatasetRecord};
use crate::model::{ForwardOptions, Model, RoutingMode, Sample};

pub const QUADRANT_NAMES: [&str; 4] = ["los_low", "los_high", "nlos_low", "nlos_high"];

/// Indices of the `k` largest logits; ties go to the smaller index.
pub fn top_k(logits: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Fraction of rows whose target is among the `k` largest logits.
pub fn topk_accuracy(logits: &[Vec<f32>], targets: &[usize], k: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::UndefinedMetric("top-k accuracy of an empty set".into()));
    }
    if logits.len() != targets.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", logits.len(), targets.len())));
    }
    let classes = logits[0].len();
    if k == 0 || k > classes {
        return Err(Error::Config(format!("k = {k} outside 1..={classes}")));
    }
    let hits = logits
        .iter()
        .zip(targets)
        .filter(|(l, &t)| top_k(l, k).contains(&t))
        .count();
    Ok(hits as f64 / logits.len() as f64)
}

/// Accuracy on a subset, with the subset size. `value` is `None` when the subset is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetAccuracy {
    pub value: Option<f64>,
    pub count: usize,
}

fn subset_accuracy(predictions: &[usize], targets: &[usize], keep: impl Fn(usize) -> bool) -> SubsetAccuracy {
    let (mut hits, mut count) = (0usize, 0usize);
    for (i, (p, t)) in predictions.iter().zip(targets).enumerate() {
        if keep(i) {
            count += 1;
            hits += usize::from(p == t);
        }
    }
    SubsetAccuracy {
        value: (count > 0).then(|| hits as f64 / count as f64),
        count,
    }
}

/// Top-1 accuracy restricted to samples whose target beam differs from the last observed one.
pub fn transition_accuracy(predictions: &[usize], targets: &[usize], transitions: &[bool]) -> SubsetAccuracy {
    subset_accuracy(predictions, targets, |i| transitions[i])
}

/// Per-quadrant Top-1 accuracy.
pub fn scene_accuracy(predictions: &[usize], targets: &[usize], quadrants: &[usize]) -> [SubsetAccuracy; 4] {
    std::array::from_fn(|q| subset_accuracy(predictions, targets, |i| quadrants[i] == q))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub top1: f64,
    pub top3: f64,
    pub transition_acc: Option<f64>,
    pub scene_acc: [Option<f64>; 4],
    pub scene_counts: [usize; 4],
    pub n_total: usize,
    pub n_transition: usize,
}

impl MetricsReport {
    pub fn compute(logits: &[Vec<f32>], targets: &[usize], transitions: &[bool], quadrants: &[usize]) -> Result<Self> {
        let k3 = logits.first().map_or(1, |l| l.len().min(3));
        let preds: Vec<usize> = logits.iter().map(|l| top_k(l, 1)[0]).collect();
        let tr = transition_accuracy(&preds, targets, transitions);
        let sc = scene_accuracy(&preds, targets, quadrants);
        Ok(Self {
            top1: topk_accuracy(logits, targets, 1)?,
            top3: topk_accuracy(logits, targets, k3)?,
            transition_acc: tr.value,
            scene_acc: sc.map(|s| s.value),
            scene_counts: sc.map(|s| s.count),
            n_total: logits.len(),
            n_transition: tr.count,
        })
    }
}

/// Per-sample outputs kept for reports and diagnostics.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub logits: Vec<Vec<f32>>,
    pub targets: Vec<usize>,
    pub transitions: Vec<bool>,
    pub quadrants: Vec<usize>,
    pub selected: Vec<Option<usize>>,
}

impl Predictions {
    pub fn metrics(&self) -> Result<MetricsReport> {
        MetricsReport::compute(&self.logits, &self.targets, &self.transitions, &self.quadrants)
    }
}

/// Evaluation-mode forward pass over `records` under `mode`.
pub fn predict(model: &Model<f32>, records: &[DatasetRecord], mode: RoutingMode) -> Result<Predictions> {
    let opts = ForwardOptions::eval(mode);
    let traces: Vec<_> = records
        .par_iter()
        .map(|r| {
            let sample = Sample { x: &r.x, scene: r.scene, speed_norm: r.speed_norm };
            model.forward(&sample, &opts).map(|t| (t.logits, t.selected_expert))
        })
        .collect::<Result<_>>()?;
    let (logits, selected) = traces.into_iter().unzip();
    Ok(Predictions {
        logits,
        selected,
        targets: records.iter().map(|r| r.class_id as usize).collect(),
        transitions: records.iter().map(|r| r.is_transition()).collect(),
        quadrants: records.iter().map(|r| quadrant(r.scene, r.speed_norm)).collect(),
    })
}

pub fn evaluate(model: &Model<f32>, records: &[DatasetRecord], mode: RoutingMode) -> Result<MetricsReport> {
    predict(model, records, mode)?.metrics()
}
