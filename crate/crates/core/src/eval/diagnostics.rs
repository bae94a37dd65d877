//! Gate-weight heatmaps and the expert-collapse check.

use std::fmt;

use crate::frontend::{quadrant, DatasetRecord};
use crate::model::ops::argmax;
use crate::model::{hard_assignment, Model};

/// Mean gate weights per scene quadrant.
#[derive(Debug, Clone, PartialEq)]
pub struct GateHeatmap {
    /// Row `q` is `None` when no sample falls in quadrant `q`.
    pub rows: [Option<Vec<f64>>; 4],
    pub counts: [usize; 4],
    /// Fraction of samples whose gate argmax equals the hard quadrant assignment.
    pub agreement: Option<f64>,
}

impl GateHeatmap {
    /// Builds a heatmap from `(scene, speed_norm)` pairs and a weight function.
    pub fn from_weights(contexts: impl IntoIterator<Item = (u8, f32)>, weights: impl Fn(u8, f32) -> Vec<f64>) -> Self {
        let mut sums: [Vec<f64>; 4] = Default::default();
        let mut counts = [0usize; 4];
        let (mut agree, mut total) = (0usize, 0usize);
        for (s, v) in contexts {
            let w = weights(s, v);
            let q = quadrant(s, v);
            if sums[q].is_empty() {
                sums[q] = vec![0.0; w.len()];
            }
            for (acc, x) in sums[q].iter_mut().zip(&w) {
                *acc += x;
            }
            counts[q] += 1;
            total += 1;
            agree += usize::from(argmax(&w) == hard_assignment(s, v));
        }
        let rows = std::array::from_fn(|q| {
            (counts[q] > 0).then(|| sums[q].iter().map(|x| x / counts[q] as f64).collect())
        });
        Self {
            rows,
            counts,
            agreement: (total > 0).then(|| agree as f64 / total as f64),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.rows.iter().flatten().map(Vec::len).next().unwrap_or(0)
    }

    /// `quadrant,count,w0,…` with `undefined` cells for empty rows.
    pub fn to_csv(&self) -> String {
        let e = self.n_experts();
        let mut s = String::from("quadrant,count");
        for i in 0..e {
            s.push_str(&format!(",expert{i}"));
        }
        s.push('\n');
        for (q, name) in super::metrics::QUADRANT_NAMES.iter().enumerate() {
            s.push_str(&format!("{name},{}", self.counts[q]));
            match &self.rows[q] {
                Some(r) => r.iter().for_each(|w| s.push_str(&format!(",{w}"))),
                None => (0..e).for_each(|_| s.push_str(",undefined")),
            }
            s.push('\n');
        }
        s
    }
}

/// Gate weights of `model` averaged over `records`.
pub fn gate_heatmap(model: &Model<f32>, records: &[DatasetRecord]) -> GateHeatmap {
    GateHeatmap::from_weights(records.iter().map(|r| (r.scene, r.speed_norm)), |s, v| {
        model.gate_forward(s, v).into_iter().map(f64::from).collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Collapsed,
    Intermediate,
    Specialized,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Collapsed => "collapsed",
            Verdict::Intermediate => "intermediate",
            Verdict::Specialized => "specialized",
        })
    }
}

impl std::str::FromStr for Verdict {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "collapsed" => Ok(Verdict::Collapsed),
            "intermediate" => Ok(Verdict::Intermediate),
            "specialized" => Ok(Verdict::Specialized),
            other => Err(crate::Error::Config(format!("unknown verdict '{other}'"))),
        }
    }
}

pub const COLLAPSE_BELOW: f64 = 0.10;
pub const SPECIALIZED_ABOVE: f64 = 0.50;

/// Largest within-row weight range over the populated quadrants.
pub fn collapse_diagnostic(heatmap: &GateHeatmap) -> (f64, Verdict) {
    let spread = heatmap
        .rows
        .iter()
        .flatten()
        .map(|r| {
            let max = r.iter().copied().fold(f64::MIN, f64::max);
            let min = r.iter().copied().fold(f64::MAX, f64::min);
            max - min
        })
        .fold(0.0, f64::max);
    let verdict = if spread < COLLAPSE_BELOW {
        Verdict::Collapsed
    } else if spread > SPECIALIZED_ABOVE {
        Verdict::Specialized
    } else {
        Verdict::Intermediate
    };
    (spread, verdict)
}
