//! Expert routing rules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ops::argmax;
use super::real::Real;
use crate::error::{Error, Result};
use crate::frontend::quadrant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Expert fixed by the ground-truth scene/speed quadrant.
    HardMask,
    /// Gate-weighted sum of every expert.
    SoftDense,
    /// Only the gate's highest-weight expert.
    Top1,
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMode::HardMask => "hard_mask",
            RoutingMode::SoftDense => "soft_dense",
            RoutingMode::Top1 => "top1",
        })
    }
}

impl FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard_mask" | "hard" => Ok(RoutingMode::HardMask),
            "soft_dense" | "soft" => Ok(RoutingMode::SoftDense),
            "top1" => Ok(RoutingMode::Top1),
            other => Err(Error::Config(format!("unknown routing mode '{other}'"))),
        }
    }
}

/// Quadrant expert for scene `s` and normalized speed `v̄`:
/// LOS-L = 0, LOS-H = 1, NLOS-L = 2, NLOS-H = 3.
pub fn hard_assignment(scene: u8, speed_norm: f32) -> usize {
    quadrant(scene, speed_norm)
}

/// Per-sample routing instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDirective<T> {
    pub mode: RoutingMode,
    pub hard_mask: Option<usize>,
    pub soft_weights: Option<Vec<T>>,
}

impl<T: Real> RoutingDirective<T> {
    pub fn hard(expert: usize) -> Self {
        Self {
            mode: RoutingMode::HardMask,
            hard_mask: Some(expert),
            soft_weights: None,
        }
    }

    pub fn soft(weights: Vec<T>) -> Self {
        Self {
            mode: RoutingMode::SoftDense,
            hard_mask: None,
            soft_weights: Some(weights),
        }
    }

    pub fn top1(weights: Vec<T>) -> Self {
        Self {
            mode: RoutingMode::Top1,
            hard_mask: None,
            soft_weights: Some(weights),
        }
    }

    pub fn validate(&self, n_experts: usize) -> Result<()> {
        match self.mode {
            RoutingMode::HardMask => match self.hard_mask {
                Some(e) if e < n_experts => Ok(()),
                Some(e) => Err(Error::Routing(format!("expert index {e} out of range 0..{n_experts}"))),
                None => Err(Error::Routing("hard-mask routing needs an expert index".into())),
            },
            RoutingMode::SoftDense | RoutingMode::Top1 => {
                let w = self
                    .soft_weights
                    .as_ref()
                    .ok_or_else(|| Error::Routing(format!("{} routing needs gate weights", self.mode)))?;
                if w.len() != n_experts {
                    return Err(Error::Routing(format!("{} weights for {n_experts} experts", w.len())));
                }
                let sum: f64 = w.iter().map(|v| v.as_f64()).sum();
                if w.iter().any(|v| !(v.as_f64() >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Routing(format!("weights are not on the simplex (sum {sum})")));
                }
                Ok(())
            }
        }
    }

    /// `(expert, mixing weight)` pairs that are evaluated.
    pub fn active(&self) -> Vec<(usize, T)> {
        match self.mode {
            RoutingMode::HardMask => vec![(self.hard_mask.expect("validated"), T::one())],
            RoutingMode::Top1 => vec![(argmax(self.soft_weights.as_ref().expect("validated")), T::one())],
            RoutingMode::SoftDense => self
                .soft_weights
                .as_ref()
                .expect("validated")
                .iter()
                .copied()
                .enumerate()
                .collect(),
        }
    }

    pub fn selected(&self) -> Option<usize> {
        match self.mode {
            RoutingMode::SoftDense => None,
            _ => Some(self.active()[0].0),
        }
    }
}
