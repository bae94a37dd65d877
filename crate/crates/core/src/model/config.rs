//! Network hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::Dims;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of most recent frames fed to the network; 0 uses every observed frame.
    pub frame_window: usize,
    pub cnn_channels: [usize; 3],
    pub cnn_feat_dim: usize,
    pub ctx_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub moe_layers: Vec<usize>,
    pub ffn_expansion: usize,
    pub dropout_expert: f64,
    pub dropout_head: f64,
    pub se_reduction: usize,
    pub max_positions: usize,
    pub gate_hidden: usize,
    pub gate_bias: bool,
    pub use_se: bool,
    pub use_context: bool,
    /// Replace the learned gate by uniform weights.
    pub uniform_gate: bool,

    /// Filled from the dataset by [`ModelConfig::resolve`].
    #[serde(skip)]
    pub frames: usize,
    #[serde(skip)]
    pub subcarriers: usize,
    #[serde(skip)]
    pub beams: usize,
    #[serde(skip)]
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_window: 0,
            cnn_channels: [32, 64, 128],
            cnn_feat_dim: 64,
            ctx_dim: 8,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            n_experts: 4,
            moe_layers: vec![1, 2, 3],
            ffn_expansion: 4,
            dropout_expert: 0.1,
            dropout_head: 0.2,
            se_reduction: 16,
            max_positions: 16,
            gate_hidden: 32,
            gate_bias: true,
            use_se: true,
            use_context: true,
            uniform_gate: false,
            frames: 0,
            subcarriers: 0,
            beams: 0,
            num_classes: 0,
        }
    }
}

impl ModelConfig {
    /// Wide full-size widths (d = 768, 12 heads).
    pub fn wide_shape() -> Self {
        Self {
            cnn_feat_dim: 256,
            ctx_dim: 32,
            d_model: 768,
            n_heads: 12,
            ..Self::default()
        }
    }

    /// Binds data-dependent sizes.
    pub fn resolve(&self, dims: Dims, num_classes: usize) -> Result<ModelConfig> {
        let mut cfg = self.clone();
        if cfg.frame_window > dims.frames {
            return Err(Error::Config(format!(
                "model.frame_window {} exceeds the {} observed frames",
                cfg.frame_window, dims.frames
            )));
        }
        cfg.frames = if cfg.frame_window == 0 {
            dims.frames
        } else {
            cfg.frame_window
        };
        cfg.subcarriers = dims.subcarriers;
        cfg.beams = dims.beams;
        cfg.num_classes = num_classes;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn is_resolved(&self) -> bool {
        self.frames > 0 && self.subcarriers > 0 && self.beams > 0 && self.num_classes > 0
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_expansion * self.d_model
    }

    pub fn se_hidden(&self) -> usize {
        self.cnn_channels[2] / self.se_reduction.max(1)
    }

    pub fn projection_input(&self) -> usize {
        self.cnn_feat_dim + if self.use_context { self.ctx_dim } else { 0 }
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.moe_layers.contains(&layer)
    }

    pub fn has_gate(&self) -> bool {
        !self.uniform_gate && !self.moe_layers.is_empty()
    }

    /// Checks structural invariants. Data-dependent sizes are checked only
    /// once resolved.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.cnn_channels.contains(&0) || self.cnn_feat_dim == 0 || self.ffn_expansion == 0 {
            return fail("channel and feature widths must be positive".into());
        }
        if self.use_context && self.ctx_dim == 0 {
            return fail("ctx_dim must be positive when the context encoder is used".into());
        }
        if self.use_se && self.se_hidden() == 0 {
            return fail(format!(
                "SE bottleneck {}/{} is empty",
                self.cnn_channels[2], self.se_reduction
            ));
        }
        if self.n_experts == 0 {
            return fail("n_experts must be positive".into());
        }
        if let Some(&l) = self.moe_layers.iter().find(|&&l| l >= self.n_layers) {
            return fail(format!("moe layer {l} is outside 0..{}", self.n_layers));
        }
        let mut sorted = self.moe_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.moe_layers.len() {
            return fail("moe_layers contains duplicates".into());
        }
        if self.has_gate() && self.gate_hidden == 0 {
            return fail("gate_hidden must be positive".into());
        }
        for (name, p) in [("dropout_expert", self.dropout_expert), ("dropout_head", self.dropout_head)] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1)"));
            }
        }
        if self.frame_window > self.max_positions || self.frames > self.max_positions {
            return fail(format!(
                "sequence length exceeds max_positions {}",
                self.max_positions
            ));
        }
        if self.subcarriers > 0 && (self.subcarriers < 2 || self.beams < 2) {
            return fail(format!(
                "K = {} and S_w = {} are too small for 2×2 pooling",
                self.subcarriers, self.beams
            ));
        }
        Ok(())
    }

    /// Documented parameter count.
    pub fn census(&self) -> usize {
        let [c1, c2, c3] = self.cnn_channels;
        let d = self.d_model;
        let mut n = (c1 * 2 * 5 + c1) + (c2 * c1 * 5 + c2) + (c3 * c2 * 9 + c3);
        if self.use_se {
            n += 2 * c3 * self.se_hidden();
        }
        n += self.cnn_feat_dim * c3;
        if self.use_context {
            n += self.ctx_dim * 2;
        }
        n += d * self.projection_input();
        n += self.max_positions * d;
        let ffn = 2 * self.ffn_dim() * d + self.ffn_dim() + d;
        for l in 0..self.n_layers {
            n += 4 * d + 4 * d * d + 4 * d;
            n += if self.is_moe_layer(l) { self.n_experts * ffn } else { ffn };
        }
        if self.has_gate() {
            let h = self.gate_hidden;
            n += h * 2 + self.n_experts * h;
            if self.gate_bias {
                n += h + self.n_experts;
            }
        }
        n + self.num_classes * d
    }

    /// Stable textual form hashed into parameter-file fingerprints.
    pub fn canonical_string(&self) -> String {
        format!(
            "frames={};K={};S_w={};C={};cnn={:?};feat={};ctx={};d={};layers={};heads={};experts={};moe={:?};\
             expansion={};se_r={};max_pos={};gate_hidden={};gate_bias={};use_se={};use_context={};uniform_gate={}",
            self.frames,
            self.subcarriers,
            self.beams,
            self.num_classes,
            self.cnn_channels,
            self.cnn_feat_dim,
            self.ctx_dim,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.n_experts,
            self.moe_layers,
            self.ffn_expansion,
            self.se_reduction,
            self.max_positions,
            self.gate_hidden,
            self.gate_bias,
            self.use_se,
            self.use_context,
            self.uniform_gate,
        )
    }
}
