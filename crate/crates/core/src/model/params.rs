//! Named parameter tensors, their layout, initialization and the parameter file.
//!
//! Parameter file layout (little-endian):
//!
//! ```text
//! magic        8 bytes "BCASTWT1"
//! version      u32     1
//! fingerprint  u64     first 8 bytes of SHA-256 over the canonical model config
//! n_tensors    u32
//! per tensor:  u32 name length, name (UTF-8), u32 rank, rank × u32 dims, f32 data
//! optional checkpoint trailer:
//!   magic "BCASTCK1", u32 stage-name length, stage name, u32 epoch, f64 validation top-1
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::real::Real;
use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Domain};

pub const PARAMS_MAGIC: &[u8; 8] = b"BCASTWT1";
pub const PARAMS_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BCASTCK1";

const TRANSFORMER_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// He-normal over the given fan-in.
    FanIn(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: &'static str,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub o_w: usize,
    pub o_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    /// One entry for a dense FFN, `n_experts` entries for an MoE layer.
    pub ffn: Vec<FfnIdx>,
    pub moe: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateIdx {
    pub w1: usize,
    pub b1: Option<usize>,
    pub w2: usize,
    pub b2: Option<usize>,
}

/// Tensor indices of every network component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub conv: [ConvIdx; 3],
    pub se: Option<(usize, usize)>,
    pub fc: usize,
    pub ctx: Option<usize>,
    pub proj: usize,
    pub pe: usize,
    pub layers: Vec<LayerIdx>,
    pub gate: Option<GateIdx>,
    pub cls: usize,
}

impl Layout {
    pub fn build(cfg: &ModelConfig) -> (Layout, Vec<TensorSpec>) {
        let mut specs: Vec<TensorSpec> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, role: &'static str, init: Init| {
            specs.push(TensorSpec { name, shape, role, init });
            specs.len() - 1
        };
        let [c1, c2, c3] = cfg.cnn_channels;
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let kernels = [(2, c1, 1, 5), (c1, c2, 5, 1), (c2, c3, 3, 3)];
        let mut conv_idx = Vec::with_capacity(3);
        for (i, (cin, cout, kh, kw)) in kernels.into_iter().enumerate() {
            let role = ["conv1 kernel", "conv2 kernel", "conv3 kernel"][i];
            let w = push(format!("cnn.conv{}.weight", i + 1), vec![cout, cin, kh, kw], role, Init::FanIn(cin * kh * kw));
            let b = push(format!("cnn.conv{}.bias", i + 1), vec![cout], "conv bias", Init::Zeros);
            conv_idx.push(ConvIdx { w, b });
        }
        let se = cfg.use_se.then(|| {
            let h = cfg.se_hidden();
            let w1 = push("cnn.se.w1".into(), vec![h, c3], "SE squeeze", Init::FanIn(c3));
            let w2 = push("cnn.se.w2".into(), vec![c3, h], "SE excitation", Init::FanIn(h));
            (w1, w2)
        });
        let fc = push("cnn.fc.weight".into(), vec![cfg.cnn_feat_dim, c3], "CNN projection", Init::FanIn(c3));
        let ctx = cfg
            .use_context
            .then(|| push("context.weight".into(), vec![cfg.ctx_dim, 2], "context projection", Init::FanIn(2)));
        let proj = push(
            "proj.weight".into(),
            vec![d, cfg.projection_input()],
            "feature projection",
            Init::Normal(TRANSFORMER_STD),
        );
        let pe = push("pos_embed".into(), vec![cfg.max_positions, d], "positional embedding", Init::Normal(TRANSFORMER_STD));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let ln1_g = push(p("ln1.gamma"), vec![d], "layer norm", Init::Ones);
            let ln1_b = push(p("ln1.beta"), vec![d], "layer norm", Init::Zeros);
            let qkv_w = push(p("attn.qkv.weight"), vec![3 * d, d], "attention QKV", Init::Normal(TRANSFORMER_STD));
            let qkv_b = push(p("attn.qkv.bias"), vec![3 * d], "attention QKV", Init::Zeros);
            let o_w = push(p("attn.out.weight"), vec![d, d], "attention output", Init::Normal(TRANSFORMER_STD));
            let o_b = push(p("attn.out.bias"), vec![d], "attention output", Init::Zeros);
            let ln2_g = push(p("ln2.gamma"), vec![d], "layer norm", Init::Ones);
            let ln2_b = push(p("ln2.beta"), vec![d], "layer norm", Init::Zeros);
            let moe = cfg.is_moe_layer(l);
            let ffn_block = |prefix: String, first: &'static str, second: &'static str, push: &mut dyn FnMut(String, Vec<usize>, &'static str, Init) -> usize| FfnIdx {
                w1: push(format!("{prefix}.w1"), vec![f, d], first, Init::Normal(TRANSFORMER_STD)),
                b1: push(format!("{prefix}.b1"), vec![f], first, Init::Zeros),
                w2: push(format!("{prefix}.w2"), vec![d, f], second, Init::Normal(TRANSFORMER_STD)),
                b2: push(format!("{prefix}.b2"), vec![d], second, Init::Zeros),
            };
            let ffn = if moe {
                (0..cfg.n_experts)
                    .map(|e| ffn_block(p(&format!("experts.{e}")), "expert first layer", "expert second layer", &mut push))
                    .collect()
            } else {
                vec![ffn_block(p("ffn"), "FFN first layer", "FFN second layer", &mut push)]
            };
            layers.push(LayerIdx { ln1_g, ln1_b, qkv_w, qkv_b, o_w, o_b, ln2_g, ln2_b, ffn, moe });
        }
        let gate = cfg.has_gate().then(|| {
            let h = cfg.gate_hidden;
            let w1 = push("gate.w1".into(), vec![h, 2], "gate first layer", Init::FanIn(2));
            let b1 = cfg.gate_bias.then(|| push("gate.b1".into(), vec![h], "gate first layer", Init::Zeros));
            let w2 = push("gate.w2".into(), vec![cfg.n_experts, h], "gate second layer", Init::Normal(TRANSFORMER_STD));
            let b2 = cfg.gate_bias.then(|| push("gate.b2".into(), vec![cfg.n_experts], "gate second layer", Init::Zeros));
            GateIdx { w1, b1, w2, b2 }
        });
        let cls = push("classifier.weight".into(), vec![cfg.num_classes, d], "classifier", Init::Normal(TRANSFORMER_STD));
        let layout = Layout {
            conv: [conv_idx[0], conv_idx[1], conv_idx[2]],
            se,
            fc,
            ctx,
            proj,
            pe,
            layers,
            gate,
            cls,
        };
        (layout, specs)
    }

    pub fn cnn_tensors(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.conv.iter().flat_map(|c| [c.w, c.b]).collect();
        if let Some((a, b)) = self.se {
            v.extend([a, b]);
        }
        v.push(self.fc);
        v
    }

    pub fn embedding_tensors(&self) -> Vec<usize> {
        let mut v = self.cnn_tensors();
        v.extend(self.ctx);
        v.extend([self.proj, self.pe]);
        v
    }

    pub fn gate_tensors(&self) -> Vec<usize> {
        self.gate
            .map(|g| [Some(g.w1), g.b1, Some(g.w2), g.b2].into_iter().flatten().collect())
            .unwrap_or_default()
    }

    pub fn attention_tensors(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.qkv_w, l.qkv_b, l.o_w, l.o_b])
            .collect()
    }

    pub fn expert_first_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.moe)
            .flat_map(|l| l.ffn.iter().flat_map(|e| [e.w1, e.b1]))
            .collect()
    }

    pub fn expert_second_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.moe)
            .flat_map(|l| l.ffn.iter().flat_map(|e| [e.w2, e.b2]))
            .collect()
    }

    /// All tensors of expert `e` in every MoE layer.
    pub fn expert_tensors(&self, e: usize) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.moe)
            .flat_map(|l| {
                let x = l.ffn[e];
                [x.w1, x.b1, x.w2, x.b2]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: &'static str,
    pub data: Vec<T>,
}

/// Ordered collection of tensors; also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn zeros(specs: &[TensorSpec]) -> Self {
        Self {
            tensors: specs
                .iter()
                .map(|s| Tensor {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    role: s.role,
                    data: vec![T::zero(); s.shape.iter().product()],
                })
                .collect(),
        }
    }

    /// Deterministic initialization; each tensor draws from its own stream.
    pub fn init(specs: &[TensorSpec], seed: u64) -> Self {
        let mut store = Self::zeros(specs);
        for (i, (t, s)) in store.tensors.iter_mut().zip(specs).enumerate() {
            let mut rng = stream_rng(seed, Domain::Init, i as u64);
            let std = match s.init {
                Init::Zeros => continue,
                Init::Ones => {
                    t.data.iter_mut().for_each(|v| *v = T::one());
                    continue;
                }
                Init::Normal(std) => std,
                Init::FanIn(fan) => (2.0 / fan.max(1) as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut t.data {
                *v = T::from_f64(normal.sample(&mut rng));
            }
        }
        store
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    role: t.role,
                    data: vec![T::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    pub fn get(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.tensors[i].data
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// `self += other`, tensor by tensor, in index order.
    pub fn add_assign(&mut self, other: &ParamStore<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn convert<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    role: t.role,
                    data: t.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn l2_norm(&self, i: usize) -> f64 {
        self.get(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    /// Exact byte image of tensor `i` as `f32`.
    pub fn tensor_bytes(&self, i: usize) -> Vec<u8> {
        self.get(i)
            .iter()
            .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
            .collect()
    }
}

pub fn fingerprint(cfg: &ModelConfig) -> u64 {
    let digest = Sha256::digest(cfg.canonical_string().as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Stage metadata appended to checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub stage: String,
    pub epoch: u32,
    pub val_top1: f64,
}

/// Raw contents of a parameter file before validation against a config.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub fingerprint: u64,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub meta: Option<CheckpointMeta>,
}

pub fn encode_params(params: &ParamStore<f32>, fp: u64, meta: Option<&CheckpointMeta>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + params.count() * 4 + params.tensors.len() * 48);
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&fp.to_le_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for t in &params.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(m) = meta {
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(m.stage.len() as u32).to_le_bytes());
        out.extend_from_slice(m.stage.as_bytes());
        out.extend_from_slice(&m.epoch.to_le_bytes());
        out.extend_from_slice(&m.val_top1.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8], origin: &Path) -> Result<ParamFile> {
    let fail = |message: &str| Error::Format {
        path: origin.to_path_buf(),
        message: message.to_string(),
    };
    let mut r = ByteReader::new(bytes);
    let truncated = || fail("truncated parameter file");
    if r.take(8).ok_or_else(truncated)? != PARAMS_MAGIC {
        return Err(fail("not a parameter file (bad magic)"));
    }
    if r.u32().ok_or_else(truncated)? != PARAMS_VERSION {
        return Err(fail("unsupported parameter file version"));
    }
    let fingerprint = r.u64().ok_or_else(truncated)?;
    let n = r.u32().ok_or_else(truncated)? as usize;
    let mut tensors = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = String::from_utf8(r.take(len).ok_or_else(truncated)?.to_vec())
            .map_err(|_| fail("tensor name is not UTF-8"))?;
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|v| v as usize).ok_or_else(truncated))
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    let meta = if r.remaining() == 0 {
        None
    } else {
        if r.take(8).ok_or_else(truncated)? != CHECKPOINT_MAGIC {
            return Err(fail("trailing bytes after tensors"));
        }
        let len = r.u32().ok_or_else(truncated)? as usize;
        let stage = String::from_utf8(r.take(len).ok_or_else(truncated)?.to_vec())
            .map_err(|_| fail("stage name is not UTF-8"))?;
        let epoch = r.u32().ok_or_else(truncated)?;
        let val_top1 = r.f64().ok_or_else(truncated)?;
        if r.remaining() != 0 {
            return Err(fail("trailing bytes after checkpoint trailer"));
        }
        Some(CheckpointMeta { stage, epoch, val_top1 })
    };
    Ok(ParamFile {
        fingerprint,
        tensors,
        meta,
    })
}

pub fn read_param_file(path: &Path) -> Result<ParamFile> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, path)
}

/// Checks a decoded file against the expected tensor list; shape mismatches
/// are reported before fingerprint mismatches so the offending tensor is named.
pub fn params_from_file(file: ParamFile, specs: &[TensorSpec], expected_fp: u64) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::<f32>::zeros(specs);
    for (i, spec) in specs.iter().enumerate() {
        let Some((name, shape, data)) = file.tensors.get(i) else {
            return Err(Error::TensorShape {
                name: spec.name.clone(),
                role: spec.role,
                expected: spec.shape.clone(),
                found: vec![],
            });
        };
        if name != &spec.name || shape != &spec.shape {
            return Err(Error::TensorShape {
                name: spec.name.clone(),
                role: spec.role,
                expected: spec.shape.clone(),
                found: shape.clone(),
            });
        }
        store.tensors[i].data.copy_from_slice(data);
    }
    if file.tensors.len() != specs.len() {
        return Err(Error::Shape(format!(
            "parameter file holds {} tensors, config expects {}",
            file.tensors.len(),
            specs.len()
        )));
    }
    if file.fingerprint != expected_fp {
        return Err(Error::Fingerprint {
            checkpoint: file.fingerprint,
            config: expected_fp,
        });
    }
    if !store.all_finite() {
        return Err(Error::Shape("parameter file contains non-finite values".into()));
    }
    Ok(store)
}

/// Draws a standard-normal test vector.
pub fn random_vector<R: Rng + ?Sized, T: Real>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::from_f64(normal.sample(rng))).collect()
}
