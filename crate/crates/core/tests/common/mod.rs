#![allow(dead_code)]

use beamcast::frontend::Dims;
use beamcast::model::{ForwardOptions, Model, ModelConfig, ParamStore, Real, Sample, TrainMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// d = 8, T = 3, K = 6, S_w = 4, C = 4.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        cnn_channels: [2, 3, 4],
        cnn_feat_dim: 3,
        ctx_dim: 2,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        moe_layers: vec![1],
        se_reduction: 2,
        max_positions: 4,
        gate_hidden: 5,
        ..ModelConfig::default()
    }
    .resolve(
        Dims {
            frames: 3,
            subcarriers: 6,
            beams: 4,
        },
        4,
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

pub fn sample_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Vec<f32>, u8, f32) {
    let len = cfg.frames * 2 * cfg.subcarriers * cfg.beams;
    let x = normal_vec(rng, len, 1.0).into_iter().map(|v| v as f32).collect();
    (x, rng.random_range(0..2u8), rng.random::<f32>())
}

/// Re-draws every tensor (biases and norms included) so no gradient path is trivially zero.
pub fn randomize<T: Real>(params: &mut ParamStore<T>, rng: &mut ChaCha8Rng, std: f64) {
    for t in &mut params.tensors {
        let offset = if t.name.contains("gamma") { 1.0 } else { 0.0 };
        for v in &mut t.data {
            let z: f64 = StandardNormal.sample(rng);
            *v = T::from_f64(offset + std * z);
        }
    }
}

pub fn random_model(cfg: &ModelConfig, seed: u64, std: f64) -> Model<f64> {
    let mut m = Model::<f64>::new(cfg, seed).unwrap();
    randomize(&mut m.params, &mut rng(seed ^ 0xABCD), std);
    m
}

pub fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub worst: f64,
    pub worst_tensor: String,
    pub checked: usize,
    /// Coordinates whose ±ε window crosses a ReLU or max-pool kink.
    pub skipped: usize,
    pub tensors: usize,
}

fn ce_loss(m: &Model<f64>, sample: &Sample, target: usize, opts: &ForwardOptions) -> f64 {
    let mut p = m.forward(sample, opts).unwrap().logits;
    beamcast::model::ops::softmax_in_place(&mut p);
    -p[target].ln()
}

/// Per tensor, `max|a − n| / max(‖a‖∞, ‖n‖∞)`. With `filter_kinks`, a
/// coordinate is excluded when the ε and ε/2 differences disagree by more
/// than a smooth function allows at the tensor's gradient scale.
pub fn gradient_check(m: &Model<f64>, sample: &Sample, target: usize, opts: &ForwardOptions, eps: f64, filter_kinks: bool) -> GradCheck {
    let mask = TrainMask::all(m.params.tensors.len());
    let mut grads = m.params.zeros_like();
    m.forward_backward(sample, None, None, target, opts, 1.0, &mask, &mut grads).unwrap();
    let mut probe = m.clone();
    let mut out = GradCheck::default();
    for ti in 0..m.params.tensors.len() {
        let len = probe.params.get(ti).len();
        let tensor_scale = grads.get(ti).iter().fold(0.0f64, |s, a| s.max(a.abs()));
        let mut numeric = Vec::with_capacity(len);
        let mut keep = Vec::with_capacity(len);
        for j in 0..len {
            let orig = probe.params.get(ti)[j];
            let mut central = |h: f64| {
                probe.params.get_mut(ti)[j] = orig + h;
                let lp = ce_loss(&probe, sample, target, opts);
                probe.params.get_mut(ti)[j] = orig - h;
                let lm = ce_loss(&probe, sample, target, opts);
                probe.params.get_mut(ti)[j] = orig;
                (lp - lm) / (2.0 * h)
            };
            let full = central(eps);
            let smooth = !filter_kinks || {
                let half = central(eps / 2.0);
                (full - half).abs() <= 1e-5 * tensor_scale.max(1e-9)
            };
            numeric.push(full);
            keep.push(smooth);
        }
        let analytic = grads.get(ti);
        let kept: Vec<(f64, f64)> = analytic.iter().zip(&numeric).zip(&keep).filter(|(_, &k)| k).map(|((&a, &n), _)| (a, n)).collect();
        out.skipped += len - kept.len();
        out.checked += kept.len();
        out.tensors += 1;
        let scale = kept.iter().fold(0.0f64, |s, (a, n)| s.max(a.abs()).max(n.abs()));
        if scale < 1e-12 {
            continue;
        }
        let rel = kept.iter().fold(0.0f64, |s, (a, n)| s.max((a - n).abs())) / scale;
        if rel > out.worst {
            out.worst = rel;
            out.worst_tensor = m.params.tensors[ti].name.clone();
        }
    }
    out
}

pub fn smoke_sim() -> (beamcast::channel::SimConfig, beamcast::frontend::SoundingConfig) {
    let sim = beamcast::channel::SimConfig {
        num_subcarriers: 8,
        num_antennas: 16,
        seq_len: 4,
        ..Default::default()
    };
    let sounding = beamcast::frontend::SoundingConfig {
        n_rf_chains: 4,
        ..Default::default()
    };
    (sim, sounding)
}

/// Small generated dataset: T = 3, K = 8, S_w = 8.
pub fn smoke_dataset(n: usize, seed: u64) -> beamcast::frontend::DatasetContainer {
    let (sim, sounding) = smoke_sim();
    let (dims, records) = beamcast::frontend::generate_records(&sim, &sounding, seed, n).unwrap();
    beamcast::frontend::assemble_dataset(dims, records, beamcast::frontend::RareClassFilter::MinCount(0)).unwrap()
}

pub fn smoke_model(ds: &beamcast::frontend::DatasetContainer) -> ModelConfig {
    ModelConfig {
        cnn_channels: [2, 4, 4],
        cnn_feat_dim: 8,
        ctx_dim: 4,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        moe_layers: vec![1],
        se_reduction: 2,
        max_positions: 4,
        gate_hidden: 8,
        ..ModelConfig::default()
    }
    .resolve(ds.dims, ds.num_classes())
    .unwrap()
}

pub fn smoke_train(epochs: usize) -> beamcast::train::TrainConfig {
    beamcast::train::TrainConfig {
        batch_size: 16,
        max_epochs: epochs,
        patience: epochs,
        chunk_size: 4,
        ..Default::default()
    }
}

/// Brute-force recount: a target is in the top k when fewer than k logits
/// beat it, counting equal logits at smaller indices as beating it.
pub fn recount_topk(logits: &[Vec<f32>], targets: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (l, &t) in logits.iter().zip(targets) {
        let better = (0..l.len()).filter(|&j| l[j] > l[t] || (l[j] == l[t] && j < t)).count();
        if better < k {
            hits += 1;
        }
    }
    hits as f64 / logits.len() as f64
}
