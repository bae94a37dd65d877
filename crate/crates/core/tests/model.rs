mod common;

use beamcast::model::ops::{gelu, softmax_in_place};
use beamcast::model::params::fingerprint;
use beamcast::model::{
    hard_assignment, load_model, save_model, ForwardOptions, Model, ModelConfig, RoutingDirective, RoutingMode,
    Sample, TrainMask,
};
use beamcast::Error;
use common::*;

fn eval(mode: RoutingMode) -> ForwardOptions {
    ForwardOptions::eval(mode)
}

fn train(mode: RoutingMode, key: u64) -> ForwardOptions {
    ForwardOptions {
        mode,
        training: true,
        dropout_seed: 99,
        sample_key: key,
    }
}

// ---- independent reference implementations ---------------------------------

fn ref_conv(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], b: &[f64], cout: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut y = vec![0.0; cout * h * w];
    for co in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut acc = b[co];
                for ci in 0..cin {
                    for a in 0..kh {
                        for c in 0..kw {
                            let si = i as isize + a as isize - ph;
                            let sj = j as isize + c as isize - pw;
                            if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                                acc += wt[((co * cin + ci) * kh + a) * kw + c] * x[(ci * h + si as usize) * w + sj as usize];
                            }
                        }
                    }
                }
                y[(co * h + i) * w + j] = acc.max(0.0);
            }
        }
    }
    y
}

/// Frame-by-frame CNN with plain loops.
fn ref_cnn(m: &Model<f64>, frame: &[f64]) -> Vec<f64> {
    let cfg = &m.cfg;
    let (h, w) = (cfg.subcarriers, cfg.beams);
    let [c1, c2, c3] = cfg.cnn_channels;
    let l = &m.layout;
    let p = |i: usize| m.params.get(i).to_vec();
    let y1 = ref_conv(frame, 2, h, w, &p(l.conv[0].w), &p(l.conv[0].b), c1, 1, 5);
    let y2 = ref_conv(&y1, c1, h, w, &p(l.conv[1].w), &p(l.conv[1].b), c2, 5, 1);
    let mut y3 = ref_conv(&y2, c2, h, w, &p(l.conv[2].w), &p(l.conv[2].b), c3, 3, 3);
    if let Some((w1, w2)) = l.se {
        let (w1, w2) = (p(w1), p(w2));
        let r = cfg.se_hidden();
        let z: Vec<f64> = (0..c3).map(|c| y3[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
        let a: Vec<f64> = (0..r).map(|i| (0..c3).map(|c| w1[i * c3 + c] * z[c]).sum::<f64>().max(0.0)).collect();
        for c in 0..c3 {
            let s: f64 = (0..r).map(|i| w2[c * r + i] * a[i]).sum();
            let g = 1.0 / (1.0 + (-s).exp());
            y3[c * h * w..(c + 1) * h * w].iter_mut().for_each(|v| *v *= g);
        }
    }
    let (ho, wo) = (h / 2, w / 2);
    let gap: Vec<f64> = (0..c3)
        .map(|c| {
            let mut s = 0.0;
            for i in 0..ho {
                for j in 0..wo {
                    let at = |a: usize, b: usize| y3[(c * h + 2 * i + a) * w + 2 * j + b];
                    s += at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                }
            }
            s / (ho * wo) as f64
        })
        .collect();
    let fc = p(l.fc);
    (0..cfg.cnn_feat_dim).map(|o| (0..c3).map(|c| fc[o * c3 + c] * gap[c]).sum()).collect()
}

fn ref_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| g[i] * (v - mean) / (var + 1e-5).sqrt() + b[i]).collect()
}

fn matvec(w: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum()).collect()
}

// ---- CNN and SE ---------------------------------------------------------------

#[test]
fn zero_frame_with_zero_biases_encodes_to_zero() {
    let cfg = tiny_config();
    let m = Model::<f64>::new(&cfg, 1).unwrap();
    let frames = vec![0.0; cfg.frames * 2 * cfg.subcarriers * cfg.beams];
    assert!(m.cnn_encode(&frames, cfg.frames).iter().all(|&v| v == 0.0));
}

#[test]
fn cnn_output_length_does_not_depend_on_frame_size() {
    for (k, s) in [(6, 4), (8, 8), (5, 7), (16, 32)] {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, cnn_channels: [2, 3, 4], se_reduction: 2, ..ModelConfig::default() }
            .resolve(beamcast::frontend::Dims { frames: 2, subcarriers: k, beams: s }, 3)
            .unwrap();
        let m = Model::<f64>::new(&cfg, 2).unwrap();
        let frames = normal_vec(&mut rng(k as u64), 2 * 2 * k * s, 1.0);
        assert_eq!(m.cnn_encode(&frames, 2).len(), 2 * cfg.cnn_feat_dim);
    }
}

#[test]
fn cnn_matches_direct_convolution_reference() {
    let cfg = tiny_config();
    for seed in 0..5 {
        let m = random_model(&cfg, seed, 0.5);
        let fl = 2 * cfg.subcarriers * cfg.beams;
        let frames = normal_vec(&mut rng(seed + 100), cfg.frames * fl, 1.0);
        let got = m.cnn_encode(&frames, cfg.frames);
        for t in 0..cfg.frames {
            let want = ref_cnn(&m, &frames[t * fl..(t + 1) * fl]);
            let g = &got[t * cfg.cnn_feat_dim..(t + 1) * cfg.cnn_feat_dim];
            for (a, b) in g.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn se_with_zero_weights_halves_the_map() {
    let cfg = tiny_config();
    let mut m = Model::<f64>::new(&cfg, 3).unwrap();
    let (w1, w2) = m.layout.se.unwrap();
    m.params.get_mut(w1).fill(0.0);
    m.params.get_mut(w2).fill(0.0);
    let fmap = normal_vec(&mut rng(4), 4 * 2 * 6, 1.0);
    let out = m.se_recalibrate(&fmap, 4, 2, 6);
    for (a, b) in out.iter().zip(&fmap) {
        assert_eq!(*a, b / 2.0);
    }
    assert!(m.se_recalibrate(&vec![0.0; 48], 4, 2, 6).iter().all(|&v| v == 0.0));
}

#[test]
fn se_matches_scalar_formula() {
    let cfg = tiny_config();
    let m = random_model(&cfg, 5, 0.7);
    let (c, n, plane) = (4, 2, 6);
    let fmap = normal_vec(&mut rng(6), c * n * plane, 1.0);
    let got = m.se_recalibrate(&fmap, c, n, plane);
    let (w1, w2) = m.layout.se.unwrap();
    let (w1, w2) = (m.params.get(w1), m.params.get(w2));
    let r = cfg.se_hidden();
    for img in 0..n {
        let z: Vec<f64> = (0..c).map(|ch| fmap[(ch * n + img) * plane..(ch * n + img + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
        let a: Vec<f64> = (0..r).map(|i| (0..c).map(|ch| w1[i * c + ch] * z[ch]).sum::<f64>().max(0.0)).collect();
        for ch in 0..c {
            let g = 1.0 / (1.0 + (-(0..r).map(|i| w2[ch * r + i] * a[i]).sum::<f64>()).exp());
            assert!(g > 0.0 && g < 1.0);
            for k in 0..plane {
                let i = (ch * n + img) * plane + k;
                assert!((got[i] - fmap[i] * g).abs() < 1e-6);
            }
        }
    }
}

// ---- context, gate, embedding -------------------------------------------------

#[test]
fn context_encoder_is_linear_without_bias() {
    let cfg = tiny_config();
    let m = random_model(&cfg, 7, 1.0);
    let w = m.params.get(m.layout.ctx.unwrap());
    assert!(m.context_encode(0, 0.0).iter().all(|&v| v == 0.0));
    let c1: Vec<f64> = (0..cfg.ctx_dim).map(|i| w[i * 2]).collect();
    let c2: Vec<f64> = (0..cfg.ctx_dim).map(|i| w[i * 2 + 1]).collect();
    assert_eq!(m.context_encode(1, 0.0), c1);
    let mixed = m.context_encode(1, 0.5);
    for i in 0..cfg.ctx_dim {
        assert!((mixed[i] - (c1[i] + 0.5 * c2[i])).abs() < 1e-12);
    }
}

#[test]
fn gate_examples() {
    let cfg = tiny_config();
    let mut m = Model::<f64>::new(&cfg, 8).unwrap();
    let g = m.layout.gate.unwrap();
    m.params.get_mut(g.w1).fill(0.0);
    m.params.get_mut(g.w2).fill(0.0);
    assert_eq!(m.gate_forward(1, 0.3), vec![0.25; 4]);
    let rm = random_model(&cfg, 9, 1.0);
    for s in 0..2u8 {
        for v in [0.0f32, 0.2, 0.5, 0.77, 1.0] {
            let w = rm.gate_forward(s, v);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-7);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn gate_logits_ten_zero_zero_zero_saturate() {
    let cfg = tiny_config();
    let mut m = Model::<f64>::new(&cfg, 8).unwrap();
    let g = m.layout.gate.unwrap();
    m.params.get_mut(g.w1).fill(0.0);
    m.params.get_mut(g.w2).fill(0.0);
    m.params.get_mut(g.b2.unwrap()).copy_from_slice(&[10.0, 0.0, 0.0, 0.0]);
    let w = m.gate_forward(1, 0.9);
    let e10 = 10f64.exp();
    assert!((w[0] - e10 / (e10 + 3.0)).abs() < 1e-12, "{w:?}");
    assert!(w[0] > 0.9998);
}

#[test]
fn embedding_examples() {
    let cfg = tiny_config();
    let mut m = random_model(&cfg, 10, 0.5);
    let n = cfg.frames;
    let feats = normal_vec(&mut rng(11), n * cfg.cnn_feat_dim, 1.0);
    let ctx = normal_vec(&mut rng(12), cfg.ctx_dim, 1.0);
    let pin = cfg.projection_input();
    let proj = m.params.get(m.layout.proj).to_vec();
    let h0 = m.embed_sequence(&feats, &ctx, n).unwrap();
    let pe = m.params.get(m.layout.pe).to_vec();
    for t in 0..n {
        let mut z = feats[t * cfg.cnn_feat_dim..(t + 1) * cfg.cnn_feat_dim].to_vec();
        z.extend(&ctx);
        assert_eq!(z.len(), pin);
        let want = matvec(&proj, cfg.d_model, &z);
        for j in 0..cfg.d_model {
            assert!((h0[t * cfg.d_model + j] - want[j] - pe[t * cfg.d_model + j]).abs() < 1e-6);
        }
    }
    // Identical frames are told apart by the positional rows.
    let same: Vec<f64> = (0..n).flat_map(|_| feats[..cfg.cnn_feat_dim].to_vec()).collect();
    let h = m.embed_sequence(&same, &ctx, n).unwrap();
    assert_ne!(h[..cfg.d_model], h[cfg.d_model..2 * cfg.d_model]);
    m.params.get_mut(m.layout.pe).fill(0.0);
    let h = m.embed_sequence(&same, &ctx, n).unwrap();
    assert_eq!(h[..cfg.d_model], h[cfg.d_model..2 * cfg.d_model]);
    assert!(m.embed_sequence(&vec![0.0; 5 * cfg.cnn_feat_dim], &ctx, 5).is_err());
}

// ---- experts, MoE, transformer, classifier -------------------------------------

#[test]
fn expert_examples() {
    let cfg = tiny_config();
    let m = Model::<f64>::new(&cfg, 13).unwrap();
    let zero = vec![0.0; 2 * cfg.d_model];
    assert!(m.expert_forward(&zero, 1, 2, &eval(RoutingMode::SoftDense)).iter().all(|&v| v == 0.0));
    let rm = random_model(&cfg, 14, 0.5);
    let x = normal_vec(&mut rng(15), 2 * cfg.d_model, 1.0);
    let a = rm.expert_forward(&x, 1, 2, &eval(RoutingMode::SoftDense));
    let b = rm.expert_forward(&x, 1, 2, &eval(RoutingMode::SoftDense));
    assert_eq!(a, b);
    let idx = rm.layout.layers[1].ffn[2];
    let (w1, b1, w2, b2) = (rm.params.get(idx.w1), rm.params.get(idx.b1), rm.params.get(idx.w2), rm.params.get(idx.b2));
    let f = cfg.ffn_dim();
    for r in 0..2 {
        let xr = &x[r * cfg.d_model..(r + 1) * cfg.d_model];
        let hidden: Vec<f64> = matvec(w1, f, xr).iter().zip(b1).map(|(u, b)| {
            let z = u + b;
            0.5 * z * (1.0 + libm::erf(z / 2f64.sqrt()))
        }).collect();
        let out: Vec<f64> = matvec(w2, cfg.d_model, &hidden).iter().zip(b2).map(|(a, b)| a + b).collect();
        assert!(max_abs_diff(&a[r * cfg.d_model..(r + 1) * cfg.d_model], &out) < 1e-6);
    }
    assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
}

#[test]
fn moe_examples() {
    let cfg = tiny_config();
    let m = random_model(&cfg, 16, 0.5);
    let x = normal_vec(&mut rng(17), cfg.frames * cfg.d_model, 1.0);
    let o = eval(RoutingMode::SoftDense);
    for k in 0..4 {
        let mut w = vec![0.0; 4];
        w[k] = 1.0;
        let soft = m.moe_ffn(&x, 1, &RoutingDirective::soft(w.clone()), &o).unwrap();
        let top = m.moe_ffn(&x, 1, &RoutingDirective::top1(w), &o).unwrap();
        assert!(max_abs_diff(&soft, &top) <= 1e-6);
    }
    let uniform = m.moe_ffn(&x, 1, &RoutingDirective::soft(vec![0.25; 4]), &o).unwrap();
    let mut mean = vec![0.0; x.len()];
    for e in 0..4 {
        for (acc, v) in mean.iter_mut().zip(m.expert_forward(&x, 1, e, &o)) {
            *acc += v / 4.0;
        }
    }
    assert!(max_abs_diff(&uniform, &mean) < 1e-12);

    // Identical experts make the mixture independent of the weights.
    let mut same = m.clone();
    let first = same.layout.layers[1].ffn[0];
    for e in 1..4 {
        let idx = same.layout.layers[1].ffn[e];
        for (src, dst) in [(first.w1, idx.w1), (first.b1, idx.b1), (first.w2, idx.w2), (first.b2, idx.b2)] {
            let v = same.params.get(src).to_vec();
            same.params.get_mut(dst).copy_from_slice(&v);
        }
    }
    let a = same.moe_ffn(&x, 1, &RoutingDirective::soft(vec![0.7, 0.1, 0.1, 0.1]), &o).unwrap();
    let b = same.moe_ffn(&x, 1, &RoutingDirective::soft(vec![0.1, 0.2, 0.3, 0.4]), &o).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-12);
    assert!(m.moe_ffn(&x, 1, &RoutingDirective::hard(7), &o).is_err());
}

#[test]
fn single_frame_transformer_is_finite() {
    let mut cfg = tiny_config();
    cfg.frames = 1;
    let m = random_model(&cfg, 18, 0.5);
    let h0 = normal_vec(&mut rng(19), cfg.d_model, 1.0);
    let h = m.transformer_forward(&h0, &RoutingDirective::soft(vec![0.25; 4]), &eval(RoutingMode::SoftDense)).unwrap();
    assert!(h.iter().all(|v| v.is_finite()));
}

#[test]
fn transformer_matches_step_by_step_reference() {
    let cfg = ModelConfig { n_heads: 1, n_layers: 1, moe_layers: vec![], ..tiny_config() };
    let cfg = cfg.resolve(beamcast::frontend::Dims { frames: 3, subcarriers: 6, beams: 4 }, 4).unwrap();
    let m = random_model(&cfg, 20, 0.4);
    let d = cfg.d_model;
    let h0 = normal_vec(&mut rng(21), 3 * d, 1.0);
    let got = m.transformer_forward(&h0, &RoutingDirective::soft(vec![0.25; 4]), &eval(RoutingMode::SoftDense)).unwrap();
    let li = &m.layout.layers[0];
    let p = |i: usize| m.params.get(i).to_vec();
    let rows: Vec<Vec<f64>> = (0..3).map(|t| h0[t * d..(t + 1) * d].to_vec()).collect();
    let ln1: Vec<Vec<f64>> = rows.iter().map(|r| ref_layer_norm(r, &p(li.ln1_g), &p(li.ln1_b))).collect();
    let qkv: Vec<Vec<f64>> = ln1
        .iter()
        .map(|r| matvec(&p(li.qkv_w), 3 * d, r).iter().zip(p(li.qkv_b)).map(|(a, b)| a + b).collect())
        .collect();
    let mut mid = Vec::new();
    for t in 0..3 {
        let mut scores: Vec<f64> = (0..=t)
            .map(|u| (0..d).map(|j| qkv[t][j] * qkv[u][d + j]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        softmax_in_place(&mut scores);
        let ctx: Vec<f64> = (0..d).map(|j| (0..=t).map(|u| scores[u] * qkv[u][2 * d + j]).sum()).collect();
        let o: Vec<f64> = matvec(&p(li.o_w), d, &ctx).iter().zip(p(li.o_b)).map(|(a, b)| a + b).collect();
        mid.push(rows[t].iter().zip(&o).map(|(a, b)| a + b).collect::<Vec<f64>>());
    }
    let f = li.ffn[0];
    for t in 0..3 {
        let x = ref_layer_norm(&mid[t], &p(li.ln2_g), &p(li.ln2_b));
        let hidden: Vec<f64> = matvec(&p(f.w1), cfg.ffn_dim(), &x).iter().zip(p(f.b1)).map(|(a, b)| gelu(a + b)).collect();
        let out: Vec<f64> = matvec(&p(f.w2), d, &hidden).iter().zip(p(f.b2)).map(|(a, b)| a + b).collect();
        for j in 0..d {
            let want = mid[t][j] + out[j];
            assert!((got[t * d + j] - want).abs() <= 1e-5 * want.abs().max(1.0));
        }
    }
}

#[test]
fn classifier_examples() {
    let cfg = tiny_config();
    let mut m = random_model(&cfg, 22, 0.5);
    let h = normal_vec(&mut rng(23), cfg.frames * cfg.d_model, 1.0);
    let o = eval(RoutingMode::Top1);
    let logits = m.classify(&h, &o);
    assert_eq!(logits, m.classify(&h, &o));
    let last = &h[(cfg.frames - 1) * cfg.d_model..];
    let want = matvec(m.params.get(m.layout.cls), cfg.num_classes, last);
    assert!(max_abs_diff(&logits, &want) < 1e-6);
    let cls = m.layout.cls;
    m.params.get_mut(cls).fill(0.0);
    let zero = m.classify(&h, &o);
    assert!(zero.iter().all(|&v| v == 0.0));
    assert_eq!(beamcast::model::ops::argmax(&zero), 0);
}

// ---- composition -----------------------------------------------------------------

#[test]
fn expert_counters_and_hard_mask_pass_through() {
    let cfg = ModelConfig { n_layers: 3, moe_layers: vec![1, 2], ..tiny_config() };
    let cfg = cfg.resolve(beamcast::frontend::Dims { frames: 3, subcarriers: 6, beams: 4 }, 4).unwrap();
    let m = random_model(&cfg, 24, 0.5);
    let mut r = rng(25);
    for _ in 0..10 {
        let (x, s, v) = sample_input(&cfg, &mut r);
        let sample = Sample { x: &x, scene: s, speed_norm: v };
        assert_eq!(m.forward(&sample, &eval(RoutingMode::Top1)).unwrap().experts_evaluated, vec![1, 1]);
        assert_eq!(m.forward(&sample, &eval(RoutingMode::SoftDense)).unwrap().experts_evaluated, vec![4, 4]);
        let hm = m.forward(&sample, &eval(RoutingMode::HardMask)).unwrap();
        assert_eq!(hm.experts_evaluated, vec![1, 1]);
        assert_eq!(hm.selected_expert, Some(hard_assignment(s, v)));
    }
}

#[test]
fn soft_one_hot_expert_gradient_equals_top1_gradient() {
    let cfg = tiny_config();
    let m = random_model(&cfg, 26, 0.5);
    let (x, s, v) = sample_input(&cfg, &mut rng(27));
    let sample = Sample { x: &x, scene: s, speed_norm: v };
    let mask = TrainMask::all(m.params.tensors.len());
    let w = vec![1.0, 0.0, 0.0, 0.0];
    let mut g_soft = m.params.zeros_like();
    let mut g_top = m.params.zeros_like();
    m.forward_backward(&sample, None, Some(&RoutingDirective::soft(w.clone())), 2, &eval(RoutingMode::SoftDense), 1.0, &mask, &mut g_soft)
        .unwrap();
    m.forward_backward(&sample, None, Some(&RoutingDirective::top1(w)), 2, &eval(RoutingMode::Top1), 1.0, &mask, &mut g_top)
        .unwrap();
    for i in m.layout.expert_tensors(0) {
        assert!(max_abs_diff(g_soft.get(i), g_top.get(i)) < 1e-6);
    }
}

#[test]
fn logits_are_invariant_to_observation_scale() {
    use beamcast::frontend::split_normalize;
    use num_complex::Complex64;
    let cfg = tiny_config();
    let m = random_model(&cfg, 28, 0.5).convert::<f32>();
    let mut r = rng(29);
    let n = cfg.frames * cfg.subcarriers * cfg.beams;
    let re = normal_vec(&mut r, n, 1.0);
    let im = normal_vec(&mut r, n, 1.0);
    let p: Vec<Complex64> = re.iter().zip(&im).map(|(&a, &b)| Complex64::new(a, b)).collect();
    for scale in [1e-6, 0.37, 250.0] {
        let scaled: Vec<Complex64> = p.iter().map(|v| v * scale).collect();
        let a = split_normalize(&p, cfg.frames, cfg.subcarriers, cfg.beams).unwrap();
        let b = split_normalize(&scaled, cfg.frames, cfg.subcarriers, cfg.beams).unwrap();
        let la = m.forward(&Sample { x: &a.data, scene: 1, speed_norm: 0.4 }, &eval(RoutingMode::Top1)).unwrap();
        let lb = m.forward(&Sample { x: &b.data, scene: 1, speed_norm: 0.4 }, &eval(RoutingMode::Top1)).unwrap();
        assert!(max_abs_diff(&la.logits, &lb.logits) < 1e-5);
    }
}

#[test]
fn training_mode_dropout_is_keyed_by_sample() {
    let cfg = tiny_config();
    let m = random_model(&cfg, 30, 0.5);
    let (x, s, v) = sample_input(&cfg, &mut rng(31));
    let sample = Sample { x: &x, scene: s, speed_norm: v };
    let a = m.forward(&sample, &train(RoutingMode::SoftDense, 1)).unwrap();
    let b = m.forward(&sample, &train(RoutingMode::SoftDense, 1)).unwrap();
    let c = m.forward(&sample, &train(RoutingMode::SoftDense, 2)).unwrap();
    let e = m.forward(&sample, &eval(RoutingMode::SoftDense)).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_ne!(a.logits, c.logits);
    assert_ne!(a.logits, e.logits);
}

// ---- parameters ------------------------------------------------------------------

#[test]
fn init_is_deterministic_and_census_matches() {
    let cfg = tiny_config();
    let a = Model::<f32>::new(&cfg, 5).unwrap();
    let b = Model::<f32>::new(&cfg, 5).unwrap();
    let c = Model::<f32>::new(&cfg, 6).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    assert_eq!(a.params.count(), cfg.census());
    let no_se = ModelConfig { use_se: false, ..cfg.clone() };
    let d = Model::<f32>::new(&no_se, 5).unwrap();
    assert_eq!(d.params.count(), cfg.census() - 2 * 4 * cfg.se_hidden());
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let m = random_model(&cfg, 32, 0.5).convert::<f32>();
    let path = dir.path().join("p.bin");
    save_model(&m, &path, None).unwrap();
    let (back, meta) = load_model(&cfg, &path).unwrap();
    assert!(meta.is_none());
    assert_eq!(back.params, m.params);
    let bytes = std::fs::read(&path).unwrap();
    save_model(&back, &path, None).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn loading_with_a_different_width_names_the_feature_projection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let m = Model::<f32>::new(&cfg, 1).unwrap();
    let path = dir.path().join("p.bin");
    save_model(&m, &path, None).unwrap();
    let wider = ModelConfig { d_model: 12, ..cfg.clone() };
    let err = load_model(&wider, &path).unwrap_err();
    assert!(err.to_string().contains("feature projection"), "{err}");
    assert!(matches!(err, Error::TensorShape { .. }));
    assert!(matches!(load_model(&cfg, &dir.path().join("missing.bin")), Err(Error::MissingArtifact(_))));
    let moved = ModelConfig { moe_layers: vec![0], ..cfg.clone() };
    assert_ne!(fingerprint(&moved), fingerprint(&cfg));
}
