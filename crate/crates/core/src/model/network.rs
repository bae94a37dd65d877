//! Forward evaluation and gradients of the full network.
//!
//! Per frame: three same-padded convolutions with ReLU, SE recalibration,
//! 2×2 max pooling, global average pooling and a linear projection. The frame
//! feature is concatenated with the context embedding, projected to `d`,
//! offset by a positional embedding and passed through Pre-LN causal
//! transformer blocks whose FFN is either dense or a mixture of experts.
//! The classifier reads the last position.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::ops::{
    argmax, conv_backward, conv_forward, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward,
    max_pool2, sigmoid, softmax_in_place, ConvGeom, LnCache,
};
use super::params::{Layout, ParamStore, TensorSpec};
use super::real::Real;
use super::routing::{hard_assignment, RoutingDirective, RoutingMode};
use crate::error::{Error, Result};
use crate::rng::{nested_rng, Domain};

/// One network input: all observed frames plus the context pair.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    /// `frames × 2 × K × S_w`; the model reads the most recent `cfg.frames`.
    pub x: &'a [f32],
    pub scene: u8,
    pub speed_norm: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub mode: RoutingMode,
    pub training: bool,
    pub dropout_seed: u64,
    /// Identifies the sample for dropout streams.
    pub sample_key: u64,
}

impl ForwardOptions {
    pub fn eval(mode: RoutingMode) -> Self {
        Self {
            mode,
            training: false,
            dropout_seed: 0,
            sample_key: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub logits: Vec<T>,
    pub gate_weights: Vec<T>,
    pub selected_expert: Option<usize>,
    /// Experts evaluated in each MoE layer, in layer order.
    pub experts_evaluated: Vec<usize>,
    /// Final hidden states, `frames × d`.
    pub hidden: Vec<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn prediction(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Which tensors receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMask {
    pub tensors: Vec<bool>,
}

impl TrainMask {
    pub fn all(n: usize) -> Self {
        Self { tensors: vec![true; n] }
    }

    pub fn only(n: usize, indices: &[usize]) -> Self {
        let mut tensors = vec![false; n];
        for &i in indices {
            tensors[i] = true;
        }
        Self { tensors }
    }

    pub fn any(&self, indices: &[usize]) -> bool {
        indices.iter().any(|&i| self.tensors[i])
    }

    pub fn is_empty(&self) -> bool {
        !self.tensors.iter().any(|&t| t)
    }
}

#[derive(Debug, Clone)]
struct SeCache<T> {
    z: Vec<T>,
    a: Vec<T>,
    g: Vec<T>,
}

#[derive(Debug, Clone)]
struct CnnCache<T> {
    geoms: [ConvGeom; 3],
    cols: [Vec<T>; 3],
    acts: [Vec<T>; 3],
    se: Option<SeCache<T>>,
    pool_idx: Vec<u32>,
    pooled_plane: usize,
    gap: Vec<T>,
}

#[derive(Debug, Clone)]
struct EmbedCache<T> {
    cnn: CnnCache<T>,
    zin: Vec<T>,
    ctx_in: [T; 2],
}

#[derive(Debug, Clone)]
struct GateCache<T> {
    input: [T; 2],
    hpre: Vec<T>,
    hid: Vec<T>,
    w: Vec<T>,
}

#[derive(Debug, Clone)]
struct AttnCache<T> {
    qkv: Vec<T>,
    probs: Vec<T>,
    cat: Vec<T>,
}

#[derive(Debug, Clone)]
struct ExpertCache<T> {
    expert: usize,
    weight: T,
    u: Vec<T>,
    a: Vec<T>,
    out: Vec<T>,
    mask: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    ln1: LnCache<T>,
    ln1_out: Vec<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    ln2_out: Vec<T>,
    experts: Vec<ExpertCache<T>>,
}

#[derive(Debug, Clone)]
struct Tape<T> {
    embed: Option<EmbedCache<T>>,
    gate: Option<GateCache<T>>,
    layers: Vec<LayerCache<T>>,
    head_mask: Option<Vec<T>>,
    h_last: Vec<T>,
}

/// Network configuration plus parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub specs: Vec<TensorSpec>,
    pub params: ParamStore<T>,
}

fn bernoulli_mask<T: Real>(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

fn take_grad<T: Real>(grads: &mut ParamStore<T>, mask: &TrainMask, i: usize) -> Option<Vec<T>> {
    mask.tensors[i].then(|| std::mem::take(&mut grads.tensors[i].data))
}

fn put_grad<T: Real>(grads: &mut ParamStore<T>, i: usize, g: Option<Vec<T>>) {
    if let Some(g) = g {
        grads.tensors[i].data = g;
    }
}

impl<T: Real> Model<T> {
    /// Fresh model with deterministic initialization. `cfg` must be resolved.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::check_resolved(cfg)?;
        let (layout, specs) = Layout::build(cfg);
        let params = ParamStore::init(&specs, seed);
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            specs,
            params,
        })
    }

    pub fn from_params(cfg: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        Self::check_resolved(cfg)?;
        let (layout, specs) = Layout::build(cfg);
        if params.tensors.len() != specs.len()
            || params.tensors.iter().zip(&specs).any(|(t, s)| t.shape != s.shape)
        {
            return Err(Error::Shape("parameters do not match the model layout".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            specs,
            params,
        })
    }

    fn check_resolved(cfg: &ModelConfig) -> Result<()> {
        if !cfg.is_resolved() {
            return Err(Error::Config("model config has unresolved data dimensions".into()));
        }
        cfg.validate()
    }

    pub fn convert<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            specs: self.specs.clone(),
            params: self.params.convert(),
        }
    }

    fn p(&self, i: usize) -> &[T] {
        self.params.get(i)
    }

    fn frame_len(&self) -> usize {
        2 * self.cfg.subcarriers * self.cfg.beams
    }

    fn conv_geoms(&self, n: usize) -> [ConvGeom; 3] {
        let [c1, c2, c3] = self.cfg.cnn_channels;
        let (h, w) = (self.cfg.subcarriers, self.cfg.beams);
        [
            ConvGeom { cin: 2, cout: c1, kh: 1, kw: 5, n, h, w },
            ConvGeom { cin: c1, cout: c2, kh: 5, kw: 1, n, h, w },
            ConvGeom { cin: c2, cout: c3, kh: 3, kw: 3, n, h, w },
        ]
    }

    /// Rearranges `n` frames (`[2][K][S_w]` each) into channel-major `2 × n × K × S_w`.
    fn frames_to_tensor(&self, frames: &[T], n: usize) -> Vec<T> {
        let plane = self.cfg.subcarriers * self.cfg.beams;
        let mut out = vec![T::zero(); 2 * n * plane];
        for img in 0..n {
            for c in 0..2 {
                let src = &frames[img * 2 * plane + c * plane..img * 2 * plane + (c + 1) * plane];
                out[(c * n + img) * plane..(c * n + img + 1) * plane].copy_from_slice(src);
            }
        }
        out
    }

    fn window<'a>(&self, sample: &Sample<'a>) -> Result<&'a [f32]> {
        let fl = self.frame_len();
        if sample.x.len() % fl != 0 || sample.x.len() / fl < self.cfg.frames {
            return Err(Error::Shape(format!(
                "sample holds {} values; expected a multiple of {fl} covering {} frames",
                sample.x.len(),
                self.cfg.frames
            )));
        }
        let start = sample.x.len() - self.cfg.frames * fl;
        Ok(&sample.x[start..])
    }

    // ---- CNN -------------------------------------------------------------

    fn se_forward(&self, x: &mut [T], c: usize, n: usize, plane: usize) -> Option<SeCache<T>> {
        let (w1, w2) = self.layout.se?;
        let hdim = self.cfg.se_hidden();
        let inv = T::from_f64(1.0 / plane as f64);
        let mut z = vec![T::zero(); n * c];
        for ch in 0..c {
            for img in 0..n {
                let s: T = x[(ch * n + img) * plane..(ch * n + img + 1) * plane].iter().copied().sum();
                z[img * c + ch] = s * inv;
            }
        }
        let mut a = linear(&z, n, c, self.p(w1), hdim, None);
        a.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let mut g = linear(&a, n, hdim, self.p(w2), c, None);
        g.iter_mut().for_each(|v| *v = sigmoid(*v));
        for ch in 0..c {
            for img in 0..n {
                let s = g[img * c + ch];
                x[(ch * n + img) * plane..(ch * n + img + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v *= s);
            }
        }
        Some(SeCache { z, a, g })
    }

    /// SE recalibration of a `c × n × plane` feature map.
    pub fn se_recalibrate(&self, fmap: &[T], c: usize, n: usize, plane: usize) -> Vec<T> {
        let mut x = fmap.to_vec();
        self.se_forward(&mut x, c, n, plane);
        x
    }

    fn cnn_forward(&self, frames: &[T], n: usize) -> (Vec<T>, CnnCache<T>) {
        let geoms = self.conv_geoms(n);
        let plane = self.cfg.subcarriers * self.cfg.beams;
        let mut x = self.frames_to_tensor(frames, n);
        let mut cols: [Vec<T>; 3] = Default::default();
        let mut acts: [Vec<T>; 3] = Default::default();
        for (i, g) in geoms.iter().enumerate() {
            let idx = self.layout.conv[i];
            let (mut y, col) = conv_forward(&x, *g, self.p(idx.w), self.p(idx.b));
            y.iter_mut().for_each(|v| *v = v.max(T::zero()));
            cols[i] = col;
            acts[i] = y.clone();
            x = y;
        }
        let c3 = self.cfg.cnn_channels[2];
        let se = self.se_forward(&mut x, c3, n, plane);
        let (pooled, pool_idx) = max_pool2(&x, c3 * n, self.cfg.subcarriers, self.cfg.beams);
        let pooled_plane = (self.cfg.subcarriers / 2) * (self.cfg.beams / 2);
        let inv = T::from_f64(1.0 / pooled_plane as f64);
        let mut gap = vec![T::zero(); n * c3];
        for ch in 0..c3 {
            for img in 0..n {
                let p = ch * n + img;
                let s: T = pooled[p * pooled_plane..(p + 1) * pooled_plane].iter().copied().sum();
                gap[img * c3 + ch] = s * inv;
            }
        }
        let feats = linear(&gap, n, c3, self.p(self.layout.fc), self.cfg.cnn_feat_dim, None);
        (
            feats,
            CnnCache {
                geoms,
                cols,
                acts,
                se,
                pool_idx,
                pooled_plane,
                gap,
            },
        )
    }

    /// Features of `n` frames laid out `n × 2 × K × S_w`; returns `n × cnn_feat_dim`.
    pub fn cnn_encode(&self, frames: &[T], n: usize) -> Vec<T> {
        self.cnn_forward(frames, n).0
    }

    fn cnn_backward(&self, dfeat: &[T], cache: &CnnCache<T>, mask: &TrainMask, grads: &mut ParamStore<T>) {
        let n = cache.geoms[0].n;
        let c3 = self.cfg.cnn_channels[2];
        let plane = self.cfg.subcarriers * self.cfg.beams;
        let mut dw = take_grad(grads, mask, self.layout.fc);
        let dgap = linear_backward(
            &cache.gap,
            n,
            c3,
            self.p(self.layout.fc),
            self.cfg.cnn_feat_dim,
            dfeat,
            dw.as_deref_mut(),
            None,
            true,
        )
        .expect("dx requested");
        put_grad(grads, self.layout.fc, dw);
        let earlier: Vec<usize> = self.layout.cnn_tensors().into_iter().filter(|&i| i != self.layout.fc).collect();
        if !mask.any(&earlier) {
            return;
        }
        // GAP and max-pool backward.
        let inv = T::from_f64(1.0 / cache.pooled_plane as f64);
        let mut dx = vec![T::zero(); c3 * n * plane];
        for ch in 0..c3 {
            for img in 0..n {
                let p = ch * n + img;
                let g = dgap[img * c3 + ch] * inv;
                for &src in &cache.pool_idx[p * cache.pooled_plane..(p + 1) * cache.pooled_plane] {
                    dx[src as usize] += g;
                }
            }
        }
        // SE backward; dx is currently w.r.t. the SE output.
        if let (Some(se), Some((w1, w2))) = (&cache.se, self.layout.se) {
            let hdim = self.cfg.se_hidden();
            let x = &cache.acts[2];
            let mut dg = vec![T::zero(); n * c3];
            for ch in 0..c3 {
                for img in 0..n {
                    let r = (ch * n + img) * plane..(ch * n + img + 1) * plane;
                    dg[img * c3 + ch] = dx[r.clone()].iter().zip(&x[r]).map(|(&a, &b)| a * b).sum();
                }
            }
            let mut ds = dg;
            for (d, &g) in ds.iter_mut().zip(&se.g) {
                *d *= g * (T::one() - g);
            }
            let mut dw2 = take_grad(grads, mask, w2);
            let mut da = linear_backward(&se.a, n, hdim, self.p(w2), c3, &ds, dw2.as_deref_mut(), None, true).unwrap();
            put_grad(grads, w2, dw2);
            for (d, &a) in da.iter_mut().zip(&se.a) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
            let mut dw1 = take_grad(grads, mask, w1);
            let dz = linear_backward(&se.z, n, c3, self.p(w1), hdim, &da, dw1.as_deref_mut(), None, true).unwrap();
            put_grad(grads, w1, dw1);
            let inv_plane = T::from_f64(1.0 / plane as f64);
            for ch in 0..c3 {
                for img in 0..n {
                    let g = se.g[img * c3 + ch];
                    let add = dz[img * c3 + ch] * inv_plane;
                    for v in &mut dx[(ch * n + img) * plane..(ch * n + img + 1) * plane] {
                        *v = *v * g + add;
                    }
                }
            }
        }
        for i in (0..3).rev() {
            let idx = self.layout.conv[i];
            for (d, &a) in dx.iter_mut().zip(&cache.acts[i]) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
            let need_dx = i > 0 && {
                let below: Vec<usize> = (0..i).flat_map(|j| [self.layout.conv[j].w, self.layout.conv[j].b]).collect();
                mask.any(&below)
            };
            let mut dw = take_grad(grads, mask, idx.w);
            let mut db = take_grad(grads, mask, idx.b);
            let next = conv_backward(&dx, &cache.cols[i], cache.geoms[i], self.p(idx.w), dw.as_deref_mut(), db.as_deref_mut(), need_dx);
            put_grad(grads, idx.w, dw);
            put_grad(grads, idx.b, db);
            match next {
                Some(n) => dx = n,
                None => break,
            }
        }
    }

    // ---- context, gate, embedding ---------------------------------------------

    /// `W_c·[s, v̄]`; empty when the context encoder is disabled.
    pub fn context_encode(&self, scene: u8, speed_norm: f32) -> Vec<T> {
        match self.layout.ctx {
            Some(ctx) => {
                let inp = [T::from_f64(scene as f64), T::from_f64(speed_norm as f64)];
                linear(&inp, 1, 2, self.p(ctx), self.cfg.ctx_dim, None)
            }
            None => Vec::new(),
        }
    }

    fn gate_forward_cached(&self, scene: u8, speed_norm: f32) -> (Vec<T>, Option<GateCache<T>>) {
        let e = self.cfg.n_experts;
        let Some(g) = self.layout.gate else {
            return (vec![T::from_f64(1.0 / e as f64); e], None);
        };
        let h = self.cfg.gate_hidden;
        let input = [T::from_f64(scene as f64), T::from_f64(speed_norm as f64)];
        let hpre = linear(&input, 1, 2, self.p(g.w1), h, g.b1.map(|b| self.p(b)));
        let hid: Vec<T> = hpre.iter().map(|v| v.max(T::zero())).collect();
        let mut w = linear(&hid, 1, h, self.p(g.w2), e, g.b2.map(|b| self.p(b)));
        softmax_in_place(&mut w);
        (w.clone(), Some(GateCache { input, hpre, hid, w }))
    }

    /// Gate weights for `(s, v̄)`; uniform when the gate is disabled.
    pub fn gate_forward(&self, scene: u8, speed_norm: f32) -> Vec<T> {
        self.gate_forward_cached(scene, speed_norm).0
    }

    fn gate_backward(&self, dw: &[T], cache: &GateCache<T>, mask: &TrainMask, grads: &mut ParamStore<T>) {
        let g = self.layout.gate.expect("gate cache implies gate");
        let h = self.cfg.gate_hidden;
        let e = self.cfg.n_experts;
        let dot: T = dw.iter().zip(&cache.w).map(|(&a, &b)| a * b).sum();
        let dl: Vec<T> = cache.w.iter().zip(dw).map(|(&w, &d)| w * (d - dot)).collect();
        let mut dw2 = take_grad(grads, mask, g.w2);
        let mut db2 = g.b2.and_then(|b| take_grad(grads, mask, b));
        let mut dh = linear_backward(&cache.hid, 1, h, self.p(g.w2), e, &dl, dw2.as_deref_mut(), db2.as_deref_mut(), true).unwrap();
        put_grad(grads, g.w2, dw2);
        if let Some(b) = g.b2 {
            put_grad(grads, b, db2);
        }
        for (d, &p) in dh.iter_mut().zip(&cache.hpre) {
            if p <= T::zero() {
                *d = T::zero();
            }
        }
        let mut dw1 = take_grad(grads, mask, g.w1);
        let mut db1 = g.b1.and_then(|b| take_grad(grads, mask, b));
        linear_backward(&cache.input, 1, 2, self.p(g.w1), h, &dh, dw1.as_deref_mut(), db1.as_deref_mut(), false);
        put_grad(grads, g.w1, dw1);
        if let Some(b) = g.b1 {
            put_grad(grads, b, db1);
        }
    }

    /// `h⁽⁰⁾_t = W_p·[z_cnn,t ‖ z_ctx,t] + W_pe[t]` for `cnn_feats` (`n × feat`).
    pub fn embed_sequence(&self, cnn_feats: &[T], ctx: &[T], n: usize) -> Result<Vec<T>> {
        Ok(self.embed_from_features(cnn_feats, ctx, n)?.0)
    }

    fn embed_from_features(&self, cnn_feats: &[T], ctx: &[T], n: usize) -> Result<(Vec<T>, Vec<T>)> {
        if n > self.cfg.max_positions {
            return Err(Error::Config(format!(
                "sequence length {n} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let feat = self.cfg.cnn_feat_dim;
        let pin = self.cfg.projection_input();
        let d = self.cfg.d_model;
        let mut zin = vec![T::zero(); n * pin];
        for t in 0..n {
            zin[t * pin..t * pin + feat].copy_from_slice(&cnn_feats[t * feat..(t + 1) * feat]);
            zin[t * pin + feat..(t + 1) * pin].copy_from_slice(ctx);
        }
        let mut h0 = linear(&zin, n, pin, self.p(self.layout.proj), d, None);
        let pe = self.p(self.layout.pe);
        for (v, &p) in h0.iter_mut().zip(&pe[..n * d]) {
            *v += p;
        }
        Ok((h0, zin))
    }

    fn embed_cached(&self, sample: &Sample) -> Result<(Vec<T>, EmbedCache<T>)> {
        let frames: Vec<T> = self.window(sample)?.iter().map(|&v| T::from_f64(v as f64)).collect();
        let n = self.cfg.frames;
        let (feats, cnn) = self.cnn_forward(&frames, n);
        let ctx = self.context_encode(sample.scene, sample.speed_norm);
        let (h0, zin) = self.embed_from_features(&feats, &ctx, n)?;
        let ctx_in = [T::from_f64(sample.scene as f64), T::from_f64(sample.speed_norm as f64)];
        Ok((h0, EmbedCache { cnn, zin, ctx_in }))
    }

    /// Input to the first transformer block (`frames × d`).
    pub fn embed(&self, sample: &Sample) -> Result<Vec<T>> {
        Ok(self.embed_cached(sample)?.0)
    }

    fn embed_backward(&self, dh0: &[T], cache: &EmbedCache<T>, mask: &TrainMask, grads: &mut ParamStore<T>) {
        let n = self.cfg.frames;
        let d = self.cfg.d_model;
        let pin = self.cfg.projection_input();
        let feat = self.cfg.cnn_feat_dim;
        if let Some(mut dpe) = take_grad(grads, mask, self.layout.pe) {
            for (a, &g) in dpe.iter_mut().zip(dh0) {
                *a += g;
            }
            put_grad(grads, self.layout.pe, Some(dpe));
        }
        let need_dz = mask.any(&self.layout.cnn_tensors()) || self.layout.ctx.is_some_and(|c| mask.tensors[c]);
        let mut dwp = take_grad(grads, mask, self.layout.proj);
        let dz = linear_backward(&cache.zin, n, pin, self.p(self.layout.proj), d, dh0, dwp.as_deref_mut(), None, need_dz);
        put_grad(grads, self.layout.proj, dwp);
        let Some(dz) = dz else { return };
        if let Some(ctx) = self.layout.ctx {
            if let Some(mut dwc) = take_grad(grads, mask, ctx) {
                for t in 0..n {
                    for j in 0..self.cfg.ctx_dim {
                        let g = dz[t * pin + feat + j];
                        dwc[j * 2] += g * cache.ctx_in[0];
                        dwc[j * 2 + 1] += g * cache.ctx_in[1];
                    }
                }
                put_grad(grads, ctx, Some(dwc));
            }
        }
        if mask.any(&self.layout.cnn_tensors()) {
            let mut dfeat = vec![T::zero(); n * feat];
            for t in 0..n {
                dfeat[t * feat..(t + 1) * feat].copy_from_slice(&dz[t * pin..t * pin + feat]);
            }
            self.cnn_backward(&dfeat, &cache.cnn, mask, grads);
        }
    }

    // ---- transformer -----------------------------------------------------------

    fn attention_forward(&self, x: &[T], layer: usize) -> (Vec<T>, AttnCache<T>) {
        let li = &self.layout.layers[layer];
        let n = x.len() / self.cfg.d_model;
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qkv = linear(x, n, d, self.p(li.qkv_w), 3 * d, Some(self.p(li.qkv_b)));
        let mut probs = vec![T::zero(); heads * n * n];
        let mut cat = vec![T::zero(); n * d];
        for hh in 0..heads {
            for t in 0..n {
                let q = &qkv[t * 3 * d + hh * dh..t * 3 * d + (hh + 1) * dh];
                let row = &mut probs[(hh * n + t) * n..(hh * n + t + 1) * n];
                for u in 0..=t {
                    let k = &qkv[u * 3 * d + d + hh * dh..u * 3 * d + d + (hh + 1) * dh];
                    row[u] = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_in_place(&mut row[..=t]);
                let out = &mut cat[t * d + hh * dh..t * d + (hh + 1) * dh];
                for u in 0..=t {
                    let p = row[u];
                    let v = &qkv[u * 3 * d + 2 * d + hh * dh..u * 3 * d + 2 * d + (hh + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
        }
        let y = linear(&cat, n, d, self.p(li.o_w), d, Some(self.p(li.o_b)));
        (y, AttnCache { qkv, probs, cat })
    }

    fn attention_backward(
        &self,
        dy: &[T],
        x: &[T],
        cache: &AttnCache<T>,
        layer: usize,
        mask: &TrainMask,
        grads: &mut ParamStore<T>,
    ) -> Vec<T> {
        let li = &self.layout.layers[layer];
        let d = self.cfg.d_model;
        let n = dy.len() / d;
        let heads = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut dwo = take_grad(grads, mask, li.o_w);
        let mut dbo = take_grad(grads, mask, li.o_b);
        let dcat = linear_backward(&cache.cat, n, d, self.p(li.o_w), d, dy, dwo.as_deref_mut(), dbo.as_deref_mut(), true).unwrap();
        put_grad(grads, li.o_w, dwo);
        put_grad(grads, li.o_b, dbo);
        let qkv = &cache.qkv;
        let mut dqkv = vec![T::zero(); n * 3 * d];
        let mut dp = vec![T::zero(); n];
        for hh in 0..heads {
            for t in 0..n {
                let p = &cache.probs[(hh * n + t) * n..(hh * n + t + 1) * n];
                let dout = &dcat[t * d + hh * dh..t * d + (hh + 1) * dh];
                let mut dot = T::zero();
                for u in 0..=t {
                    let vo = u * 3 * d + 2 * d + hh * dh;
                    dp[u] = dout.iter().zip(&qkv[vo..vo + dh]).map(|(&a, &b)| a * b).sum();
                    dot += dp[u] * p[u];
                    for j in 0..dh {
                        dqkv[vo + j] += p[u] * dout[j];
                    }
                }
                let qo = t * 3 * d + hh * dh;
                for u in 0..=t {
                    let ds = p[u] * (dp[u] - dot) * scale;
                    let ko = u * 3 * d + d + hh * dh;
                    for j in 0..dh {
                        dqkv[qo + j] += ds * qkv[ko + j];
                        dqkv[ko + j] += ds * qkv[qo + j];
                    }
                }
            }
        }
        let mut dw = take_grad(grads, mask, li.qkv_w);
        let mut db = take_grad(grads, mask, li.qkv_b);
        let dx = linear_backward(x, n, d, self.p(li.qkv_w), 3 * d, &dqkv, dw.as_deref_mut(), db.as_deref_mut(), true).unwrap();
        put_grad(grads, li.qkv_w, dw);
        put_grad(grads, li.qkv_b, db);
        dx
    }

    fn dropout_rng(&self, opts: &ForwardOptions, inner: u64) -> ChaCha8Rng {
        nested_rng(opts.dropout_seed, Domain::Dropout, opts.sample_key, inner)
    }

    fn expert_forward_cached(&self, x: &[T], layer: usize, expert: usize, weight: T, opts: &ForwardOptions) -> ExpertCache<T> {
        let idx = self.layout.layers[layer].ffn[expert];
        let d = self.cfg.d_model;
        let f = self.cfg.ffn_dim();
        let n = x.len() / d;
        let u = linear(x, n, d, self.p(idx.w1), f, Some(self.p(idx.b1)));
        let a: Vec<T> = u.iter().map(|&v| gelu(v)).collect();
        let mut out = linear(&a, n, f, self.p(idx.w2), d, Some(self.p(idx.b2)));
        let p = self.cfg.dropout_expert;
        let mask = (opts.training && p > 0.0).then(|| {
            let mut rng = self.dropout_rng(opts, ((layer as u64) << 16) | expert as u64);
            bernoulli_mask::<T>(&mut rng, out.len(), p)
        });
        if let Some(m) = &mask {
            for (o, &k) in out.iter_mut().zip(m) {
                *o *= k;
            }
        }
        ExpertCache { expert, weight, u, a, out, mask }
    }

    /// Output of FFN `expert` of `layer` (index 0 for a dense layer) on rows of `x`.
    pub fn expert_forward(&self, x: &[T], layer: usize, expert: usize, opts: &ForwardOptions) -> Vec<T> {
        self.expert_forward_cached(x, layer, expert, T::one(), opts).out
    }

    fn ffn_forward(
        &self,
        x: &[T],
        layer: usize,
        directive: &RoutingDirective<T>,
        opts: &ForwardOptions,
    ) -> (Vec<T>, Vec<ExpertCache<T>>) {
        let active = if self.layout.layers[layer].moe {
            directive.active()
        } else {
            vec![(0, T::one())]
        };
        let mut y = vec![T::zero(); x.len()];
        let caches: Vec<ExpertCache<T>> = active
            .into_iter()
            .map(|(e, w)| {
                let c = self.expert_forward_cached(x, layer, e, w, opts);
                for (acc, &o) in y.iter_mut().zip(&c.out) {
                    *acc += w * o;
                }
                c
            })
            .collect();
        (y, caches)
    }

    /// MoE feed-forward of `layer` on `x` (`n × d`) under `directive`.
    pub fn moe_ffn(&self, x: &[T], layer: usize, directive: &RoutingDirective<T>, opts: &ForwardOptions) -> Result<Vec<T>> {
        directive.validate(self.cfg.n_experts)?;
        Ok(self.ffn_forward(x, layer, directive, opts).0)
    }

    fn layer_forward(
        &self,
        h: &mut [T],
        layer: usize,
        directive: &RoutingDirective<T>,
        opts: &ForwardOptions,
    ) -> LayerCache<T> {
        let li = &self.layout.layers[layer];
        let d = self.cfg.d_model;
        let n = h.len() / d;
        let (ln1_out, ln1) = layer_norm(h, n, d, self.p(li.ln1_g), self.p(li.ln1_b));
        let (a, attn) = self.attention_forward(&ln1_out, layer);
        for (v, &x) in h.iter_mut().zip(&a) {
            *v += x;
        }
        let (ln2_out, ln2) = layer_norm(h, n, d, self.p(li.ln2_g), self.p(li.ln2_b));
        let (f, experts) = self.ffn_forward(&ln2_out, layer, directive, opts);
        for (v, &x) in h.iter_mut().zip(&f) {
            *v += x;
        }
        LayerCache {
            ln1,
            ln1_out,
            attn,
            ln2,
            ln2_out,
            experts,
        }
    }

    /// Every block applied to `h0` (`n × d`).
    pub fn transformer_forward(&self, h0: &[T], directive: &RoutingDirective<T>, opts: &ForwardOptions) -> Result<Vec<T>> {
        if !self.cfg.moe_layers.is_empty() {
            directive.validate(self.cfg.n_experts)?;
        }
        let mut h = h0.to_vec();
        for l in 0..self.cfg.n_layers {
            self.layer_forward(&mut h, l, directive, opts);
        }
        Ok(h)
    }

    /// Returns `(d_input, d_gate_weights)`.
    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        dh: &[T],
        layer: usize,
        cache: &LayerCache<T>,
        need_dx: bool,
        dgate: &mut [T],
        mask: &TrainMask,
        grads: &mut ParamStore<T>,
    ) -> Option<Vec<T>> {
        let li = &self.layout.layers[layer];
        let d = self.cfg.d_model;
        let f = self.cfg.ffn_dim();
        let n = dh.len() / d;
        let mut dln2 = vec![T::zero(); n * d];
        for ec in &cache.experts {
            if li.moe {
                dgate[ec.expert] += dh.iter().zip(&ec.out).map(|(&a, &b)| a * b).sum::<T>();
            }
            let idx = li.ffn[ec.expert];
            let mut dy: Vec<T> = dh.iter().map(|&g| g * ec.weight).collect();
            if let Some(m) = &ec.mask {
                for (g, &k) in dy.iter_mut().zip(m) {
                    *g *= k;
                }
            }
            let mut dw2 = take_grad(grads, mask, idx.w2);
            let mut db2 = take_grad(grads, mask, idx.b2);
            let da = linear_backward(&ec.a, n, f, self.p(idx.w2), d, &dy, dw2.as_deref_mut(), db2.as_deref_mut(), true).unwrap();
            put_grad(grads, idx.w2, dw2);
            put_grad(grads, idx.b2, db2);
            let du: Vec<T> = da.iter().zip(&ec.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
            let mut dw1 = take_grad(grads, mask, idx.w1);
            let mut db1 = take_grad(grads, mask, idx.b1);
            let dx = linear_backward(&cache.ln2_out, n, d, self.p(idx.w1), f, &du, dw1.as_deref_mut(), db1.as_deref_mut(), true).unwrap();
            put_grad(grads, idx.w1, dw1);
            put_grad(grads, idx.b1, db1);
            for (acc, &g) in dln2.iter_mut().zip(&dx) {
                *acc += g;
            }
        }
        let mut dg2 = take_grad(grads, mask, li.ln2_g);
        let mut db2 = take_grad(grads, mask, li.ln2_b);
        let dmid_ln = layer_norm_backward(&dln2, n, d, self.p(li.ln2_g), &cache.ln2, dg2.as_deref_mut(), db2.as_deref_mut());
        put_grad(grads, li.ln2_g, dg2);
        put_grad(grads, li.ln2_b, db2);
        let dmid: Vec<T> = dh.iter().zip(&dmid_ln).map(|(&a, &b)| a + b).collect();
        let attn_trainable = mask.any(&[li.ln1_g, li.ln1_b, li.qkv_w, li.qkv_b, li.o_w, li.o_b]);
        if !need_dx && !attn_trainable {
            return None;
        }
        let dln1 = self.attention_backward(&dmid, &cache.ln1_out, &cache.attn, layer, mask, grads);
        let mut dg1 = take_grad(grads, mask, li.ln1_g);
        let mut db1 = take_grad(grads, mask, li.ln1_b);
        let din_ln = layer_norm_backward(&dln1, n, d, self.p(li.ln1_g), &cache.ln1, dg1.as_deref_mut(), db1.as_deref_mut());
        put_grad(grads, li.ln1_g, dg1);
        put_grad(grads, li.ln1_b, db1);
        need_dx.then(|| dmid.iter().zip(&din_ln).map(|(&a, &b)| a + b).collect())
    }

    // ---- classifier and composition ------------------------------------------

    /// Logits from the final position of `h` (`n × d`), with optional head dropout mask.
    fn classify_cached(&self, h: &[T], opts: &ForwardOptions) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
        let d = self.cfg.d_model;
        let n = h.len() / d;
        let mut last = h[(n - 1) * d..n * d].to_vec();
        let p = self.cfg.dropout_head;
        let mask = (opts.training && p > 0.0).then(|| {
            let mut rng = self.dropout_rng(opts, u64::MAX);
            bernoulli_mask::<T>(&mut rng, d, p)
        });
        if let Some(m) = &mask {
            for (v, &k) in last.iter_mut().zip(m) {
                *v *= k;
            }
        }
        let logits = linear(&last, 1, d, self.p(self.layout.cls), self.cfg.num_classes, None);
        (logits, last, mask)
    }

    pub fn classify(&self, h: &[T], opts: &ForwardOptions) -> Vec<T> {
        self.classify_cached(h, opts).0
    }

    /// Routing directive implied by the mode, the gate and the sample context.
    pub fn directive(&self, mode: RoutingMode, scene: u8, speed_norm: f32) -> (RoutingDirective<T>, Vec<T>) {
        let w = self.gate_forward(scene, speed_norm);
        let dir = match mode {
            RoutingMode::HardMask => RoutingDirective::hard(hard_assignment(scene, speed_norm)),
            RoutingMode::SoftDense => RoutingDirective::soft(w.clone()),
            RoutingMode::Top1 => RoutingDirective::top1(w.clone()),
        };
        (dir, w)
    }

    fn run(
        &self,
        sample: &Sample,
        h0: Option<&[T]>,
        external: Option<&RoutingDirective<T>>,
        opts: &ForwardOptions,
    ) -> Result<(ForwardTrace<T>, Tape<T>)> {
        let (mut h, embed) = match h0 {
            Some(h0) => {
                if h0.len() != self.cfg.frames * self.cfg.d_model {
                    return Err(Error::Shape("cached embedding has the wrong length".into()));
                }
                (h0.to_vec(), None)
            }
            None => {
                let (h, c) = self.embed_cached(sample)?;
                (h, Some(c))
            }
        };
        let (gate_w, gate_cache) = self.gate_forward_cached(sample.scene, sample.speed_norm);
        let directive = match external {
            Some(d) => d.clone(),
            None => match opts.mode {
                RoutingMode::HardMask => RoutingDirective::hard(hard_assignment(sample.scene, sample.speed_norm)),
                RoutingMode::SoftDense => RoutingDirective::soft(gate_w.clone()),
                RoutingMode::Top1 => RoutingDirective::top1(gate_w.clone()),
            },
        };
        let has_moe = !self.cfg.moe_layers.is_empty();
        if has_moe {
            directive.validate(self.cfg.n_experts)?;
        }
        let gate_drives = external.is_none() && directive.mode == RoutingMode::SoftDense && gate_cache.is_some() && has_moe;
        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        let mut experts_evaluated = Vec::new();
        for l in 0..self.cfg.n_layers {
            let c = self.layer_forward(&mut h, l, &directive, opts);
            if self.layout.layers[l].moe {
                experts_evaluated.push(c.experts.len());
            }
            layers.push(c);
        }
        let (logits, h_last, head_mask) = self.classify_cached(&h, opts);
        let trace = ForwardTrace {
            logits,
            gate_weights: match &directive.soft_weights {
                Some(w) => w.clone(),
                None => gate_w,
            },
            selected_expert: if has_moe { directive.selected() } else { None },
            experts_evaluated,
            hidden: h,
        };
        let tape = Tape {
            embed,
            gate: if gate_drives { gate_cache } else { None },
            layers,
            head_mask,
            h_last,
        };
        Ok((trace, tape))
    }

    /// Full forward pass with routing derived from `opts.mode`.
    pub fn forward(&self, sample: &Sample, opts: &ForwardOptions) -> Result<ForwardTrace<T>> {
        Ok(self.run(sample, None, None, opts)?.0)
    }

    /// Forward pass under an explicit routing directive.
    pub fn forward_with(&self, sample: &Sample, directive: &RoutingDirective<T>, opts: &ForwardOptions) -> Result<ForwardTrace<T>> {
        Ok(self.run(sample, None, Some(directive), opts)?.0)
    }

    /// Forward pass starting from a precomputed first-block input.
    pub fn forward_from_embedding(&self, sample: &Sample, h0: &[T], opts: &ForwardOptions) -> Result<ForwardTrace<T>> {
        Ok(self.run(sample, Some(h0), None, opts)?.0)
    }

    /// Cross-entropy loss of `target`; adds `loss_scale·∂L/∂θ` into `grads`
    /// for every tensor selected by `mask`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_backward(
        &self,
        sample: &Sample,
        h0: Option<&[T]>,
        directive: Option<&RoutingDirective<T>>,
        target: usize,
        opts: &ForwardOptions,
        loss_scale: T,
        mask: &TrainMask,
        grads: &mut ParamStore<T>,
    ) -> Result<(T, ForwardTrace<T>)> {
        if target >= self.cfg.num_classes {
            return Err(Error::Shape(format!("target {target} out of range 0..{}", self.cfg.num_classes)));
        }
        let (trace, tape) = self.run(sample, h0, directive, opts)?;
        let mut probs = trace.logits.clone();
        softmax_in_place(&mut probs);
        let loss = -(probs[target].max(T::min_positive_value())).ln();
        let mut dlogits = probs;
        dlogits[target] -= T::one();
        dlogits.iter_mut().for_each(|v| *v *= loss_scale);

        let d = self.cfg.d_model;
        let n = self.cfg.frames;
        let nl = self.cfg.n_layers;
        let gate_trainable = tape.gate.is_some() && mask.any(&self.layout.gate_tensors());
        let embed_trainable = tape.embed.is_some() && mask.any(&self.layout.embedding_tensors());
        let layer_trainable: Vec<bool> = (0..nl)
            .map(|l| {
                let li = &self.layout.layers[l];
                let mut idx = vec![li.ln1_g, li.ln1_b, li.qkv_w, li.qkv_b, li.o_w, li.o_b, li.ln2_g, li.ln2_b];
                idx.extend(li.ffn.iter().flat_map(|e| [e.w1, e.b1, e.w2, e.b2]));
                mask.any(&idx) || (li.moe && gate_trainable)
            })
            .collect();
        // need_out[l]: gradient must reach the output of block l.
        let mut need_out = vec![false; nl];
        let mut acc = embed_trainable;
        for l in 0..nl {
            acc |= layer_trainable[l];
            need_out[l] = acc;
        }

        let mut dcls = take_grad(grads, mask, self.layout.cls);
        let need_dh = if nl > 0 { need_out[nl - 1] } else { embed_trainable };
        let dlast = linear_backward(&tape.h_last, 1, d, self.p(self.layout.cls), self.cfg.num_classes, &dlogits, dcls.as_deref_mut(), None, need_dh);
        put_grad(grads, self.layout.cls, dcls);
        let Some(mut dlast) = dlast else {
            return Ok((loss, trace));
        };
        if let Some(m) = &tape.head_mask {
            for (g, &k) in dlast.iter_mut().zip(m) {
                *g *= k;
            }
        }
        let mut dh = vec![T::zero(); n * d];
        dh[(n - 1) * d..].copy_from_slice(&dlast);
        let mut dgate = vec![T::zero(); self.cfg.n_experts];
        let mut reached_input = nl == 0;
        for l in (0..nl).rev() {
            if !need_out[l] {
                break;
            }
            let need_dx = if l > 0 { need_out[l - 1] } else { embed_trainable };
            match self.layer_backward(&dh, l, &tape.layers[l], need_dx, &mut dgate, mask, grads) {
                Some(next) => {
                    dh = next;
                    reached_input = l == 0;
                }
                None => break,
            }
        }
        if let (true, Some(gc)) = (gate_trainable, &tape.gate) {
            self.gate_backward(&dgate, gc, mask, grads);
        }
        if reached_input && embed_trainable {
            if let Some(ec) = &tape.embed {
                self.embed_backward(&dh, ec, mask, grads);
            }
        }
        Ok((loss, trace))
    }
}
