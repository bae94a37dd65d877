//! Forward and backward kernels shared by the network components.

use super::real::{gemm, Real};

pub const LN_EPS: f64 = 1e-5;

/// `y (rows × out) = x (rows × in) · Wᵀ + b`, with `W` stored `out × in`.
pub fn linear<T: Real>(x: &[T], rows: usize, din: usize, w: &[T], dout: usize, b: Option<&[T]>) -> Vec<T> {
    let mut y = vec![T::zero(); rows * dout];
    if let Some(b) = b {
        for r in 0..rows {
            y[r * dout..(r + 1) * dout].copy_from_slice(b);
        }
    }
    gemm(false, true, rows, dout, din, x, w, T::one(), &mut y);
    y
}

/// Accumulates `dW += dyᵀ·x` and `db += Σ_rows dy`; returns `dx = dy·W` when requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    rows: usize,
    din: usize,
    w: &[T],
    dout: usize,
    dy: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Vec<T>> {
    if let Some(dw) = dw {
        gemm(true, false, dout, din, rows, dy, x, T::one(), dw);
    }
    if let Some(db) = db {
        for r in 0..rows {
            for (acc, &g) in db.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
                *acc += g;
            }
        }
    }
    need_dx.then(|| {
        let mut dx = vec![T::zero(); rows * din];
        gemm(false, false, rows, din, dout, dy, w, T::zero(), &mut dx);
        dx
    })
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(x: &[T], rows: usize, d: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let mut y = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    let n = T::from_f64(d as f64);
    let eps = T::from_f64(LN_EPS);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = g[j] * xh + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    rows: usize,
    d: usize,
    g: &[T],
    cache: &LnCache<T>,
    mut dg: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * d];
    let n = T::from_f64(d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        if let Some(dg) = dg.as_deref_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for j in 0..d {
                db[j] += dyr[j];
            }
        }
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= n;
        mean_dxh_xh /= n;
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dx[r * d + j] = cache.rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

/// Exact GELU `x·Φ(x)`.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `Φ(x) + x·φ(x)`.
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Index of the first maximum.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Same-padded, stride-1 convolution geometry over `n` images of `h × w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.n * self.h * self.w
    }

    fn pad(&self) -> (usize, usize) {
        (self.kh / 2, self.kw / 2)
    }
}

/// `x` is `cin × n × h × w`; returns the `(cin·kh·kw) × (n·h·w)` patch matrix.
pub fn im2col<T: Real>(x: &[T], g: ConvGeom) -> Vec<T> {
    let (ph, pw) = g.pad();
    let cols = g.cols();
    let plane = g.h * g.w;
    let mut out = vec![T::zero(); g.rows() * cols];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut out[r * cols..(r + 1) * cols];
                for img in 0..g.n {
                    let src = &x[(ci * g.n + img) * plane..(ci * g.n + img + 1) * plane];
                    for y in 0..g.h {
                        let sy = y as isize + ky as isize - ph as isize;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..g.w {
                            let sx = xx as isize + kx as isize - pw as isize;
                            if sx < 0 || sx >= g.w as isize {
                                continue;
                            }
                            dst[(img * g.h + y) * g.w + xx] = src[sy * g.w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn col2im<T: Real>(col: &[T], g: ConvGeom) -> Vec<T> {
    let (ph, pw) = g.pad();
    let cols = g.cols();
    let plane = g.h * g.w;
    let mut dx = vec![T::zero(); g.cin * g.n * plane];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[r * cols..(r + 1) * cols];
                for img in 0..g.n {
                    let dst = &mut dx[(ci * g.n + img) * plane..(ci * g.n + img + 1) * plane];
                    for y in 0..g.h {
                        let sy = y as isize + ky as isize - ph as isize;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..g.w {
                            let sx = xx as isize + kx as isize - pw as isize;
                            if sx < 0 || sx >= g.w as isize {
                                continue;
                            }
                            dst[sy * g.w + sx as usize] += src[(img * g.h + y) * g.w + xx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns `(y, patches)` with `y` laid out `cout × n × h × w`.
pub fn conv_forward<T: Real>(x: &[T], g: ConvGeom, w: &[T], b: &[T]) -> (Vec<T>, Vec<T>) {
    let col = im2col(x, g);
    let cols = g.cols();
    let mut y = vec![T::zero(); g.cout * cols];
    for (co, row) in y.chunks_mut(cols).enumerate() {
        row.iter_mut().for_each(|v| *v = b[co]);
    }
    gemm(false, false, g.cout, cols, g.rows(), w, &col, T::one(), &mut y);
    (y, col)
}

pub fn conv_backward<T: Real>(
    dy: &[T],
    col: &[T],
    g: ConvGeom,
    w: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Vec<T>> {
    let cols = g.cols();
    if let Some(dw) = dw {
        gemm(false, true, g.cout, g.rows(), cols, dy, col, T::one(), dw);
    }
    if let Some(db) = db {
        for (co, row) in dy.chunks(cols).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
    }
    need_dx.then(|| {
        let mut dcol = vec![T::zero(); g.rows() * cols];
        gemm(true, false, g.rows(), cols, g.cout, w, dy, T::zero(), &mut dcol);
        col2im(&dcol, g)
    })
}

/// 2×2 stride-2 max pooling over `planes` planes of `h × w` (odd edges dropped).
/// Returns the pooled values and the flat source index of each maximum.
pub fn max_pool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(planes * ho * wo);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                y.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}
