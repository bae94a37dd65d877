//! Zadoff-Chu pilots and the per-subcarrier digital combiner.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::codebook::{build_dft_codebook, CMatrix};
use crate::error::{Error, Result};

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zadoff-Chu sequence of root `u` and length `N`:
/// `exp(−jπ·u·n·(n+1)/N)` for odd `N`, `exp(−jπ·u·n²/N)` for even `N`.
pub fn zc_sequence(root: usize, len: usize) -> Result<Vec<Complex64>> {
    if len == 0 || root == 0 || root >= len.max(2) || gcd(root, len) != 1 {
        return Err(Error::NonCoprimeRoot { root, len });
    }
    let odd = len % 2 == 1;
    Ok((0..len)
        .map(|n| {
            // Reduce the quadratic index modulo 2N before scaling to keep phases exact.
            let q = if odd { n * (n + 1) } else { n * n };
            let r = (root as u128 * q as u128 % (2 * len) as u128) as f64;
            Complex64::from_polar(1.0, -PI * r / len as f64)
        })
        .collect())
}

/// Length of the underlying ZC sequence for `k` subcarriers: `k` if odd, else `k − 1`.
pub fn pilot_zc_length(k: usize) -> usize {
    if k % 2 == 1 || k < 2 {
        k
    } else {
        k - 1
    }
}

/// Length-`k` pilot: an odd-length ZC sequence, extended by repeating its last
/// element when `k` is even.
pub fn pilot_sequence(root: usize, k: usize) -> Result<Vec<Complex64>> {
    let n = pilot_zc_length(k);
    if n == 1 {
        return Ok(vec![Complex64::new(1.0, 0.0); k]);
    }
    let mut seq = zc_sequence(root, n)?;
    while seq.len() < k {
        seq.push(*seq.last().expect("non-empty ZC sequence"));
    }
    Ok(seq)
}

/// The first `count` roots in `1..len` coprime with `len`.
pub fn default_roots(count: usize, len: usize) -> Vec<usize> {
    (1..len.max(2)).filter(|&u| gcd(u, len) == 1).take(count).collect()
}

/// Periodic cross-correlation `Σ_n a[n]·conj(b[(n+τ) mod N])` for every lag τ.
pub fn periodic_correlation(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    let n = a.len();
    (0..n)
        .map(|tau| (0..n).map(|i| a[i] * b[(i + tau) % n].conj()).sum())
        .collect()
}

/// `N_rf`-point DFT matrix with columns cyclically rotated by `k mod N_rf`.
pub fn build_digital_precoder(k: usize, n_rf: usize) -> CMatrix {
    let dft = build_dft_codebook(n_rf);
    let shift = k % n_rf;
    let columns = (0..n_rf)
        .map(|c| dft.col((c + shift) % n_rf).to_vec())
        .collect();
    CMatrix::from_columns(n_rf, columns)
}
