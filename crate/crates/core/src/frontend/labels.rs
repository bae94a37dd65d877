//! Beam labels and transition instants.

use num_complex::Complex64;

use super::codebook::{inner, WideBeamCodebook};

/// Subcarrier-averaged received power `(1/K)·Σ_k |f_g^H h_k|²` for every codeword.
pub fn beam_powers(h_slot: &[Complex64], codebook: &WideBeamCodebook) -> Vec<f64> {
    let n_r = codebook.antennas();
    let k_count = h_slot.len() / n_r;
    (0..codebook.size())
        .map(|g| {
            let f = codebook.codeword(g);
            h_slot
                .chunks_exact(n_r)
                .map(|h| inner(f, h).norm_sqr())
                .sum::<f64>()
                / k_count as f64
        })
        .collect()
}

/// Index of the first maximum; NaNs never win.
pub fn argmax_first<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Optimal wide beam for one slot, ties to the smallest index.
pub fn compute_beam_label(h_slot: &[Complex64], codebook: &WideBeamCodebook) -> usize {
    argmax_first(&beam_powers(h_slot, codebook))
}

/// Whether the target beam differs from the last observed beam.
pub fn is_transition(beam_labels: &[u32]) -> bool {
    let n = beam_labels.len();
    n >= 2 && beam_labels[n - 2] != beam_labels[n - 1]
}
