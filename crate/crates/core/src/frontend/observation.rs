//! Real/imaginary split and per-sample normalization of pilot observations.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Model input `T × 2 × K × S_w`, zero mean and unit variance over the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTensor {
    pub frames: usize,
    pub subcarriers: usize,
    pub beams: usize,
    pub data: Vec<f32>,
}

impl ObservationTensor {
    pub fn frame_len(&self) -> usize {
        2 * self.subcarriers * self.beams
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }
}

/// Splits `T × K × S_w` complex observations into real and imaginary planes
/// and normalizes jointly over all `T·2·K·S_w` values.
pub fn split_normalize(
    p_seq: &[Complex64],
    frames: usize,
    subcarriers: usize,
    beams: usize,
) -> Result<ObservationTensor> {
    let plane = subcarriers * beams;
    if p_seq.len() != frames * plane {
        return Err(Error::Shape(format!(
            "observation has {} entries, expected {frames} × {subcarriers} × {beams}",
            p_seq.len()
        )));
    }
    if p_seq.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Shape("observation contains non-finite values".into()));
    }
    let mut raw = Vec::with_capacity(2 * p_seq.len());
    for t in 0..frames {
        let block = &p_seq[t * plane..(t + 1) * plane];
        raw.extend(block.iter().map(|v| v.re));
        raw.extend(block.iter().map(|v| v.im));
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() || std <= mean.abs() * 1e-12 {
        return Err(Error::DegenerateSample);
    }
    Ok(ObservationTensor {
        frames,
        subcarriers,
        beams,
        data: raw.iter().map(|v| ((v - mean) / std) as f32).collect(),
    })
}
