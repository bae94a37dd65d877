//! Compressed uplink sounding through the hybrid combiner.
//!
//! Per OFDM symbol `l` the array is combined by block `l` of the wide-beam
//! codebook (`N_rf` codewords), then by the subcarrier's digital matrix.
//! After `S_w / N_rf` symbols every subcarrier has produced `S_w` complex
//! measurements, which form one row of the slot's observation matrix.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::codebook::{build_dft_codebook, build_wide_codebook, inner, CMatrix, WideBeamCodebook};
use super::pilots::{build_digital_precoder, default_roots, pilot_sequence, pilot_zc_length};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrecoderKind {
    /// DFT matrix with subcarrier-dependent cyclic column rotation.
    #[default]
    RotatedDft,
    /// Bypass of the digital stage (test hook).
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoundingConfig {
    pub n_rf_chains: usize,
    /// Adjacent DFT beams merged into one wide beam.
    pub wide_beam_group: usize,
    pub tx_power_mw: f64,
    /// Noise power per antenna port; `-inf` disables noise.
    pub noise_power_dbm: f64,
    /// One root per OFDM symbol. Empty selects the smallest coprime roots.
    pub zc_roots: Vec<usize>,
    pub precoder: PrecoderKind,
}

impl Default for SoundingConfig {
    fn default() -> Self {
        Self {
            n_rf_chains: 8,
            wide_beam_group: 2,
            tx_power_mw: 200.0,
            noise_power_dbm: -123.0,
            zc_roots: Vec::new(),
            precoder: PrecoderKind::RotatedDft,
        }
    }
}

impl SoundingConfig {
    pub fn noise_power_mw(&self) -> f64 {
        10f64.powf(self.noise_power_dbm / 10.0)
    }

    pub fn codebook_size(&self, n_antennas: usize) -> usize {
        n_antennas / self.wide_beam_group.max(1)
    }
}

/// Precomputed codebook, digital matrices and pilots for one array geometry.
#[derive(Debug, Clone)]
pub struct Sounder {
    pub codebook: WideBeamCodebook,
    /// One `N_rf × N_rf` matrix per subcarrier.
    pub precoders: Vec<CMatrix>,
    /// `pilots[l][k]`, unit modulus.
    pub pilots: Vec<Vec<Complex64>>,
    pub n_rf: usize,
    pub n_symbols: usize,
    pub subcarriers: usize,
    amplitude: f64,
    noise_std: f64,
}

impl Sounder {
    pub fn new(config: &SoundingConfig, n_antennas: usize, n_subcarriers: usize) -> Result<Self> {
        let codebook = build_wide_codebook(&build_dft_codebook(n_antennas), config.wide_beam_group)?;
        let s_w = codebook.size();
        let n_rf = config.n_rf_chains;
        if n_rf == 0 || s_w % n_rf != 0 {
            return Err(Error::Config(format!(
                "sounding: codebook size {s_w} is not a multiple of n_rf_chains {n_rf}"
            )));
        }
        let n_symbols = s_w / n_rf;
        let zc_len = pilot_zc_length(n_subcarriers);
        let roots = if config.zc_roots.is_empty() {
            default_roots(n_symbols, zc_len)
        } else {
            config.zc_roots.clone()
        };
        if roots.len() != n_symbols && zc_len > 1 {
            return Err(Error::Config(format!(
                "sounding: need {n_symbols} distinct ZC roots, got {}",
                roots.len()
            )));
        }
        let mut seen = roots.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != roots.len() {
            return Err(Error::Config("sounding: ZC roots must be distinct".into()));
        }
        let pilots = (0..n_symbols)
            .map(|l| pilot_sequence(roots.get(l).copied().unwrap_or(1), n_subcarriers))
            .collect::<Result<Vec<_>>>()?;
        let precoders = (0..n_subcarriers)
            .map(|k| match config.precoder {
                PrecoderKind::RotatedDft => build_digital_precoder(k, n_rf),
                PrecoderKind::Identity => CMatrix::identity(n_rf),
            })
            .collect();
        Ok(Self {
            codebook,
            precoders,
            pilots,
            n_rf,
            n_symbols,
            subcarriers: n_subcarriers,
            amplitude: (config.tx_power_mw / n_subcarriers as f64).sqrt(),
            noise_std: config.noise_power_mw().sqrt(),
        })
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.size()
    }

    /// Observation matrix `P_t` (`K × S_w`, row-major) for one slot's channel
    /// block `h_slot` (`K × N_r`, row-major).
    pub fn sound_slot<R: Rng + ?Sized>(
        &self,
        h_slot: &[Complex64],
        rng: &mut R,
    ) -> Result<Vec<Complex64>> {
        let n_r = self.codebook.antennas();
        if h_slot.len() != self.subcarriers * n_r {
            return Err(Error::Shape(format!(
                "slot block has {} entries, expected {} × {}",
                h_slot.len(),
                self.subcarriers,
                n_r
            )));
        }
        let s_w = self.codebook_size();
        let mut out = vec![Complex64::new(0.0, 0.0); self.subcarriers * s_w];
        let mut noise = vec![Complex64::new(0.0, 0.0); n_r];
        let mut analog = vec![Complex64::new(0.0, 0.0); self.n_rf];
        for k in 0..self.subcarriers {
            let h = &h_slot[k * n_r..(k + 1) * n_r];
            let f_bb = &self.precoders[k];
            for l in 0..self.n_symbols {
                let x = self.pilots[l][k];
                if self.noise_std > 0.0 {
                    for v in noise.iter_mut() {
                        let re: f64 = StandardNormal.sample(rng);
                        let im: f64 = StandardNormal.sample(rng);
                        *v = Complex64::new(re, im) * (self.noise_std * std::f64::consts::FRAC_1_SQRT_2);
                    }
                }
                for (j, a) in analog.iter_mut().enumerate() {
                    let f = self.codebook.codeword(l * self.n_rf + j);
                    let mut v = inner(f, h) * (self.amplitude * x);
                    if self.noise_std > 0.0 {
                        v += inner(f, &noise);
                    }
                    *a = v;
                }
                let row = &mut out[k * s_w + l * self.n_rf..k * s_w + (l + 1) * self.n_rf];
                for (i, dst) in row.iter_mut().enumerate() {
                    *dst = inner(f_bb.col(i), &analog);
                }
            }
        }
        Ok(out)
    }
}
