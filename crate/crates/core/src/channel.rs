//! Geometric multipath channel simulator.
//!
//! Each UE sees a sum of plane waves arriving at a uniform linear array.
//! Paths carry a complex gain, an excess delay (frequency selectivity), a
//! Doppler shift (slot-to-slot phase rotation) and an angle of arrival that
//! drifts with the UE's transverse motion. LOS draws one dominant path plus
//! weak scatterers at a fixed Rician K-factor; NLOS draws scatterers only.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Domain};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Trajectories are reflected before the UE gets closer than this to the array.
const MIN_DISTANCE_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub carrier_freq_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub num_subcarriers: usize,
    pub num_antennas: usize,
    /// Element spacing in wavelengths.
    pub element_spacing: f64,
    pub slot_interval_s: f64,
    /// Number of slots per sequence, observed slots plus the target slot.
    pub seq_len: usize,
    pub distance_range_m: [f64; 2],
    pub azimuth_range_deg: [f64; 2],
    pub speed_max_kmh: f64,
    pub los_fraction: f64,
    /// Total LOS path count, dominant path included.
    pub paths_los: usize,
    pub paths_nlos: usize,
    pub rician_k_db: f64,
    /// Uniform half-width of scatterer angle offsets around the UE azimuth.
    pub los_angle_spread_deg: f64,
    pub nlos_angle_spread_deg: f64,
    pub los_max_excess_delay_ns: f64,
    pub nlos_max_excess_delay_ns: f64,
    pub pathloss_exponent_los: f64,
    pub pathloss_exponent_nlos: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            carrier_freq_hz: 28e9,
            subcarrier_spacing_hz: 120e3,
            num_subcarriers: 60,
            num_antennas: 64,
            element_spacing: 0.5,
            slot_interval_s: 0.01,
            seq_len: 11,
            distance_range_m: [30.0, 100.0],
            azimuth_range_deg: [-60.0, 60.0],
            speed_max_kmh: 120.0,
            los_fraction: 0.5,
            paths_los: 4,
            paths_nlos: 6,
            rician_k_db: 10.0,
            los_angle_spread_deg: 10.0,
            nlos_angle_spread_deg: 30.0,
            los_max_excess_delay_ns: 200.0,
            nlos_max_excess_delay_ns: 500.0,
            pathloss_exponent_los: 2.0,
            pathloss_exponent_nlos: 3.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(format!("sim: {msg}")));
        if !(self.carrier_freq_hz > 0.0) || !(self.subcarrier_spacing_hz > 0.0) {
            return fail("carrier frequency and subcarrier spacing must be positive");
        }
        if self.num_subcarriers == 0 || self.num_antennas == 0 {
            return fail("num_subcarriers and num_antennas must be positive");
        }
        if !(self.slot_interval_s > 0.0) {
            return fail("slot_interval_s must be positive");
        }
        if self.seq_len < 2 {
            return fail("seq_len must be at least 2");
        }
        let [dmin, dmax] = self.distance_range_m;
        if !(dmin < dmax) || dmin <= 0.0 {
            return fail("distance_range_m must satisfy 0 < min < max");
        }
        let [amin, amax] = self.azimuth_range_deg;
        if !(amin < amax) {
            return fail("azimuth_range_deg must satisfy min < max");
        }
        if !(self.speed_max_kmh > 0.0) {
            return fail("speed_max_kmh must be positive");
        }
        if !(0.0..=1.0).contains(&self.los_fraction) {
            return fail("los_fraction must lie in [0, 1]");
        }
        if self.paths_los < 1 || self.paths_nlos < 1 {
            return fail("path counts must be at least 1");
        }
        Ok(())
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq_hz
    }

    pub fn speed_max_mps(&self) -> f64 {
        self.speed_max_kmh / 3.6
    }

    /// Observed slots per sequence (the last slot is the prediction target).
    pub fn observed_slots(&self) -> usize {
        self.seq_len - 1
    }
}

/// Propagation regime. The discriminant is the binary scene label `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scene {
    Los = 0,
    Nlos = 1,
}

impl Scene {
    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(s: u8) -> Option<Scene> {
        match s {
            0 => Some(Scene::Los),
            1 => Some(Scene::Nlos),
            _ => None,
        }
    }
}

/// UE kinematics and scene at the first slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UeState {
    pub distance_m: f64,
    pub azimuth_rad: f64,
    pub speed_mps: f64,
    pub heading_rad: f64,
    pub scene: Scene,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub gain: Complex64,
    /// Angle of arrival at the first slot.
    pub aoa_rad: f64,
    /// Excess delay relative to the first arrival.
    pub delay_s: f64,
    pub doppler_hz: f64,
    pub dominant: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathSet {
    pub paths: Vec<Path>,
    /// Large-scale amplitude factor (square root of the linear path gain).
    pub pathloss_amplitude: f64,
}

impl PathSet {
    /// Dominant power over total scattered power, in dB. `None` without a dominant path.
    pub fn rician_k_db(&self) -> Option<f64> {
        let dominant: f64 = self
            .paths
            .iter()
            .filter(|p| p.dominant)
            .map(|p| p.gain.norm_sqr())
            .sum();
        let scattered: f64 = self
            .paths
            .iter()
            .filter(|p| !p.dominant)
            .map(|p| p.gain.norm_sqr())
            .sum();
        if dominant == 0.0 || scattered == 0.0 {
            return None;
        }
        Some(10.0 * (dominant / scattered).log10())
    }
}

/// Channel tensor of shape `(slots, K, N_r)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSequence {
    pub slots: usize,
    pub subcarriers: usize,
    pub antennas: usize,
    pub h: Vec<Complex64>,
    pub ue: UeState,
    pub path_set: PathSet,
}

impl ChannelSequence {
    /// All subcarrier vectors of slot `t` as a `K × N_r` row-major block.
    pub fn slot(&self, t: usize) -> &[Complex64] {
        let stride = self.subcarriers * self.antennas;
        &self.h[t * stride..(t + 1) * stride]
    }

    pub fn vector(&self, t: usize, k: usize) -> &[Complex64] {
        let start = (t * self.subcarriers + k) * self.antennas;
        &self.h[start..start + self.antennas]
    }
}

/// ULA response: entry `n` is `exp(j·2π·n·spacing·sin(angle))`.
pub fn steering_vector(angle: f64, n_antennas: usize, spacing: f64) -> Vec<Complex64> {
    let step = 2.0 * PI * spacing * angle.sin();
    (0..n_antennas)
        .map(|n| Complex64::from_polar(1.0, step * n as f64))
        .collect()
}

pub fn draw_ue<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> UeState {
    let [dmin, dmax] = config.distance_range_m;
    let [amin, amax] = config.azimuth_range_deg;
    let distance_m = rng.random_range(dmin..dmax);
    let azimuth_rad = rng.random_range(amin..amax).to_radians();
    let speed_mps = rng.random::<f64>() * config.speed_max_mps();
    let heading_rad = rng.random::<f64>() * 2.0 * PI;
    let scene = if rng.random::<f64>() < config.los_fraction {
        Scene::Los
    } else {
        Scene::Nlos
    };
    UeState {
        distance_m,
        azimuth_rad,
        speed_mps,
        heading_rad,
        scene,
    }
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Draws the multipath structure for one UE.
pub fn draw_paths<R: Rng + ?Sized>(ue: &UeState, config: &SimConfig, rng: &mut R) -> PathSet {
    let doppler_max = ue.speed_mps / config.wavelength_m();
    let (n_paths, spread_deg, max_delay_ns, exponent) = match ue.scene {
        Scene::Los => (
            config.paths_los,
            config.los_angle_spread_deg,
            config.los_max_excess_delay_ns,
            config.pathloss_exponent_los,
        ),
        Scene::Nlos => (
            config.paths_nlos,
            config.nlos_angle_spread_deg,
            config.nlos_max_excess_delay_ns,
            config.pathloss_exponent_nlos,
        ),
    };

    let mut paths = Vec::with_capacity(n_paths);
    let n_scattered = match ue.scene {
        Scene::Los => {
            // Transmitting towards the array: the departure direction is azimuth + π.
            let doppler = doppler_max * (ue.heading_rad - ue.azimuth_rad - PI).cos();
            let phase = rng.random::<f64>() * 2.0 * PI;
            paths.push(Path {
                gain: Complex64::from_polar(1.0, phase),
                aoa_rad: ue.azimuth_rad,
                delay_s: 0.0,
                doppler_hz: doppler,
                dominant: true,
            });
            n_paths - 1
        }
        Scene::Nlos => n_paths,
    };

    for _ in 0..n_scattered {
        let offset = rng.random_range(-1.0..=1.0) * spread_deg.to_radians();
        let departure = rng.random::<f64>() * 2.0 * PI;
        let delay_s = rng.random::<f64>() * max_delay_ns * 1e-9;
        paths.push(Path {
            gain: complex_gaussian(rng) * (1.0 / n_scattered as f64).sqrt(),
            aoa_rad: ue.azimuth_rad + offset,
            delay_s,
            doppler_hz: doppler_max * (ue.heading_rad - departure).cos(),
            dominant: false,
        });
    }

    if ue.scene == Scene::Los {
        // Pin the realised dominant-to-scattered ratio to the configured K-factor,
        // with total power 1.
        let k_lin = 10f64.powf(config.rician_k_db / 10.0);
        let scattered: f64 = paths[1..].iter().map(|p| p.gain.norm_sqr()).sum();
        let dominant_amp = (k_lin / (k_lin + 1.0)).sqrt();
        paths[0].gain *= dominant_amp;
        if scattered > 0.0 {
            let scale = ((1.0 / (k_lin + 1.0)) / scattered).sqrt();
            for p in &mut paths[1..] {
                p.gain *= scale;
            }
        }
    }

    let free_space_1m_db = 20.0 * (4.0 * PI / config.wavelength_m()).log10();
    let pathloss_db = free_space_1m_db + 10.0 * exponent * ue.distance_m.log10();
    PathSet {
        paths,
        pathloss_amplitude: 10f64.powf(-pathloss_db / 20.0),
    }
}

/// Azimuth offset of the UE at every slot relative to slot 0.
///
/// First-order kinematics: the transverse velocity component rotates the
/// UE by `v·sin(heading − azimuth)/d·Δt` per slot and the radial component
/// changes the range.
pub fn azimuth_drift(ue: &UeState, config: &SimConfig) -> Vec<f64> {
    let dt = config.slot_interval_s;
    let mut distance = ue.distance_m;
    let mut azimuth = ue.azimuth_rad;
    let mut heading = ue.heading_rad;
    let mut drift = Vec::with_capacity(config.seq_len);
    drift.push(0.0);
    for _ in 1..config.seq_len {
        let mut radial = ue.speed_mps * (heading - azimuth).cos() * dt;
        if distance + radial < MIN_DISTANCE_M {
            // Mirror the heading about the transverse axis.
            heading = 2.0 * azimuth + PI - heading;
            radial = ue.speed_mps * (heading - azimuth).cos() * dt;
        }
        let transverse = ue.speed_mps * (heading - azimuth).sin() * dt;
        azimuth += transverse / distance;
        distance += radial;
        drift.push(azimuth - ue.azimuth_rad);
    }
    drift
}

/// Evaluates the channel tensor for a fixed path set.
pub fn evolve(ue: &UeState, path_set: PathSet, config: &SimConfig) -> ChannelSequence {
    let slots = config.seq_len;
    let k_count = config.num_subcarriers;
    let n_r = config.num_antennas;
    let drift = azimuth_drift(ue, config);
    let mut h = vec![Complex64::new(0.0, 0.0); slots * k_count * n_r];

    for (t, &delta) in drift.iter().enumerate() {
        for path in &path_set.paths {
            let a = steering_vector(path.aoa_rad + delta, n_r, config.element_spacing);
            let time_phase = 2.0 * PI * path.doppler_hz * t as f64 * config.slot_interval_s;
            let base = path.gain * path_set.pathloss_amplitude;
            for k in 0..k_count {
                let freq_phase =
                    -2.0 * PI * k as f64 * config.subcarrier_spacing_hz * path.delay_s;
                let coeff = base * Complex64::from_polar(1.0, time_phase + freq_phase);
                let row = &mut h[(t * k_count + k) * n_r..(t * k_count + k + 1) * n_r];
                for (dst, &an) in row.iter_mut().zip(&a) {
                    *dst += coeff * an;
                }
            }
        }
    }

    ChannelSequence {
        slots,
        subcarriers: k_count,
        antennas: n_r,
        h,
        ue: *ue,
        path_set,
    }
}

pub fn synthesize_sequence<R: Rng + ?Sized>(
    ue: &UeState,
    config: &SimConfig,
    rng: &mut R,
) -> ChannelSequence {
    let paths = draw_paths(ue, config, rng);
    evolve(ue, paths, config)
}

/// Draws UE `index` and its channel from the per-UE sub-streams of `seed`.
pub fn generate_ue_sequence(config: &SimConfig, seed: u64, index: u64) -> ChannelSequence {
    let mut ue_rng = stream_rng(seed, Domain::Ue, index);
    let ue = draw_ue(config, &mut ue_rng);
    let mut ch_rng = stream_rng(seed, Domain::Channel, index);
    synthesize_sequence(&ue, config, &mut ch_rng)
}

/// Normalized slot-to-slot correlation `|⟨h_t, h_{t+1}⟩| / (‖h_t‖‖h_{t+1}‖)`
/// averaged over slots, with all subcarriers stacked into one vector.
pub fn mean_temporal_correlation(seq: &ChannelSequence) -> f64 {
    let mut total = 0.0;
    for t in 0..seq.slots - 1 {
        let a = seq.slot(t);
        let b = seq.slot(t + 1);
        let inner: Complex64 = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
        let na: f64 = a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        total += inner.norm() / (na * nb);
    }
    total / (seq.slots - 1) as f64
}
