//! Labeled samples, rare-class filtering and the binary dataset container.
//!
//! Container layout (all little-endian):
//!
//! ```text
//! magic      8 bytes  "BCASTDS1"
//! version    u32      1
//! T          u32      observed frames per record
//! K          u32      subcarriers
//! S_w        u32      wide-beam codebook size
//! C          u32      retained classes
//! count      u64      records
//! remap      C × (u32 raw beam index, u32 class id)
//! records    count × record
//!
//! record:
//!   x            T·2·K·S_w × f32   frame-major, then re/im plane, subcarrier, beam
//!   scene        u32               0 = LOS, 1 = NLOS
//!   speed_norm   f32
//!   beam_labels  (T+1) × u32       raw beam index per slot
//!   class_id     u32
//!   distance_m   f32
//!   azimuth_rad  f32
//!   speed_mps    f32
//!   heading_rad  f32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::labels::{compute_beam_label, is_transition};
use super::observation::split_normalize;
use super::sounding::{Sounder, SoundingConfig};
use crate::bytes::ByteReader;
use crate::channel::{generate_ue_sequence, SimConfig, UeState};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Domain};

pub const DATASET_MAGIC: &[u8; 8] = b"BCASTDS1";
pub const DATASET_VERSION: u32 = 1;
/// Speed (km/h) that maps to a normalized speed of 1.
pub const SPEED_NORM_KMH: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UeSummary {
    pub distance_m: f32,
    pub azimuth_rad: f32,
    pub speed_mps: f32,
    pub heading_rad: f32,
}

impl From<&UeState> for UeSummary {
    fn from(ue: &UeState) -> Self {
        Self {
            distance_m: ue.distance_m as f32,
            azimuth_rad: ue.azimuth_rad as f32,
            speed_mps: ue.speed_mps as f32,
            heading_rad: ue.heading_rad as f32,
        }
    }
}

/// `3.6·v/120` clipped to `[0, 1]`.
pub fn normalized_speed(speed_mps: f64) -> f32 {
    (3.6 * speed_mps / SPEED_NORM_KMH).clamp(0.0, 1.0) as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    /// `T × 2 × K × S_w`.
    pub x: Vec<f32>,
    pub scene: u8,
    pub speed_norm: f32,
    /// Raw beam index for each of the `T + 1` slots.
    pub beam_labels: Vec<u32>,
    pub class_id: u32,
    pub ue: UeSummary,
}

impl DatasetRecord {
    pub fn is_transition(&self) -> bool {
        is_transition(&self.beam_labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub frames: usize,
    pub subcarriers: usize,
    pub beams: usize,
}

impl Dims {
    pub fn frame_len(&self) -> usize {
        2 * self.subcarriers * self.beams
    }

    pub fn input_len(&self) -> usize {
        self.frames * self.frame_len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetContainer {
    pub dims: Dims,
    /// `(raw beam index, class id)`, sorted by raw index.
    pub remap: Vec<(u32, u32)>,
    pub records: Vec<DatasetRecord>,
}

/// Minimum per-class record count below which target beams are discarded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RareClassFilter {
    MinCount(usize),
    /// Fraction of all records.
    Fraction(f64),
}

impl RareClassFilter {
    fn keeps(&self, count: usize, total: usize) -> bool {
        match *self {
            RareClassFilter::MinCount(n) => count >= n,
            RareClassFilter::Fraction(f) => count as f64 >= f * total as f64,
        }
    }
}

/// Generates, sounds and labels UE `index`. Class ids are assigned later.
pub fn generate_record(
    sim: &SimConfig,
    sounder: &Sounder,
    seed: u64,
    index: u64,
) -> Result<DatasetRecord> {
    let seq = generate_ue_sequence(sim, seed, index);
    let frames = sim.observed_slots();
    let mut rng = stream_rng(seed, Domain::Sounding, index);
    let mut observations = Vec::with_capacity(frames * sim.num_subcarriers * sounder.codebook_size());
    for t in 0..frames {
        observations.extend(sounder.sound_slot(seq.slot(t), &mut rng)?);
    }
    let x = split_normalize(&observations, frames, sim.num_subcarriers, sounder.codebook_size())?;
    let beam_labels = (0..seq.slots)
        .map(|t| compute_beam_label(seq.slot(t), &sounder.codebook) as u32)
        .collect();
    Ok(DatasetRecord {
        x: x.data,
        scene: seq.ue.scene.label(),
        speed_norm: normalized_speed(seq.ue.speed_mps),
        beam_labels,
        class_id: u32::MAX,
        ue: UeSummary::from(&seq.ue),
    })
}

/// Generates `count` records in index order; work is spread over the rayon pool.
pub fn generate_records(
    sim: &SimConfig,
    sounding: &SoundingConfig,
    seed: u64,
    count: usize,
) -> Result<(Dims, Vec<DatasetRecord>)> {
    sim.validate()?;
    let sounder = Sounder::new(sounding, sim.num_antennas, sim.num_subcarriers)?;
    let records = (0..count as u64)
        .into_par_iter()
        .map(|i| generate_record(sim, &sounder, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let dims = Dims {
        frames: sim.observed_slots(),
        subcarriers: sim.num_subcarriers,
        beams: sounder.codebook_size(),
    };
    Ok((dims, records))
}

/// Drops records whose target beam is rare and remaps the surviving target
/// beams to contiguous class ids in ascending raw order.
pub fn assemble_dataset(
    dims: Dims,
    records: Vec<DatasetRecord>,
    filter: RareClassFilter,
) -> Result<DatasetContainer> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("no sequences supplied".into()));
    }
    let total = records.len();
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for r in &records {
        *counts.entry(*r.beam_labels.last().expect("labels present")).or_default() += 1;
    }
    let remap: Vec<(u32, u32)> = counts
        .iter()
        .filter(|&(_, &c)| filter.keeps(c, total))
        .enumerate()
        .map(|(class, (&raw, _))| (raw, class as u32))
        .collect();
    if remap.is_empty() {
        return Err(Error::EmptyDataset(
            "every target beam fell below the rare-class threshold".into(),
        ));
    }
    let lookup: BTreeMap<u32, u32> = remap.iter().copied().collect();
    let records = records
        .into_iter()
        .filter_map(|mut r| {
            let target = *r.beam_labels.last()?;
            lookup.get(&target).map(|&c| {
                r.class_id = c;
                r
            })
        })
        .collect();
    Ok(DatasetContainer {
        dims,
        remap,
        records,
    })
}

/// Scene/speed quadrant `2·scene + (speed_norm ≥ 0.5)`: LOS-L, LOS-H, NLOS-L, NLOS-H.
pub fn quadrant(scene: u8, speed_norm: f32) -> usize {
    2 * scene as usize + usize::from(speed_norm >= 0.5)
}

/// Transition flag per record (last observed beam differs from the target).
pub fn transition_flags(records: &[DatasetRecord]) -> Vec<bool> {
    records.iter().map(DatasetRecord::is_transition).collect()
}

impl DatasetContainer {
    pub fn num_classes(&self) -> usize {
        self.remap.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_records(&self, records: Vec<DatasetRecord>) -> DatasetContainer {
        DatasetContainer {
            dims: self.dims,
            remap: self.remap.clone(),
            records,
        }
    }

    /// Record-level shuffle under `seed`, then 70/15/15 (floors for train and
    /// validation, remainder to test).
    pub fn split(&self, seed: u64) -> [DatasetContainer; 3] {
        let n = self.records.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, Domain::Split, 0));
        let n_train = n * 70 / 100;
        let n_val = n * 15 / 100;
        let take = |range: std::ops::Range<usize>| {
            self.with_records(order[range].iter().map(|&i| self.records[i].clone()).collect())
        };
        [
            take(0..n_train),
            take(n_train..n_train + n_val),
            take(n_train + n_val..n),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dims;
        let mut out = Vec::with_capacity(40 + self.records.len() * (d.input_len() + d.frames + 12) * 4);
        out.extend_from_slice(DATASET_MAGIC);
        for v in [DATASET_VERSION, d.frames as u32, d.subcarriers as u32, d.beams as u32, self.remap.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for &(raw, class) in &self.remap {
            out.extend_from_slice(&raw.to_le_bytes());
            out.extend_from_slice(&class.to_le_bytes());
        }
        for r in &self.records {
            for v in &r.x {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(r.scene as u32).to_le_bytes());
            out.extend_from_slice(&r.speed_norm.to_le_bytes());
            for b in &r.beam_labels {
                out.extend_from_slice(&b.to_le_bytes());
            }
            out.extend_from_slice(&r.class_id.to_le_bytes());
            for v in [r.ue.distance_m, r.ue.azimuth_rad, r.ue.speed_mps, r.ue.heading_rad] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<DatasetContainer> {
        let fail = |message: String| Error::Format {
            path: origin.to_path_buf(),
            message,
        };
        let mut cur = ByteReader::new(bytes);
        let magic = cur.take(8).ok_or_else(|| fail("truncated header".into()))?;
        if magic != DATASET_MAGIC {
            return Err(fail("not a dataset container (bad magic)".into()));
        }
        let mut header = [0u32; 5];
        for h in &mut header {
            *h = cur.u32().ok_or_else(|| fail("truncated header".into()))?;
        }
        let [version, frames, subcarriers, beams, classes] = header;
        if version != DATASET_VERSION {
            return Err(fail(format!("unsupported container version {version}")));
        }
        let count = cur.u64().ok_or_else(|| fail("truncated header".into()))? as usize;
        let dims = Dims {
            frames: frames as usize,
            subcarriers: subcarriers as usize,
            beams: beams as usize,
        };
        let mut remap = Vec::with_capacity(classes as usize);
        for _ in 0..classes {
            let raw = cur.u32().ok_or_else(|| fail("truncated remap table".into()))?;
            let class = cur.u32().ok_or_else(|| fail("truncated remap table".into()))?;
            remap.push((raw, class));
        }
        let mut seen_raw: Vec<u32> = remap.iter().map(|p| p.0).collect();
        seen_raw.sort_unstable();
        seen_raw.dedup();
        if seen_raw.len() != remap.len() {
            return Err(fail("remap table is not injective".into()));
        }
        let record_len = (dims.input_len() + dims.frames + 8) * 4;
        if cur.remaining() != count * record_len {
            return Err(fail(format!(
                "header declares {count} records of {record_len} bytes but {} bytes follow",
                cur.remaining()
            )));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let x = (0..dims.input_len()).map(|_| cur.f32().unwrap()).collect();
            let scene = cur.u32().unwrap() as u8;
            let speed_norm = cur.f32().unwrap();
            let beam_labels = (0..=dims.frames).map(|_| cur.u32().unwrap()).collect();
            let class_id = cur.u32().unwrap();
            if class_id as usize >= remap.len() {
                return Err(fail(format!("class id {class_id} out of range")));
            }
            let ue = UeSummary {
                distance_m: cur.f32().unwrap(),
                azimuth_rad: cur.f32().unwrap(),
                speed_mps: cur.f32().unwrap(),
                heading_rad: cur.f32().unwrap(),
            };
            records.push(DatasetRecord {
                x,
                scene,
                speed_norm,
                beam_labels,
                class_id,
                ue,
            });
        }
        Ok(DatasetContainer {
            dims,
            remap,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<DatasetContainer> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Summary written next to each generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub records: usize,
    pub classes: usize,
    /// `(raw beam, count)` of target beams.
    pub class_histogram: Vec<(u32, usize)>,
    pub transitions: usize,
    /// LOS-L, LOS-H, NLOS-L, NLOS-H.
    pub quadrant_counts: [usize; 4],
}

impl DatasetStats {
    pub fn compute(container: &DatasetContainer) -> Self {
        let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
        let mut quadrants = [0usize; 4];
        for r in &container.records {
            *hist.entry(*r.beam_labels.last().unwrap()).or_default() += 1;
            quadrants[quadrant(r.scene, r.speed_norm)] += 1;
        }
        Self {
            records: container.len(),
            classes: container.num_classes(),
            class_histogram: hist.into_iter().collect(),
            transitions: transition_flags(&container.records).iter().filter(|&&f| f).count(),
            quadrant_counts: quadrants,
        }
    }

    pub fn transition_fraction(&self) -> f64 {
        if self.records == 0 {
            0.0
        } else {
            self.transitions as f64 / self.records as f64
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("records={}\n", self.records));
        s.push_str(&format!("classes={}\n", self.classes));
        s.push_str(&format!("transitions={}\n", self.transitions));
        s.push_str(&format!("transition_fraction={:.6}\n", self.transition_fraction()));
        for (name, c) in ["los_low", "los_high", "nlos_low", "nlos_high"].iter().zip(self.quadrant_counts) {
            s.push_str(&format!("quadrant.{name}={c}\n"));
        }
        for (raw, c) in &self.class_histogram {
            s.push_str(&format!("class_count.{raw}={c}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn synthetic_record(labels: &[u32], scene: u8, speed: f32, dims: Dims) -> DatasetRecord {
        DatasetRecord {
            x: (0..dims.input_len()).map(|i| (i as f32 * 0.37).sin()).collect(),
            scene,
            speed_norm: speed,
            beam_labels: labels.to_vec(),
            class_id: u32::MAX,
            ue: UeSummary {
                distance_m: 40.0,
                azimuth_rad: 0.1,
                speed_mps: speed * 33.3,
                heading_rad: 1.0,
            },
        }
    }

    fn dims() -> Dims {
        Dims {
            frames: 2,
            subcarriers: 3,
            beams: 4,
        }
    }

    #[test]
    fn zero_threshold_keeps_every_target() {
        let recs: Vec<_> = [5u32, 9, 9, 2, 5]
            .iter()
            .map(|&b| synthetic_record(&[b, b, b], 0, 0.2, dims()))
            .collect();
        let ds = assemble_dataset(dims(), recs, RareClassFilter::MinCount(0)).unwrap();
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.remap, vec![(2, 0), (5, 1), (9, 2)]);
        assert_eq!(ds.records.iter().map(|r| r.class_id).collect::<Vec<_>>(), vec![1, 2, 2, 0, 1]);
    }

    #[test]
    fn singleton_class_is_filtered() {
        let recs: Vec<_> = [5u32, 9, 9, 2, 5]
            .iter()
            .map(|&b| synthetic_record(&[b, b, b], 0, 0.2, dims()))
            .collect();
        let ds = assemble_dataset(dims(), recs, RareClassFilter::MinCount(2)).unwrap();
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.len(), 4);
        assert!(ds.records.iter().all(|r| *r.beam_labels.last().unwrap() != 2));
    }

    #[test]
    fn all_classes_filtered_is_an_error() {
        let recs = vec![synthetic_record(&[1, 1, 1], 0, 0.2, dims())];
        assert!(matches!(
            assemble_dataset(dims(), recs, RareClassFilter::MinCount(5)),
            Err(Error::EmptyDataset(_))
        ));
        assert!(assemble_dataset(dims(), vec![], RareClassFilter::MinCount(0)).is_err());
    }

    #[test]
    fn container_round_trip_is_identity() {
        let recs: Vec<_> = (0..7u32)
            .map(|i| synthetic_record(&[i % 3, (i + 1) % 3, i % 2], (i % 2) as u8, i as f32 / 7.0, dims()))
            .collect();
        let ds = assemble_dataset(dims(), recs, RareClassFilter::MinCount(0)).unwrap();
        let bytes = ds.to_bytes();
        let back = DatasetContainer::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_container_is_rejected() {
        let recs = vec![synthetic_record(&[1, 1, 1], 0, 0.2, dims())];
        let ds = assemble_dataset(dims(), recs, RareClassFilter::MinCount(0)).unwrap();
        let bytes = ds.to_bytes();
        assert!(DatasetContainer::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(DatasetContainer::from_bytes(&bad, Path::new("mem")).is_err());
    }

    #[test]
    fn split_counts_for_one_hundred() {
        let recs: Vec<_> = (0..100u32).map(|i| synthetic_record(&[i % 4, i % 4, i % 4], 0, 0.1, dims())).collect();
        let ds = assemble_dataset(dims(), recs, RareClassFilter::MinCount(0)).unwrap();
        let [a, b, c] = ds.split(3);
        assert_eq!((a.len(), b.len(), c.len()), (70, 15, 15));
        let [a2, ..] = ds.split(3);
        assert_eq!(a, a2);
    }

    #[test]
    fn transition_flags_on_constructed_records() {
        let recs = vec![
            synthetic_record(&[4, 4, 4], 0, 0.1, dims()),
            synthetic_record(&[3, 7, 9], 0, 0.1, dims()),
        ];
        assert_eq!(transition_flags(&recs), vec![false, true]);
    }

    #[test]
    fn speed_normalization_clips() {
        assert_eq!(normalized_speed(0.0), 0.0);
        assert_eq!(normalized_speed(100.0), 1.0);
        assert!((normalized_speed(60.0 / 3.6) - 0.5).abs() < 1e-7);
    }
}
