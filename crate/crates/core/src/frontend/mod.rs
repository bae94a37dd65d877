//! Hybrid-beamforming front end: codebooks, pilots, uplink sounding, labels
//! and the observation tensor.

pub mod codebook;
pub mod dataset;
pub mod labels;
pub mod observation;
pub mod pilots;
pub mod sounding;

pub use codebook::{build_dft_codebook, build_wide_codebook, CMatrix, WideBeamCodebook};
pub use dataset::{
    assemble_dataset, generate_records, quadrant, transition_flags, DatasetContainer, DatasetRecord, DatasetStats,
    Dims, RareClassFilter,
};
pub use labels::{compute_beam_label, is_transition};
pub use observation::{split_normalize, ObservationTensor};
pub use sounding::{PrecoderKind, Sounder, SoundingConfig};
