//! Saving and loading models and checkpoints.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::network::Model;
use super::params::{encode_params, fingerprint, params_from_file, read_param_file, CheckpointMeta, Layout};
use crate::error::{Error, Result};

pub fn save_model(model: &Model<f32>, path: &Path, meta: Option<&CheckpointMeta>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = encode_params(&model.params, fingerprint(&model.cfg), meta);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads parameters for the resolved `cfg`, returning any checkpoint metadata.
pub fn load_model(cfg: &ModelConfig, path: &Path) -> Result<(Model<f32>, Option<CheckpointMeta>)> {
    let file = read_param_file(path)?;
    let meta = file.meta.clone();
    let (_, specs) = Layout::build(cfg);
    let params = params_from_file(file, &specs, fingerprint(cfg))?;
    Ok((Model::from_params(cfg, params)?, meta))
}
