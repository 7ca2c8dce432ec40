//! Full training state in one tensor file: both towers, temperature,
//! optimizer moments, and the step counter.
//!
//! Tensor names: `text.*`, `<modality>.*`, `loss.log_inv_temp`,
//! `optim.m.<key>`, `optim.v.<key>`, `optim.t`, `meta.step`, `meta.rng`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::config::RunConfig;
use crate::encoders::LANGUAGE;
use crate::error::{Error, Result};
use crate::tape::Mat;
use crate::tensor_file::{NamedTensor, TensorFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub modality: String,
    pub run: RunConfig,
}

pub fn checkpoint_file(state: &TrainState) -> Result<TensorFile> {
    let header = CheckpointHeader {
        modality: state.modality.clone(),
        run: state.run.clone(),
    };
    let mut tensors = Vec::new();
    for (_, p) in state.registry.text.store.iter() {
        tensors.push(NamedTensor::from_mat(format!("{LANGUAGE}.{}", p.name), &p.value));
    }
    for (_, p) in state.registry.entry(&state.modality)?.encoder.store.iter() {
        tensors.push(NamedTensor::from_mat(format!("{}.{}", state.modality, p.name), &p.value));
    }
    tensors.push(NamedTensor::from_mat(
        "loss.log_inv_temp",
        &Mat::from_elem((1, 1), state.temperature.log_inv_temp),
    ));
    for (key, (m, v)) in &state.optimizer.moments {
        tensors.push(NamedTensor::from_mat(format!("optim.m.{key}"), m));
        tensors.push(NamedTensor::from_mat(format!("optim.v.{key}"), v));
    }
    tensors.push(NamedTensor::u64s("optim.t", vec![state.optimizer.t]));
    tensors.push(NamedTensor::u64s("meta.step", vec![state.step]));
    tensors.push(NamedTensor::u64s("meta.rng", vec![state.run.train.seed, state.step]));
    Ok(TensorFile {
        config_json: serde_json::to_string(&header)?,
        tensors,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let file = checkpoint_file(state)?;
    let tmp = path.with_extension("lbck.tmp");
    file.write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuilds the state saved in `file`. The modality tower is rebuilt
/// without its init file, since every weight comes from the checkpoint.
pub fn restore_checkpoint(file: &TensorFile) -> Result<TrainState> {
    let header: CheckpointHeader =
        serde_json::from_str(&file.config_json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut run = header.run.clone();
    for m in run.modalities.values_mut() {
        m.init = None;
    }
    let mut state = TrainState::new(run, &header.modality)?;
    state.run = header.run;
    let prefix = format!("{}.", header.modality);
    let text_prefix = format!("{LANGUAGE}.");
    let mut seen = 0usize;
    for t in &file.tensors {
        if let Some(name) = t.name.strip_prefix(&text_prefix) {
            state.registry.text.store.assign(name, t.to_mat()?)?;
        } else if let Some(name) = t.name.strip_prefix(&prefix) {
            state.registry.entry_mut(&header.modality)?.encoder.store.assign(name, t.to_mat()?)?;
            seen += 1;
        } else if let Some(key) = t.name.strip_prefix("optim.m.") {
            let v = file.require(&format!("optim.v.{key}"))?.to_mat()?;
            state.optimizer.moments.insert(key.to_string(), (t.to_mat()?, v));
        }
    }
    let expected = state.registry.entry(&header.modality)?.encoder.store.len();
    if seen != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {seen} of {expected} {} parameters",
            header.modality
        )));
    }
    state.temperature.log_inv_temp = file.require("loss.log_inv_temp")?.to_mat()?[[0, 0]];
    state.optimizer.t = scalar(file, "optim.t")?;
    state.step = scalar(file, "meta.step")?;
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    restore_checkpoint(&TensorFile::read(path)?)
}

fn scalar(file: &TensorFile, name: &str) -> Result<u64> {
    file.require(name)?
        .as_u64s()?
        .first()
        .copied()
        .ok_or_else(|| Error::Checkpoint(format!("{name} is empty")))
}
