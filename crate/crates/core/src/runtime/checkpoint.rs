//! Training checkpoints: trainable parameters, optimizer state and run identity.

use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::optim::StableAdamW;
use crate::container::TensorFile;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Parameterized;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_digest: String,
    pub weight_id: String,
    pub encoder_checksum: String,
    /// Number of completed iterations.
    pub iteration: u64,
    /// Consecutive skipped batches at save time.
    pub bad_streak: usize,
}

pub fn save_checkpoint(path: &Path, model: &Model, optim: Option<&StableAdamW>, meta: &CheckpointMeta) -> Result<()> {
    let mut tf = TensorFile::new(serde_json::to_value(meta)?);
    model.trainable.visit("trainable", &mut |name, v| tf.push(name, v.to_owned()));
    if let Some(o) = optim {
        o.save_into(&mut tf);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    // write-then-rename so an interrupted save never leaves a truncated checkpoint
    let tmp = path.with_extension("dlck.tmp");
    tf.save(CHECKPOINT_MAGIC, &tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_meta(tf: &TensorFile) -> Result<CheckpointMeta> {
    serde_json::from_value(tf.meta.clone()).map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))
}

/// Loads parameters (and optimizer state when `optim` is given) into `model`.
///
/// Refuses checkpoints whose configuration digest or encoder differ from the model's.
pub fn load_checkpoint(
    path: &Path,
    model: &mut Model,
    optim: Option<&mut StableAdamW>,
    expected_digest: &str,
) -> Result<CheckpointMeta> {
    let mut tf = TensorFile::load(CHECKPOINT_MAGIC, path)?;
    let meta = read_meta(&tf)?;
    if meta.config_digest != expected_digest {
        return Err(Error::Checkpoint(format!(
            "{} was trained with config digest {}, current config has {expected_digest}",
            path.display(),
            meta.config_digest
        )));
    }
    let checksum = model.encoder.checksum();
    if meta.encoder_checksum != checksum {
        return Err(Error::Checkpoint(format!(
            "{} was trained on encoder `{}` ({}), current encoder checksum is {checksum}",
            path.display(),
            meta.weight_id,
            meta.encoder_checksum
        )));
    }
    let mut failure = None;
    let mut loaded: Vec<(String, ArrayD<f32>)> = Vec::new();
    model.trainable.visit("trainable", &mut |name, v| match tf.take(&name) {
        Ok(t) if t.shape() == v.shape() => loaded.push((name, t)),
        Ok(t) => {
            failure.get_or_insert(format!("{name}: shape {:?} vs {:?}", t.shape(), v.shape()));
        }
        Err(e) => {
            failure.get_or_insert(e.to_string());
        }
    });
    if let Some(f) = failure {
        return Err(Error::Checkpoint(f));
    }
    let mut it = loaded.into_iter();
    model.trainable.visit_mut("trainable", &mut |_, mut v| v.assign(&it.next().expect("one tensor per visit").1));
    if let Some(o) = optim {
        o.load_from(&mut tf)?;
    }
    Ok(meta)
}
