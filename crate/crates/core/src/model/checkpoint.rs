//! Checkpoint container: JSON with the model config and one entry per tensor,
//! keyed `block_{n}/...` and `head_{n}/...`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "boostnet-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    model_config: ModelConfig,
    tensors: BTreeMap<String, TensorRecord>,
}

pub fn write_checkpoint<W: Write>(model: &ModelState, writer: W) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        model_config: model.config().clone(),
        tensors: model
            .params()
            .iter()
            .map(|t| {
                (
                    t.key.clone(),
                    TensorRecord {
                        shape: t.shape.clone(),
                        data: t.data.clone(),
                    },
                )
            })
            .collect(),
    };
    serde_json::to_writer(writer, &file)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(reader: R) -> Result<ModelState> {
    let mut file: CheckpointFile = serde_json::from_reader(reader)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("unsupported format {} v{}", file.format, file.version),
        });
    }
    let template = super::build_model(&file.model_config, 0)?;
    let mut params = Vec::with_capacity(template.params().len());
    for t in template.params() {
        let rec = file.tensors.remove(&t.key).ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: format!("missing tensor {}", t.key),
        })?;
        if rec.shape != t.shape || rec.data.len() != t.data.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("tensor {} has shape {:?}, expected {:?}", t.key, rec.shape, t.shape),
            });
        }
        params.push(Tensor {
            data: rec.data,
            ..t.clone()
        });
    }
    if let Some(extra) = file.tensors.keys().next() {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("unexpected tensor {extra}"),
        });
    }
    ModelState::from_parts(file.model_config, params)
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
