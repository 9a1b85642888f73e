use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Blocks, EncoderConfig, ModelState};
use crate::error::{Error, Result};

const FORMAT: &str = "safl-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedBlock {
    name: String,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: EncoderConfig,
    blocks: Vec<NamedBlock>,
}

/// Writes config plus named flat blocks as JSON. f64 values use shortest
/// round-trip formatting so a reload is bitwise exact.
pub fn save_checkpoint(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ckpt = Checkpoint {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        blocks: model
            .params
            .iter()
            .map(|(id, v)| NamedBlock {
                name: id.to_string(),
                values: v.to_vec(),
            })
            .collect(),
    };
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(BufWriter::new(f), &ckpt).map_err(|e| Error::format(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint =
        serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::format(path, e))?;
    if ckpt.format != FORMAT || ckpt.version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported container {} v{}", ckpt.format, ckpt.version),
        ));
    }
    ckpt.config.validate()?;
    let mut params = Blocks::empty(ckpt.config.num_layers);
    let mut seen = 0;
    for b in ckpt.blocks {
        let id: super::BlockId = b.name.parse()?;
        if let super::BlockId::Layer(l) = id {
            if l > ckpt.config.num_layers {
                return Err(Error::format(path, format!("unexpected block {id}")));
            }
        }
        if b.values.len() != ckpt.config.param_count(id) {
            return Err(Error::format(
                path,
                format!(
                    "block {id} has {} values, expected {}",
                    b.values.len(),
                    ckpt.config.param_count(id)
                ),
            ));
        }
        *params.get_mut(id) = b.values;
        seen += 1;
    }
    if seen != ckpt.config.num_layers + 2 {
        return Err(Error::format(path, "missing parameter blocks"));
    }
    Ok(ModelState {
        config: ckpt.config,
        params,
    })
}
