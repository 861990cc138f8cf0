//! JSON checkpoint: model configuration plus every named tensor with its
//! shape and a base64 payload of little-endian f64 values.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use metatpp_autograd::ndarray::IxDyn;
use metatpp_autograd::Array;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const FORMAT: &str = "metatpp-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn encode(a: &Array) -> String {
    let mut bytes = Vec::with_capacity(a.len() * 8);
    for v in a.as_standard_layout().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode(name: &str, shape: &[usize], data: &str) -> Result<Array> {
    let bytes = STANDARD
        .decode(data)
        .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Checkpoint(format!(
            "{name}: {} bytes for shape {shape:?}",
            bytes.len()
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array::from_shape_vec(IxDyn(shape), vals).unwrap())
}

pub fn to_json(model: &Model) -> Result<String> {
    let tensors = model
        .params
        .iter()
        .map(|(_, name, a)| TensorEntry {
            name: name.to_string(),
            shape: a.shape().to_vec(),
            data: encode(a),
        })
        .collect();
    let m = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        tensors,
    };
    Ok(serde_json::to_string(&m)?)
}

/// Rebuilds the model from its configuration and overwrites every tensor;
/// missing, extra or mis-shaped tensors are rejected.
pub fn from_json(text: &str) -> Result<Model> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            m.format, m.version
        )));
    }
    let mut model = Model::new(m.config, 0)?;
    if m.tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors, model expects {}",
            m.tensors.len(),
            model.params.len()
        )));
    }
    for t in &m.tensors {
        let id = model
            .params
            .id(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", t.name)))?;
        if model.params.get(id).shape() != t.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?}",
                t.name, t.shape
            )));
        }
        *model.params.get_mut(id) = decode(&t.name, &t.shape, &t.data)?;
    }
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    from_json(&text)
}
