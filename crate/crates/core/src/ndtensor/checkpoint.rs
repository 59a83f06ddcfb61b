//! JSON tensor files: `{"format", "version", "tensors": {name: {shape, data}}}`.
//!
//! Floats are written in shortest round-trip form and parsed back exactly, so
//! write → read is bit-identical for every finite value.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor, TensorError};

pub const TENSOR_FORMAT: &str = "gramlink-tensors";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    format: String,
    version: u32,
    tensors: BTreeMap<String, TensorEntry>,
}

pub fn tensors_to_json(params: &ParamSet) -> Result<String, TensorError> {
    let mut tensors = BTreeMap::new();
    for (name, t) in params.iter() {
        if !t.is_finite() {
            return Err(TensorError::Format(format!(
                "tensor {name:?} has non-finite values"
            )));
        }
        tensors.insert(
            name.to_string(),
            TensorEntry {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        );
    }
    let file = TensorFile {
        format: TENSOR_FORMAT.to_string(),
        version: TENSOR_VERSION,
        tensors,
    };
    let mut s = serde_json::to_string(&file).map_err(|e| TensorError::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn tensors_from_json(text: &str) -> Result<ParamSet, TensorError> {
    let file: TensorFile =
        serde_json::from_str(text).map_err(|e| TensorError::Format(e.to_string()))?;
    if file.format != TENSOR_FORMAT {
        return Err(TensorError::Format(format!(
            "unexpected format tag {:?}",
            file.format
        )));
    }
    if file.version != TENSOR_VERSION {
        return Err(TensorError::Format(format!(
            "unsupported version {}",
            file.version
        )));
    }
    let mut out = ParamSet::new();
    for (name, entry) in file.tensors {
        out.insert(name, Tensor::new(entry.shape, entry.data)?);
    }
    Ok(out)
}

pub fn write_tensor_file(path: &Path, params: &ParamSet) -> Result<(), TensorError> {
    let text = tensors_to_json(params)?;
    std::fs::write(path, text).map_err(|e| TensorError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_tensor_file(path: &Path) -> Result<ParamSet, TensorError> {
    let text = std::fs::read_to_string(path).map_err(|e| TensorError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    tensors_from_json(&text)
}
