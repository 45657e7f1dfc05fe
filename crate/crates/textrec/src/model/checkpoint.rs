//! Single-file checkpoint container: one JSON header (config, tensor table,
//! dtype, format version, free-form metadata) followed by a raw little-endian
//! tensor payload. Loading verifies the tensor table against the config.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Scalar};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TXRCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in elements.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Write tensors in name order. `tensors` may contain optimizer moments
/// under `opt.m.*` / `opt.v.*` in addition to model parameters.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    cfg: &ModelConfig,
    tensors: &BTreeMap<String, ArrayD<T>>,
    meta: &serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, tensor) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.len(),
        });
        offset += tensor.len();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        config: cfg.clone(),
        tensors: entries,
        meta: meta.clone(),
    };
    let header_json = serde_json::to_vec(&serde_json::to_value(&header)?)?;

    let mut payload = Vec::with_capacity(offset * T::BYTE_LEN);
    for tensor in tensors.values() {
        for &v in tensor.iter() {
            v.write_le(&mut payload);
        }
    }

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    (|| -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&(header_json.len() as u64).to_le_bytes())?;
        out.write_all(&header_json)?;
        out.write_all(&payload)?;
        out.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

/// Read a checkpoint written by [`save_checkpoint`]. Model tensors are
/// validated against the stored config (shape and presence); `opt.m.*` and
/// `opt.v.*` entries must mirror a parameter tensor's shape.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(ModelConfig, BTreeMap<String, ArrayD<T>>, serde_json::Value)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    reader
        .read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    reader
        .read_exact(&mut header_json)
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::data(format!(
            "checkpoint dtype {} does not match requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    header.config.validate()?;

    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;

    let expected = header.config.expected_shapes();
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let declared: Option<&Vec<usize>> = if let Some(base) = entry
            .name
            .strip_prefix("opt.m.")
            .or_else(|| entry.name.strip_prefix("opt.v."))
        {
            expected.get(base)
        } else {
            expected.get(entry.name.as_str())
        };
        match declared {
            None => {
                return Err(Error::data(format!(
                    "checkpoint tensor '{}' is not part of the model config",
                    entry.name
                )))
            }
            Some(shape) if shape != &entry.shape => {
                return Err(Error::data(format!(
                    "checkpoint tensor '{}' has shape {:?}, config expects {:?}",
                    entry.name, entry.shape, shape
                )))
            }
            _ => {}
        }
        let elements: usize = entry.shape.iter().product();
        if elements != entry.len {
            return Err(Error::data(format!(
                "checkpoint tensor '{}' length disagrees with its shape",
                entry.name
            )));
        }
        let start = entry.offset * T::BYTE_LEN;
        let end = start + entry.len * T::BYTE_LEN;
        if end > payload.len() {
            return Err(Error::data(format!(
                "checkpoint payload truncated at tensor '{}'",
                entry.name
            )));
        }
        let data: Vec<T> = payload[start..end]
            .chunks_exact(T::BYTE_LEN)
            .map(T::read_le)
            .collect();
        let tensor = ArrayD::from_shape_vec(entry.shape.clone(), data)
            .map_err(|e| Error::data(format!("tensor '{}': {e}", entry.name)))?;
        tensors.insert(entry.name.clone(), tensor);
    }
    Ok((header.config, tensors, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::model::ParamSet;

    #[test]
    fn round_trip_preserves_bytes_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_config();
        let params = ParamSet::<f32>::init(&cfg, 3).unwrap();
        let meta = serde_json::json!({"seed": 3, "step": 17});
        save_checkpoint(&path, &cfg, params.tensors(), &meta).unwrap();
        let (loaded_cfg, tensors, loaded_meta) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded_meta, meta);
        let reloaded = ParamSet::from_tensors(&cfg, tensors).unwrap();
        assert_eq!(&reloaded, &params);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_config();
        let params = ParamSet::<f32>::init(&cfg, 3).unwrap();
        save_checkpoint(&path, &cfg, params.tensors(), &serde_json::Value::Null).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn shape_tampering_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut cfg = tiny_config();
        let params = ParamSet::<f32>::init(&cfg, 3).unwrap();
        save_checkpoint(&path, &cfg, params.tensors(), &serde_json::Value::Null).unwrap();
        // Reload pretending the model is wider than it was saved as.
        cfg.d_model = 32;
        let (stored_cfg, tensors, _) = load_checkpoint::<f32>(&path).unwrap();
        assert_ne!(stored_cfg, cfg);
        assert!(ParamSet::from_tensors(&cfg, tensors).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_config();
        let params = ParamSet::<f32>::init(&cfg, 3).unwrap();
        save_checkpoint(&path, &cfg, params.tensors(), &serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
