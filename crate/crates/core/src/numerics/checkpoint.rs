//! Checkpoint directory format: `manifest.json` holds an ordered list of
//! `{name, shape, dtype}` records; `params.bin` is the concatenation of
//! the raw little-endian IEEE-754 buffers in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CafeError, Result};

use super::precision::Precision;
use super::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
    dtype: Precision,
}

pub fn save_checkpoint(
    dir: &Path,
    entries: impl Iterator<Item = (String, Tensor)> + Clone,
    dtype: Precision,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest: Vec<TensorSpec> = entries
        .clone()
        .map(|(name, t)| TensorSpec {
            name,
            shape: t.shape().to_vec(),
            dtype,
        })
        .collect();
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CafeError::data(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;

    let mut bin = Vec::new();
    for (_, t) in entries {
        match dtype {
            Precision::F32 => {
                for &v in t.data() {
                    bin.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Precision::F64 => {
                for &v in t.data() {
                    bin.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    fs::write(dir.join("params.bin"), bin)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest_raw = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Vec<TensorSpec> = serde_json::from_str(&manifest_raw)
        .map_err(|e| CafeError::data(format!("manifest parse: {e}")))?;
    let bin = fs::read(dir.join("params.bin"))?;

    let mut out = Vec::with_capacity(manifest.len());
    let mut offset = 0usize;
    for spec in manifest {
        let numel: usize = spec.shape.iter().product();
        let width = match spec.dtype {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let end = offset + numel * width;
        if end > bin.len() {
            return Err(CafeError::data(format!(
                "params.bin truncated while reading tensor {}",
                spec.name
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let start = offset + i * width;
            let v = match spec.dtype {
                Precision::F32 => {
                    f32::from_le_bytes(bin[start..start + 4].try_into().unwrap()) as f64
                }
                Precision::F64 => f64::from_le_bytes(bin[start..start + 8].try_into().unwrap()),
            };
            data.push(v);
        }
        offset = end;
        out.push((spec.name, Tensor::new(spec.shape, data)?));
    }
    if offset != bin.len() {
        return Err(CafeError::data(format!(
            "params.bin has {} trailing bytes past the manifest",
            bin.len() - offset
        )));
    }
    Ok(out)
}
