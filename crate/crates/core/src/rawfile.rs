//! Raw little-endian f32 arrays with a JSON sidecar describing their shape.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{read, read_json, write, write_json, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_mm: Option<Vec<f64>>,
    pub dtype: String,
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

pub fn save(raw: &Path, sidecar: &Sidecar, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write(raw, &bytes)?;
    write_json(&sidecar_path(raw), sidecar)
}

pub fn load(raw: &Path) -> Result<(Sidecar, Vec<f32>)> {
    let sidecar: Sidecar = read_json(&sidecar_path(raw))?;
    let fail = |msg: String| Error::Format {
        path: raw.to_path_buf(),
        msg,
    };
    if sidecar.dtype != "f32" {
        return Err(fail(format!("unsupported dtype `{}`", sidecar.dtype)));
    }
    let bytes = read(raw)?;
    let count: usize = sidecar.shape.iter().product();
    if sidecar.shape.contains(&0) || bytes.len() != count * 4 {
        return Err(fail(format!(
            "sidecar shape {:?} needs {} bytes, file has {}",
            sidecar.shape,
            count * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((sidecar, data))
}
