//! Versioned JSON files for fitted models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifiers::{CspLdaModel, MdrmModel};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFile {
    Mdrm(MdrmModel),
    CspLda(CspLdaModel),
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    model: ModelFile,
}

pub fn write_model(model: &ModelFile, path: &Path) -> Result<()> {
    let env = Envelope {
        format_version: MODEL_FORMAT_VERSION,
        model: model.clone(),
    };
    let text = serde_json::to_string_pretty(&env)
        .map_err(|e| Error::validation(format!("model serialization failed: {e}")))?;
    super::write_atomic(path, text.as_bytes())
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: MODEL_FORMAT_VERSION,
        });
    }
    let env: Envelope = serde_json::from_value(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(env.model)
}
