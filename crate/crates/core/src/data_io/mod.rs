//! On-disk formats: epoch sets, prediction files and fitted models.
//!
//! An epoch set is a directory holding three files:
//!
//! * `manifest.toml` - UTF-8 key-value manifest (see [`Manifest`]).
//! * `tensor.f32le` - `n_epochs * n_channels * n_samples` IEEE-754 binary32
//!   values, little-endian, epoch-major then channel-major then sample order.
//! * `labels.txt` - one class id per line, one line per epoch, in tensor order.
//!
//! `checksum_sha256` in the manifest is the hex SHA-256 of the tensor bytes
//! followed by the labels file bytes.

mod models;
mod predictions;
mod synth;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::FILTERED_NOTE;

pub use models::{read_model, write_model, ModelFile, MODEL_FORMAT_VERSION};
pub use predictions::{read_predictions, write_predictions};
pub use synth::{synth_generate, synth_prototypes, SynthConfig};

pub const EPOCHSET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TENSOR_FILE: &str = "tensor.f32le";
pub const LABELS_FILE: &str = "labels.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dataset_id: String,
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    pub class_ids: Vec<String>,
    pub n_epochs: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    #[serde(default)]
    pub provenance: Vec<String>,
    #[serde(default)]
    pub checksum_sha256: String,
}

/// Labelled multichannel trials of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    pub manifest: Manifest,
    pub labels: Vec<String>,
    /// Stable per-trial identity; not stored on disk, derived from the epoch index.
    pub trial_ids: Vec<String>,
    /// Epoch-major, channel-major, sample-minor.
    pub tensor: Vec<f64>,
}

pub(crate) fn default_trial_ids(subject_id: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{subject_id}-{i:05}")).collect()
}

impl EpochSet {
    /// Builds and validates an epoch set. `n_epochs` and checksum in the
    /// manifest are filled from the data.
    pub fn new(mut manifest: Manifest, labels: Vec<String>, tensor: Vec<f64>) -> Result<Self> {
        manifest.n_epochs = labels.len();
        let trial_ids = default_trial_ids(&manifest.subject_id, labels.len());
        let set = EpochSet {
            manifest,
            labels,
            trial_ids,
            tensor,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if !m.sample_rate_hz.is_finite() || m.sample_rate_hz <= 0.0 {
            return Err(Error::validation(format!(
                "sample rate must be positive, got {}",
                m.sample_rate_hz
            )));
        }
        if m.channel_names.len() != m.n_channels {
            return Err(Error::validation(format!(
                "{} channel names for {} channels",
                m.channel_names.len(),
                m.n_channels
            )));
        }
        if m.n_epochs != self.labels.len() || self.trial_ids.len() != self.labels.len() {
            return Err(Error::validation(format!(
                "manifest lists {} epochs but {} labels / {} trial ids are present",
                m.n_epochs,
                self.labels.len(),
                self.trial_ids.len()
            )));
        }
        let expected = m.n_epochs * m.n_channels * m.n_samples;
        if self.tensor.len() != expected {
            return Err(Error::validation(format!(
                "tensor holds {} values, expected {expected}",
                self.tensor.len()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|l| !m.class_ids.contains(l)) {
            return Err(Error::validation(format!(
                "label {bad:?} not among class ids {:?}",
                m.class_ids
            )));
        }
        if self.tensor.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("tensor contains non-finite values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn epoch_len(&self) -> usize {
        self.manifest.n_channels * self.manifest.n_samples
    }

    /// Raw values of epoch `i`, channel-major.
    pub fn epoch_slice(&self, i: usize) -> &[f64] {
        let len = self.epoch_len();
        &self.tensor[i * len..(i + 1) * len]
    }

    /// Epoch `i` as a channels × samples matrix.
    pub fn epoch_matrix(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            self.manifest.n_channels,
            self.manifest.n_samples,
            self.epoch_slice(i),
        )
    }

    pub fn is_filtered(&self) -> bool {
        self.manifest
            .provenance
            .iter()
            .any(|p| p.starts_with(FILTERED_NOTE))
    }

    /// New set holding the epochs at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> EpochSet {
        let mut tensor = Vec::with_capacity(indices.len() * self.epoch_len());
        for &i in indices {
            tensor.extend_from_slice(self.epoch_slice(i));
        }
        let mut manifest = self.manifest.clone();
        manifest.n_epochs = indices.len();
        manifest.checksum_sha256.clear();
        EpochSet {
            manifest,
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            trial_ids: indices.iter().map(|&i| self.trial_ids[i].clone()).collect(),
            tensor,
        }
    }
}

fn tensor_bytes(tensor: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensor.len() * 4);
    for &v in tensor {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn labels_bytes(labels: &[String]) -> Vec<u8> {
    let mut s = String::new();
    for l in labels {
        s.push_str(l);
        s.push('\n');
    }
    s.into_bytes()
}

fn checksum(tensor: &[u8], labels: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(tensor);
    h.update(labels);
    hex::encode(h.finalize())
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `set` into directory `dir`, creating it if needed. Values are
/// rounded to binary32 on disk.
pub fn write_epochset(set: &EpochSet, dir: &Path) -> Result<PathBuf> {
    set.validate()?;
    let tensor = tensor_bytes(&set.tensor);
    let labels = labels_bytes(&set.labels);
    let mut manifest = set.manifest.clone();
    manifest.format_version = EPOCHSET_FORMAT_VERSION;
    manifest.checksum_sha256 = checksum(&tensor, &labels);
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::validation(format!("manifest serialization failed: {e}")))?;

    write_atomic(&dir.join(TENSOR_FILE), &tensor)?;
    write_atomic(&dir.join(LABELS_FILE), &labels)?;
    // Manifest last, so a complete manifest implies complete payload files.
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(dir.to_path_buf())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: toml::Table = text.parse().map_err(|e| Error::Format {
        path: path.clone(),
        message: format!("{e}"),
    })?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| Error::Format {
            path: path.clone(),
            message: "missing integer format_version".into(),
        })?;
    if version != EPOCHSET_FORMAT_VERSION as i64 {
        return Err(Error::UnsupportedVersion {
            found: version.clamp(0, u32::MAX as i64) as u32,
            supported: EPOCHSET_FORMAT_VERSION,
        });
    }
    toml::from_str(&text).map_err(|e| Error::Format {
        path,
        message: format!("{e}"),
    })
}

/// Reads and verifies an epoch set written by [`write_epochset`].
pub fn read_epochset(dir: &Path) -> Result<EpochSet> {
    let manifest = read_manifest(dir)?;

    let tensor_path = dir.join(TENSOR_FILE);
    let raw = fs::read(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
    let expected = (manifest.n_epochs * manifest.n_channels * manifest.n_samples * 4) as u64;
    if raw.len() as u64 != expected {
        return Err(Error::DimensionMismatch {
            path: tensor_path,
            expected,
            actual: raw.len() as u64,
        });
    }

    let labels_path = dir.join(LABELS_FILE);
    let label_raw = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let actual = checksum(&raw, &label_raw);
    if actual != manifest.checksum_sha256 {
        return Err(Error::ChecksumMismatch {
            path: dir.to_path_buf(),
            expected: manifest.checksum_sha256.clone(),
            actual,
        });
    }
    let label_text = String::from_utf8(label_raw).map_err(|e| Error::Format {
        path: labels_path.clone(),
        message: format!("labels are not UTF-8: {e}"),
    })?;
    let labels: Vec<String> = label_text.lines().map(str::to_owned).collect();
    if labels.len() != manifest.n_epochs {
        return Err(Error::Format {
            path: labels_path,
            message: format!("{} labels for {} epochs", labels.len(), manifest.n_epochs),
        });
    }

    let tensor = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let trial_ids = default_trial_ids(&manifest.subject_id, labels.len());
    let set = EpochSet {
        manifest,
        labels,
        trial_ids,
        tensor,
    };
    set.validate()?;
    Ok(set)
}
