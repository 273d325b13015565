//! Run configuration, read from a TOML file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::TemperatureSearch;
use crate::classifiers::DEFAULT_CSP_FILTERS;
use crate::error::{Error, Result};
use crate::features::DEFAULT_SHRINKAGE;
use crate::metrics::{default_rejection_fractions, BrierMode, DEFAULT_BINS};
use crate::signal::BandpassSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mdrm,
    MdrmT,
    CspLda,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Mdrm, ModelKind::MdrmT, ModelKind::CspLda];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mdrm => "mdrm",
            ModelKind::MdrmT => "mdrm_t",
            ModelKind::CspLda => "csp_lda",
        }
    }

    /// Column heading used in printed tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Mdrm => "MDRM",
            ModelKind::MdrmT => "MDRM-T",
            ModelKind::CspLda => "CSP-LDA",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mdrm" => Ok(ModelKind::Mdrm),
            "mdrm_t" => Ok(ModelKind::MdrmT),
            "csp_lda" => Ok(ModelKind::CspLda),
            other => Err(Error::validation(format!(
                "unknown model {other:?} (expected mdrm, mdrm_t or csp_lda)"
            ))),
        }
    }
}

/// Band-pass settings; the sample rate comes from each epoch set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub enabled: bool,
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let spec = BandpassSpec::new(250.0);
        FilterConfig {
            enabled: true,
            low_hz: spec.low_hz,
            high_hz: spec.high_hz,
            order: spec.order,
        }
    }
}

impl FilterConfig {
    pub fn spec(&self, sample_rate_hz: f64) -> BandpassSpec {
        BandpassSpec {
            low_hz: self.low_hz,
            high_hz: self.high_hz,
            order: self.order,
            sample_rate_hz,
        }
    }
}

/// Knobs of the per-subject protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub filter: FilterConfig,
    /// Covariance shrinkage toward the scaled identity, in [0, 1).
    pub shrinkage: f64,
    pub n_bins: usize,
    pub brier_mode: BrierMode,
    pub rejection_fractions: Vec<f64>,
    pub temperature: TemperatureSearch,
    /// Distances enter the MDRM softmax squared.
    pub squared_distances: bool,
    pub csp_filters: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Repeats of the test pass; the median per-sample time is reported.
    pub inference_repeats: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            filter: FilterConfig::default(),
            shrinkage: DEFAULT_SHRINKAGE,
            n_bins: DEFAULT_BINS,
            brier_mode: BrierMode::default(),
            rejection_fractions: default_rejection_fractions(),
            temperature: TemperatureSearch::default(),
            squared_distances: true,
            csp_filters: DEFAULT_CSP_FILTERS,
            train_fraction: 0.8,
            split_seed: 0,
            inference_repeats: 3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.shrinkage) {
            return Err(Error::validation(format!(
                "shrinkage must lie in [0, 1), got {}",
                self.shrinkage
            )));
        }
        if self.n_bins < 2 {
            return Err(Error::validation(format!(
                "n_bins must be >= 2, got {}",
                self.n_bins
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::validation(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.csp_filters == 0 || !self.csp_filters.is_multiple_of(2) {
            return Err(Error::validation(format!(
                "csp_filters must be a positive even integer, got {}",
                self.csp_filters
            )));
        }
        if self.inference_repeats == 0 {
            return Err(Error::validation("inference_repeats must be >= 1"));
        }
        if self
            .rejection_fractions
            .iter()
            .any(|f| !(0.0..1.0).contains(f))
            || self.rejection_fractions.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::validation(
                "rejection_fractions must be strictly increasing values in [0, 1)",
            ));
        }
        if self.filter.enabled && (self.filter.order == 0 || !self.filter.order.is_multiple_of(2)) {
            return Err(Error::validation(format!(
                "filter.order must be a positive even integer, got {}",
                self.filter.order
            )));
        }
        self.temperature.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Epoch-set directories, or directories containing epoch-set subdirectories.
    pub datasets: Vec<PathBuf>,
    pub models: Vec<ModelKind>,
    pub output_dir: Option<PathBuf>,
    /// Also write each fitted model as JSON under `models/`.
    pub save_models: bool,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            datasets: Vec::new(),
            models: ModelKind::ALL.to_vec(),
            output_dir: None,
            save_models: false,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file; relative dataset and output paths are resolved
    /// against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.datasets {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::validation("models list is empty"));
        }
        if let Some(missing) = self.datasets.iter().find(|d| !d.exists()) {
            return Err(Error::validation(format!(
                "dataset path {} does not exist",
                missing.display()
            )));
        }
        self.pipeline.validate()
    }
}
