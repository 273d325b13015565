//! Within-subject evaluation: split, fit, predict, score, aggregate.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{fit_temperature, TemperatureFit};
use crate::classifiers::{mdrm_fit, CspLdaModel, MdrmModel, ProbabilisticClassifier};
use crate::config::{ModelKind, PipelineConfig};
use crate::data_io::{write_atomic, EpochSet, ModelFile};
use crate::error::{Error, Result};
use crate::features::{estimate_covariance, Epoch};
use crate::metrics::{
    accuracy, brier, calibration_bins, ece, nce, rejection_curve, BrierMode, CalibrationBins,
    PredictionRecord, PredictionSet, RejectionCurve,
};
use crate::signal::preprocess_epochs;
use crate::spd::SpdMatrix;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Stratified random split: per class, shuffle with the seeded generator and
/// put `round(train_frac · count)` epochs (at least one, at most `count − 1`)
/// in the training set. Both outputs keep the original epoch order.
pub fn split_within_subject(
    e: &EpochSet,
    train_frac: f64,
    seed: u64,
) -> Result<(EpochSet, EpochSet)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::validation(format!(
            "train fraction must lie in (0, 1), got {train_frac}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in &e.manifest.class_ids {
        let mut members: Vec<usize> = (0..e.len()).filter(|&i| e.labels[i] == *class).collect();
        if members.len() < 2 {
            return Err(Error::validation(format!(
                "class {class:?} has {} epochs; a split needs at least 2",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n_train =
            ((train_frac * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((e.subset(&train), e.subset(&test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub dataset_id: String,
    pub subject_id: String,
    pub model_name: String,
    pub accuracy: f64,
    pub ece: f64,
    pub nce: f64,
    pub brier: f64,
    pub brier_mode: BrierMode,
    pub n_bins: usize,
    pub calibration_bins: CalibrationBins,
    pub rejection_curve: RejectionCurve,
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub n_train: Option<usize>,
    pub n_test: usize,
    pub train_time_s: Option<f64>,
    pub inference_time_ms_per_sample: Option<f64>,
    pub predictions: PredictionSet,
}

impl SubjectResult {
    /// Scores a prediction set; timings and model details left empty.
    pub fn from_predictions(
        dataset_id: &str,
        subject_id: &str,
        model_name: &str,
        predictions: PredictionSet,
        cfg: &PipelineConfig,
    ) -> Result<Self> {
        predictions.validate()?;
        Ok(SubjectResult {
            dataset_id: dataset_id.to_owned(),
            subject_id: subject_id.to_owned(),
            model_name: model_name.to_owned(),
            accuracy: accuracy(&predictions)?,
            ece: ece(&predictions, cfg.n_bins)?,
            nce: nce(&predictions, cfg.n_bins)?,
            brier: brier(&predictions, cfg.brier_mode)?,
            brier_mode: cfg.brier_mode,
            n_bins: cfg.n_bins,
            calibration_bins: calibration_bins(&predictions, cfg.n_bins)?,
            rejection_curve: rejection_curve(&predictions, &cfg.rejection_fractions)?,
            temperature: None,
            warnings: Vec::new(),
            n_train: None,
            n_test: predictions.len(),
            train_time_s: None,
            inference_time_ms_per_sample: None,
            predictions,
        })
    }

    /// Recomputes every stored metric from the embedded predictions.
    pub fn rescore(&self) -> Result<(f64, f64, f64, f64)> {
        let p = &self.predictions;
        Ok((
            accuracy(p)?,
            ece(p, self.n_bins)?,
            nce(p, self.n_bins)?,
            brier(p, self.brier_mode)?,
        ))
    }
}

/// A fitted model together with its result on the test set.
#[derive(Debug, Clone)]
pub struct SubjectRun {
    pub result: SubjectResult,
    pub model: ModelFile,
}

fn epochs_of(set: &EpochSet) -> Result<Vec<Epoch>> {
    (0..set.len())
        .map(|i| Epoch::new(set.epoch_matrix(i), Some(set.labels[i].clone())))
        .collect()
}

fn check_compatible(train: &EpochSet, test: &EpochSet) -> Result<()> {
    let (a, b) = (&train.manifest, &test.manifest);
    if a.channel_names != b.channel_names || a.n_samples != b.n_samples {
        return Err(Error::validation(format!(
            "train/test layouts differ: {} channels x {} samples vs {} x {}",
            a.n_channels, a.n_samples, b.n_channels, b.n_samples
        )));
    }
    if a.sample_rate_hz != b.sample_rate_hz {
        return Err(Error::validation("train/test sample rates differ"));
    }
    if a.class_ids != b.class_ids {
        return Err(Error::validation(format!(
            "train/test class vocabularies differ: {:?} vs {:?}",
            a.class_ids, b.class_ids
        )));
    }
    let seen: BTreeSet<&String> = train.labels.iter().collect();
    if let Some(missing) = test.labels.iter().find(|l| !seen.contains(l)) {
        return Err(Error::validation(format!(
            "test set contains class {missing:?} absent from training"
        )));
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `predict` over the test inputs `repeats` times and returns the
/// probabilities with the median per-sample time in milliseconds.
fn timed_inference<T>(
    inputs: &[T],
    repeats: usize,
    predict: impl Fn(&T) -> Result<Vec<f64>>,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let mut times = Vec::with_capacity(repeats);
    let mut probs = Vec::new();
    for _ in 0..repeats {
        let start = Instant::now();
        probs = inputs.iter().map(&predict).collect::<Result<Vec<_>>>()?;
        times.push(start.elapsed().as_secs_f64() * 1e3 / inputs.len().max(1) as f64);
    }
    Ok((probs, median(times)))
}

fn annotate(err: Error, subject: &str, model: ModelKind) -> Error {
    match err {
        Error::Validation(msg) => Error::Validation(format!("{subject}/{model}: {msg}")),
        Error::Numerical(msg) => Error::Numerical(format!("{subject}/{model}: {msg}")),
        Error::NotPositiveDefinite(msg) => {
            Error::NotPositiveDefinite(format!("{subject}/{model}: {msg}"))
        }
        other => other,
    }
}

/// Preprocess, fit on `train`, predict `test` and score.
pub fn run_subject(
    train: &EpochSet,
    test: &EpochSet,
    model: ModelKind,
    cfg: &PipelineConfig,
) -> Result<SubjectRun> {
    let subject = train.manifest.subject_id.clone();
    run_subject_inner(train, test, model, cfg).map_err(|e| annotate(e, &subject, model))
}

fn run_subject_inner(
    train: &EpochSet,
    test: &EpochSet,
    model: ModelKind,
    cfg: &PipelineConfig,
) -> Result<SubjectRun> {
    cfg.validate()?;
    check_compatible(train, test)?;
    if test.is_empty() {
        return Err(Error::validation("empty test set"));
    }
    let (train, test) = if cfg.filter.enabled {
        let spec = cfg.filter.spec(train.manifest.sample_rate_hz);
        (
            preprocess_epochs(train, &spec)?,
            preprocess_epochs(test, &spec)?,
        )
    } else {
        (train.clone(), test.clone())
    };
    let class_ids = train.manifest.class_ids.clone();
    let train_epochs = epochs_of(&train)?;
    let test_epochs = epochs_of(&test)?;

    let mut warnings = Vec::new();
    let mut temperature = None;
    let start = Instant::now();
    let (fitted, probs, infer_ms) = match model {
        ModelKind::Mdrm | ModelKind::MdrmT => {
            let covs = train_epochs
                .iter()
                .map(|e| estimate_covariance(e, cfg.shrinkage))
                .collect::<Result<Vec<SpdMatrix>>>()?;
            let mut mdrm = mdrm_fit(&covs, &train.labels, &class_ids)?;
            mdrm.shrinkage = cfg.shrinkage;
            mdrm.squared_distances = cfg.squared_distances;
            if model == ModelKind::MdrmT {
                let fit = fit_mdrm_temperature(&mdrm, &covs, &train.labels, cfg)?;
                warnings.extend(fit.warnings.iter().cloned());
                mdrm = mdrm.with_temperature(fit.temperature)?;
                temperature = Some(fit.temperature);
            } else {
                temperature = Some(mdrm.temperature);
            }
            let train_s = start.elapsed().as_secs_f64();
            let (probs, ms) = timed_inference(&test_epochs, cfg.inference_repeats, |e| {
                mdrm.predict_epoch_proba(e)
            })?;
            ((ModelFile::Mdrm(mdrm), train_s), probs, ms)
        }
        ModelKind::CspLda => {
            let m = CspLdaModel::fit(
                &train_epochs,
                &train.labels,
                &class_ids,
                cfg.csp_filters,
                cfg.shrinkage,
            )?;
            let train_s = start.elapsed().as_secs_f64();
            let (probs, ms) =
                timed_inference(&test_epochs, cfg.inference_repeats, |e| m.predict_proba(e))?;
            ((ModelFile::CspLda(m), train_s), probs, ms)
        }
    };
    let (model_file, train_s) = fitted;

    let records = probs
        .into_iter()
        .enumerate()
        .map(|(i, p)| PredictionRecord {
            trial_id: test.trial_ids[i].clone(),
            true_label: test.labels[i].clone(),
            probs: p,
        })
        .collect();
    let source = format!(
        "{}/{}/{}",
        test.manifest.dataset_id, test.manifest.subject_id, model
    );
    let predictions = PredictionSet::new(class_ids, records, source)?;

    let mut result = SubjectResult::from_predictions(
        &test.manifest.dataset_id,
        &test.manifest.subject_id,
        model.name(),
        predictions,
        cfg,
    )?;
    result.temperature = temperature;
    result.warnings = warnings;
    result.n_train = Some(train.len());
    result.train_time_s = Some(train_s);
    result.inference_time_ms_per_sample = Some(infer_ms);
    Ok(SubjectRun {
        result,
        model: model_file,
    })
}

/// Fits the MDRM softmax temperature on the model's own training covariances.
pub fn fit_mdrm_temperature(
    model: &MdrmModel,
    covs: &[SpdMatrix],
    labels: &[String],
    cfg: &PipelineConfig,
) -> Result<TemperatureFit> {
    let scores = covs
        .iter()
        .map(|c| model.scores(c))
        .collect::<Result<Vec<_>>>()?;
    let idx: Vec<usize> = labels
        .iter()
        .map(|l| {
            model
                .class_ids()
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::validation(format!("unknown label {l:?}")))
        })
        .collect::<Result<_>>()?;
    fit_temperature(&scores, &idx, &cfg.temperature)
}

/// Split one subject's epochs and run every requested model on the split.
pub fn run_subject_models(
    set: &EpochSet,
    models: &[ModelKind],
    cfg: &PipelineConfig,
) -> Result<Vec<SubjectRun>> {
    let (train, test) = split_within_subject(set, cfg.train_fraction, cfg.split_seed)?;
    models
        .iter()
        .map(|&m| run_subject(&train, &test, m, cfg))
        .collect()
}

/// Scores an externally produced prediction set (no model, no timings).
pub fn evaluate_external(p: &PredictionSet, cfg: &PipelineConfig) -> Result<SubjectResult> {
    cfg.validate()?;
    if p.is_empty() {
        return Err(Error::validation("prediction set is empty"));
    }
    SubjectResult::from_predictions("external", &p.source, &p.source, p.clone(), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single subject.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub dataset_id: String,
    pub model_name: String,
    pub n_subjects: usize,
    /// Set when only one subject contributed, so `std` is not meaningful.
    pub single_subject: bool,
    pub accuracy: Summary,
    pub ece: Summary,
    pub nce: Summary,
    pub brier: Summary,
    pub brier_mode: BrierMode,
    pub train_time_s: Option<f64>,
    pub inference_time_ms_per_sample: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub format_version: u32,
    pub config: Option<PipelineConfig>,
    pub notes: Vec<String>,
    pub groups: Vec<GroupSummary>,
    pub subjects: Vec<SubjectResult>,
    /// Subjects that could not be evaluated, with the reason.
    #[serde(default)]
    pub failures: Vec<String>,
}

impl BenchmarkReport {
    /// Copy with every wall-clock field cleared, for reproducibility checks.
    pub fn without_timings(&self) -> BenchmarkReport {
        let mut r = self.clone();
        for s in &mut r.subjects {
            s.train_time_s = None;
            s.inference_time_ms_per_sample = None;
        }
        for g in &mut r.groups {
            g.train_time_s = None;
            g.inference_time_ms_per_sample = None;
        }
        r
    }

    pub fn group(&self, dataset_id: &str, model_name: &str) -> Option<&GroupSummary> {
        self.groups
            .iter()
            .find(|g| g.dataset_id == dataset_id && g.model_name == model_name)
    }

    /// Predictions of all subjects in a group, concatenated.
    pub fn pooled_predictions(&self, dataset_id: &str, model_name: &str) -> Result<PredictionSet> {
        let members: Vec<&SubjectResult> = self
            .subjects
            .iter()
            .filter(|s| s.dataset_id == dataset_id && s.model_name == model_name)
            .collect();
        let first = members.first().ok_or_else(|| {
            Error::validation(format!("no results for {dataset_id}/{model_name}"))
        })?;
        let class_ids = first.predictions.class_ids.clone();
        let mut records = Vec::new();
        for s in &members {
            if s.predictions.class_ids != class_ids {
                return Err(Error::validation(format!(
                    "subjects of {dataset_id}/{model_name} disagree on class ids"
                )));
            }
            records.extend(s.predictions.records.iter().map(|r| PredictionRecord {
                trial_id: format!("{}:{}", s.subject_id, r.trial_id),
                ..r.clone()
            }));
        }
        PredictionSet::new(class_ids, records, format!("{dataset_id}/{model_name}"))
    }
}

/// Writes the report as pretty JSON, atomically.
pub fn write_report(report: &BenchmarkReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::validation(format!("report serialization failed: {e}")))?;
    write_atomic(path, text.as_bytes())
}

/// Reads a report, checking its format version before anything else.
pub fn read_report(path: &Path) -> Result<BenchmarkReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let format_err = |e: serde_json::Error| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(format_err)?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if version != REPORT_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: REPORT_FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(format_err)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean ± sample std of every metric per (dataset, model), in order of first appearance.
pub fn aggregate(
    results: Vec<SubjectResult>,
    config: Option<PipelineConfig>,
) -> Result<BenchmarkReport> {
    if results.is_empty() {
        return Err(Error::validation("nothing to aggregate"));
    }
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in &results {
        let key = (r.dataset_id.clone(), r.model_name.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let groups = keys
        .into_iter()
        .map(|(dataset_id, model_name)| {
            let members: Vec<&SubjectResult> = results
                .iter()
                .filter(|r| r.dataset_id == dataset_id && r.model_name == model_name)
                .collect();
            let pick = |f: fn(&SubjectResult) -> f64| {
                Summary::of(&members.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let modes: BTreeSet<_> = members.iter().map(|r| r.brier_mode as u8).collect();
            if modes.len() > 1 {
                return Err(Error::validation(format!(
                    "{dataset_id}/{model_name} mixes Brier conventions"
                )));
            }
            Ok(GroupSummary {
                n_subjects: members.len(),
                single_subject: members.len() == 1,
                accuracy: pick(|r| r.accuracy),
                ece: pick(|r| r.ece),
                nce: pick(|r| r.nce),
                brier: pick(|r| r.brier),
                brier_mode: members[0].brier_mode,
                train_time_s: mean_of(members.iter().map(|r| r.train_time_s)),
                inference_time_ms_per_sample: mean_of(
                    members.iter().map(|r| r.inference_time_ms_per_sample),
                ),
                dataset_id,
                model_name,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut notes = vec![
        "std: sample standard deviation across subjects (n - 1 denominator)".to_owned(),
        "confidence: maximum class probability; calibration bins right-inclusive over (0, 1]"
            .to_owned(),
        "multiclass CSP: one-vs-rest, filters split evenly across classes".to_owned(),
        "split: stratified random within subject".to_owned(),
    ];
    if let Some(cfg) = &config {
        notes.push(format!("brier convention: {:?}", cfg.brier_mode));
        notes.push(format!(
            "temperature: {:?} objective on training data, grid [{}, {}]",
            cfg.temperature.objective, cfg.temperature.t_min, cfg.temperature.t_max
        ));
    }
    Ok(BenchmarkReport {
        format_version: REPORT_FORMAT_VERSION,
        config,
        notes,
        groups,
        subjects: results,
        failures: Vec::new(),
    })
}

/// Plain-text table: one block per metric, a row per dataset, a column per model.
pub fn render_table(report: &BenchmarkReport) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for g in &report.groups {
        if !datasets.contains(&g.dataset_id.as_str()) {
            datasets.push(&g.dataset_id);
        }
        if !models.contains(&g.model_name.as_str()) {
            models.push(&g.model_name);
        }
    }
    let heading = |m: &str| {
        m.parse::<ModelKind>()
            .map(|k| k.label().to_owned())
            .unwrap_or_else(|_| m.to_owned())
    };

    let mut out = String::new();
    out.push_str(&format!("{:<10} {:<14}", "Metric", "Dataset"));
    for m in &models {
        out.push_str(&format!(" {:>18}", heading(m)));
    }
    out.push('\n');

    type Cell = fn(&GroupSummary) -> String;
    let rows: [(&str, Cell); 4] = [
        ("Acc. %", |g| {
            format!(
                "{:.1} ± {:.1}%",
                100.0 * g.accuracy.mean,
                100.0 * g.accuracy.std
            )
        }),
        ("ECE", |g| format!("{:.3} ± {:.3}", g.ece.mean, g.ece.std)),
        ("NCE", |g| format!("{:.3} ± {:.3}", g.nce.mean, g.nce.std)),
        ("Brier", |g| {
            format!("{:.3} ± {:.3}", g.brier.mean, g.brier.std)
        }),
    ];
    for (name, cell) in rows {
        for (i, d) in datasets.iter().enumerate() {
            let label = if i == 0 { name } else { "" };
            out.push_str(&format!("{label:<10} {d:<14}"));
            for m in &models {
                let text = report.group(d, m).map(cell).unwrap_or_else(|| "-".into());
                out.push_str(&format!(" {text:>18}"));
            }
            out.push('\n');
        }
    }

    let timing = |f: fn(&GroupSummary) -> Option<f64>| -> Vec<String> {
        models
            .iter()
            .map(|m| {
                let vals: Vec<f64> = report
                    .groups
                    .iter()
                    .filter(|g| g.model_name == *m)
                    .filter_map(f)
                    .collect();
                if vals.is_empty() {
                    "-".into()
                } else {
                    format!("{:.4}", vals.iter().sum::<f64>() / vals.len() as f64)
                }
            })
            .collect()
    };
    for (name, vals) in [
        ("Avg. Train time (s)", timing(|g| g.train_time_s)),
        (
            "Avg. Inference time (ms)",
            timing(|g| g.inference_time_ms_per_sample),
        ),
    ] {
        out.push_str(&format!("{name:<25}"));
        for v in vals {
            out.push_str(&format!(" {v:>18}"));
        }
        out.push('\n');
    }
    out
}

/// Flat per-subject metric table.
pub fn subject_csv(report: &BenchmarkReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::validation(format!("csv encoding failed: {e}"));
    w.write_record([
        "dataset_id",
        "subject_id",
        "model",
        "n_test",
        "accuracy",
        "ece",
        "nce",
        "brier",
        "brier_mode",
        "temperature",
        "train_time_s",
        "inference_time_ms_per_sample",
    ])
    .map_err(to_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in &report.subjects {
        w.write_record([
            s.dataset_id.clone(),
            s.subject_id.clone(),
            s.model_name.clone(),
            s.n_test.to_string(),
            s.accuracy.to_string(),
            s.ece.to_string(),
            s.nce.to_string(),
            s.brier.to_string(),
            format!("{:?}", s.brier_mode),
            opt(s.temperature),
            opt(s.train_time_s),
            opt(s.inference_time_ms_per_sample),
        ])
        .map_err(to_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::validation(format!("csv encoding failed: {e}")))
}
