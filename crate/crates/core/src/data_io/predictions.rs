//! Comma-separated prediction files: `trial_id,true_label,<class>,<class>,...`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{PredictionRecord, PredictionSet, SUM_TOL};

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a prediction file. Every row is checked; all offending rows are
/// reported together. Row numbers are 1-based data rows (header excluded).
pub fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => format_err(path, format!("{other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| format_err(path, e.to_string()))?
        .clone();
    if header.len() < 4 || &header[0] != "trial_id" || &header[1] != "true_label" {
        return Err(format_err(
            path,
            "header must be trial_id,true_label followed by at least two class columns",
        ));
    }
    let class_ids: Vec<String> = header.iter().skip(2).map(str::to_owned).collect();

    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let row = row + 1;
        let rec = match result {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("row {row}: {e}"));
                continue;
            }
        };
        if rec.len() != header.len() {
            problems.push(format!(
                "row {row}: {} fields, expected {}",
                rec.len(),
                header.len()
            ));
            continue;
        }
        let label = rec[1].to_owned();
        if !class_ids.contains(&label) {
            problems.push(format!("row {row}: unknown label {label:?}"));
            continue;
        }
        let mut probs = Vec::with_capacity(class_ids.len());
        let mut row_ok = true;
        for (k, class) in class_ids.iter().enumerate() {
            match rec[k + 2].parse::<f64>() {
                Ok(v) if v.is_finite() && (0.0..=1.0).contains(&v) => probs.push(v),
                Ok(v) => {
                    problems.push(format!("row {row}: column {class} = {v} outside [0, 1]"));
                    row_ok = false;
                }
                Err(_) => {
                    problems.push(format!(
                        "row {row}: column {class} = {:?} is not a number",
                        &rec[k + 2]
                    ));
                    row_ok = false;
                }
            }
        }
        if !row_ok {
            continue;
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            problems.push(format!("row {row}: probabilities sum to {sum}"));
            continue;
        }
        records.push(PredictionRecord {
            trial_id: rec[0].to_owned(),
            true_label: label,
            probs,
        });
    }
    if !problems.is_empty() {
        return Err(format_err(path, problems.join("; ")));
    }
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PredictionSet::new(class_ids, records, source)
}

/// Writes `p` in the format read by [`read_predictions`], using round-trip
/// float formatting.
pub fn write_predictions(p: &PredictionSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["trial_id".to_owned(), "true_label".to_owned()];
    header.extend(p.class_ids.iter().cloned());
    w.write_record(&header)
        .map_err(|e| format_err(path, e.to_string()))?;
    for r in &p.records {
        let mut row = vec![r.trial_id.clone(), r.true_label.clone()];
        row.extend(r.probs.iter().map(|v| format!("{v:?}")));
        w.write_record(&row)
            .map_err(|e| format_err(path, e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| format_err(path, e.to_string()))?;
    super::write_atomic(path, &bytes)
}
