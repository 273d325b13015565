//! Accuracy, calibration error (ECE / NCE), Brier score, reliability bins and
//! rejection-accuracy curves over a [`PredictionSet`].
//!
//! Confidence is the largest class probability; the predicted class is its
//! argmax with ties going to the earliest class.

use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ probs = 1` accepted by [`PredictionSet::new`].
pub const SUM_TOL: f64 = 1e-6;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub trial_id: String,
    pub true_label: String,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub class_ids: Vec<String>,
    pub records: Vec<PredictionRecord>,
    pub source: String,
}

/// Index of the largest entry, earliest on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl PredictionSet {
    pub fn new(
        class_ids: Vec<String>,
        records: Vec<PredictionRecord>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let set = PredictionSet {
            class_ids,
            records,
            source: source.into(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_ids.len() < 2 {
            return Err(Error::validation(
                "a prediction set needs at least 2 classes",
            ));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.probs.len() != self.class_ids.len() {
                return Err(Error::validation(format!(
                    "record {i} ({}) has {} probabilities for {} classes",
                    r.trial_id,
                    r.probs.len(),
                    self.class_ids.len()
                )));
            }
            if r.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::validation(format!(
                    "record {i} ({}) has probabilities outside [0, 1]",
                    r.trial_id
                )));
            }
            let sum: f64 = r.probs.iter().sum();
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(Error::validation(format!(
                    "record {i} ({}) probabilities sum to {sum}",
                    r.trial_id
                )));
            }
            if !self.class_ids.contains(&r.true_label) {
                return Err(Error::validation(format!(
                    "record {i} ({}) has unknown label {:?}",
                    r.trial_id, r.true_label
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn true_index(&self, r: &PredictionRecord) -> usize {
        self.class_ids
            .iter()
            .position(|c| *c == r.true_label)
            .expect("validated label")
    }

    /// Per-record `(confidence, correct)`.
    pub fn outcomes(&self) -> Vec<(f64, bool)> {
        self.records
            .iter()
            .map(|r| {
                let k = argmax(&r.probs);
                (r.probs[k], k == self.true_index(r))
            })
            .collect()
    }

    fn nonempty(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::validation("metric of an empty prediction set"));
        }
        Ok(())
    }
}

pub fn accuracy(p: &PredictionSet) -> Result<f64> {
    p.nonempty()?;
    let correct = p.outcomes().iter().filter(|(_, ok)| *ok).count();
    Ok(correct as f64 / p.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Equal-width confidence bins over (0, 1], right-inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub n_bins: usize,
    pub total: usize,
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationBins {
    fn gaps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.total as f64;
        self.bins.iter().filter(|b| b.count > 0).map(move |b| {
            let w = b.count as f64 / n;
            (
                w,
                b.accuracy.unwrap_or(0.0) - b.mean_confidence.unwrap_or(0.0),
            )
        })
    }

    pub fn ece(&self) -> f64 {
        self.gaps().map(|(w, g)| w * g.abs()).sum()
    }

    pub fn nce(&self) -> f64 {
        self.gaps().map(|(w, g)| w * g).sum()
    }
}

/// 1-based bin of confidence `c`: `m` with `(m-1)/n < c <= m/n`; `c = 0` goes to bin 1.
pub fn bin_index(c: f64, n_bins: usize) -> usize {
    let n = n_bins as f64;
    let mut m = ((c * n).ceil() as usize).clamp(1, n_bins);
    // Correct rounding in `c * n` against the exact edge values `m / n`.
    while m > 1 && c <= (m - 1) as f64 / n {
        m -= 1;
    }
    while m < n_bins && c > m as f64 / n {
        m += 1;
    }
    m
}

/// Bins raw `(confidence, correct)` outcomes.
pub fn bin_outcomes(outcomes: &[(f64, bool)], n_bins: usize) -> Result<CalibrationBins> {
    if outcomes.is_empty() {
        return Err(Error::validation("calibration bins of an empty set"));
    }
    if n_bins < 2 {
        return Err(Error::validation(format!(
            "need at least 2 bins, got {n_bins}"
        )));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    // Summing in a canonical order makes the result independent of record order.
    let mut sorted = outcomes.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &(c, ok) in &sorted {
        let m = bin_index(c, n_bins) - 1;
        count[m] += 1;
        conf_sum[m] += c;
        correct[m] += ok as usize;
    }
    let n = n_bins as f64;
    let bins = (0..n_bins)
        .map(|m| {
            let filled = count[m] > 0;
            CalibrationBin {
                lower: m as f64 / n,
                upper: (m + 1) as f64 / n,
                count: count[m],
                mean_confidence: filled.then(|| conf_sum[m] / count[m] as f64),
                accuracy: filled.then(|| correct[m] as f64 / count[m] as f64),
            }
        })
        .collect();
    Ok(CalibrationBins {
        n_bins,
        total: outcomes.len(),
        bins,
    })
}

pub fn calibration_bins(p: &PredictionSet, n_bins: usize) -> Result<CalibrationBins> {
    p.nonempty()?;
    bin_outcomes(&p.outcomes(), n_bins)
}

/// Expected calibration error: `Σ_m |B_m|/N · |acc(B_m) − conf(B_m)|`.
pub fn ece(p: &PredictionSet, n_bins: usize) -> Result<f64> {
    Ok(calibration_bins(p, n_bins)?.ece())
}

/// Net calibration error: as [`ece`] without the absolute value. Negative
/// values mean overconfidence.
pub fn nce(p: &PredictionSet, n_bins: usize) -> Result<f64> {
    Ok(calibration_bins(p, n_bins)?.nce())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrierMode {
    /// `Σ_k (y_k − ŷ_k)²` per record, range [0, 2].
    #[default]
    MulticlassSum,
    /// `(y − ŷ)²` on the second class of a binary problem, range [0, 1].
    BinaryPositive,
}

pub fn brier(p: &PredictionSet, mode: BrierMode) -> Result<f64> {
    p.nonempty()?;
    if mode == BrierMode::BinaryPositive && p.class_ids.len() != 2 {
        return Err(Error::validation(format!(
            "binary_positive Brier needs exactly 2 classes, got {}",
            p.class_ids.len()
        )));
    }
    let mut terms: Vec<f64> = p
        .records
        .iter()
        .map(|r| {
            let t = p.true_index(r);
            match mode {
                BrierMode::MulticlassSum => r
                    .probs
                    .iter()
                    .enumerate()
                    .map(|(k, &q)| {
                        let y = if k == t { 1.0 } else { 0.0 };
                        (y - q) * (y - q)
                    })
                    .sum::<f64>(),
                BrierMode::BinaryPositive => {
                    let y = if t == 1 { 1.0 } else { 0.0 };
                    (y - r.probs[1]).powi(2)
                }
            }
        })
        .collect();
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>() / p.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionPoint {
    pub rejection_fraction: f64,
    pub retained_count: usize,
    pub retained_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionCurve {
    pub points: Vec<RejectionPoint>,
}

impl RejectionCurve {
    pub fn at(&self, fraction: f64) -> Option<&RejectionPoint> {
        self.points
            .iter()
            .find(|p| (p.rejection_fraction - fraction).abs() < 1e-9)
    }
}

/// 0.00, 0.05, …, 0.90.
pub fn default_rejection_fractions() -> Vec<f64> {
    (0..=18).map(|i| i as f64 * 0.05).collect()
}

/// Number of records kept after rejecting fraction `f` of `n`: `⌈(1−f)·n⌉`.
pub fn retained_count(f: f64, n: usize) -> usize {
    // The epsilon absorbs representation error in (1 - f) * n, e.g. f = 0.3.
    ((1.0 - f) * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Accuracy on the most confident records after rejecting each fraction.
///
/// Records are ordered by descending confidence, ties by trial id. Points
/// that would keep no records, or the same number as the previous point, are
/// dropped.
pub fn rejection_curve(p: &PredictionSet, fractions: &[f64]) -> Result<RejectionCurve> {
    p.nonempty()?;
    if let Some(f) = fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Error::validation(format!(
            "rejection fraction {f} outside [0, 1)"
        )));
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation(
            "rejection fractions must be strictly increasing",
        ));
    }

    let outcomes = p.outcomes();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        outcomes[b]
            .0
            .partial_cmp(&outcomes[a].0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| p.records[a].trial_id.cmp(&p.records[b].trial_id))
    });
    // Prefix sums of correctness along the confidence ordering.
    let mut correct_prefix = Vec::with_capacity(order.len() + 1);
    correct_prefix.push(0usize);
    for &i in &order {
        let last = *correct_prefix.last().unwrap();
        correct_prefix.push(last + outcomes[i].1 as usize);
    }

    let mut points: Vec<RejectionPoint> = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let keep = retained_count(f, p.len());
        if keep == 0 {
            warn!("rejection fraction {f} leaves no records; point omitted");
            continue;
        }
        if points
            .last()
            .is_some_and(|last| last.retained_count == keep)
        {
            continue;
        }
        points.push(RejectionPoint {
            rejection_fraction: f,
            retained_count: keep,
            retained_accuracy: correct_prefix[keep] as f64 / keep as f64,
        });
    }
    Ok(RejectionCurve { points })
}
