//! MDRM (optionally temperature scaled) and CSP-LDA classifiers.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibration::softmax_scaled;
use crate::error::{Error, Result};
use crate::features::{csp_log_power, estimate_covariance, Epoch, FeatureVector};
use crate::metrics::argmax;
use crate::spd::{frechet_mean, riemannian_distance, sym_eig, FrechetOptions, SpdMatrix};

/// Shrinkage applied to the pooled LDA covariance.
pub const LDA_SHRINKAGE: f64 = 1e-4;

pub const DEFAULT_CSP_FILTERS: usize = 8;

/// Anything that maps an input to a probability vector over `class_ids`.
pub trait ProbabilisticClassifier {
    type Input;

    fn class_ids(&self) -> &[String];

    fn predict_proba(&self, x: &Self::Input) -> Result<Vec<f64>>;

    /// Most probable class, earliest class on ties.
    fn predict(&self, x: &Self::Input) -> Result<String> {
        let p = self.predict_proba(x)?;
        Ok(self.class_ids()[argmax(&p)].clone())
    }
}

/// Maps labels onto indices of `class_ids`, requiring every class to occur at
/// least `min_per_class` times.
fn index_labels(
    labels: &[String],
    class_ids: &[String],
    min_per_class: usize,
) -> Result<Vec<usize>> {
    if class_ids.len() < 2 {
        return Err(Error::validation(format!(
            "need at least 2 classes, got {}",
            class_ids.len()
        )));
    }
    let lookup: HashMap<&str, usize> = class_ids
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    if lookup.len() != class_ids.len() {
        return Err(Error::validation("class ids must be distinct"));
    }
    let idx = labels
        .iter()
        .map(|l| {
            lookup
                .get(l.as_str())
                .copied()
                .ok_or_else(|| Error::validation(format!("label {l:?} not among {class_ids:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![0usize; class_ids.len()];
    idx.iter().for_each(|&k| counts[k] += 1);
    if let Some((k, &n)) = counts.iter().enumerate().find(|(_, &n)| n < min_per_class) {
        return Err(Error::validation(format!(
            "class {:?} has {n} samples, need at least {min_per_class}",
            class_ids[k]
        )));
    }
    Ok(idx)
}

fn check_lengths(n_inputs: usize, n_labels: usize) -> Result<()> {
    if n_inputs != n_labels {
        return Err(Error::validation(format!(
            "{n_inputs} inputs but {n_labels} labels"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// MDRM

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdrmModel {
    pub class_ids: Vec<String>,
    pub class_means: Vec<SpdMatrix>,
    /// Softmax temperature; 1.0 for plain MDRM.
    pub temperature: f64,
    /// Whether distances enter the softmax squared (default) or as-is.
    pub squared_distances: bool,
    /// Covariance shrinkage used when classifying raw epochs.
    pub shrinkage: f64,
}

/// Fréchet mean of each class's covariances.
pub fn mdrm_fit(covs: &[SpdMatrix], labels: &[String], class_ids: &[String]) -> Result<MdrmModel> {
    check_lengths(covs.len(), labels.len())?;
    let idx = index_labels(labels, class_ids, 1)?;
    let dim = covs[0].dim();
    if covs.iter().any(|c| c.dim() != dim) {
        return Err(Error::validation("covariances differ in dimension"));
    }
    let class_means = (0..class_ids.len())
        .map(|k| {
            let members: Vec<SpdMatrix> = covs
                .iter()
                .zip(&idx)
                .filter(|(_, &y)| y == k)
                .map(|(c, _)| c.clone())
                .collect();
            frechet_mean(&members, FrechetOptions::default())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MdrmModel {
        class_ids: class_ids.to_vec(),
        class_means,
        temperature: 1.0,
        squared_distances: true,
        shrinkage: crate::features::DEFAULT_SHRINKAGE,
    })
}

impl MdrmModel {
    pub fn dim(&self) -> usize {
        self.class_means[0].dim()
    }

    pub fn with_temperature(mut self, t: f64) -> Result<Self> {
        if !t.is_finite() || t <= 0.0 {
            return Err(Error::validation(format!(
                "temperature must be positive, got {t}"
            )));
        }
        self.temperature = t;
        Ok(self)
    }

    /// Riemannian distance from `c` to each class mean, in class order.
    pub fn distances(&self, c: &SpdMatrix) -> Result<Vec<f64>> {
        if c.dim() != self.dim() {
            return Err(Error::validation(format!(
                "input is {}x{}, model expects {}x{}",
                c.dim(),
                c.dim(),
                self.dim(),
                self.dim()
            )));
        }
        self.class_means
            .iter()
            .map(|m| riemannian_distance(c, m))
            .collect()
    }

    /// Softmax inputs before temperature: `−d²` (or `−d`).
    pub fn scores(&self, c: &SpdMatrix) -> Result<Vec<f64>> {
        Ok(self
            .distances(c)?
            .into_iter()
            .map(|d| if self.squared_distances { -d * d } else { -d })
            .collect())
    }

    pub fn predict_epoch_proba(&self, e: &Epoch) -> Result<Vec<f64>> {
        self.predict_proba(&estimate_covariance(e, self.shrinkage)?)
    }
}

pub fn mdrm_distances(m: &MdrmModel, c: &SpdMatrix) -> Result<Vec<f64>> {
    m.distances(c)
}

/// `exp(−dᵢ²/T) / Σⱼ exp(−dⱼ²/T)`.
pub fn mdrm_predict_proba(m: &MdrmModel, c: &SpdMatrix) -> Result<Vec<f64>> {
    Ok(softmax_scaled(&m.scores(c)?, m.temperature))
}

impl ProbabilisticClassifier for MdrmModel {
    type Input = SpdMatrix;

    fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    fn predict_proba(&self, c: &SpdMatrix) -> Result<Vec<f64>> {
        mdrm_predict_proba(self, c)
    }
}

// ---------------------------------------------------------------------------
// CSP

#[derive(Debug, Clone, PartialEq)]
pub struct CspFilters {
    /// n_filters × channels; each row is one spatial filter.
    pub filters: DMatrix<f64>,
    /// Generalized eigenvalue of each filter in its (one-vs-rest) problem.
    pub eigenvalues: Vec<f64>,
    /// Class whose problem produced each filter (the first class for binary).
    pub source_class: Vec<usize>,
}

/// Class-average covariances, one per class.
pub fn class_covariances(
    epochs: &[Epoch],
    idx: &[usize],
    n_classes: usize,
    shrinkage: f64,
) -> Result<Vec<DMatrix<f64>>> {
    let n = epochs[0].channels();
    let mut sums = vec![DMatrix::zeros(n, n); n_classes];
    let mut counts = vec![0usize; n_classes];
    for (e, &k) in epochs.iter().zip(idx) {
        if e.channels() != n {
            return Err(Error::validation("epochs differ in channel count"));
        }
        sums[k] += estimate_covariance(e, shrinkage)?.as_matrix();
        counts[k] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s / c as f64)
        .collect())
}

/// Solves `Σ_a w = λ (Σ_a + Σ_b) w`; eigenvalues ascending, filters as columns.
pub fn generalized_eig(
    sigma_a: &DMatrix<f64>,
    sigma_b: &DMatrix<f64>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let composite = SpdMatrix::new(sigma_a + sigma_b).map_err(|e| {
        Error::NotPositiveDefinite(format!(
            "composite CSP covariance is singular ({e}); increase covariance shrinkage"
        ))
    })?;
    let whiten = composite.inv_sqrt();
    let inner = crate::spd::symmetrize(&(&whiten * sigma_a * &whiten));
    let eig = sym_eig(&inner)?;
    Ok((eig.values.iter().copied().collect(), whiten * eig.vectors))
}

/// Common spatial patterns.
///
/// Binary: the `n_filters / 2` largest and `n_filters / 2` smallest
/// generalized eigenvectors of the first class against the second.
/// Multiclass: one-vs-rest, `n_filters / K` top filters per class with the
/// remainder going to the earliest classes.
pub fn csp_fit(
    epochs: &[Epoch],
    labels: &[String],
    class_ids: &[String],
    n_filters: usize,
    shrinkage: f64,
) -> Result<CspFilters> {
    check_lengths(epochs.len(), labels.len())?;
    let idx = index_labels(labels, class_ids, 1)?;
    let channels = epochs[0].channels();
    if n_filters == 0 || !n_filters.is_multiple_of(2) {
        return Err(Error::validation(format!(
            "n_filters must be a positive even integer, got {n_filters}"
        )));
    }
    if n_filters > channels {
        return Err(Error::validation(format!(
            "{n_filters} CSP filters requested for {channels} channels"
        )));
    }
    let k = class_ids.len();
    let covs = class_covariances(epochs, &idx, k, shrinkage)?;

    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(n_filters);
    let mut eigenvalues = Vec::with_capacity(n_filters);
    let mut source_class = Vec::with_capacity(n_filters);
    if k == 2 {
        let (vals, vecs) = generalized_eig(&covs[0], &covs[1])?;
        let half = n_filters / 2;
        let top = (0..half).map(|i| channels - 1 - i);
        let bottom = 0..half;
        for j in top.chain(bottom) {
            rows.push(vecs.column(j).into_owned());
            eigenvalues.push(vals[j]);
            source_class.push(0);
        }
    } else {
        for (c, cov) in covs.iter().enumerate() {
            let per = n_filters / k + usize::from(c < n_filters % k);
            if per == 0 {
                continue;
            }
            let rest = covs
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != c)
                .fold(DMatrix::zeros(channels, channels), |acc, (_, m)| acc + m)
                / (k - 1) as f64;
            let (vals, vecs) = generalized_eig(cov, &rest)?;
            for i in 0..per {
                let j = channels - 1 - i;
                rows.push(vecs.column(j).into_owned());
                eigenvalues.push(vals[j]);
                source_class.push(c);
            }
        }
    }
    let filters = DMatrix::from_fn(rows.len(), channels, |r, c| rows[r][c]);
    Ok(CspFilters {
        filters,
        eigenvalues,
        source_class,
    })
}

// ---------------------------------------------------------------------------
// LDA

/// Gaussian class conditionals sharing one covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaParams {
    pub class_ids: Vec<String>,
    pub means: Vec<Vec<f64>>,
    pub pooled_covariance: SpdMatrix,
    pub log_priors: Vec<f64>,
}

/// Per-class means, pooled within-class covariance (divisor `N − K`, then
/// shrunk by [`LDA_SHRINKAGE`]) and empirical priors.
pub fn lda_fit(
    features: &[FeatureVector],
    labels: &[String],
    class_ids: &[String],
) -> Result<LdaParams> {
    check_lengths(features.len(), labels.len())?;
    let idx = index_labels(labels, class_ids, 2)?;
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::validation(
            "feature vectors must share a nonzero length",
        ));
    }
    let k = class_ids.len();
    let n = features.len();

    let mut counts = vec![0usize; k];
    let mut sums = vec![DVector::zeros(d); k];
    for (f, &y) in features.iter().zip(&idx) {
        counts[y] += 1;
        sums[y] += DVector::from_column_slice(&f.values);
    }
    let means: Vec<DVector<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect();

    let mut scatter = DMatrix::zeros(d, d);
    for (f, &y) in features.iter().zip(&idx) {
        let diff = DVector::from_column_slice(&f.values) - &means[y];
        scatter += &diff * diff.transpose();
    }
    let pooled = crate::features::shrink(&(scatter / (n - k) as f64), LDA_SHRINKAGE);
    let pooled_covariance = SpdMatrix::new(pooled).map_err(|e| {
        Error::NotPositiveDefinite(format!("pooled LDA covariance degenerate: {e}"))
    })?;

    Ok(LdaParams {
        class_ids: class_ids.to_vec(),
        means: means.iter().map(|m| m.iter().copied().collect()).collect(),
        pooled_covariance,
        log_priors: counts.iter().map(|&c| (c as f64 / n as f64).ln()).collect(),
    })
}

impl LdaParams {
    pub fn precision(&self) -> DMatrix<f64> {
        self.pooled_covariance.inverse().into_inner()
    }

    /// Log posterior up to a constant, per class.
    fn log_scores(&self, precision: &DMatrix<f64>, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.means[0].len() {
            return Err(Error::validation(format!(
                "feature vector has {} entries, model expects {}",
                f.len(),
                self.means[0].len()
            )));
        }
        let x = DVector::from_column_slice(f);
        Ok(self
            .means
            .iter()
            .zip(&self.log_priors)
            .map(|(m, lp)| {
                let diff = &x - DVector::from_column_slice(m);
                -0.5 * (diff.transpose() * precision * &diff)[(0, 0)] + lp
            })
            .collect())
    }
}

/// Bayes posterior `p_k ∝ exp(−½(f−μ_k)ᵀΣ⁻¹(f−μ_k))·prior_k`.
pub fn lda_predict_proba(params: &LdaParams, f: &FeatureVector) -> Result<Vec<f64>> {
    let s = params.log_scores(&params.precision(), &f.values)?;
    Ok(softmax_scaled(&s, 1.0))
}

impl ProbabilisticClassifier for LdaParams {
    type Input = FeatureVector;

    fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    fn predict_proba(&self, f: &FeatureVector) -> Result<Vec<f64>> {
        lda_predict_proba(self, f)
    }
}

// ---------------------------------------------------------------------------
// CSP-LDA

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CspLdaModel {
    /// n_filters × channels.
    pub filters: DMatrix<f64>,
    pub class_ids: Vec<String>,
    pub lda: LdaParams,
    pub shrinkage: f64,
}

impl CspLdaModel {
    pub fn fit(
        epochs: &[Epoch],
        labels: &[String],
        class_ids: &[String],
        n_filters: usize,
        shrinkage: f64,
    ) -> Result<Self> {
        let csp = csp_fit(epochs, labels, class_ids, n_filters, shrinkage)?;
        let features = epochs
            .iter()
            .map(|e| csp_log_power(e, &csp.filters))
            .collect::<Result<Vec<_>>>()?;
        let lda = lda_fit(&features, labels, class_ids)?;
        Ok(CspLdaModel {
            filters: csp.filters,
            class_ids: class_ids.to_vec(),
            lda,
            shrinkage,
        })
    }

    pub fn features(&self, e: &Epoch) -> Result<FeatureVector> {
        csp_log_power(e, &self.filters)
    }

    /// Batch prediction sharing one precision matrix.
    pub fn predict_proba_many(&self, epochs: &[Epoch]) -> Result<Vec<Vec<f64>>> {
        let precision = self.lda.precision();
        epochs
            .iter()
            .map(|e| {
                let f = self.features(e)?;
                Ok(softmax_scaled(
                    &self.lda.log_scores(&precision, &f.values)?,
                    1.0,
                ))
            })
            .collect()
    }
}

impl ProbabilisticClassifier for CspLdaModel {
    type Input = Epoch;

    fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    fn predict_proba(&self, e: &Epoch) -> Result<Vec<f64>> {
        lda_predict_proba(&self.lda, &self.features(e)?)
    }
}
