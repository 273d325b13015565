//! Classifier inputs: shrunk channel covariances and CSP log-variance features.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spd::SpdMatrix;

pub const DEFAULT_SHRINKAGE: f64 = 0.1;

/// Variance floor applied before taking the log of a CSP projection.
pub const LOG_POWER_FLOOR: f64 = 1e-20;

/// One trial: channels × samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    data: DMatrix<f64>,
    pub label: Option<String>,
}

impl Epoch {
    pub fn new(data: DMatrix<f64>, label: Option<String>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::validation("epoch has no channels"));
        }
        if data.ncols() <= data.nrows() {
            return Err(Error::validation(format!(
                "epoch needs more samples ({}) than channels ({})",
                data.ncols(),
                data.nrows()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("epoch contains non-finite values"));
        }
        Ok(Epoch { data, label })
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    fn centered(&self) -> DMatrix<f64> {
        let mut x = self.data.clone();
        for mut row in x.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
        x
    }

    /// Unbiased sample covariance of the mean-centred channels.
    pub fn sample_covariance(&self) -> DMatrix<f64> {
        let x = self.centered();
        let c = &x * x.transpose() / (self.samples() as f64 - 1.0);
        crate::spd::symmetrize(&c)
    }
}

/// `(1−α)·C + α·(tr C / n)·I`.
pub fn shrink(c: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let n = c.nrows();
    let target = c.trace() / n as f64;
    let mut out = c * (1.0 - alpha);
    for i in 0..n {
        out[(i, i)] += alpha * target;
    }
    out
}

/// Shrunk sample covariance of an epoch.
pub fn estimate_covariance(e: &Epoch, shrinkage: f64) -> Result<SpdMatrix> {
    if !(0.0..1.0).contains(&shrinkage) {
        return Err(Error::validation(format!(
            "shrinkage must lie in [0, 1), got {shrinkage}"
        )));
    }
    let raw = e.sample_covariance();
    // Round-off from centring a flat epoch leaves a tiny but "positive" matrix.
    let scale = e.data.amax();
    if raw.trace() <= e.channels() as f64 * (16.0 * f64::EPSILON * scale).powi(2) {
        return Err(Error::NotPositiveDefinite(
            "epoch has no variance on any channel; check for flat channels (shrinkage cannot help)"
                .into(),
        ));
    }
    let c = shrink(&raw, shrinkage);
    SpdMatrix::new(c).map_err(|err| match err {
        Error::NotPositiveDefinite(msg) => Error::NotPositiveDefinite(format!(
            "epoch covariance is rank deficient ({msg}); use shrinkage > 0 or check for flat/duplicated channels"
        )),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// Filters whose projected variance hit [`LOG_POWER_FLOOR`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clamped: Vec<usize>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("feature vector has non-finite values"));
        }
        Ok(FeatureVector {
            values,
            clamped: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `log(var(wᵀX))` for every filter row `w` of `filters` (n_filters × channels).
pub fn csp_log_power(e: &Epoch, filters: &DMatrix<f64>) -> Result<FeatureVector> {
    if filters.ncols() != e.channels() {
        return Err(Error::validation(format!(
            "filters expect {} channels, epoch has {}",
            filters.ncols(),
            e.channels()
        )));
    }
    let projected = filters * e.centered();
    let denom = e.samples() as f64 - 1.0;
    let mut clamped = Vec::new();
    let values = projected
        .row_iter()
        .enumerate()
        .map(|(i, row)| {
            let var = row.norm_squared() / denom;
            if var < LOG_POWER_FLOOR {
                clamped.push(i);
                LOG_POWER_FLOOR.ln()
            } else {
                var.ln()
            }
        })
        .collect();
    if !clamped.is_empty() {
        warn!("CSP projection variance below {LOG_POWER_FLOOR:e} for filters {clamped:?}; clamped");
    }
    Ok(FeatureVector { values, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(channels: usize, samples: usize, seed: u64) -> Epoch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(channels, samples, |_, _| StandardNormal.sample(&mut rng));
        Epoch::new(m, None).unwrap()
    }

    #[test]
    fn epoch_invariants() {
        assert!(Epoch::new(DMatrix::zeros(3, 3), None).is_err());
        let mut m = DMatrix::zeros(2, 10);
        m[(0, 0)] = f64::INFINITY;
        assert!(Epoch::new(m, None).is_err());
    }

    #[test]
    fn duplicated_channel_hand_formula() {
        let x = [1.0, -2.0, 0.5, 3.0, -1.5, 2.0];
        let n = x.len();
        let data = DMatrix::from_fn(2, n, |r, c| if r == 0 { x[c] } else { 2.0 * x[c] });
        let e = Epoch::new(data, None).unwrap();
        let mean = x.iter().sum::<f64>() / n as f64;
        let v = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        // C = v·[[1, 2], [2, 4]], trace 5v, target 2.5v.
        let alpha = 0.1;
        let c = estimate_covariance(&e, alpha).unwrap();
        let m = c.as_matrix();
        let target = 2.5 * v;
        assert!((m[(0, 0)] - ((1.0 - alpha) * v + alpha * target)).abs() < 1e-10);
        assert!((m[(1, 1)] - ((1.0 - alpha) * 4.0 * v + alpha * target)).abs() < 1e-10);
        assert!((m[(0, 1)] - (1.0 - alpha) * 2.0 * v).abs() < 1e-10);
        assert!(matches!(
            estimate_covariance(&e, 0.0),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn constant_epoch_not_pd() {
        let e = Epoch::new(DMatrix::from_element(3, 20, 4.2), None).unwrap();
        let err = estimate_covariance(&e, 0.1).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite(_)));
        assert!(err.to_string().contains("shrinkage"));
    }

    #[test]
    fn white_noise_covariance_near_identity() {
        let e = noise(4, 20_000, 3);
        let c = estimate_covariance(&e, 0.0).unwrap();
        let m = c.as_matrix();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((m[(i, j)] - want).abs() < 0.1);
            }
        }
    }

    #[test]
    fn shrinkage_preserves_trace() {
        let e = noise(5, 50, 8);
        let raw = e.sample_covariance();
        for alpha in [0.0, 0.1, 0.5, 0.9] {
            let s = shrink(&raw, alpha);
            assert!((s.trace() - raw.trace()).abs() < 1e-12 * raw.trace());
        }
        assert!(estimate_covariance(&e, 1.0).is_err());
    }

    #[test]
    fn log_power_identity_filters() {
        let e = noise(3, 20_000, 5);
        let f = csp_log_power(&e, &DMatrix::identity(3, 3)).unwrap();
        assert!(f.values.iter().all(|v| v.abs() < 0.2));
        assert!(f.clamped.is_empty());
    }

    #[test]
    fn log_power_scaling_shift() {
        let e = noise(3, 200, 6);
        let w = DMatrix::from_row_slice(2, 3, &[1.0, -0.5, 0.2, 0.3, 0.3, -1.0]);
        let base = csp_log_power(&e, &w).unwrap();
        let c = 3.7;
        let scaled = Epoch::new(e.data() * c, None).unwrap();
        let shifted = csp_log_power(&scaled, &w).unwrap();
        for (a, b) in base.values.iter().zip(&shifted.values) {
            assert!((b - a - 2.0 * c.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_filter_clamped() {
        let mut m = DMatrix::zeros(2, 50);
        for j in 0..50 {
            m[(0, j)] = (j as f64 * 0.3).sin();
        }
        let e = Epoch::new(m, None).unwrap();
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let f = csp_log_power(&e, &w).unwrap();
        assert_eq!(f.clamped, vec![0]);
        assert_eq!(f.values[0], LOG_POWER_FLOOR.ln());
        assert!(csp_log_power(&e, &DMatrix::identity(3, 3)).is_err());
    }
}
