//! Seeded synthetic epochs with known class covariance structure.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EpochSet, Manifest, EPOCHSET_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::spd::{geodesic, matrix_fn, MatrixFn, SpdMatrix};

/// Largest log-eigenvalue the prototype construction will place.
const MAX_LOG_EIGEN: f64 = 12.0;

const CANONICAL_LABELS: [&str; 4] = ["left_hand", "right_hand", "feet", "tongue"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dataset_id: String,
    pub subject_id: String,
    pub n_channels: usize,
    pub n_classes: usize,
    pub epochs_per_class: usize,
    pub n_samples: usize,
    pub sample_rate_hz: f64,
    /// Riemannian distance between every pair of class prototypes.
    pub separation: f64,
    /// Riemannian distance of each epoch's generating covariance from its prototype.
    pub epoch_jitter: f64,
    /// Fraction of each class drawn from a prototype midpoint (labels kept).
    pub ambiguous_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dataset_id: "synthetic".into(),
            subject_id: "S01".into(),
            n_channels: 8,
            n_classes: 2,
            epochs_per_class: 100,
            n_samples: 500,
            sample_rate_hz: 250.0,
            separation: 3.0,
            epoch_jitter: 0.1,
            ambiguous_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::validation(format!("{field}: {msg}")));
        if self.n_channels == 0 {
            return fail("n_channels", "must be positive".into());
        }
        if self.n_classes < 2 {
            return fail(
                "n_classes",
                format!("need at least 2, got {}", self.n_classes),
            );
        }
        if self.epochs_per_class == 0 {
            return fail("epochs_per_class", "must be positive".into());
        }
        if self.n_samples <= self.n_channels {
            return fail(
                "n_samples",
                format!(
                    "must exceed n_channels ({}), got {}",
                    self.n_channels, self.n_samples
                ),
            );
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return fail(
                "sample_rate_hz",
                format!("must be positive, got {}", self.sample_rate_hz),
            );
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return fail(
                "separation",
                format!("must be finite and >= 0, got {}", self.separation),
            );
        }
        if !(self.epoch_jitter >= 0.0 && self.epoch_jitter.is_finite()) {
            return fail(
                "epoch_jitter",
                format!("must be finite and >= 0, got {}", self.epoch_jitter),
            );
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return fail(
                "ambiguous_fraction",
                format!("must lie in [0, 1], got {}", self.ambiguous_fraction),
            );
        }
        if self.n_classes > self.n_channels {
            return fail(
                "separation",
                format!(
                    "cannot place {} equidistant prototypes with {} channels",
                    self.n_classes, self.n_channels
                ),
            );
        }
        if self.separation / std::f64::consts::SQRT_2 > MAX_LOG_EIGEN {
            return fail(
                "separation",
                format!(
                    "{} is too large (max {:.2})",
                    self.separation,
                    MAX_LOG_EIGEN * std::f64::consts::SQRT_2
                ),
            );
        }
        Ok(())
    }

    pub fn class_ids(&self) -> Vec<String> {
        (0..self.n_classes)
            .map(|k| match CANONICAL_LABELS.get(k) {
                Some(l) if self.n_classes <= CANONICAL_LABELS.len() => (*l).to_owned(),
                _ => format!("class_{k}"),
            })
            .collect()
    }
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Fix column signs so the factorization is unique.
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Class prototypes `Q·exp(diag(v_k))·Qᵀ` with `v_k = separation/√2 · e_k`,
/// so every pair sits exactly `separation` apart.
pub fn synth_prototypes(cfg: &SynthConfig) -> Result<Vec<SpdMatrix>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    prototypes_with(cfg, &mut rng)
}

fn prototypes_with(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SpdMatrix>> {
    let n = cfg.n_channels;
    let q = random_orthogonal(rng, n);
    let step = cfg.separation / std::f64::consts::SQRT_2;
    (0..cfg.n_classes)
        .map(|k| {
            let mut diag = DMatrix::identity(n, n);
            diag[(k, k)] = step.exp();
            SpdMatrix::new(&q * diag * q.transpose())
        })
        .collect()
}

fn random_tangent(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let s = (&g + g.transpose()) * 0.5;
    let norm = s.norm();
    if norm > 0.0 {
        s / norm
    } else {
        s
    }
}

/// Generates a seeded epoch set. Epochs are interleaved by class; within each
/// class the first `round(ambiguous_fraction · epochs_per_class)` epochs are
/// drawn from the midpoint between their prototype and the next class's.
pub fn synth_generate(cfg: &SynthConfig) -> Result<EpochSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes = prototypes_with(cfg, &mut rng)?;
    let k = cfg.n_classes;
    let midpoints = (0..k)
        .map(|c| geodesic(&prototypes[c], &prototypes[(c + 1) % k], 0.5))
        .collect::<Result<Vec<_>>>()?;
    let class_ids = cfg.class_ids();
    let n_ambiguous = (cfg.ambiguous_fraction * cfg.epochs_per_class as f64).round() as usize;

    let (n, t) = (cfg.n_channels, cfg.n_samples);
    let mut tensor = Vec::with_capacity(k * cfg.epochs_per_class * n * t);
    let mut labels = Vec::with_capacity(k * cfg.epochs_per_class);
    for i in 0..cfg.epochs_per_class {
        for c in 0..k {
            let centre = if i < n_ambiguous {
                &midpoints[c]
            } else {
                &prototypes[c]
            };
            let cov = perturb(centre, cfg.epoch_jitter, &mut rng)?;
            let mixing = matrix_fn(cov.as_matrix(), MatrixFn::Sqrt)?;
            let z = DMatrix::from_fn(n, t, |_, _| StandardNormal.sample(&mut rng));
            let x: DMatrix<f64> = mixing * z;
            for ch in 0..n {
                tensor.extend(x.row(ch).iter().copied());
            }
            labels.push(class_ids[c].clone());
        }
    }

    let manifest = Manifest {
        format_version: EPOCHSET_FORMAT_VERSION,
        dataset_id: cfg.dataset_id.clone(),
        subject_id: cfg.subject_id.clone(),
        sample_rate_hz: cfg.sample_rate_hz,
        channel_names: (1..=n).map(|i| format!("ch{i:02}")).collect(),
        class_ids,
        n_epochs: labels.len(),
        n_channels: n,
        n_samples: t,
        provenance: vec![format!(
            "synthetic: separation={} jitter={} ambiguous_fraction={} seed={}",
            cfg.separation, cfg.epoch_jitter, cfg.ambiguous_fraction, cfg.seed
        )],
        checksum_sha256: String::new(),
    };
    EpochSet::new(manifest, labels, tensor)
}

fn perturb(centre: &SpdMatrix, jitter: f64, rng: &mut ChaCha8Rng) -> Result<SpdMatrix> {
    let dir = random_tangent(rng, centre.dim());
    if jitter == 0.0 {
        return Ok(centre.clone());
    }
    let sqrt = centre.sqrt();
    let step = matrix_fn(&(dir * jitter), MatrixFn::Exp)?;
    SpdMatrix::new(&sqrt * step * &sqrt)
}
