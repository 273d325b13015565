//! Temperature-scaled softmax and temperature fitting.
//!
//! Scores are "higher is more likely" values: negated squared distances for
//! MDRM, logits for anything else. Probabilities are `softmax(scores / T)`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{argmax, bin_outcomes, DEFAULT_BINS};

/// Softmax of `scores / t`, shifted by the maximum for overflow safety.
pub fn apply_temperature(scores: &[f64], t: f64) -> Result<Vec<f64>> {
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::validation(format!(
            "temperature must be positive, got {t}"
        )));
    }
    if scores.is_empty() {
        return Err(Error::validation("softmax of an empty score vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation("scores must be finite"));
    }
    Ok(softmax_scaled(scores, t))
}

pub(crate) fn softmax_scaled(scores: &[f64], t: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| ((s - max) / t).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureObjective {
    /// Expected calibration error of the scaled probabilities.
    #[default]
    Ece,
    /// Mean negative log-likelihood of the true class.
    Nll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemperatureSearch {
    pub objective: TemperatureObjective,
    pub n_bins: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub grid_points: usize,
    /// Golden-section refinement stops when `t_hi / t_lo − 1` drops below this.
    pub rel_width: f64,
}

impl Default for TemperatureSearch {
    fn default() -> Self {
        TemperatureSearch {
            objective: TemperatureObjective::Ece,
            n_bins: DEFAULT_BINS,
            t_min: 1e-2,
            t_max: 1e2,
            grid_points: 200,
            rel_width: 1e-3,
        }
    }
}

impl TemperatureSearch {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < 1.0 && self.t_max > 1.0 && self.t_max.is_finite()) {
            return Err(Error::validation(format!(
                "temperature bounds must satisfy 0 < t_min < 1 < t_max, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.grid_points < 2 || self.n_bins < 2 {
            return Err(Error::validation(
                "temperature search needs >= 2 grid points and bins",
            ));
        }
        if self.rel_width.is_nan() || self.rel_width <= 0.0 {
            return Err(Error::validation("rel_width must be positive"));
        }
        Ok(())
    }

    /// Log-spaced grid over `[t_min, t_max]` with `T = 1` inserted exactly.
    pub fn grid(&self) -> Vec<f64> {
        let (lo, hi) = (self.t_min.ln(), self.t_max.ln());
        let step = (hi - lo) / (self.grid_points - 1) as f64;
        let mut g: Vec<f64> = (0..self.grid_points)
            .map(|i| (lo + step * i as f64).exp())
            .collect();
        g[0] = self.t_min;
        g[self.grid_points - 1] = self.t_max;
        if !g.contains(&1.0) {
            let at = g.partition_point(|&t| t < 1.0);
            g.insert(at, 1.0);
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub objective_value: f64,
    /// Every evaluated `(T, objective)` pair, grid first then refinement.
    pub grid_trace: Vec<(f64, f64)>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn objective(scores: &[Vec<f64>], labels: &[usize], t: f64, search: &TemperatureSearch) -> f64 {
    match search.objective {
        TemperatureObjective::Ece => {
            let outcomes: Vec<(f64, bool)> = scores
                .iter()
                .zip(labels)
                .map(|(s, &y)| {
                    let p = softmax_scaled(s, t);
                    let k = argmax(&p);
                    (p[k], k == y)
                })
                .collect();
            bin_outcomes(&outcomes, search.n_bins)
                .expect("non-empty outcomes")
                .ece()
        }
        TemperatureObjective::Nll => {
            let total: f64 = scores
                .iter()
                .zip(labels)
                .map(|(s, &y)| -softmax_scaled(s, t)[y].max(f64::MIN_POSITIVE).ln())
                .sum();
            total / scores.len() as f64
        }
    }
}

/// Strictly better objective, or equal objective closer to `T = 1` in log space.
fn improves(candidate: (f64, f64), best: (f64, f64)) -> bool {
    candidate.1 < best.1 || (candidate.1 == best.1 && candidate.0.ln().abs() < best.0.ln().abs())
}

/// Finds the temperature minimizing the calibration objective on
/// `(scores, labels)`: a log-spaced grid followed by golden-section
/// refinement around the best grid point. The grid contains `T = 1`, so the
/// returned objective never exceeds the unscaled one.
///
/// `labels[i]` indexes into `scores[i]`.
pub fn fit_temperature(
    scores: &[Vec<f64>],
    labels: &[usize],
    search: &TemperatureSearch,
) -> Result<TemperatureFit> {
    search.validate()?;
    if scores.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} score vectors for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let Some(first) = scores.first() else {
        return Err(Error::validation("temperature fit on an empty set"));
    };
    let k = first.len();
    if k < 2 || scores.iter().any(|s| s.len() != k) {
        return Err(Error::validation(
            "score vectors must share a length of at least 2",
        ));
    }
    if scores.iter().flatten().any(|s| !s.is_finite()) {
        return Err(Error::validation("scores must be finite"));
    }
    if labels.iter().any(|&y| y >= k) {
        return Err(Error::validation("label index out of range"));
    }
    let distinct = {
        let mut seen = vec![false; k];
        labels.iter().for_each(|&y| seen[y] = true);
        seen.iter().filter(|s| **s).count()
    };
    if distinct < 2 {
        return Err(Error::validation(
            "temperature fit needs labels from at least 2 classes",
        ));
    }

    let mut warnings = Vec::new();
    if scores.len() < search.n_bins {
        warnings.push(format!(
            "only {} samples for {} bins; the calibration objective is coarse",
            scores.len(),
            search.n_bins
        ));
    }

    let degenerate = scores.iter().all(|s| s.iter().all(|&v| v == s[0]));
    if degenerate {
        let value = objective(scores, labels, 1.0, search);
        warnings
            .push("all score vectors are constant; temperature has no effect, using T = 1".into());
        for w in &warnings {
            warn!("{w}");
        }
        return Ok(TemperatureFit {
            temperature: 1.0,
            objective_value: value,
            grid_trace: vec![(1.0, value)],
            warnings,
        });
    }

    let grid = search.grid();
    let mut trace: Vec<(f64, f64)> = grid
        .iter()
        .map(|&t| (t, objective(scores, labels, t, search)))
        .collect();
    let mut best_idx = 0;
    for i in 1..trace.len() {
        if improves(trace[i], trace[best_idx]) {
            best_idx = i;
        }
    }
    let mut best = trace[best_idx];

    // Golden-section search in log T between the neighbours of the grid optimum.
    let lo_idx = best_idx.saturating_sub(1);
    let hi_idx = (best_idx + 1).min(grid.len() - 1);
    let (mut a, mut b) = (grid[lo_idx].ln(), grid[hi_idx].ln());
    let stop = (1.0 + search.rel_width).ln();
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let eval = |log_t: f64, trace: &mut Vec<(f64, f64)>, best: &mut (f64, f64)| {
        let t = log_t.exp();
        let v = objective(scores, labels, t, search);
        trace.push((t, v));
        if improves((t, v), *best) {
            *best = (t, v);
        }
        v
    };
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let mut fc = eval(c, &mut trace, &mut best);
    let mut fd = eval(d, &mut trace, &mut best);
    while b - a > stop {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = eval(c, &mut trace, &mut best);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = eval(d, &mut trace, &mut best);
        }
    }

    if best_idx == 0 || best_idx == grid.len() - 1 {
        warnings.push(format!(
            "optimal temperature {} lies on the search boundary [{}, {}]",
            best.0, search.t_min, search.t_max
        ));
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(TemperatureFit {
        temperature: best.0,
        objective_value: best.1,
        grid_trace: trace,
        warnings,
    })
}
