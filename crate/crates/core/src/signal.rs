//! Zero-phase Butterworth band-pass filtering.

use std::f64::consts::PI;

use log::warn;
use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::data_io::EpochSet;
use crate::error::{Error, Result};

/// Provenance note prefix written by [`preprocess_epochs`].
pub const FILTERED_NOTE: &str = "filtered:";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandpassSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    /// Total band-pass order; the low-pass prototype has `order / 2` poles.
    pub order: usize,
    pub sample_rate_hz: f64,
}

impl BandpassSpec {
    /// 7.5 to 30 Hz, order 4.
    pub fn new(sample_rate_hz: f64) -> Self {
        BandpassSpec {
            low_hz: 7.5,
            high_hz: 30.0,
            order: 4,
            sample_rate_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz / 2.0;
        if !self.sample_rate_hz.is_finite() || self.sample_rate_hz <= 0.0 {
            return Err(Error::validation(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if self.order == 0 || !self.order.is_multiple_of(2) {
            return Err(Error::validation(format!(
                "band-pass order must be a positive even integer, got {}",
                self.order
            )));
        }
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyquist) {
            return Err(Error::validation(format!(
                "band edges must satisfy 0 < low ({}) < high ({}) < Nyquist ({nyquist})",
                self.low_hz, self.high_hz
            )));
        }
        Ok(())
    }

    /// Reflection padding used by [`filtfilt`] on each end.
    pub fn pad_len(&self) -> usize {
        3 * (self.order + 1)
    }
}

/// Cascade of biquads, each `[b0, b1, b2, a0, a1, a2]` with `a0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SosFilter {
    pub sections: Vec<[f64; 6]>,
    pub order: usize,
    pub sample_rate_hz: f64,
}

impl SosFilter {
    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex<f64> {
        let w = 2.0 * PI * freq_hz / self.sample_rate_hz;
        let z1 = Complex::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections.iter().fold(Complex::new(1.0, 0.0), |acc, s| {
            let num = z2 * s[2] + z1 * s[1] + s[0];
            let den = z2 * s[5] + z1 * s[4] + s[3];
            acc * num / den
        })
    }

    pub fn gain_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.response(freq_hz).norm().log10()
    }

    /// Poles of every section in the z-plane.
    pub fn poles(&self) -> Vec<Complex<f64>> {
        self.sections
            .iter()
            .flat_map(|s| quadratic_roots(1.0, s[4], s[5]))
            .collect()
    }

    /// Direct-form II transposed filtering with per-section initial state.
    fn run(&self, x: &mut [f64], state: &mut [[f64; 2]]) {
        for (s, z) in self.sections.iter().zip(state.iter_mut()) {
            for v in x.iter_mut() {
                let input = *v;
                let y = s[0] * input + z[0];
                z[0] = s[1] * input - s[4] * y + z[1];
                z[1] = s[2] * input - s[5] * y;
                *v = y;
            }
        }
    }

    /// Causal single-pass filtering from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        let mut state = vec![[0.0; 2]; self.sections.len()];
        self.run(&mut y, &mut state);
        y
    }

    /// Steady-state section states for a unit step input.
    fn step_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let gain = (s[0] + s[1] + s[2]) / (1.0 + s[4] + s[5]);
                let z1 = s[2] - s[5] * gain;
                let z0 = s[1] - s[4] * gain + z1;
                let zi = [z0 * scale, z1 * scale];
                scale *= gain;
                zi
            })
            .collect()
    }
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> [Complex<f64>; 2] {
    let disc = Complex::new(b * b - 4.0 * a * c, 0.0).sqrt();
    [(-b + disc) / (2.0 * a), (-b - disc) / (2.0 * a)]
}

/// Butterworth band-pass designed through the bilinear transform with
/// pre-warped band edges, returned as second-order sections.
pub fn design_bandpass(spec: &BandpassSpec) -> Result<SosFilter> {
    spec.validate()?;
    let fs = spec.sample_rate_hz;
    let n_proto = spec.order / 2;
    let fs2 = 2.0 * fs;
    let warp = |f: f64| fs2 * (PI * f / fs).tan();
    let (wl, wh) = (warp(spec.low_hz), warp(spec.high_hz));
    let bw = wh - wl;
    let wo2 = wl * wh;

    // Analog low-pass prototype poles on the left half of the unit circle.
    let proto: Vec<Complex<f64>> = (0..n_proto)
        .map(|k| {
            let m = -(n_proto as f64) + 1.0 + 2.0 * k as f64;
            -Complex::from_polar(1.0, PI * m / (2.0 * n_proto as f64))
        })
        .collect();

    // Low-pass to band-pass: each prototype pole splits into two.
    let mut analog_poles = Vec::with_capacity(2 * n_proto);
    for p in &proto {
        let scaled = p * (bw / 2.0);
        let root = (scaled * scaled - wo2).sqrt();
        analog_poles.push(scaled + root);
        analog_poles.push(scaled - root);
    }

    // Bilinear map; n_proto zeros at s = 0 land on z = 1, the rest at z = -1.
    let digital: Vec<Complex<f64>> = analog_poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    let zero_factor = Complex::new(fs2, 0.0).powu(n_proto as u32);
    let pole_factor = analog_poles
        .iter()
        .fold(Complex::new(1.0, 0.0), |acc, p| acc * (fs2 - p));
    let gain = bw.powi(n_proto as i32) * (zero_factor / pole_factor).re;

    let sections = pair_poles(&digital)?
        .into_iter()
        .enumerate()
        .map(|(i, (a1, a2))| {
            let g = if i == 0 { gain } else { 1.0 };
            [g, 0.0, -g, 1.0, a1, a2]
        })
        .collect::<Vec<_>>();

    let filter = SosFilter {
        sections,
        order: spec.order,
        sample_rate_hz: fs,
    };
    if let Some(p) = filter.poles().iter().find(|p| p.norm() >= 1.0) {
        return Err(Error::Numerical(format!(
            "designed filter is unstable (pole magnitude {})",
            p.norm()
        )));
    }
    Ok(filter)
}

/// Groups poles into conjugate pairs (or pairs of real poles) and returns the
/// denominator coefficients `(a1, a2)` of each section, least resonant first.
fn pair_poles(poles: &[Complex<f64>]) -> Result<Vec<(f64, f64)>> {
    const IMAG_TOL: f64 = 1e-12;
    let mut upper: Vec<Complex<f64>> = poles.iter().copied().filter(|p| p.im > IMAG_TOL).collect();
    let mut real: Vec<f64> = poles
        .iter()
        .filter(|p| p.im.abs() <= IMAG_TOL)
        .map(|p| p.re)
        .collect();
    let lower = poles.iter().filter(|p| p.im < -IMAG_TOL).count();
    if lower != upper.len() || !real.len().is_multiple_of(2) {
        return Err(Error::Numerical("band-pass poles do not pair up".into()));
    }
    upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    real.sort_by(f64::total_cmp);

    let mut out: Vec<(f64, f64)> = real
        .chunks(2)
        .map(|pair| (-(pair[0] + pair[1]), pair[0] * pair[1]))
        .collect();
    out.extend(upper.iter().map(|p| (-2.0 * p.re, p.norm_sqr())));
    Ok(out)
}

/// Forward-backward (zero-phase) filtering with odd reflection padding.
///
/// The output has the input's length; the effective magnitude response is
/// the square of the single-pass response.
pub fn filtfilt(x: &[f64], filter: &SosFilter) -> Result<Vec<f64>> {
    let pad = 3 * (filter.order + 1);
    let n = x.len();
    if n <= pad {
        return Err(Error::validation(format!(
            "sequence of length {n} too short for forward-backward filtering (needs > {pad})"
        )));
    }

    let (first, last) = (x[0], x[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    let unit = filter.step_state();
    let scaled = |v: f64| {
        unit.iter()
            .map(|z| [z[0] * v, z[1] * v])
            .collect::<Vec<_>>()
    };

    let mut state = scaled(ext[0]);
    filter.run(&mut ext, &mut state);
    ext.reverse();
    let mut state = scaled(ext[0]);
    filter.run(&mut ext, &mut state);
    ext.reverse();

    Ok(ext[pad..pad + n].to_vec())
}

/// Band-pass every channel of every epoch independently.
pub fn preprocess_epochs(epochs: &EpochSet, spec: &BandpassSpec) -> Result<EpochSet> {
    if spec.sample_rate_hz != epochs.manifest.sample_rate_hz {
        return Err(Error::validation(format!(
            "filter designed for {} Hz but epochs are sampled at {} Hz",
            spec.sample_rate_hz, epochs.manifest.sample_rate_hz
        )));
    }
    let filter = design_bandpass(spec)?;
    if epochs.is_filtered() {
        warn!(
            "epoch set {}/{} is already marked filtered; filtering again",
            epochs.manifest.dataset_id, epochs.manifest.subject_id
        );
    }

    let n_samples = epochs.manifest.n_samples;
    let mut out = epochs.clone();
    for row in out.tensor.chunks_mut(n_samples) {
        let filtered = filtfilt(row, &filter)?;
        row.copy_from_slice(&filtered);
    }
    out.manifest.provenance.push(format!(
        "{FILTERED_NOTE} butterworth band-pass {}-{} Hz, order {}, zero-phase",
        spec.low_hz, spec.high_hz, spec.order
    ));
    Ok(out)
}
