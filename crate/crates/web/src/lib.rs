//! Browser demo on top of `bci_uq`: temperature scaling, rejection curves
//! and the band-pass response. Each view is a plain function returning a
//! serializable struct; the `wasm_bindgen` wrappers hand JSON to the page.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use bci_uq::calibration::apply_temperature;
use bci_uq::classifiers::{mdrm_fit, CspLdaModel, MdrmModel};
use bci_uq::config::PipelineConfig;
use bci_uq::data_io::{synth_generate, EpochSet, SynthConfig};
use bci_uq::features::{estimate_covariance, Epoch, DEFAULT_SHRINKAGE};
use bci_uq::metrics::{
    accuracy, calibration_bins, default_rejection_fractions, rejection_curve, CalibrationBin,
    PredictionRecord, PredictionSet, RejectionPoint,
};
use bci_uq::pipeline::{fit_mdrm_temperature, split_within_subject};
use bci_uq::signal::{design_bandpass, BandpassSpec};
use bci_uq::spd::SpdMatrix;
use bci_uq::Result;

const CHANNELS: usize = 6;
const EPOCHS_PER_CLASS: usize = 60;
const SAMPLES: usize = 256;
const N_BINS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct TemperatureView {
    pub temperature: f64,
    pub fitted_temperature: f64,
    pub accuracy: f64,
    pub ece: f64,
    pub nce: f64,
    pub ece_at_one: f64,
    pub ece_at_fitted: f64,
    pub bins: Vec<CalibrationBin>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub model: String,
    pub accuracy: f64,
    pub points: Vec<RejectionPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RejectionView {
    pub curves: Vec<Curve>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterView {
    pub freqs_hz: Vec<f64>,
    /// One pass of the cascade.
    pub gain_db: Vec<f64>,
    /// Forward-backward application: twice the single-pass gain in dB.
    pub zero_phase_gain_db: Vec<f64>,
    pub max_pole_radius: f64,
}

fn fixture(
    separation: f64,
    jitter: f64,
    ambiguous: f64,
    seed: u64,
) -> Result<(EpochSet, EpochSet)> {
    let set = synth_generate(&SynthConfig {
        dataset_id: "demo".into(),
        n_channels: CHANNELS,
        epochs_per_class: EPOCHS_PER_CLASS,
        n_samples: SAMPLES,
        separation,
        epoch_jitter: jitter,
        ambiguous_fraction: ambiguous,
        seed,
        ..SynthConfig::default()
    })?;
    split_within_subject(&set, 0.5, seed)
}

fn epochs(set: &EpochSet) -> Result<Vec<Epoch>> {
    (0..set.len())
        .map(|i| Epoch::new(set.epoch_matrix(i), Some(set.labels[i].clone())))
        .collect()
}

fn covariances(epochs: &[Epoch]) -> Result<Vec<SpdMatrix>> {
    epochs
        .iter()
        .map(|e| estimate_covariance(e, DEFAULT_SHRINKAGE))
        .collect()
}

fn prediction_set(test: &EpochSet, probs: Vec<Vec<f64>>) -> Result<PredictionSet> {
    let records = probs
        .into_iter()
        .enumerate()
        .map(|(i, p)| PredictionRecord {
            trial_id: test.trial_ids[i].clone(),
            true_label: test.labels[i].clone(),
            probs: p,
        })
        .collect();
    PredictionSet::new(test.manifest.class_ids.clone(), records, "demo")
}

fn fit_mdrm(train: &EpochSet) -> Result<(MdrmModel, Vec<SpdMatrix>)> {
    let covs = covariances(&epochs(train)?)?;
    let model = mdrm_fit(&covs, &train.labels, &train.manifest.class_ids)?;
    Ok((model, covs))
}

fn mdrm_probs(model: &MdrmModel, covs: &[SpdMatrix], t: f64) -> Result<Vec<Vec<f64>>> {
    covs.iter()
        .map(|c| apply_temperature(&model.scores(c)?, t))
        .collect()
}

/// MDRM on a two-class synthetic subject, scored at temperature `t`.
pub fn temperature_view(
    separation: f64,
    jitter: f64,
    t: f64,
    seed: u64,
) -> Result<TemperatureView> {
    let (train, test) = fixture(separation, jitter, 0.0, seed)?;
    let (model, train_covs) = fit_mdrm(&train)?;
    let fit = fit_mdrm_temperature(
        &model,
        &train_covs,
        &train.labels,
        &PipelineConfig::default(),
    )?;
    let test_covs = covariances(&epochs(&test)?)?;

    let ece_at = |t: f64| -> Result<f64> {
        Ok(calibration_bins(
            &prediction_set(&test, mdrm_probs(&model, &test_covs, t)?)?,
            N_BINS,
        )?
        .ece())
    };
    let p = prediction_set(&test, mdrm_probs(&model, &test_covs, t)?)?;
    let bins = calibration_bins(&p, N_BINS)?;
    Ok(TemperatureView {
        temperature: t,
        fitted_temperature: fit.temperature,
        accuracy: accuracy(&p)?,
        ece: bins.ece(),
        nce: bins.nce(),
        ece_at_one: ece_at(1.0)?,
        ece_at_fitted: ece_at(fit.temperature)?,
        bins: bins.bins,
    })
}

/// Rejection curves of MDRM and CSP-LDA as the share of ambiguous epochs varies.
pub fn rejection_view(separation: f64, ambiguous: f64, seed: u64) -> Result<RejectionView> {
    let (train, test) = fixture(separation, 0.1, ambiguous, seed)?;
    let fractions = default_rejection_fractions();
    let class_ids = &train.manifest.class_ids;

    let (model, _) = fit_mdrm(&train)?;
    let test_epochs = epochs(&test)?;
    let mdrm = prediction_set(&test, mdrm_probs(&model, &covariances(&test_epochs)?, 1.0)?)?;

    let csp = CspLdaModel::fit(
        &epochs(&train)?,
        &train.labels,
        class_ids,
        4,
        DEFAULT_SHRINKAGE,
    )?;
    let csp = prediction_set(&test, csp.predict_proba_many(&test_epochs)?)?;

    let curves = [("MDRM", mdrm), ("CSP-LDA", csp)]
        .into_iter()
        .map(|(name, p)| {
            Ok(Curve {
                model: name.into(),
                accuracy: accuracy(&p)?,
                points: rejection_curve(&p, &fractions)?.points,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RejectionView { curves })
}

/// Magnitude response on a 1 Hz grid from 0.5 Hz to just below Nyquist.
pub fn filter_view(
    low_hz: f64,
    high_hz: f64,
    order: usize,
    sample_rate_hz: f64,
) -> Result<FilterView> {
    let filter = design_bandpass(&BandpassSpec {
        low_hz,
        high_hz,
        order,
        sample_rate_hz,
    })?;
    let nyquist = sample_rate_hz / 2.0;
    let freqs_hz: Vec<f64> = (0..)
        .map(|i| 0.5 + i as f64)
        .take_while(|&f| f < nyquist)
        .collect();
    let gain_db: Vec<f64> = freqs_hz.iter().map(|&f| filter.gain_db(f)).collect();
    Ok(FilterView {
        zero_phase_gain_db: gain_db.iter().map(|g| 2.0 * g).collect(),
        gain_db,
        freqs_hz,
        max_pole_radius: filter.poles().iter().map(|p| p.norm()).fold(0.0, f64::max),
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn temperature_json(
    separation: f64,
    jitter: f64,
    t: f64,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(temperature_view(separation, jitter, t, seed.into()))
}

#[wasm_bindgen]
pub fn rejection_json(
    separation: f64,
    ambiguous: f64,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(rejection_view(separation, ambiguous, seed.into()))
}

#[wasm_bindgen]
pub fn filter_json(
    low_hz: f64,
    high_hz: f64,
    order: u32,
    sample_rate_hz: f64,
) -> std::result::Result<String, JsValue> {
    to_js(filter_view(low_hz, high_hz, order as usize, sample_rate_hz))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_view_basics() {
        let v = temperature_view(1.0, 0.5, 1.0, 3).unwrap();
        assert_eq!(v.temperature, 1.0);
        assert_eq!(v.ece, v.ece_at_one);
        assert!(v.fitted_temperature > 0.0);
        assert_eq!(v.bins.len(), N_BINS);
        assert_eq!(
            v.bins.iter().map(|b| b.count).sum::<usize>(),
            2 * EPOCHS_PER_CLASS / 2
        );
        // Accuracy does not depend on the temperature.
        let sharp = temperature_view(1.0, 0.5, 0.05, 3).unwrap();
        assert_eq!(sharp.accuracy, v.accuracy);
        assert!(sharp.nce <= v.nce);
    }

    #[test]
    fn rejection_view_curves() {
        let v = rejection_view(3.0, 0.4, 1).unwrap();
        assert_eq!(v.curves.len(), 2);
        for c in &v.curves {
            assert_eq!(c.points[0].retained_accuracy, c.accuracy);
            let half = c
                .points
                .iter()
                .find(|p| (p.rejection_fraction - 0.5).abs() < 1e-9)
                .unwrap();
            assert!(half.retained_accuracy > c.accuracy, "{}", c.model);
        }
    }

    #[test]
    fn filter_view_shape() {
        let v = filter_view(7.5, 30.0, 4, 250.0).unwrap();
        assert_eq!(v.freqs_hz.len(), 125);
        let at = |f: f64| v.freqs_hz.iter().position(|&x| x == f).unwrap();
        assert!(v.zero_phase_gain_db[at(15.5)].abs() < 0.5);
        assert!(v.zero_phase_gain_db[at(1.5)] < -40.0);
        assert!(v.max_pole_radius < 1.0);
        assert!(filter_view(30.0, 7.5, 4, 250.0).is_err());
    }

    #[test]
    fn json_shapes() {
        let text = to_js(filter_view(8.0, 30.0, 4, 250.0)).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value["freqs_hz"].is_array());
        let text = to_js(temperature_view(1.0, 0.5, 2.0, 0)).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["bins"].as_array().unwrap().len(), N_BINS);
    }
}
