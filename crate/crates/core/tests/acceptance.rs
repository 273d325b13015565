//! Acceptance checks, one line of output per criterion.
//!
//! Runs without the libtest harness so the PASS/FAIL lines are always shown.

use std::f64::consts::PI;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bci_uq::calibration::{apply_temperature, fit_temperature, TemperatureSearch};
use bci_uq::config::{ModelKind, PipelineConfig};
use bci_uq::data_io::{synth_generate, write_epochset, EpochSet, SynthConfig};
use bci_uq::metrics::{argmax, brier, ece, nce, BrierMode, PredictionRecord, PredictionSet};
use bci_uq::pipeline::{read_report, run_subject, split_within_subject, SubjectRun};
use bci_uq::signal::{design_bandpass, filtfilt, BandpassSpec};
use bci_uq::spd::{frechet_mean, riemannian_distance, FrechetOptions, SpdMatrix};

type Outcome = Result<String, String>;

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

// ---------------------------------------------------------------------------
// Independent matrix helpers (nalgebra eigendecomposition, no library code).

fn eig_fn(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> SpdMatrix {
    let m = gaussian(rng, n, n);
    SpdMatrix::new(&m * m.transpose() + DMatrix::identity(n, n) * 0.5).unwrap()
}

fn random_invertible(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    gaussian(rng, n, n) + DMatrix::identity(n, n) * 3.0
}

/// Closed-form midpoint A^½ (A^-½ B A^-½)^½ A^½.
fn midpoint(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let s = eig_fn(a, f64::sqrt);
    let is = eig_fn(a, |x| 1.0 / x.sqrt());
    &s * eig_fn(&(&is * b * &is), f64::sqrt) * &s
}

fn congruence(a: &SpdMatrix, w: &DMatrix<f64>) -> SpdMatrix {
    SpdMatrix::new(w * a.as_matrix() * w.transpose()).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = |a: &SpdMatrix, b: &SpdMatrix| riemannian_distance(a, b).unwrap();
    let (mut sym, mut aff, mut inv, mut tri_slack) = (0.0f64, 0.0f64, 0.0f64, f64::INFINITY);
    let (mut mid_err, mut equi_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (a, b, c) = (
            random_spd(&mut rng, 8),
            random_spd(&mut rng, 8),
            random_spd(&mut rng, 8),
        );
        let w = random_invertible(&mut rng, 8);
        let dab = d(&a, &b);
        sym = sym.max((dab - d(&b, &a)).abs());
        aff = aff.max((d(&congruence(&a, &w), &congruence(&b, &w)) - dab).abs());
        inv = inv.max((d(&a.inverse(), &b.inverse()) - dab).abs());
        tri_slack = tri_slack.min(d(&a, &b) + d(&b, &c) - d(&a, &c));

        let mean = frechet_mean(&[a.clone(), b.clone()], FrechetOptions::default()).unwrap();
        mid_err = mid_err.max((mean.as_matrix() - midpoint(a.as_matrix(), b.as_matrix())).norm());

        let set = [a.clone(), b.clone(), c.clone()];
        let moved: Vec<SpdMatrix> = set.iter().map(|m| congruence(m, &w)).collect();
        let m1 = frechet_mean(&moved, FrechetOptions::default()).unwrap();
        let m0 = frechet_mean(&set, FrechetOptions::default()).unwrap();
        let lhs = m1.as_matrix();
        let rhs = congruence(&m0, &w);
        equi_err = equi_err.max((lhs - rhs.as_matrix()).norm() / rhs.as_matrix().norm());
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(sym < 1e-8, || format!("symmetry error {sym:e}"))?;
    check(aff < 1e-8, || format!("affine invariance error {aff:e}"))?;
    check(inv < 1e-8, || format!("inversion invariance error {inv:e}"))?;
    check(tri_slack > -1e-8, || {
        format!("triangle inequality violated by {tri_slack:e}")
    })?;
    check(mid_err < 1e-6, || {
        format!("mean of two vs midpoint {mid_err:e}")
    })?;
    check(equi_err < 1e-6, || {
        format!("congruence equivariance {equi_err:e}")
    })?;
    check(elapsed < 5.0, || format!("took {elapsed:.2} s"))?;
    Ok(format!(
        "sym {sym:.1e}, affine {aff:.1e}, inverse {inv:.1e}, midpoint {mid_err:.1e}, equivariance {equi_err:.1e}, {elapsed:.2} s"
    ))
}

// ---------------------------------------------------------------------------

fn binary_set(records: &[(f64, bool)]) -> PredictionSet {
    let classes = vec!["a".to_string(), "b".to_string()];
    let recs = records
        .iter()
        .enumerate()
        .map(|(i, &(c, ok))| PredictionRecord {
            trial_id: format!("t{i}"),
            true_label: if ok { "a" } else { "b" }.into(),
            probs: vec![c, 1.0 - c],
        })
        .collect();
    PredictionSet::new(classes, recs, "hand").unwrap()
}

fn random_set(rng: &mut ChaCha8Rng) -> PredictionSet {
    let k = rng.random_range(2..=4);
    let n = rng.random_range(1..=60);
    let classes: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
    let recs = (0..n)
        .map(|i| {
            let raw: Vec<f64> = (0..k)
                .map(|_| rng.random_range(0.01..1.0f64).powi(3))
                .collect();
            let s: f64 = raw.iter().sum();
            PredictionRecord {
                trial_id: format!("t{i}"),
                true_label: classes[rng.random_range(0..k)].clone(),
                probs: raw.iter().map(|v| v / s).collect(),
            }
        })
        .collect();
    PredictionSet::new(classes, recs, "random").unwrap()
}

fn criterion_2() -> Outcome {
    let p = binary_set(&[(0.9, true), (0.9, true), (0.6, true), (0.6, false)]);
    let e = ece(&p, 10).unwrap();
    let s = nce(&p, 10).unwrap();
    check((e - 0.1).abs() < 1e-12, || format!("ECE {e}, expected 0.1"))?;
    check(s.abs() < 1e-12, || format!("NCE {s}, expected 0"))?;

    let half = binary_set(&[(0.5, true)]);
    let bp = brier(&half, BrierMode::BinaryPositive).unwrap();
    let bm = brier(&half, BrierMode::MulticlassSum).unwrap();
    check((bp - 0.25).abs() < 1e-12, || {
        format!("binary-positive Brier {bp}")
    })?;
    check((bm - 0.5).abs() < 1e-12, || {
        format!("multiclass-sum Brier {bm}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..1000 {
        let p = random_set(&mut rng);
        let (e, s) = (ece(&p, 10).unwrap(), nce(&p, 10).unwrap());
        check(s.abs() <= e + 1e-15, || {
            format!("set {i}: |NCE| {s} > ECE {e}")
        })?;
    }
    Ok(format!(
        "ECE {e}, NCE {s:.1e}, Brier {bp}/{bm}, |NCE| <= ECE on 1000 sets"
    ))
}

// ---------------------------------------------------------------------------

fn temperature_ece(scores: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let classes: Vec<String> = (0..scores[0].len()).map(|i| format!("c{i}")).collect();
    let recs = scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (s, &y))| PredictionRecord {
            trial_id: i.to_string(),
            true_label: classes[y].clone(),
            probs: apply_temperature(s, t).unwrap(),
        })
        .collect();
    ece(&PredictionSet::new(classes, recs, "t").unwrap(), 10).unwrap()
}

/// Scores whose softmax at T = 1 is too flat: true margins scaled by 0.25.
fn underconfident(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let y = rng.random_range(0..2usize);
        let margin: f64 = 3.0 + rng.sample::<f64, _>(StandardNormal) * 1.5;
        let mut s = vec![0.0, 0.0];
        s[y] = 0.25 * margin;
        scores.push(s);
        labels.push(y);
    }
    (scores, labels)
}

fn criterion_3(fixture: &Fixture) -> Outcome {
    let search = TemperatureSearch::default();
    check(search.grid().contains(&1.0), || "grid lacks T = 1".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..50 {
        let k = rng.random_range(2..=4);
        let n = rng.random_range(5..=80);
        let scale = rng.random_range(0.1..5.0);
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..k)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let fit = fit_temperature(&scores, &labels, &search).unwrap();
        let at_fit = temperature_ece(&scores, &labels, fit.temperature);
        let at_one = temperature_ece(&scores, &labels, 1.0);
        check(at_fit <= at_one + 1e-12, || {
            format!(
                "set {i}: ECE {at_fit} at T={} exceeds {at_one} at T=1",
                fit.temperature
            )
        })?;
    }

    let (scores, labels) = underconfident(&mut rng, 400);
    let fit = fit_temperature(&scores, &labels, &search).unwrap();
    let before = temperature_ece(&scores, &labels, 1.0);
    let after = temperature_ece(&scores, &labels, fit.temperature);
    check(fit.temperature < 1.0, || {
        format!("underconfident set gave T = {}", fit.temperature)
    })?;
    check(after < before, || {
        format!("ECE did not decrease: {before} -> {after}")
    })?;

    for i in 0..1000 {
        let k = rng.random_range(2..=6);
        let s: Vec<f64> = (0..k)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * 10.0)
            .collect();
        let t = 10f64.powf(rng.random_range(-2.0..2.0));
        let p = apply_temperature(&s, t).unwrap();
        check(argmax(&p) == argmax(&s), || {
            format!("vector {i}: argmax moved at T={t}")
        })?;
    }

    let same = fixture
        .mdrm
        .result
        .predictions
        .records
        .iter()
        .zip(&fixture.mdrm_t.result.predictions.records)
        .all(|(a, b)| argmax(&a.probs) == argmax(&b.probs));
    check(same, || "MDRM and MDRM-T predicted labels differ".into())?;
    check(
        fixture.mdrm.result.accuracy == fixture.mdrm_t.result.accuracy,
        || "MDRM and MDRM-T accuracies differ".into(),
    )?;
    Ok(format!(
        "underconfident set: T {:.3}, ECE {before:.3} -> {after:.3}; argmax invariant on 1000 vectors; MDRM/MDRM-T labels identical",
        fit.temperature
    ))
}

// ---------------------------------------------------------------------------

struct Fixture {
    mdrm: SubjectRun,
    mdrm_t: SubjectRun,
    csp_lda: SubjectRun,
}

impl Fixture {
    fn runs(&self) -> [(&str, &SubjectRun); 3] {
        [
            ("mdrm", &self.mdrm),
            ("mdrm_t", &self.mdrm_t),
            ("csp_lda", &self.csp_lda),
        ]
    }
}

/// 2 classes, 8 channels, 200 training and 200 test epochs.
fn synth(separation: f64, ambiguous_fraction: f64, seed: u64) -> EpochSet {
    synth_generate(&SynthConfig {
        n_channels: 8,
        n_classes: 2,
        epochs_per_class: 200,
        n_samples: 1000,
        sample_rate_hz: 250.0,
        separation,
        epoch_jitter: 0.1,
        ambiguous_fraction,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn run_all(set: &EpochSet) -> Fixture {
    let cfg = PipelineConfig {
        inference_repeats: 1,
        ..PipelineConfig::default()
    };
    let (train, test) = split_within_subject(set, 0.5, 0).unwrap();
    assert_eq!((train.len(), test.len()), (200, 200));
    let run = |m| run_subject(&train, &test, m, &cfg).unwrap();
    Fixture {
        mdrm: run(ModelKind::Mdrm),
        mdrm_t: run(ModelKind::MdrmT),
        csp_lda: run(ModelKind::CspLda),
    }
}

fn criterion_4(separable: &Fixture, elapsed_separable: f64) -> Outcome {
    let start = Instant::now();
    let null = run_all(&synth(0.0, 0.0, 41));
    let elapsed = elapsed_separable + start.elapsed().as_secs_f64();

    let (am, ac) = (
        separable.mdrm.result.accuracy,
        separable.csp_lda.result.accuracy,
    );
    let e = separable.mdrm_t.result.ece;
    check(am >= 0.95, || format!("MDRM accuracy {am}"))?;
    check(ac >= 0.95, || format!("CSP-LDA accuracy {ac}"))?;
    check(e <= 0.05, || format!("MDRM-T ECE {e}"))?;

    let half_width = 1.96 * (0.25f64 / 200.0).sqrt();
    let mut null_acc = Vec::new();
    for (name, run) in null.runs() {
        let a = run.result.accuracy;
        check((a - 0.5).abs() <= half_width, || {
            format!("{name} accuracy {a} outside 0.5 ± {half_width:.4} at zero separation")
        })?;
        null_acc.push(format!("{name} {a:.3}"));
    }
    check(elapsed < 30.0, || format!("took {elapsed:.1} s"))?;
    Ok(format!(
        "MDRM {am:.3}, CSP-LDA {ac:.3}, MDRM-T ECE {e:.4}; zero separation: {}; {elapsed:.1} s",
        null_acc.join(", ")
    ))
}

fn criterion_5() -> Outcome {
    let fixture = run_all(&synth(3.0, 0.4, 5));
    let mut parts = Vec::new();
    for (name, run) in fixture.runs() {
        let curve = &run.result.rejection_curve;
        let a0 = curve.at(0.0).ok_or("no point at f = 0")?.retained_accuracy;
        let a50 = curve
            .at(0.5)
            .ok_or("no point at f = 0.5")?
            .retained_accuracy;
        check(a0 == run.result.accuracy, || {
            format!(
                "{name}: curve at 0 is {a0}, accuracy {}",
                run.result.accuracy
            )
        })?;
        check(a50 - a0 >= 0.10, || {
            format!("{name}: {a0:.3} -> {a50:.3} at 50% rejection")
        })?;
        parts.push(format!("{name} {a0:.3} -> {a50:.3}"));
    }
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------------------

fn gain_db(freq: f64) -> f64 {
    let f = design_bandpass(&BandpassSpec::new(250.0)).unwrap();
    let n = 5000;
    let x: Vec<f64> = (0..n)
        .map(|i| (2.0 * PI * freq * i as f64 / 250.0).sin())
        .collect();
    let y = filtfilt(&x, &f).unwrap();
    let rms = |v: &[f64]| (v.iter().map(|s| s * s).sum::<f64>() / v.len() as f64).sqrt();
    20.0 * (rms(&y[1000..4000]) / rms(&x[1000..4000])).log10()
}

fn criterion_6() -> Outcome {
    let (g15, g2, g45) = (gain_db(15.0), gain_db(2.0), gain_db(45.0));
    check(g15.abs() <= 0.5, || format!("15 Hz gain {g15:.3} dB"))?;
    check(g2 <= -20.0, || format!("2 Hz gain {g2:.1} dB"))?;
    check(g45 <= -20.0, || format!("45 Hz gain {g45:.1} dB"))?;

    let f = design_bandpass(&BandpassSpec::new(250.0)).unwrap();
    let n = 3000;
    let x: Vec<f64> = (0..n)
        .map(|i| (2.0 * PI * 15.0 * i as f64 / 250.0).sin())
        .collect();
    let y = filtfilt(&x, &f).unwrap();
    let xcorr = |lag: i64| -> f64 {
        (500..n - 500)
            .map(|i| x[i] * y[(i as i64 + lag) as usize])
            .sum()
    };
    let lag = (-8..=8)
        .max_by(|&a, &b| xcorr(a).total_cmp(&xcorr(b)))
        .unwrap();
    check(lag == 0, || format!("cross-correlation peaks at lag {lag}"))?;
    Ok(format!(
        "15 Hz {g15:+.4} dB, 2 Hz {g2:.1} dB, 45 Hz {g45:.1} dB, peak lag {lag}"
    ))
}

// ---------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for s in 0..2 {
        let set = synth_generate(&SynthConfig {
            subject_id: format!("S{:02}", s + 1),
            epochs_per_class: 40,
            seed: 70 + s,
            ..SynthConfig::default()
        })
        .unwrap();
        write_epochset(&set, &dir.path().join(format!("S{:02}", s + 1))).unwrap();
    }
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "datasets = [\".\"]\n[pipeline]\ncsp_filters = 4\nsplit_seed = 3\n",
    )
    .map_err(|e| e.to_string())?;

    let mut reports = Vec::new();
    for out in ["a", "b"] {
        let status = Command::new(env!("CARGO_BIN_EXE_bci-uq"))
            .arg("run")
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join(out))
            .output()
            .map_err(|e| e.to_string())?;
        check(status.status.success(), || {
            format!(
                "run exited with {}: {}",
                status.status,
                String::from_utf8_lossy(&status.stderr)
            )
        })?;
        reports.push(
            read_report(&dir.path().join(out).join("report.json")).map_err(|e| e.to_string())?,
        );
    }
    let n = reports[0].subjects.len();
    check(n == 6, || format!("{n} subject results, expected 6"))?;
    check(
        reports[0].without_timings() == reports[1].without_timings(),
        || "reports differ outside timing fields".into(),
    )?;
    Ok(format!(
        "two runs, {n} subject results each, identical apart from timings"
    ))
}

fn main() {
    let start = Instant::now();
    let separable = run_all(&synth(3.0, 0.0, 4));
    let elapsed_separable = start.elapsed().as_secs_f64();

    let results: Vec<(&str, Outcome)> = vec![
        ("1 SPD geometry oracles", criterion_1()),
        ("2 metric hand examples", criterion_2()),
        ("3 temperature contract", criterion_3(&separable)),
        (
            "4 synthetic separability",
            criterion_4(&separable, elapsed_separable),
        ),
        ("5 rejection ability", criterion_5()),
        ("6 band-pass filter", criterion_6()),
        ("7 determinism", criterion_7()),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("acceptance {name}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("acceptance {name}: FAIL ({why})");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
