//! Reliability diagrams and rejection curves as standalone SVG plus CSV data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data_io::write_atomic;
use crate::error::{Error, Result};
use crate::metrics::{CalibrationBins, RejectionCurve};
use crate::pipeline::BenchmarkReport;

const W: f64 = 420.0;
const H: f64 = 420.0;
const MARGIN: f64 = 50.0;

fn sx(x: f64) -> f64 {
    MARGIN + x * (W - 2.0 * MARGIN)
}

fn sy(y: f64) -> f64 {
    H - MARGIN - y * (H - 2.0 * MARGIN)
}

/// Unit-square axes with ticks every 0.2.
fn axes(svg: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#,
            sx(v),
            H - MARGIN + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            MARGIN - 6.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn polyline(svg: &mut String, pts: &[(f64, f64)], style: &str) {
    let coords: Vec<String> = pts
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" {style}/>"#,
        coords.join(" ")
    );
}

/// Accuracy against mean confidence per non-empty bin, with the identity line.
pub fn reliability_svg(bins: &CalibrationBins, title: &str) -> String {
    let mut svg = String::new();
    axes(&mut svg, title, "confidence", "accuracy");
    polyline(
        &mut svg,
        &[(0.0, 0.0), (1.0, 1.0)],
        r#"stroke="gray" stroke-dasharray="4 4""#,
    );
    let pts: Vec<(f64, f64)> = bins
        .bins
        .iter()
        .filter_map(|b| Some((b.mean_confidence?, b.accuracy?)))
        .collect();
    polyline(&mut svg, &pts, r#"stroke="steelblue" stroke-width="2""#);
    for (x, y) in pts {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
            sx(x),
            sy(y)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Retained accuracy against rejection fraction. The y axis spans [0, 1].
pub fn rejection_svg(curve: &RejectionCurve, title: &str) -> String {
    let mut svg = String::new();
    axes(&mut svg, title, "rejection fraction", "retained accuracy");
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.rejection_fraction, p.retained_accuracy))
        .collect();
    polyline(&mut svg, &pts, r#"stroke="firebrick" stroke-width="2""#);
    svg.push_str("</svg>\n");
    svg
}

pub fn reliability_csv(bins: &CalibrationBins) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("lower,upper,count,mean_confidence,accuracy\n");
    for b in &bins.bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            b.lower,
            b.upper,
            b.count,
            opt(b.mean_confidence),
            opt(b.accuracy)
        );
    }
    out
}

pub fn rejection_csv(curve: &RejectionCurve) -> String {
    let mut out = String::from("rejection_fraction,retained_count,retained_accuracy\n");
    for p in &curve.points {
        let _ = writeln!(
            out,
            "{},{},{}",
            p.rejection_fraction, p.retained_count, p.retained_accuracy
        );
    }
    out
}

fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes both plots, with their data files, for every (dataset, model)
/// group of the report. Predictions of all subjects in a group are pooled.
pub fn write_report_plots(report: &BenchmarkReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.groups.is_empty() {
        return Err(Error::validation("report has no groups to plot"));
    }
    let cfg = report.config.clone().unwrap_or_default();
    let mut written = Vec::new();
    for g in &report.groups {
        let pooled = report.pooled_predictions(&g.dataset_id, &g.model_name)?;
        let bins = crate::metrics::calibration_bins(&pooled, cfg.n_bins)?;
        let curve = crate::metrics::rejection_curve(&pooled, &cfg.rejection_fractions)?;
        let stem = format!("{}_{}", file_stem(&g.dataset_id), file_stem(&g.model_name));
        let title = format!("{} / {}", g.dataset_id, g.model_name);
        let files = [
            (
                format!("{stem}_calibration.svg"),
                reliability_svg(&bins, &title),
            ),
            (format!("{stem}_calibration.csv"), reliability_csv(&bins)),
            (
                format!("{stem}_rejection.svg"),
                rejection_svg(&curve, &title),
            ),
            (format!("{stem}_rejection.csv"), rejection_csv(&curve)),
        ];
        for (name, content) in files {
            let path = dir.join(name);
            write_atomic(&path, content.as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}
