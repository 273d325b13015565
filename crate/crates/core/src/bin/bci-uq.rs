use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use bci_uq::config::{ModelKind, PipelineConfig, RunConfig};
use bci_uq::data_io::{
    read_epochset, read_manifest, read_predictions, synth_generate, write_atomic, write_epochset,
    write_model, EpochSet, SynthConfig, MANIFEST_FILE,
};
use bci_uq::pipeline::{
    aggregate, evaluate_external, read_report, render_table, run_subject_models, subject_csv,
    write_report, BenchmarkReport,
};
use bci_uq::plot::write_report_plots;
use bci_uq::signal::{preprocess_epochs, BandpassSpec};
use bci_uq::{Error, Result};

const DEFAULT_OUT_DIR: &str = "bci-uq-out";

#[derive(Parser)]
#[command(
    name = "bci-uq",
    version,
    about = "Motor-imagery classifiers with calibration and rejection metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded synthetic epoch sets.
    Synth {
        /// Synthetic data config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory. With several subjects, one subdirectory each.
        #[arg(long, env = "BCI_UQ_OUT_DIR")]
        out: Option<PathBuf>,
        /// Number of subjects; subject i uses seed + i.
        #[arg(long, default_value_t = 1)]
        subjects: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        separation: Option<f64>,
    },
    /// Band-pass filter an epoch set.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        low_hz: Option<f64>,
        #[arg(long)]
        high_hz: Option<f64>,
        #[arg(long)]
        order: Option<usize>,
    },
    /// Within-subject benchmark over every configured dataset.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of mdrm, mdrm_t, csp_lda.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<ModelKind>>,
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long)]
        no_filter: bool,
    },
    /// Score a CSV of predicted probabilities from another model.
    EvalExternal {
        #[arg(long)]
        predictions: PathBuf,
        /// Run config supplying bins, Brier mode and rejection fractions.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibration and rejection plots from a saved report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print an epoch set's manifest and label counts.
    Inspect { dir: PathBuf },
}

fn out_dir(flag: Option<PathBuf>, from_config: Option<PathBuf>) -> PathBuf {
    flag.or(from_config)
        .or_else(|| std::env::var_os("BCI_UQ_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn cmd_synth(
    config: &Path,
    out: PathBuf,
    subjects: usize,
    seed: Option<u64>,
    separation: Option<f64>,
) -> Result<Vec<PathBuf>> {
    let mut cfg: SynthConfig = read_toml(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = separation {
        cfg.separation = s;
    }
    cfg.validate()?;
    if subjects == 0 {
        return Err(Error::validation("subjects must be >= 1"));
    }
    let mut written = Vec::new();
    for i in 0..subjects {
        let mut sub = cfg.clone();
        let dir = if subjects == 1 {
            out.clone()
        } else {
            sub.subject_id = format!("S{:02}", i + 1);
            sub.seed = cfg.seed + i as u64;
            out.join(&sub.subject_id)
        };
        let set = synth_generate(&sub)?;
        write_epochset(&set, &dir)?;
        println!(
            "{}/{}: {} epochs, {} classes, separation {}",
            set.manifest.dataset_id,
            set.manifest.subject_id,
            set.len(),
            set.manifest.class_ids.len(),
            sub.separation
        );
        written.push(dir);
    }
    Ok(written)
}

fn cmd_preprocess(
    input: &Path,
    out: &Path,
    low: Option<f64>,
    high: Option<f64>,
    order: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let set = read_epochset(input)?;
    let mut spec = BandpassSpec::new(set.manifest.sample_rate_hz);
    spec.low_hz = low.unwrap_or(spec.low_hz);
    spec.high_hz = high.unwrap_or(spec.high_hz);
    spec.order = order.unwrap_or(spec.order);
    let filtered = preprocess_epochs(&set, &spec)?;
    Ok(vec![write_epochset(&filtered, out)?])
}

/// Epoch-set directories under `path`: itself if it holds a manifest,
/// otherwise its immediate subdirectories that do, in name order.
fn discover(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::validation(format!(
            "{} contains no epoch sets",
            path.display()
        )));
    }
    Ok(dirs)
}

fn write_outputs(report: &BenchmarkReport, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let report_path = out.join("report.json");
    write_report(report, &report_path)?;
    written.push(report_path);
    let csv_path = out.join("subjects.csv");
    write_atomic(&csv_path, &subject_csv(report)?)?;
    written.push(csv_path);
    let table = render_table(report);
    let table_path = out.join("table.txt");
    write_atomic(&table_path, table.as_bytes())?;
    written.push(table_path);
    written.extend(write_report_plots(report, &out.join("plots"))?);
    Ok(written)
}

fn cmd_run(
    config: &Path,
    out: Option<PathBuf>,
    models: Option<Vec<ModelKind>>,
    split_seed: Option<u64>,
    no_filter: bool,
) -> Result<Vec<PathBuf>> {
    let mut cfg = RunConfig::from_file(config)?;
    if let Some(m) = models {
        cfg.models = m;
    }
    if let Some(s) = split_seed {
        cfg.pipeline.split_seed = s;
    }
    if no_filter {
        cfg.pipeline.filter.enabled = false;
    }
    cfg.validate()?;
    let out = out_dir(out, cfg.output_dir.clone());

    let mut subject_dirs = Vec::new();
    for d in &cfg.datasets {
        subject_dirs.extend(discover(d)?);
    }

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    let mut written = Vec::new();
    for dir in &subject_dirs {
        let outcome =
            read_epochset(dir).and_then(|set| run_subject_models(&set, &cfg.models, &cfg.pipeline));
        match outcome {
            Ok(runs) => {
                for run in runs {
                    info!(
                        "{}/{} {}: accuracy {:.3}",
                        run.result.dataset_id,
                        run.result.subject_id,
                        run.result.model_name,
                        run.result.accuracy
                    );
                    if cfg.save_models {
                        let path = out.join("models").join(format!(
                            "{}_{}_{}.json",
                            run.result.dataset_id, run.result.subject_id, run.result.model_name
                        ));
                        write_model(&run.model, &path)?;
                        written.push(path);
                    }
                    results.push(run.result);
                }
            }
            Err(e) => {
                warn!("skipping {}: {e}", dir.display());
                failures.push(format!("{}: {e}", dir.display()));
                first_error.get_or_insert(e);
            }
        }
    }
    if results.is_empty() {
        return Err(first_error.unwrap_or_else(|| Error::validation("no subjects found")));
    }

    let mut report = aggregate(results, Some(cfg.pipeline.clone()))?;
    report.failures = failures;
    print!("{}", render_table(&report));
    written.extend(write_outputs(&report, &out)?);
    Ok(written)
}

fn cmd_eval_external(
    predictions: &Path,
    config: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<Vec<PathBuf>> {
    let (pipeline, cfg_out) = match config {
        Some(path) => {
            let cfg = RunConfig::from_file(path)?;
            (cfg.pipeline, cfg.output_dir)
        }
        None => (PipelineConfig::default(), None),
    };
    let set = read_predictions(predictions)?;
    let result = evaluate_external(&set, &pipeline)?;
    println!(
        "{}: accuracy {:.4}  ECE {:.4}  NCE {:.4}  Brier {:.4}",
        result.model_name, result.accuracy, result.ece, result.nce, result.brier
    );
    let report = aggregate(vec![result], Some(pipeline))?;
    write_outputs(&report, &out_dir(out, cfg_out))
}

fn cmd_plot(report: &Path, out: Option<PathBuf>) -> Result<Vec<PathBuf>> {
    let report = read_report(report)?;
    write_report_plots(&report, &out_dir(out, None))
}

fn cmd_inspect(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = read_manifest(dir)?;
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::validation(format!("manifest rendering failed: {e}")))?;
    print!("{text}");
    // Full read verifies size and checksum.
    let set: EpochSet = read_epochset(dir)?;
    for class in &set.manifest.class_ids {
        let n = set.labels.iter().filter(|l| *l == class).count();
        println!("# {class}: {n} epochs");
    }
    Ok(Vec::new())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth {
            config,
            out,
            subjects,
            seed,
            separation,
        } => cmd_synth(
            &config,
            out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
            subjects,
            seed,
            separation,
        ),
        Command::Preprocess {
            input,
            out,
            low_hz,
            high_hz,
            order,
        } => cmd_preprocess(&input, &out, low_hz, high_hz, order),
        Command::Run {
            config,
            out,
            models,
            split_seed,
            no_filter,
        } => cmd_run(&config, out, models, split_seed, no_filter),
        Command::EvalExternal {
            predictions,
            config,
            out,
        } => cmd_eval_external(&predictions, config.as_deref(), out),
        Command::Plot { report, out } => cmd_plot(&report, out),
        Command::Inspect { dir } => cmd_inspect(&dir),
    };
    match outcome {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
