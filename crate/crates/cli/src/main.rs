use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sen_core::dataio::{
    self, format_fold_table, format_frame_errors, format_loss_history, format_manifest, format_predictions,
    format_report_manifest, format_residuals, format_transform, load_config, load_model, load_recording,
    parse_cloud, parse_predictions, read_text, save_model, save_recording, write_text, Config, DataError,
    LoadedConfig, Manifest, ManifestEntry, ReportManifest,
};
use sen_core::eval::{crossval_with_progress, mean_distance, per_frame_errors, CrossValConfig};
use sen_core::model::{train_with_progress, TrainConfig};
use sen_core::registration::icp_register;
use sen_core::simulator::{default_phantom, make_dataset};
use sen_core::{derive_seed, InsertionRecording};

/// Colon shape estimation from colonoscope shape sequences.
#[derive(Debug, Parser)]
#[command(name = "sen", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainMethod {
    Sen,
    SenNorel,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic insertion recordings and a manifest.
    Simulate {
        /// Configuration file (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory receiving insertion_{k}.csv and manifest.txt.
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of insertions.
        #[arg(long, default_value_t = 7)]
        n: usize,
        /// Master seed; per-recording seeds are derived from it.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a shape estimation network on every recording of a directory.
    Train {
        /// Directory of insertion_{k}.csv files.
        #[arg(long)]
        data_dir: PathBuf,
        /// Configuration file (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Network variant: with or without relative features.
        #[arg(long, value_enum, default_value_t = TrainMethod::Sen)]
        method: TrainMethod,
        /// Model file to write.
        #[arg(long)]
        model_out: PathBuf,
        /// Per-epoch loss table; defaults to the model path with a .loss.csv suffix.
        #[arg(long)]
        loss_out: Option<PathBuf>,
        /// Training seed (initialization, shuffling, dropout).
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimate colon shapes for frames τ+1..T of a recording.
    Estimate {
        /// Model file written by `sen train`.
        #[arg(long)]
        model: PathBuf,
        /// Recording file (insertion CSV).
        #[arg(long)]
        recording: PathBuf,
        /// Predicted markers in recording marker-column format.
        #[arg(long)]
        out: PathBuf,
        /// Per-frame error table; defaults to the output path with a .errors.csv suffix.
        #[arg(long)]
        errors_out: Option<PathBuf>,
        /// Fail unless the model's window length equals this value.
        #[arg(long)]
        tau: Option<usize>,
    },
    /// Mean distance between a recording and a prediction file.
    Evaluate {
        /// Recording file (insertion CSV).
        #[arg(long)]
        recording: PathBuf,
        /// Prediction file written by `sen estimate`.
        #[arg(long)]
        predictions: PathBuf,
        /// Window length; predictions must cover frames τ+1..T.
        #[arg(long, default_value_t = 20)]
        tau: usize,
    },
    /// Leave-one-insertion-out cross validation of all configured methods.
    Crossval {
        /// Directory of insertion_{k}.csv files.
        #[arg(long)]
        data_dir: PathBuf,
        /// Configuration file (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        /// Master seed; fold seeds are derived from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Folds trained concurrently; results do not depend on it.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Rigidly register a moving point cloud onto a reference cloud.
    Icp {
        /// Point cloud to move (x,y,z rows).
        #[arg(long)]
        moving: PathBuf,
        /// Point cloud kept fixed (x,y,z rows).
        #[arg(long)]
        reference: PathBuf,
        /// Transform file (12 numbers, row-major rotation then translation).
        #[arg(long)]
        out: PathBuf,
        /// Residual per iteration; defaults to the output path with a .residuals.csv suffix.
        #[arg(long)]
        residuals_out: Option<PathBuf>,
        /// Configuration file (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the effective configuration, marking values taken from defaults.
    Config {
        /// Configuration file (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Failure reported as one line on stderr.
#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, message: impl std::fmt::Display) -> Self {
        Self { kind, message: message.to_string() }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let kind = match e {
            DataError::Io { .. } => "io",
            DataError::ConfigSyntax(_)
            | DataError::UnknownKey(_)
            | DataError::ConfigType { .. }
            | DataError::Constraint { .. } => "config",
            _ => "parse",
        };
        Failure::new(kind, e)
    }
}

macro_rules! failure_from {
    ($($t:ty => $kind:literal),* $(,)?) => {
        $(impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::new($kind, e)
            }
        })*
    };
}

failure_from! {
    sen_core::model::ModelError => "model",
    sen_core::eval::EvalError => "eval",
    sen_core::baseline::ForestError => "forest",
    sen_core::simulator::SimError => "simulate",
    sen_core::registration::RegistrationError => "registration",
}

fn load(config: Option<&Path>) -> Result<LoadedConfig, Failure> {
    match config {
        Some(p) => Ok(load_config(p)?),
        None => Ok(dataio::parse_config("")?),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::new("io", format!("{}: {e}", dir.display())))
}

/// Recordings named insertion_{k}.csv, ordered by k.
fn load_recordings(dir: &Path) -> Result<Vec<InsertionRecording>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::new("io", format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Failure::new("io", format!("{}: {e}", dir.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(k) = name.strip_prefix("insertion_").and_then(|r| r.strip_suffix(".csv")) {
            if let Ok(k) = k.parse::<usize>() {
                files.push((k, entry.path()));
            }
        }
    }
    if files.is_empty() {
        return Err(Failure::new("data", format!("{}: no insertion_{{k}}.csv files", dir.display())));
    }
    files.sort();
    files.iter().map(|(_, p)| load_recording(p).map_err(Failure::from)).collect()
}

fn simulate(config: Option<&Path>, out_dir: &Path, n: usize, seed: u64) -> Result<(), Failure> {
    if n == 0 {
        return Err(Failure::new("usage", "--n must be at least 1"));
    }
    let cfg = load(config)?.config;
    let recordings = make_dataset(&default_phantom(), &cfg.simulator, n, seed)?;
    create_dir(out_dir)?;
    let mut entries = Vec::with_capacity(n);
    for (i, rec) in recordings.iter().enumerate() {
        let file = format!("insertion_{}.csv", i + 1);
        save_recording(rec, &out_dir.join(&file))?;
        entries.push(ManifestEntry { file, seed: derive_seed(seed, i as u64), frames: rec.len() });
    }
    let manifest = Manifest { config_sha256: dataio::config_checksum(&cfg), master_seed: seed, entries };
    write_text(&out_dir.join("manifest.txt"), &format_manifest(&manifest))?;
    Ok(())
}

fn train(
    data_dir: &Path,
    config: Option<&Path>,
    method: TrainMethod,
    model_out: &Path,
    loss_out: Option<&Path>,
    seed: u64,
) -> Result<(), Failure> {
    let cfg = load(config)?.config;
    let recordings = load_recordings(data_dir)?;
    let mut arch = cfg.architecture;
    arch.use_relative_features = method == TrainMethod::Sen;
    let training = TrainConfig { seed, ..cfg.training };
    let (model, history) = train_with_progress(&recordings, &arch, &training, |epoch, loss| {
        eprintln!("epoch {epoch}/{} loss {loss:.6e}", training.epochs);
    })?;
    save_model(&model, model_out)?;
    let loss_path = loss_out.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(model_out, ".loss.csv"));
    write_text(&loss_path, &format_loss_history(&history))?;
    Ok(())
}

fn estimate(
    model: &Path,
    recording: &Path,
    out: &Path,
    errors_out: Option<&Path>,
    tau: Option<usize>,
) -> Result<(), Failure> {
    let model = load_model(model)?;
    let window = model.architecture.window;
    if let Some(t) = tau {
        if t != window {
            return Err(Failure::new("usage", format!("model window length is {window}, --tau requested {t}")));
        }
    }
    let rec = load_recording(recording)?;
    if rec.len() <= window {
        return Err(Failure::new(
            "data",
            format!("recording has {} frames; no estimable frames with τ = {window}", rec.len()),
        ));
    }
    let preds = model.estimate_recording(&rec)?;
    write_text(out, &format_predictions(&preds))?;
    let errors = per_frame_errors(&rec, &preds, window)?;
    let errors_path = errors_out.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(out, ".errors.csv"));
    write_text(&errors_path, &format_frame_errors(&errors))?;
    println!("md {}", dataio::fmt_f64(mean_distance(&rec, &preds, window)?));
    Ok(())
}

fn evaluate(recording: &Path, predictions: &Path, tau: usize) -> Result<(), Failure> {
    let rec = load_recording(recording)?;
    let preds = parse_predictions(&read_text(predictions)?)?;
    println!("md {}", dataio::fmt_f64(mean_distance(&rec, &preds, tau)?));
    Ok(())
}

fn crossval(data_dir: &Path, config: Option<&Path>, out: &Path, seed: u64, threads: usize) -> Result<(), Failure> {
    let cfg: Config = load(config)?.config;
    let recordings = load_recordings(data_dir)?;
    let cv = CrossValConfig {
        architecture: cfg.architecture.clone(),
        training: cfg.training.clone(),
        forest: cfg.forest.clone(),
        methods: cfg.evaluation.methods.clone(),
        seed,
        threads: threads.max(1),
    };
    let report = crossval_with_progress(&recordings, &cv, |p| {
        eprintln!("fold {} {} md {:.4}", p.fold + 1, p.method, p.md);
    })?;
    create_dir(out)?;
    write_text(&out.join("folds.csv"), &format_fold_table(&report))?;
    if cfg.evaluation.write_per_frame {
        for (k, fold) in report.folds.iter().enumerate() {
            for r in &fold.results {
                let name = format!("frames_fold{}_{}.csv", k + 1, r.method);
                write_text(&out.join(name), &format_frame_errors(&r.frame_errors))?;
            }
        }
    }
    write_text(&out.join("config.toml"), &dataio::format_config(&cfg))?;
    let artifacts = report
        .folds
        .iter()
        .enumerate()
        .flat_map(|(k, f)| f.results.iter().map(move |r| (k, r.method, r.checksum.clone())))
        .collect();
    let manifest = ReportManifest {
        config_sha256: dataio::config_checksum(&cfg),
        master_seed: seed,
        recordings: recordings.len(),
        epochs: cfg.training.epochs,
        default_epochs: TrainConfig::default().epochs,
        artifacts,
    };
    write_text(&out.join("manifest.txt"), &format_report_manifest(&manifest))?;
    for m in &report.methods {
        println!("{m} mean_md {:.4} pooled_md {:.4}", report.mean_md(*m), report.pooled_md(*m));
    }
    Ok(())
}

fn icp(
    moving: &Path,
    reference: &Path,
    out: &Path,
    residuals_out: Option<&Path>,
    config: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = load(config)?.config;
    let moving = parse_cloud(&read_text(moving)?)?;
    let reference = parse_cloud(&read_text(reference)?)?;
    let result = icp_register(&moving, &reference, &cfg.icp)?;
    write_text(out, &format_transform(&result.transform))?;
    let path = residuals_out.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(out, ".residuals.csv"));
    write_text(&path, &format_residuals(&result.residual_history))?;
    println!(
        "residual_rms {} iterations {} converged {}",
        dataio::fmt_f64(result.residual_rms),
        result.iterations_used,
        result.converged
    );
    Ok(())
}

fn show_config(config: Option<&Path>) -> Result<(), Failure> {
    let loaded = load(config)?;
    print!("{}", dataio::format_config(&loaded.config));
    for p in loaded.defaults() {
        println!("# default {} = {}", p.key, p.value);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { config, out_dir, n, seed } => simulate(config.as_deref(), &out_dir, n, seed),
        Command::Train { data_dir, config, method, model_out, loss_out, seed } => {
            train(&data_dir, config.as_deref(), method, &model_out, loss_out.as_deref(), seed)
        }
        Command::Estimate { model, recording, out, errors_out, tau } => {
            estimate(&model, &recording, &out, errors_out.as_deref(), tau)
        }
        Command::Evaluate { recording, predictions, tau } => evaluate(&recording, &predictions, tau),
        Command::Crossval { data_dir, config, out, seed, threads } => {
            crossval(&data_dir, config.as_deref(), &out, seed, threads)
        }
        Command::Icp { moving, reference, out, residuals_out, config } => {
            icp(&moving, &reference, &out, residuals_out.as_deref(), config.as_deref())
        }
        Command::Config { config } => show_config(config.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = f.message.replace('\n', " ");
            eprintln!("error[{}]: {message}", f.kind);
            ExitCode::FAILURE
        }
    }
}
