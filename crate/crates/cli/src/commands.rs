//! Subcommand implementations. Each creates its own run directory, writes
//! its artifacts plus the effective configuration there, and returns a
//! summary for the caller.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::Local;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use csi_ident::dataset::{write_dataset_cache, DatasetError, WindowedDataset};
use csi_ident::ingest::{extract_amplitude_phase, parse_csi_log, validate_session, write_csi_log, SessionReport};
use csi_ident::model::{load_checkpoint, save_checkpoint, CheckpointError, Model, ModelConfig};
use csi_ident::pipeline::{dataset_from_manifest, PipelineError};
use csi_ident::preprocess::preprocess_session;
use csi_ident::synth::{synthesize_empty_room, write_synthetic_corpus, SynthError};
use csi_ident::training::{
    evaluate, history_csv, metrics_table, train, ClassMetrics, EpochRecord, Example, MetricsReport, TrainError,
};

use crate::config::{HeatmapStage, RunConfig};
use crate::CliError;

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.csim";
pub const METRICS_FILE: &str = "metrics.json";
pub const TABLE_FILE: &str = "metrics.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const DATASET_FILE: &str = "dataset.csiw";
pub const REPORT_FILE: &str = "report.txt";
pub const HEATMAP_CSV: &str = "heatmap.csv";
pub const HEATMAP_PGM: &str = "heatmap.pgm";
pub const EMPTY_ROOM_FILE: &str = "empty_room.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

/// Creates `run.out_dir/run.name`, or `run.out_dir/<command>-<timestamp>`
/// when no name is configured.
pub fn create_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    let base = cfg.out_dir();
    let dir = match cfg.run_name() {
        Some(name) => base.join(name),
        None => {
            let stamp = Local::now().format("%Y%m%d-%H%M%S-%3f");
            let first = base.join(format!("{command}-{stamp}"));
            let mut dir = first.clone();
            let mut n = 1;
            while dir.exists() {
                n += 1;
                dir = PathBuf::from(format!("{}-{n}", first.display()));
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Input(format!("cannot create run directory {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Run directory with the effective configuration already echoed into it.
fn start_run(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    let dir = create_run_dir(cfg, command)?;
    write(&dir.join(CONFIG_FILE), cfg.to_file_string())?;
    println!("run directory: {}", dir.display());
    println!("seed: {}  (effective config in {})", cfg.seed()?, dir.join(CONFIG_FILE).display());
    Ok(dir)
}

fn pipeline_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::Dataset(DatasetError::SubcarrierMismatch { .. }) => CliError::Mismatch(e.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

fn train_error(stage: &str, e: TrainError) -> CliError {
    let msg = format!("{stage}: {e}");
    match e {
        TrainError::Config(_) | TrainError::EmptySplit(_) => CliError::Input(msg),
        TrainError::Model(_) => CliError::Mismatch(msg),
        _ => CliError::Internal(msg),
    }
}

fn checkpoint_error(path: &Path, e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Io(io) => CliError::Input(format!("cannot read checkpoint {}: {io}", path.display())),
        CheckpointError::UnsupportedVersion(_) => CliError::Mismatch(format!("{}: {e}", path.display())),
        e => CliError::Integrity(format!("{}: {e}", path.display())),
    }
}

fn load_dataset(manifest: &Path, cfg: &RunConfig) -> Result<WindowedDataset, CliError> {
    let ds = dataset_from_manifest(manifest, &cfg.pipeline()?).map_err(pipeline_error)?;
    log::info!(
        "dataset: {} classes, windows {}x{}, train {} val {} test {}",
        ds.class_count,
        ds.window_len,
        ds.subcarriers,
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    Ok(ds)
}

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub run_dir: PathBuf,
    pub manifest: PathBuf,
    pub sessions: Vec<PathBuf>,
    pub empty_room: Option<PathBuf>,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutcome, CliError> {
    let synth = cfg.synth()?;
    let order = cfg.iq_order()?;
    let dir = start_run(cfg, "synth")?;
    let synth_error = |e: SynthError| CliError::Input(format!("synth: {e}"));
    let (manifest, entries) = write_synthetic_corpus(&dir, &synth, order).map_err(synth_error)?;
    let sessions: Vec<PathBuf> = entries.into_iter().map(|e| e.path).collect();
    for (c, p) in sessions.iter().enumerate() {
        println!("class {c}: {}", p.display());
    }
    let empty_room = if cfg.synth_empty_room()? {
        let path = dir.join(EMPTY_ROOM_FILE);
        let s = synthesize_empty_room(&synth).map_err(synth_error)?;
        write_csi_log(&s.session, &path, order).map_err(|e| CliError::Input(format!("synth: {e}")))?;
        println!("empty room: {}", path.display());
        Some(path)
    } else {
        None
    };
    println!("manifest: {}", manifest.display());
    Ok(SynthOutcome {
        run_dir: dir,
        manifest,
        sessions,
        empty_room,
    })
}

#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub run_dir: PathBuf,
    pub report: SessionReport,
    pub malformed_lines: usize,
}

pub fn cmd_ingest(log: &Path, cfg: &RunConfig) -> Result<IngestOutcome, CliError> {
    let format = cfg.format()?;
    let parsed = parse_csi_log(log, &format).map_err(|e| CliError::Input(format!("ingest {}: {e}", log.display())))?;
    let dir = start_run(cfg, "ingest")?;
    let report = validate_session(&parsed.session);
    let mut text = report.to_key_values();
    let _ = writeln!(text, "malformed_lines={}", parsed.malformed());
    write(&dir.join(REPORT_FILE), text)?;
    println!("{report}");
    println!("malformed    {}", parsed.malformed());
    Ok(IngestOutcome {
        run_dir: dir,
        report,
        malformed_lines: parsed.malformed(),
    })
}

#[derive(Debug, Clone)]
pub struct PreprocessOutcome {
    pub run_dir: PathBuf,
    pub cache: PathBuf,
    pub dataset: WindowedDataset,
}

/// Builds the windowed dataset and stores it as a binary cache.
pub fn cmd_preprocess(manifest: &Path, cfg: &RunConfig) -> Result<PreprocessOutcome, CliError> {
    let ds = load_dataset(manifest, cfg)?;
    let dir = start_run(cfg, "preprocess")?;
    let cache = dir.join(DATASET_FILE);
    write_dataset_cache(&cache, &ds).map_err(|e| CliError::Input(format!("preprocess: {e}")))?;
    println!(
        "windows {}x{} ({} classes): train {}, val {}, test {}",
        ds.window_len,
        ds.subcarriers,
        ds.class_count,
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    println!("dataset cache: {}", cache.display());
    Ok(PreprocessOutcome {
        run_dir: dir,
        cache,
        dataset: ds,
    })
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub model: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub confusion: Vec<Vec<usize>>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub seed: u64,
    pub per_class: Vec<ClassMetrics>,
    pub test_windows: usize,
}

impl MetricsDocument {
    fn new(model: &Model, report: &MetricsReport, epochs_run: usize, best_epoch: usize, seed: u64) -> Self {
        Self {
            model: model.kind().name().to_string(),
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            macro_precision: report.macro_precision,
            macro_recall: report.macro_recall,
            confusion: report.confusion.clone(),
            epochs_run,
            best_epoch,
            seed,
            per_class: report.per_class.clone(),
            test_windows: report.total(),
        }
    }
}

fn write_metrics(dir: &Path, doc: &MetricsDocument, report: &MetricsReport) -> Result<String, CliError> {
    let json = serde_json::to_string_pretty(doc).map_err(|e| CliError::Internal(e.to_string()))?;
    write(&dir.join(METRICS_FILE), json + "\n")?;
    let table = metrics_table(&[(doc.model.as_str(), report)]);
    write(&dir.join(TABLE_FILE), &table)?;
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub metrics: MetricsDocument,
    pub report: MetricsReport,
}

/// Ingest, preprocess, window, train with early stopping and evaluate the
/// best checkpoint on the test split.
pub fn cmd_train(manifest: &Path, cfg: &RunConfig) -> Result<TrainRun, CliError> {
    let train_cfg = cfg.train()?;
    let template = cfg.model_template()?;
    let seed = cfg.seed()?;
    let ds = load_dataset(manifest, cfg)?;
    let dir = start_run(cfg, "train")?;

    let model_cfg = ModelConfig {
        window_len: ds.window_len,
        subcarriers: ds.subcarriers,
        classes: ds.class_count,
        ..template
    };
    let model = Model::new(model_cfg, seed).map_err(|e| CliError::Input(format!("model: {e}")))?;
    log::info!("{} model with {} parameters", model.kind(), model.param_count());
    let tr = Example::from_windows(&ds.train);
    let va = Example::from_windows(&ds.val);
    let te = Example::from_windows(&ds.test);
    let outcome = train(model, &tr, &va, &train_cfg).map_err(|e| train_error("train", e))?;
    write(&dir.join(HISTORY_FILE), history_csv(&outcome.history))?;

    let report = evaluate(&outcome.model, &te, train_cfg.threads).map_err(|e| train_error("evaluate", e))?;
    let doc = MetricsDocument::new(&outcome.model, &report, outcome.epochs_run, outcome.best_epoch, seed);
    // output locations stay with the invocation, not the model
    let config: serde_json::Map<String, serde_json::Value> = cfg
        .entries()
        .filter(|(k, _)| !k.starts_with("run."))
        .map(|(k, v)| (k.to_string(), json!(v)))
        .collect();
    let metadata = json!({
        "config": config,
        "seed": seed,
        "epochs_run": outcome.epochs_run,
        "best_epoch": outcome.best_epoch,
        "best_val_acc": outcome.best_val_acc,
    });
    let checkpoint = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &outcome.model, &metadata)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", checkpoint.display())))?;
    let table = write_metrics(&dir, &doc, &report)?;

    println!(
        "best epoch {} of {} (val acc {:.4}); test accuracy {:.4}",
        outcome.best_epoch, outcome.epochs_run, outcome.best_val_acc, report.accuracy
    );
    print!("{table}");
    println!("checkpoint: {}", checkpoint.display());
    Ok(TrainRun {
        run_dir: dir,
        checkpoint,
        history: outcome.history,
        metrics: doc,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub run_dir: PathBuf,
    pub metrics: MetricsDocument,
    pub report: MetricsReport,
}

/// Test-split metrics for a saved model.
///
/// The configuration stored in the checkpoint is the base; keys set in the
/// config file or on the command line override it.
pub fn cmd_eval(checkpoint: &Path, manifest: &Path, cfg: &RunConfig) -> Result<EvalOutcome, CliError> {
    let ckpt = load_checkpoint(checkpoint).map_err(|e| checkpoint_error(checkpoint, e))?;
    let mut stored = RunConfig::default();
    if let Some(map) = ckpt.metadata.get("config").and_then(|v| v.as_object()) {
        for (k, v) in map {
            let v = v.as_str().unwrap_or_default();
            stored
                .set(k, v)
                .map_err(|e| CliError::Mismatch(format!("checkpoint config: {}", e.message())))?;
        }
    }
    let eff = cfg.over(&stored);
    eff.validate()?;

    let model = ckpt.model;
    let mc = model.config().clone();
    if eff.is_explicit("model.kind") && eff.model_kind()? != mc.kind {
        return Err(CliError::Mismatch(format!(
            "checkpoint holds a {} model, model.kind={} requested",
            mc.kind,
            eff.get("model.kind")
        )));
    }
    let ds = load_dataset(manifest, &eff)?;
    if ds.subcarriers != mc.subcarriers || ds.window_len != mc.window_len {
        return Err(CliError::Mismatch(format!(
            "checkpoint expects windows of {}x{} (W x K), data gives {}x{}",
            mc.window_len, mc.subcarriers, ds.window_len, ds.subcarriers
        )));
    }
    if ds.class_count > mc.classes {
        return Err(CliError::Mismatch(format!(
            "checkpoint has {} classes, data has {}",
            mc.classes, ds.class_count
        )));
    }

    let dir = start_run(&eff, "eval")?;
    let te = Example::from_windows(&ds.test);
    let threads = eff.train()?.threads;
    let report = evaluate(&model, &te, threads).map_err(|e| train_error("evaluate", e))?;
    let meta = |k: &str| ckpt.metadata.get(k).and_then(|v| v.as_u64()).unwrap_or(0);
    let doc = MetricsDocument::new(&model, &report, meta("epochs_run") as usize, meta("best_epoch") as usize, meta("seed"));
    let table = write_metrics(&dir, &doc, &report)?;
    println!("test accuracy {:.4}", report.accuracy);
    print!("{table}");
    Ok(EvalOutcome {
        run_dir: dir,
        metrics: doc,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct HeatmapOutcome {
    pub run_dir: PathBuf,
    pub csv: PathBuf,
    pub pgm: Option<PathBuf>,
    /// Rows are time steps, columns subcarriers.
    pub grid: Array2<f64>,
    pub sample_rate_hz: f64,
    pub variance: f64,
}

pub fn grid_variance(grid: &Array2<f64>) -> f64 {
    let n = grid.len() as f64;
    let mean = grid.sum() / n;
    grid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Binary grayscale image with time along x and the highest subcarrier at the top.
pub fn grid_to_pgm(grid: &Array2<f64>) -> Vec<u8> {
    let (t, k) = grid.dim();
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = format!("P5\n{t} {k}\n255\n").into_bytes();
    for y in 0..k {
        let col = k - 1 - y;
        for x in 0..t {
            let v = if range > 0.0 { (grid[[x, col]] - lo) / range } else { 0.0 };
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

/// Amplitude grid of one session over `heatmap.start_s .. start_s + span_s`.
pub fn cmd_heatmap(log: &Path, cfg: &RunConfig) -> Result<HeatmapOutcome, CliError> {
    let hm = cfg.heatmap()?;
    let parsed = parse_csi_log(log, &cfg.format()?)
        .map_err(|e| CliError::Input(format!("ingest {}: {e}", log.display())))?;
    let raw = extract_amplitude_phase(&parsed.session);
    let m = match hm.stage {
        HeatmapStage::Raw => raw,
        HeatmapStage::Preprocessed => preprocess_session(&raw, &cfg.preprocess()?)
            .map_err(|e| CliError::Input(format!("preprocess {}: {e}", log.display())))?,
    };
    let fs = m.sample_rate_hz;
    if !(hm.start_s >= 0.0 && hm.span_s > 0.0) {
        return Err(CliError::Input(format!(
            "heatmap span must start at or after 0 s and be positive, got start {} s span {} s",
            hm.start_s, hm.span_s
        )));
    }
    let start = (hm.start_s * fs).round() as usize;
    let rows = ((hm.span_s * fs).round() as usize).max(1);
    if start + rows > m.rows() {
        return Err(CliError::Input(format!(
            "heatmap span {}..{} s lies outside the session ({} rows at {fs} Hz, {} s)",
            hm.start_s,
            hm.start_s + hm.span_s,
            m.rows(),
            m.rows() as f64 / fs
        )));
    }
    let grid = m.amplitude.slice(s![start..start + rows, ..]).to_owned();

    let dir = start_run(cfg, "heatmap")?;
    let mut csv = String::from("time_s");
    for idx in &m.subcarrier_indices {
        let _ = write!(csv, ",sc{idx}");
    }
    csv.push('\n');
    for (i, row) in grid.outer_iter().enumerate() {
        let _ = write!(csv, "{}", (start + i) as f64 / fs);
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let csv_path = dir.join(HEATMAP_CSV);
    write(&csv_path, csv)?;
    let pgm = if hm.pgm {
        let p = dir.join(HEATMAP_PGM);
        write(&p, grid_to_pgm(&grid))?;
        Some(p)
    } else {
        None
    };
    let variance = grid_variance(&grid);
    println!("grid {}x{} (time x subcarrier), variance {variance:.4}", grid.nrows(), grid.ncols());
    println!("heatmap: {}", csv_path.display());
    if let Some(p) = &pgm {
        println!("image: {}", p.display());
    }
    Ok(HeatmapOutcome {
        run_dir: dir,
        csv: csv_path,
        pgm,
        grid,
        sample_rate_hz: fs,
        variance,
    })
}
