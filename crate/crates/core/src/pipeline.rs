//! Manifest to windowed dataset: ingest, preprocess, split and window.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{build_dataset, read_manifest, DatasetConfig, DatasetError, LabeledMatrix, ManifestEntry, WindowedDataset};
use crate::ingest::{extract_amplitude_phase, parse_csi_log, AmplitudePhaseMatrix, FormatConfig, IngestError};
use crate::preprocess::{preprocess_session, PreprocessConfig, PreprocessError};

/// A pipeline failure tagged with the stage and file it came from.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest: {0}")]
    Manifest(DatasetError),
    #[error("ingest {path}: {source}")]
    Ingest { path: PathBuf, source: IngestError },
    #[error("preprocess {path}: {source}")]
    Preprocess { path: PathBuf, source: PreprocessError },
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineConfig {
    pub format: FormatConfig,
    pub preprocess: PreprocessConfig,
    pub dataset: DatasetConfig,
}

/// Parses and preprocesses one session log.
pub fn load_preprocessed(path: &Path, cfg: &PipelineConfig) -> Result<AmplitudePhaseMatrix, PipelineError> {
    let parsed = parse_csi_log(path, &cfg.format).map_err(|source| PipelineError::Ingest {
        path: path.to_path_buf(),
        source,
    })?;
    if parsed.malformed() > 0 {
        log::warn!("{}: skipped {} malformed lines", path.display(), parsed.malformed());
    }
    let raw = extract_amplitude_phase(&parsed.session);
    preprocess_session(&raw, &cfg.preprocess).map_err(|source| PipelineError::Preprocess {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_entries(entries: &[ManifestEntry], cfg: &PipelineConfig) -> Result<Vec<LabeledMatrix>, PipelineError> {
    entries
        .par_iter()
        .map(|e| {
            Ok(LabeledMatrix {
                matrix: load_preprocessed(&e.path, cfg)?,
                label: e.label,
            })
        })
        .collect()
}

/// Builds the windowed dataset for every session listed in a manifest.
pub fn dataset_from_manifest(manifest: &Path, cfg: &PipelineConfig) -> Result<WindowedDataset, PipelineError> {
    let entries = read_manifest(manifest).map_err(PipelineError::Manifest)?;
    let sessions = load_entries(&entries, cfg)?;
    Ok(build_dataset(&sessions, &cfg.dataset, cfg.preprocess.reduce_temporal)?)
}
