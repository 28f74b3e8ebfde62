//! Person identification from Wi-Fi CSI: log ingestion, signal cleanup,
//! windowing, a small reverse-mode autodiff engine, a dual-branch
//! transformer with MLP and CNN baselines, training and evaluation.

pub mod autodiff;
pub mod dataset;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod training;

pub use autodiff::{Graph, Tensor, TensorError};
pub use dataset::{DatasetConfig, DatasetError, ManifestEntry, WindowSample, WindowedDataset};
pub use ingest::{AmplitudePhaseMatrix, CsiRecord, CsiSession, FormatConfig, IngestError, IqOrder, Label};
pub use model::{Model, ModelConfig, ModelError, ModelKind};
pub use pipeline::{PipelineConfig, PipelineError};
pub use preprocess::{PreprocessConfig, PreprocessError};
pub use synth::{SynthConfig, SynthError};
pub use training::{MetricsReport, TrainConfig, TrainError};
