//! Flat `key=value` run configuration.
//!
//! Every tunable of the pipeline has one dotted key with a default. Values
//! are layered as defaults, then a config file, then command-line flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use csi_ident::dataset::{DatasetConfig, SplitFractions, WindowConfig};
use csi_ident::ingest::{FormatConfig, IqOrder};
use csi_ident::model::{ModelConfig, ModelKind};
use csi_ident::pipeline::PipelineConfig;
use csi_ident::preprocess::{HampelConfig, PreprocessConfig};
use csi_ident::synth::SynthConfig;
use csi_ident::training::TrainConfig;

use crate::CliError;

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for synthesis, initialisation, shuffling and dropout"),
    ("run.out_dir", "runs", "parent of the per-command run directories"),
    ("run.name", "", "fixed run directory name; empty means command plus timestamp"),
    ("ingest.iq_order", "real_first", "order of each I/Q pair in logs: real_first | imag_first"),
    ("ingest.header", "false", "skip the first non-empty line of each log"),
    ("ingest.sample_rate_hz", "100", "nominal packet rate"),
    ("hampel.window", "15", "Hampel window length (odd)"),
    ("hampel.beta", "3", "outlier threshold in MADs"),
    ("hampel.alpha", "0.8", "smoothing factor for replacement values"),
    ("butterworth.order", "5", "low-pass filter order"),
    ("butterworth.cutoff_hz", "10", "low-pass cutoff"),
    ("butterworth.zero_phase", "false", "filter forward and backward"),
    ("reduce.temporal", "true", "average consecutive packet pairs"),
    ("phase.calibrate_first", "true", "calibrate phase per packet before pair averaging"),
    ("window.len", "100", "window length in rows"),
    ("window.overlap", "0.5", "fractional overlap of consecutive windows"),
    ("window.on_reduced", "true", "window.len counts reduced rows rather than packets"),
    ("split.train", "0.7", "train fraction of each session"),
    ("split.val", "0.1", "validation fraction of each session"),
    ("split.test", "0.2", "test fraction of each session"),
    ("dataset.shuffle", "false", "shuffle the train windows once"),
    ("dataset.normalize", "false", "z-score inputs with train statistics"),
    ("model.kind", "transformer", "transformer | mlp | cnn"),
    ("model.d_model", "32", "embedding width"),
    ("model.heads", "4", "attention heads"),
    ("model.d_ff", "64", "feed-forward width"),
    ("model.dropout", "0.2", "dropout rate"),
    ("model.input_dropout", "0", "dropout on the embedded inputs"),
    ("model.encoder_layers", "1", "encoder layers per branch"),
    ("model.positional_encoding", "true", "add sinusoidal positional encoding"),
    ("model.ln_eps", "0.00001", "layer norm epsilon"),
    ("model.cnn_channels", "32", "CNN baseline channels"),
    ("attn.scale_full_dmodel", "false", "scale scores by sqrt(d_model) instead of sqrt(d_k)"),
    ("train.lr", "0.001", "Adam learning rate"),
    ("train.batch", "32", "mini-batch size"),
    ("train.max_epochs", "50", "epoch limit"),
    ("train.patience", "10", "epochs without validation improvement before stopping"),
    ("train.beta1", "0.9", "Adam beta1"),
    ("train.beta2", "0.999", "Adam beta2"),
    ("train.eps", "0.00000001", "Adam epsilon"),
    ("train.threads", "1", "worker threads for per-sample gradients"),
    ("synth.classes", "6", "number of synthetic subjects"),
    ("synth.subcarriers", "52", "subcarriers per packet"),
    ("synth.sample_rate_hz", "100", "packet rate"),
    ("synth.duration_s", "150", "seconds per session"),
    ("synth.correlation_len", "8", "smoothing length of class signatures"),
    ("synth.base_amplitude", "40", "mean amplitude"),
    ("synth.signature_strength", "0.3", "relative amplitude signature depth"),
    ("synth.phase_signature_rad", "0.8", "phase signature depth"),
    ("synth.noise_sigma", "1", "additive amplitude noise"),
    ("synth.spike_rate", "0.002", "impulse probability per sample"),
    ("synth.spike_magnitude", "10", "impulse size in noise sigmas"),
    ("synth.sfo_slope_max", "0.2", "largest per-packet phase slope"),
    ("synth.cfo_offset_max", "3.141592653589793", "largest per-packet phase offset"),
    ("synth.phase_noise", "0.01", "phase noise"),
    ("synth.hf_amplitude", "2", "high-frequency interference amplitude"),
    ("synth.hf_freq_hz", "40", "high-frequency interference frequency"),
    ("synth.modulation_depth", "0.02", "slow breathing-like modulation depth"),
    ("synth.modulation_hz", "0.25", "slow modulation frequency"),
    ("synth.empty_room", "false", "also write an empty-room session (not in the manifest)"),
    ("heatmap.start_s", "0", "span start"),
    ("heatmap.span_s", "2", "span length"),
    ("heatmap.stage", "raw", "raw | preprocessed"),
    ("heatmap.pgm", "false", "also write a grayscale PGM image"),
];

pub fn is_key(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapStage {
    Raw,
    Preprocessed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapConfig {
    pub start_s: f64,
    pub span_s: f64,
    pub stage: HeatmapStage,
    pub pgm: bool,
}

/// Merged configuration. Tracks which keys were set explicitly so a
/// checkpoint's stored configuration can be layered underneath them.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
    explicit: BTreeSet<&'static str>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect(),
            explicit: BTreeSet::new(),
        }
    }
}

fn canonical(key: &str) -> Result<&'static str, CliError> {
    KEYS.iter()
        .find(|(k, _, _)| *k == key)
        .map(|(k, _, _)| *k)
        .ok_or_else(|| CliError::Input(format!("unknown config key `{key}` (see `csi-ident keys`)")))
}

impl RunConfig {
    /// Defaults, then `file`, then `flags`; all values are validated.
    pub fn load(file: Option<&Path>, flags: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.merge_file(path)?;
        }
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = canonical(key)?;
        self.values.insert(key, value.trim().to_string());
        self.explicit.insert(key);
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// `base` with this configuration's explicitly set keys applied on top.
    pub fn over(&self, base: &RunConfig) -> RunConfig {
        let mut out = base.clone();
        for k in &self.explicit {
            out.values.insert(k, self.values[k].clone());
            out.explicit.insert(k);
        }
        out
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn merge_str(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("{origin}:{}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Input(format!("{origin}:{}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_str(&text, &path.display().to_string())
    }

    /// Every key as `key=value`, one per line, sorted. Loadable as a config file.
    pub fn to_file_string(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&'static str, &str)> {
        self.values.iter().map(|(k, v)| (*k, v.as_str()))
    }

    fn parse<T>(&self, key: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let v = self.get(key);
        v.parse()
            .map_err(|e| CliError::Input(format!("config key {key}: invalid value `{v}`: {e}")))
    }

    /// Builds every typed configuration once to surface bad values early.
    pub fn validate(&self) -> Result<(), CliError> {
        self.seed()?;
        self.pipeline()?;
        self.synth()?;
        self.heatmap()?;
        self.model_template()?;
        self.train()?
            .validate()
            .map_err(|e| CliError::Input(e.to_string()))?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("run.out_dir"))
    }

    pub fn run_name(&self) -> Option<&str> {
        Some(self.get("run.name")).filter(|s| !s.is_empty())
    }

    pub fn iq_order(&self) -> Result<IqOrder, CliError> {
        match self.get("ingest.iq_order") {
            "real_first" => Ok(IqOrder::RealFirst),
            "imag_first" => Ok(IqOrder::ImagFirst),
            other => Err(CliError::Input(format!(
                "config key ingest.iq_order: expected real_first or imag_first, got `{other}`"
            ))),
        }
    }

    pub fn format(&self) -> Result<FormatConfig, CliError> {
        Ok(FormatConfig {
            iq_order: self.iq_order()?,
            header: self.parse("ingest.header")?,
            sample_rate_hz: self.parse("ingest.sample_rate_hz")?,
            ..Default::default()
        })
    }

    pub fn preprocess(&self) -> Result<PreprocessConfig, CliError> {
        let cfg = PreprocessConfig {
            hampel: HampelConfig {
                window: self.parse("hampel.window")?,
                beta: self.parse("hampel.beta")?,
                alpha: self.parse("hampel.alpha")?,
            },
            butterworth_order: self.parse("butterworth.order")?,
            butterworth_cutoff_hz: self.parse("butterworth.cutoff_hz")?,
            butterworth_zero_phase: self.parse("butterworth.zero_phase")?,
            reduce_temporal: self.parse("reduce.temporal")?,
            calibrate_before_reduce: self.parse("phase.calibrate_first")?,
        };
        cfg.hampel.validate().map_err(|e| CliError::Input(e.to_string()))?;
        Ok(cfg)
    }

    pub fn dataset(&self) -> Result<DatasetConfig, CliError> {
        Ok(DatasetConfig {
            window: WindowConfig {
                len: self.parse("window.len")?,
                overlap: self.parse("window.overlap")?,
                on_reduced: self.parse("window.on_reduced")?,
            },
            split: SplitFractions {
                train: self.parse("split.train")?,
                val: self.parse("split.val")?,
                test: self.parse("split.test")?,
            },
            shuffle_train: self.parse("dataset.shuffle")?,
            seed: self.seed()?,
            normalize: self.parse("dataset.normalize")?,
        })
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        Ok(PipelineConfig {
            format: self.format()?,
            preprocess: self.preprocess()?,
            dataset: self.dataset()?,
        })
    }

    pub fn model_kind(&self) -> Result<ModelKind, CliError> {
        self.parse("model.kind")
    }

    /// Model hyperparameters; shapes are filled in from the data later.
    pub fn model_template(&self) -> Result<ModelConfig, CliError> {
        Ok(ModelConfig {
            kind: self.model_kind()?,
            d_model: self.parse("model.d_model")?,
            heads: self.parse("model.heads")?,
            d_ff: self.parse("model.d_ff")?,
            dropout: self.parse("model.dropout")?,
            input_dropout: self.parse("model.input_dropout")?,
            encoder_layers: self.parse("model.encoder_layers")?,
            scale_full_dmodel: self.parse("attn.scale_full_dmodel")?,
            positional_encoding: self.parse("model.positional_encoding")?,
            ln_eps: self.parse("model.ln_eps")?,
            cnn_channels: self.parse("model.cnn_channels")?,
            ..Default::default()
        })
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            lr: self.parse("train.lr")?,
            batch: self.parse("train.batch")?,
            max_epochs: self.parse("train.max_epochs")?,
            patience: self.parse("train.patience")?,
            seed: self.seed()?,
            beta1: self.parse("train.beta1")?,
            beta2: self.parse("train.beta2")?,
            eps: self.parse("train.eps")?,
            threads: self.parse("train.threads")?,
        })
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        Ok(SynthConfig {
            classes: self.parse("synth.classes")?,
            subcarriers: self.parse("synth.subcarriers")?,
            sample_rate_hz: self.parse("synth.sample_rate_hz")?,
            duration_s: self.parse("synth.duration_s")?,
            correlation_len: self.parse("synth.correlation_len")?,
            base_amplitude: self.parse("synth.base_amplitude")?,
            signature_strength: self.parse("synth.signature_strength")?,
            phase_signature_rad: self.parse("synth.phase_signature_rad")?,
            noise_sigma: self.parse("synth.noise_sigma")?,
            spike_rate: self.parse("synth.spike_rate")?,
            spike_magnitude: self.parse("synth.spike_magnitude")?,
            sfo_slope_max: self.parse("synth.sfo_slope_max")?,
            cfo_offset_max: self.parse("synth.cfo_offset_max")?,
            phase_noise: self.parse("synth.phase_noise")?,
            hf_amplitude: self.parse("synth.hf_amplitude")?,
            hf_freq_hz: self.parse("synth.hf_freq_hz")?,
            modulation_depth: self.parse("synth.modulation_depth")?,
            modulation_hz: self.parse("synth.modulation_hz")?,
            seed: self.seed()?,
        })
    }

    pub fn synth_empty_room(&self) -> Result<bool, CliError> {
        self.parse("synth.empty_room")
    }

    pub fn heatmap(&self) -> Result<HeatmapConfig, CliError> {
        let stage = match self.get("heatmap.stage") {
            "raw" => HeatmapStage::Raw,
            "preprocessed" => HeatmapStage::Preprocessed,
            other => {
                return Err(CliError::Input(format!(
                    "config key heatmap.stage: expected raw or preprocessed, got `{other}`"
                )))
            }
        };
        Ok(HeatmapConfig {
            start_s: self.parse("heatmap.start_s")?,
            span_s: self.parse("heatmap.span_s")?,
            stage,
            pgm: self.parse("heatmap.pgm")?,
        })
    }
}

/// Splits `--key=value` config overrides out of the argument list.
///
/// An argument is an override when its key is dotted or registered; unknown
/// dotted keys are kept as overrides so they are rejected with a clear message.
pub fn extract_overrides<I>(args: I) -> (Vec<String>, Vec<(String, String)>)
where
    I: IntoIterator<Item = String>,
{
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let kv = arg.strip_prefix("--").and_then(|s| s.split_once('='));
        match kv {
            Some((k, v)) if k.contains('.') || is_key(k) => overrides.push((k.to_string(), v.to_string())),
            _ => rest.push(arg),
        }
    }
    (rest, overrides)
}
