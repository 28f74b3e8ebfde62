//! Synthetic labeled CSI sessions.
//!
//! Each class gets a static channel signature: a smooth amplitude curve and
//! a smooth phase curve over subcarriers. Sessions add slow modulation,
//! Gaussian noise, sparse amplitude spikes, a high-frequency tone, and
//! per-packet phase slope and offset, then quantize I/Q to 8-bit integers.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{write_manifest, DatasetError, ManifestEntry};
use crate::ingest::{
    default_subcarrier_indices, extract_amplitude_phase, write_csi_log, CsiRecord, CsiSession,
    IngestError, IqOrder, Label,
};
use crate::preprocess::{calibrate_rows, PreprocessError};

const IQ_LIMIT: f64 = 127.0;
const EMPTY_ROOM_STREAM: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("cannot create output directory {path}: {source}")]
    OutputDir {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub subcarriers: usize,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    /// Smoothing length of the signature random walks, in subcarriers.
    pub correlation_len: usize,
    /// Mean amplitude of the shared channel baseline.
    pub base_amplitude: f64,
    /// Log-scale spread of the per-class amplitude signature.
    pub signature_strength: f64,
    /// Peak magnitude of the per-class phase signature, radians.
    pub phase_signature_rad: f64,
    pub noise_sigma: f64,
    /// Probability per packet and subcarrier of an amplitude spike.
    pub spike_rate: f64,
    pub spike_magnitude: f64,
    /// Per-packet phase slope drawn from `±sfo_slope_max` rad/subcarrier.
    pub sfo_slope_max: f64,
    /// Per-packet phase offset drawn from `±cfo_offset_max` rad.
    pub cfo_offset_max: f64,
    pub phase_noise: f64,
    pub hf_amplitude: f64,
    pub hf_freq_hz: f64,
    /// Relative depth of the slow amplitude modulation.
    pub modulation_depth: f64,
    pub modulation_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            subcarriers: 52,
            sample_rate_hz: 100.0,
            duration_s: 150.0,
            correlation_len: 8,
            base_amplitude: 40.0,
            signature_strength: 0.3,
            phase_signature_rad: 0.8,
            noise_sigma: 1.0,
            spike_rate: 0.002,
            spike_magnitude: 10.0,
            sfo_slope_max: 0.2,
            cfo_offset_max: PI,
            phase_noise: 0.01,
            hf_amplitude: 2.0,
            hf_freq_hz: 40.0,
            modulation_depth: 0.02,
            modulation_hz: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The same signatures with every impairment and modulation removed.
    pub fn clean(self) -> Self {
        Self {
            noise_sigma: 0.0,
            spike_rate: 0.0,
            sfo_slope_max: 0.0,
            cfo_offset_max: 0.0,
            phase_noise: 0.0,
            hf_amplitude: 0.0,
            modulation_depth: 0.0,
            ..self
        }
    }

    pub fn packets(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.subcarriers < 2 {
            return bad(format!("need at least 2 subcarriers, got {}", self.subcarriers));
        }
        if !(self.sample_rate_hz > 0.0) || !(self.duration_s > 0.0) || self.packets() < 2 {
            return bad("sample rate and duration must give at least 2 packets".into());
        }
        if self.correlation_len == 0 {
            return bad("correlation_len must be positive".into());
        }
        for (name, v) in [
            ("base_amplitude", self.base_amplitude),
            ("signature_strength", self.signature_strength),
            ("phase_signature_rad", self.phase_signature_rad),
            ("noise_sigma", self.noise_sigma),
            ("spike_magnitude", self.spike_magnitude),
            ("sfo_slope_max", self.sfo_slope_max),
            ("cfo_offset_max", self.cfo_offset_max),
            ("phase_noise", self.phase_noise),
            ("hf_amplitude", self.hf_amplitude),
            ("hf_freq_hz", self.hf_freq_hz),
            ("modulation_depth", self.modulation_depth),
            ("modulation_hz", self.modulation_hz),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.spike_rate) {
            return bad(format!("spike_rate must be in [0, 1], got {}", self.spike_rate));
        }
        if self.modulation_depth >= 1.0 {
            return bad("modulation_depth must be below 1".into());
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Per-class amplitude and phase curves over subcarriers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSignature {
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

/// Gaussian random walk, box-smoothed, centered and scaled to peak 1.
fn smooth_walk(rng: &mut ChaCha8Rng, len: usize, smooth: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut acc = 0.0;
    let walk: Vec<f64> = (0..len)
        .map(|_| {
            acc += normal.sample(rng);
            acc
        })
        .collect();
    let half = smooth / 2;
    let smoothed: Vec<f64> = (0..len)
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(half), (i + half + 1).min(len));
            walk[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let mean = smoothed.iter().sum::<f64>() / len as f64;
    let peak = smoothed.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    smoothed.iter().map(|v| (v - mean) * scale).collect()
}

/// Shared channel baseline: decreasing across the band.
fn baseline(cfg: &SynthConfig) -> Vec<f64> {
    let k = cfg.subcarriers;
    (0..k)
        .map(|i| cfg.base_amplitude * (1.15 - 0.3 * i as f64 / (k - 1) as f64))
        .collect()
}

pub fn class_signature(class_id: usize, cfg: &SynthConfig) -> ClassSignature {
    let mut rng = cfg.rng(class_id as u64);
    let k = cfg.subcarriers;
    let amp_walk = smooth_walk(&mut rng, k, cfg.correlation_len);
    let phase_walk = smooth_walk(&mut rng, k, cfg.correlation_len);
    let amplitude = baseline(cfg)
        .iter()
        .zip(&amp_walk)
        .map(|(b, w)| (b * (cfg.signature_strength * w).exp()).max(1.0))
        .collect();
    let phase = phase_walk.iter().map(|w| cfg.phase_signature_rad * w).collect();
    ClassSignature { amplitude, phase }
}

/// A generated session plus the ground truth behind it.
#[derive(Debug, Clone)]
pub struct SynthSession {
    pub session: CsiSession,
    /// Phase before per-packet slope, offset and noise; `packets × K`.
    pub true_phase: Array2<f64>,
    /// Injected per-packet phase slope, rad/subcarrier.
    pub injected_slopes: Vec<f64>,
    pub injected_offsets: Vec<f64>,
}

fn wrap(p: f64) -> f64 {
    let w = (p + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        PI
    } else {
        w
    }
}

fn render(
    cfg: &SynthConfig,
    signature: &ClassSignature,
    rng: &mut ChaCha8Rng,
    spikes: bool,
    label: Label,
) -> Result<SynthSession, SynthError> {
    cfg.validate()?;
    let (t_len, k) = (cfg.packets(), cfg.subcarriers);
    let indices = default_subcarrier_indices(k);
    let fs = cfg.sample_rate_hz;
    let amp_noise = Normal::new(0.0, cfg.noise_sigma).unwrap();
    let phase_noise = Normal::new(0.0, cfg.phase_noise).unwrap();
    let mod_phase = rng.random_range(0.0..2.0 * PI);
    let hf_phase = rng.random_range(0.0..2.0 * PI);
    let drift_phase = rng.random_range(0.0..2.0 * PI);

    let mut true_phase = Array2::zeros((t_len, k));
    let mut slopes = Vec::with_capacity(t_len);
    let mut offsets = Vec::with_capacity(t_len);
    let mut records = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let time = t as f64 / fs;
        let modulation = 1.0 + cfg.modulation_depth * (2.0 * PI * cfg.modulation_hz * time + mod_phase).sin();
        let tone = cfg.hf_amplitude * (2.0 * PI * cfg.hf_freq_hz * time + hf_phase).sin();
        let drift = 1.0 + cfg.modulation_depth * (2.0 * PI * 0.5 * cfg.modulation_hz * time + drift_phase).sin();
        let slope = if cfg.sfo_slope_max > 0.0 {
            rng.random_range(-cfg.sfo_slope_max..=cfg.sfo_slope_max)
        } else {
            0.0
        };
        let offset = if cfg.cfo_offset_max > 0.0 {
            rng.random_range(-cfg.cfo_offset_max..=cfg.cfo_offset_max)
        } else {
            0.0
        };
        slopes.push(slope);
        offsets.push(offset);
        let mut iq = Vec::with_capacity(k);
        for j in 0..k {
            let mut a = signature.amplitude[j] * modulation + tone;
            if cfg.noise_sigma > 0.0 {
                a += amp_noise.sample(rng);
            }
            if spikes && cfg.spike_rate > 0.0 && rng.random_bool(cfg.spike_rate) {
                a += cfg.spike_magnitude;
            }
            let a = a.max(0.0);
            let truth = signature.phase[j] * drift;
            true_phase[[t, j]] = truth;
            let mut p = truth + slope * f64::from(indices[j]) + offset;
            if cfg.phase_noise > 0.0 {
                p += phase_noise.sample(rng);
            }
            let p = wrap(p);
            let q = |v: f64| v.round().clamp(-IQ_LIMIT, IQ_LIMIT);
            iq.push(Complex64::new(q(a * p.cos()), q(a * p.sin())));
        }
        records.push(CsiRecord {
            timestamp: (time * 1e6).round() / 1e6,
            iq,
            subcarrier_indices: indices.clone(),
        });
    }
    let mut session = CsiSession::new(records, fs)?.with_label(label);
    session.orientation_deg = Some(0);
    Ok(SynthSession {
        session,
        true_phase,
        injected_slopes: slopes,
        injected_offsets: offsets,
    })
}

pub fn synthesize_session(class_id: usize, cfg: &SynthConfig) -> Result<SynthSession, SynthError> {
    let signature = class_signature(class_id, cfg);
    let mut rng = cfg.rng(cfg.classes as u64 + class_id as u64 + 1);
    render(cfg, &signature, &mut rng, true, Label::Class(class_id))
}

/// A session with no subject: the bare channel baseline, flat phase, small
/// noise and no spikes. Phase impairments still apply.
pub fn synthesize_empty_room(cfg: &SynthConfig) -> Result<SynthSession, SynthError> {
    let quiet = SynthConfig {
        noise_sigma: cfg.noise_sigma * 0.3,
        hf_amplitude: 0.0,
        modulation_depth: 0.0,
        ..cfg.clone()
    };
    let signature = ClassSignature {
        amplitude: baseline(cfg),
        phase: vec![0.0; cfg.subcarriers],
    };
    let mut rng = cfg.rng(EMPTY_ROOM_STREAM);
    render(&quiet, &signature, &mut rng, false, Label::Unlabeled)
}

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// How much per-packet phase slope survives calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationResidual {
    /// Mean over packets of `|slope(cal(observed)) - slope(cal(true))|`.
    pub mean_residual_slope: f64,
    /// Mean over packets of the injected `|slope|`.
    pub mean_injected_slope: f64,
}

impl CalibrationResidual {
    pub fn ratio(&self) -> f64 {
        self.mean_residual_slope / self.mean_injected_slope
    }
}

/// Calibrates the observed (quantized) and true phase of every packet and
/// compares their least-squares slopes over subcarrier index.
pub fn calibration_residual(s: &SynthSession) -> Result<CalibrationResidual, PreprocessError> {
    let observed = extract_amplitude_phase(&s.session);
    let idx = observed.subcarrier_indices.clone();
    let cal_obs = calibrate_rows(&observed.phase, &idx)?;
    let cal_true = calibrate_rows(&s.true_phase, &idx)?;
    let x: Vec<f64> = idx.iter().map(|&k| f64::from(k)).collect();
    let n = cal_obs.nrows() as f64;
    let residual: f64 = cal_obs
        .outer_iter()
        .zip(cal_true.outer_iter())
        .map(|(o, t)| (ls_slope(&x, &o.to_vec()) - ls_slope(&x, &t.to_vec())).abs())
        .sum();
    Ok(CalibrationResidual {
        mean_residual_slope: residual / n,
        mean_injected_slope: s.injected_slopes.iter().map(|v| v.abs()).sum::<f64>() / n,
    })
}

pub fn session_file_name(class_id: usize) -> String {
    format!("class_{class_id}.csv")
}

/// Writes one log per class and a `manifest.txt` into `dir`.
///
/// Returns the manifest path and its entries.
pub fn write_synthetic_corpus(
    dir: &Path,
    cfg: &SynthConfig,
    iq_order: IqOrder,
) -> Result<(PathBuf, Vec<ManifestEntry>), SynthError> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|source| SynthError::OutputDir {
        path: dir.display().to_string(),
        source,
    })?;
    let entries = (0..cfg.classes)
        .into_par_iter()
        .map(|c| {
            let s = synthesize_session(c, cfg)?;
            let path = dir.join(session_file_name(c));
            write_csi_log(&s.session, &path, iq_order)?;
            Ok(ManifestEntry {
                path,
                label: c,
                orientation_deg: s.session.orientation_deg,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    Ok((manifest, entries))
}
