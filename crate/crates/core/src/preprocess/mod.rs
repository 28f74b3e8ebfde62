//! Amplitude and phase sanitization.
//!
//! Amplitude: temporal pair averaging, Hampel outlier replacement per
//! subcarrier, Butterworth low-pass per subcarrier, clamp at zero.
//! Phase: per packet unwrap along the subcarrier axis and endpoint-trend
//! calibration, combined with the same temporal pair averaging.

mod butterworth;
mod hampel;
mod phase;

pub use butterworth::{butterworth_apply, design_butterworth, Biquad, ButterworthFilter};
pub use hampel::{hampel_filter, hampel_filter_detailed, smoothed_replacement, HampelConfig, HampelOutput};
pub use phase::{calibrate_phase, fit_endpoint_trend, unwrap, unwrap_in_place, PhaseCalibration};

use ndarray::{Array2, Axis};
use thiserror::Error;

use crate::ingest::AmplitudePhaseMatrix;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("series of length {len} is shorter than the required {needed}")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("cutoff {cutoff_hz} Hz must lie in (0, {nyquist_hz}) Hz")]
    CutoffAboveNyquist { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("first and last subcarrier indices coincide")]
    DegenerateIndices,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub hampel: HampelConfig,
    pub butterworth_order: usize,
    pub butterworth_cutoff_hz: f64,
    /// Forward-backward filtering instead of a single causal pass.
    pub butterworth_zero_phase: bool,
    pub reduce_temporal: bool,
    /// Calibrate each raw packet before pair averaging. When false, wrapped
    /// phases are averaged first and calibrated afterwards.
    pub calibrate_before_reduce: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            hampel: HampelConfig::default(),
            butterworth_order: 5,
            butterworth_cutoff_hz: 10.0,
            butterworth_zero_phase: false,
            reduce_temporal: true,
            calibrate_before_reduce: true,
        }
    }
}

/// Averages consecutive row pairs; a trailing odd row is dropped.
pub fn temporal_mean_reduce(m: &Array2<f64>) -> Result<Array2<f64>, PreprocessError> {
    let t = m.nrows();
    if t < 2 {
        return Err(PreprocessError::SeriesTooShort { len: t, needed: 2 });
    }
    Ok(Array2::from_shape_fn((t / 2, m.ncols()), |(r, c)| {
        (m[[2 * r, c]] + m[[2 * r + 1, c]]) / 2.0
    }))
}

/// Unwraps and calibrates every row.
pub fn calibrate_rows(phase: &Array2<f64>, subcarrier_indices: &[i32]) -> Result<Array2<f64>, PreprocessError> {
    let mut out = phase.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mut r = row.to_vec();
        unwrap_in_place(&mut r);
        let cal = calibrate_phase(&r, subcarrier_indices)?;
        row.iter_mut().zip(cal).for_each(|(d, v)| *d = v);
    }
    Ok(out)
}

pub fn preprocess_session(
    m: &AmplitudePhaseMatrix,
    cfg: &PreprocessConfig,
) -> Result<AmplitudePhaseMatrix, PreprocessError> {
    if m.amplitude.dim() != m.phase.dim() {
        return Err(PreprocessError::Shape(format!(
            "amplitude {:?} vs phase {:?}",
            m.amplitude.dim(),
            m.phase.dim()
        )));
    }
    cfg.hampel.validate()?;
    let (amplitude, mut sample_rate) = if cfg.reduce_temporal {
        (temporal_mean_reduce(&m.amplitude)?, m.sample_rate_hz / 2.0)
    } else {
        (m.amplitude.clone(), m.sample_rate_hz)
    };
    let filter = design_butterworth(cfg.butterworth_order, cfg.butterworth_cutoff_hz, sample_rate)?;

    let mut amp_out = amplitude.clone();
    for (col_in, mut col_out) in amplitude.axis_iter(Axis(1)).zip(amp_out.axis_iter_mut(Axis(1))) {
        let series = col_in.to_vec();
        let cleaned = hampel_filter(&series, &cfg.hampel)?;
        let smooth = if cfg.butterworth_zero_phase {
            filter.apply_zero_phase(&cleaned)
        } else {
            filter.apply(&cleaned)
        };
        col_out.iter_mut().zip(smooth).for_each(|(d, v)| *d = v.max(0.0));
    }

    let phase = match (cfg.reduce_temporal, cfg.calibrate_before_reduce) {
        (false, _) => calibrate_rows(&m.phase, &m.subcarrier_indices)?,
        (true, true) => temporal_mean_reduce(&calibrate_rows(&m.phase, &m.subcarrier_indices)?)?,
        (true, false) => calibrate_rows(&temporal_mean_reduce(&m.phase)?, &m.subcarrier_indices)?,
    };
    if !cfg.reduce_temporal {
        sample_rate = m.sample_rate_hz;
    }

    Ok(AmplitudePhaseMatrix {
        amplitude: amp_out,
        phase,
        subcarrier_indices: m.subcarrier_indices.clone(),
        sample_rate_hz: sample_rate,
    })
}
