//! Linear phase calibration across subcarriers.
//!
//! Per packet, the slope is taken from the first and last subcarriers and the
//! intercept from the row mean; the fitted line `a k + b` is subtracted. This
//! removes the SFO slope and CFO offset together without estimating either.

use std::f64::consts::PI;

use super::PreprocessError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseCalibration {
    /// Radians per subcarrier index.
    pub slope: f64,
    /// Radians.
    pub intercept: f64,
}

/// Unwraps in place along the row: whenever a step exceeds π in magnitude,
/// the remainder of the row is shifted by the multiple of 2π that brings the
/// step back into `[-π, π]`.
pub fn unwrap_in_place(row: &mut [f64]) {
    let mut offset = 0.0;
    for i in 1..row.len() {
        let raw_prev = row[i - 1] - offset;
        let step = row[i] - raw_prev;
        if step > PI || step < -PI {
            offset -= 2.0 * PI * (step / (2.0 * PI)).round();
        }
        row[i] += offset;
    }
}

pub fn unwrap(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    unwrap_in_place(&mut out);
    out
}

pub fn fit_endpoint_trend(
    phase_row: &[f64],
    subcarrier_indices: &[i32],
) -> Result<PhaseCalibration, PreprocessError> {
    let n = phase_row.len();
    if n < 2 || subcarrier_indices.len() != n {
        return Err(PreprocessError::Shape(format!(
            "phase row of length {n} with {} subcarrier indices",
            subcarrier_indices.len()
        )));
    }
    let (k1, kn) = (subcarrier_indices[0], subcarrier_indices[n - 1]);
    if k1 == kn {
        return Err(PreprocessError::DegenerateIndices);
    }
    let slope = (phase_row[n - 1] - phase_row[0]) / f64::from(kn - k1);
    let intercept = phase_row.iter().sum::<f64>() / n as f64;
    Ok(PhaseCalibration { slope, intercept })
}

/// `Φ_i = φ_i - a k_i - b`; the row must already be unwrapped.
pub fn calibrate_phase(
    phase_row: &[f64],
    subcarrier_indices: &[i32],
) -> Result<Vec<f64>, PreprocessError> {
    let PhaseCalibration { slope, intercept } = fit_endpoint_trend(phase_row, subcarrier_indices)?;
    Ok(phase_row
        .iter()
        .zip(subcarrier_indices)
        .map(|(&p, &k)| p - slope * f64::from(k) - intercept)
        .collect())
}
