//! Hampel outlier replacement.
//!
//! For every index whose centered window of length `w` lies inside the
//! series, the center is flagged when `|x_c - median| > beta * MAD`. A flagged
//! value is replaced by an exponential smoothing run over the window's
//! leading half (the `w/2` values before the center), seeded with the
//! window's first value. Windows always read the original series, so
//! replacements never feed later windows. Boundary indices pass through.
//!
//! MAD is the raw median of absolute deviations, no Gaussian scale factor.

use super::PreprocessError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HampelConfig {
    pub window: usize,
    pub beta: f64,
    pub alpha: f64,
}

impl Default for HampelConfig {
    fn default() -> Self {
        Self {
            window: 15,
            beta: 3.0,
            alpha: 0.8,
        }
    }
}

impl HampelConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(PreprocessError::InvalidConfig(format!(
                "hampel window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(PreprocessError::InvalidConfig(format!(
                "hampel beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(PreprocessError::InvalidConfig(format!(
                "hampel alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Median of an odd-length scratch buffer (reordered in place).
fn median_odd(buf: &mut [f64]) -> f64 {
    let mid = buf.len() / 2;
    *buf.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Smoothed replacement for a flagged center: `s_0 = x_0`,
/// `s_i = alpha * x_i + (1 - alpha) * s_{i-1}` for the values before the center.
pub fn smoothed_replacement(leading: &[f64], alpha: f64) -> f64 {
    let mut s = leading[0];
    for &x in &leading[1..] {
        s = alpha * x + (1.0 - alpha) * s;
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct HampelOutput {
    pub values: Vec<f64>,
    /// Indices that were replaced.
    pub outliers: Vec<usize>,
}

pub fn hampel_filter(series: &[f64], cfg: &HampelConfig) -> Result<Vec<f64>, PreprocessError> {
    hampel_filter_detailed(series, cfg).map(|o| o.values)
}

pub fn hampel_filter_detailed(
    series: &[f64],
    cfg: &HampelConfig,
) -> Result<HampelOutput, PreprocessError> {
    cfg.validate()?;
    let w = cfg.window;
    if series.len() < w {
        return Err(PreprocessError::SeriesTooShort {
            len: series.len(),
            needed: w,
        });
    }
    let half = w / 2;
    let mut values = series.to_vec();
    let mut outliers = Vec::new();
    let mut scratch = vec![0.0; w];
    for c in half..series.len() - half {
        let window = &series[c - half..=c + half];
        scratch.copy_from_slice(window);
        let med = median_odd(&mut scratch);
        for (d, &x) in scratch.iter_mut().zip(window) {
            *d = (x - med).abs();
        }
        let mad = median_odd(&mut scratch);
        if (series[c] - med).abs() > cfg.beta * mad {
            values[c] = smoothed_replacement(&window[..half], cfg.alpha);
            outliers.push(c);
        }
    }
    Ok(HampelOutput { values, outliers })
}
