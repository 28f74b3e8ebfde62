//! Butterworth low-pass design as a cascade of second-order sections.
//!
//! Analog prototype poles sit on the Butterworth circle at angles
//! `π(2k + n + 1) / 2n`. Each conjugate pair (and the real pole for odd
//! orders) is mapped through the bilinear transform with the cutoff prewarped
//! to `K = tan(π fc / fs)`, so `|H|` is exactly `1/√2` at the cutoff and every
//! section has unit DC gain.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::PreprocessError;

/// `y = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2) x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn first_order(k: f64) -> Self {
        let norm = 1.0 / (1.0 + k);
        Self {
            b0: k * norm,
            b1: k * norm,
            b2: 0.0,
            a1: (k - 1.0) * norm,
            a2: 0.0,
        }
    }

    /// Section with damping `zeta` (`-Re(pole) / ωc`).
    fn second_order(k: f64, zeta: f64) -> Self {
        let k2 = k * k;
        let norm = 1.0 / (1.0 + 2.0 * zeta * k + k2);
        Self {
            b0: k2 * norm,
            b1: 2.0 * k2 * norm,
            b2: k2 * norm,
            a1: 2.0 * (k2 - 1.0) * norm,
            a2: (1.0 - 2.0 * zeta * k + k2) * norm,
        }
    }

    pub fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + z_inv * self.b1 + z2 * self.b2) / (1.0 + z_inv * self.a1 + z2 * self.a2)
    }

    /// Roots of `z^2 + a1 z + a2` (a first-order section has one trivial root at 0).
    pub fn poles(&self) -> [Complex64; 2] {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        [(-self.a1 + disc) / 2.0, (-self.a1 - disc) / 2.0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ButterworthFilter {
    pub order: usize,
    pub cutoff_hz: f64,
    pub sample_rate_hz: f64,
    pub sections: Vec<Biquad>,
}

pub fn design_butterworth(
    order: usize,
    cutoff_hz: f64,
    sample_rate_hz: f64,
) -> Result<ButterworthFilter, PreprocessError> {
    if order == 0 {
        return Err(PreprocessError::InvalidConfig("butterworth order must be positive".into()));
    }
    if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
        return Err(PreprocessError::InvalidConfig(format!(
            "sample rate must be positive, got {sample_rate_hz}"
        )));
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < sample_rate_hz / 2.0) {
        return Err(PreprocessError::CutoffAboveNyquist {
            cutoff_hz,
            nyquist_hz: sample_rate_hz / 2.0,
        });
    }
    let k = (PI * cutoff_hz / sample_rate_hz).tan();
    let mut sections = Vec::with_capacity(order.div_ceil(2));
    if order % 2 == 1 {
        sections.push(Biquad::first_order(k));
    }
    for pair in 0..order / 2 {
        let zeta = (PI * (2 * pair + 1) as f64 / (2 * order) as f64).sin();
        sections.push(Biquad::second_order(k, zeta));
    }
    Ok(ButterworthFilter {
        order,
        cutoff_hz,
        sample_rate_hz,
        sections,
    })
}

impl ButterworthFilter {
    /// Complex gain at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate_hz;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        self.response(freq_hz).norm()
    }

    pub fn poles(&self) -> Vec<Complex64> {
        self.sections
            .iter()
            .flat_map(|s| {
                let p = s.poles();
                if s.a2 == 0.0 {
                    vec![p[0]]
                } else {
                    p.to_vec()
                }
            })
            .collect()
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }

    /// Causal filtering, zero initial state (transposed direct form II).
    pub fn apply(&self, series: &[f64]) -> Vec<f64> {
        let mut out = series.to_vec();
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in out.iter_mut() {
                let x = *v;
                let y = s.b0 * x + z1;
                z1 = s.b1 * x - s.a1 * y + z2;
                z2 = s.b2 * x - s.a2 * y;
                *v = y;
            }
        }
        out
    }

    /// Forward pass, then a second pass over the reversed output.
    pub fn apply_zero_phase(&self, series: &[f64]) -> Vec<f64> {
        let mut fwd = self.apply(series);
        fwd.reverse();
        let mut back = self.apply(&fwd);
        back.reverse();
        back
    }
}

pub fn butterworth_apply(filter: &ButterworthFilter, series: &[f64]) -> Vec<f64> {
    filter.apply(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section_count_and_stability() {
        for order in 1..=8 {
            let f = design_butterworth(order, 10.0, 100.0).unwrap();
            assert_eq!(f.sections.len(), order.div_ceil(2));
            assert_eq!(f.poles().len(), order);
            assert!(f.is_stable());
        }
    }

    #[test]
    fn cutoff_at_or_above_nyquist_is_rejected() {
        assert!(matches!(
            design_butterworth(5, 50.0, 100.0),
            Err(PreprocessError::CutoffAboveNyquist { .. })
        ));
        assert!(design_butterworth(5, 0.0, 100.0).is_err());
        assert!(design_butterworth(0, 10.0, 100.0).is_err());
    }

    #[test]
    fn dc_gain_is_one_and_cutoff_is_half_power() {
        let f = design_butterworth(5, 10.0, 100.0).unwrap();
        assert!((f.magnitude(0.0) - 1.0).abs() < 1e-9);
        assert!((f.magnitude(10.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3);
        assert!(f.magnitude(30.0) < 0.02);
    }

    #[test]
    fn constant_input_settles_to_constant() {
        let f = design_butterworth(5, 10.0, 100.0).unwrap();
        let y = f.apply(&vec![3.5; 400]);
        assert!(y[200..].iter().all(|v| (v - 3.5).abs() < 1e-6));
    }

    #[test]
    fn nyquist_tone_is_removed() {
        let f = design_butterworth(5, 10.0, 100.0).unwrap();
        let x: Vec<f64> = (0..600).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let y = f.apply(&x);
        assert!(y[300..].iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn zero_phase_keeps_constant_and_length() {
        let f = design_butterworth(5, 10.0, 100.0).unwrap();
        let y = f.apply_zero_phase(&vec![1.0; 500]);
        assert_eq!(y.len(), 500);
        assert!((y[250] - 1.0).abs() < 1e-6);
    }
}
