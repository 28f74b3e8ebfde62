//! CSI packet log ingestion.
//!
//! A log is plain text, one packet per line:
//!
//! ```text
//! timestamp, re0,im0, re1,im1, ...
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. [`FormatConfig`]
//! selects the I/Q order inside each pair and whether the first line is a
//! header.

use std::f64::consts::PI;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use thiserror::Error;

/// Fraction of malformed data lines above which a log is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("zero valid records")]
    NoRecords,
    #[error("session needs at least 2 records, got {0}")]
    TooFewRecords(usize),
    #[error("inconsistent subcarrier count at line {line}: expected {expected}, found {found}")]
    InconsistentK {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{malformed} of {total} data lines malformed (limit 10%); check the I/Q format options")]
    TooManyMalformed { malformed: usize, total: usize },
    #[error("subcarrier indices must be strictly increasing and match K={0}")]
    BadSubcarrierIndices(usize),
    #[error("sample rate must be positive, got {0}")]
    BadSampleRate(f64),
    #[error("record {0} has a different subcarrier layout than the first record")]
    MixedLayout(usize),
}

/// Order of the two integers making up one complex sample in the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IqOrder {
    #[default]
    RealFirst,
    ImagFirst,
}

/// Parser options.
#[derive(Debug, Clone, PartialEq)]
pub struct FormatConfig {
    pub iq_order: IqOrder,
    /// Skip the first non-empty line.
    pub header: bool,
    /// Expected K; inferred from the first valid line when `None`.
    pub subcarriers: Option<usize>,
    /// Explicit subcarrier index layout; [`default_subcarrier_indices`] otherwise.
    pub subcarrier_indices: Option<Vec<i32>>,
    pub sample_rate_hz: f64,
}

impl Default for FormatConfig {
    fn default() -> Self {
        Self {
            iq_order: IqOrder::RealFirst,
            header: false,
            subcarriers: None,
            subcarrier_indices: None,
            sample_rate_hz: 100.0,
        }
    }
}

/// Index layout used when the log does not carry one.
///
/// Even K maps to the symmetric OFDM layout without the DC bin
/// (`-K/2..=-1, 1..=K/2`); odd K maps to `0..K`.
pub fn default_subcarrier_indices(k: usize) -> Vec<i32> {
    let k_i = k as i32;
    if k % 2 == 0 {
        (-k_i / 2..0).chain(1..=k_i / 2).collect()
    } else {
        (0..k_i).collect()
    }
}

/// Session class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Label {
    Class(usize),
    #[default]
    Unlabeled,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Unlabeled => f.write_str("unlabeled"),
        }
    }
}

/// One packet: timestamp plus the per-subcarrier channel estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiRecord {
    pub timestamp: f64,
    pub iq: Vec<Complex64>,
    pub subcarrier_indices: Vec<i32>,
}

impl CsiRecord {
    pub fn k(&self) -> usize {
        self.iq.len()
    }
}

/// Time-ordered packets sharing one subcarrier layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSession {
    records: Vec<CsiRecord>,
    sample_rate_hz: f64,
    pub label: Label,
    pub orientation_deg: Option<i32>,
}

impl CsiSession {
    /// Validates the layout and sorts records by timestamp (stable).
    pub fn new(mut records: Vec<CsiRecord>, sample_rate_hz: f64) -> Result<Self, IngestError> {
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(IngestError::BadSampleRate(sample_rate_hz));
        }
        if records.len() < 2 {
            return Err(if records.is_empty() {
                IngestError::NoRecords
            } else {
                IngestError::TooFewRecords(records.len())
            });
        }
        let first = &records[0];
        let k = first.k();
        if k == 0
            || first.subcarrier_indices.len() != k
            || first.subcarrier_indices.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(IngestError::BadSubcarrierIndices(k));
        }
        let layout = first.subcarrier_indices.clone();
        for (i, r) in records.iter().enumerate().skip(1) {
            if r.k() != k || r.subcarrier_indices != layout {
                return Err(IngestError::MixedLayout(i));
            }
        }
        records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        Ok(Self {
            records,
            sample_rate_hz,
            label: Label::Unlabeled,
            orientation_deg: None,
        })
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }

    pub fn records(&self) -> &[CsiRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn k(&self) -> usize {
        self.records[0].k()
    }

    pub fn subcarrier_indices(&self) -> &[i32] {
        &self.records[0].subcarrier_indices
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }
}

/// Paired T×K amplitude and phase matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudePhaseMatrix {
    pub amplitude: Array2<f64>,
    pub phase: Array2<f64>,
    pub subcarrier_indices: Vec<i32>,
    pub sample_rate_hz: f64,
}

impl AmplitudePhaseMatrix {
    pub fn rows(&self) -> usize {
        self.amplitude.nrows()
    }

    pub fn k(&self) -> usize {
        self.amplitude.ncols()
    }
}

/// Outcome of a successful parse.
#[derive(Debug, Clone)]
pub struct ParsedLog {
    pub session: CsiSession,
    /// Line numbers (1-based) that were skipped as malformed.
    pub malformed_lines: Vec<usize>,
}

impl ParsedLog {
    pub fn malformed(&self) -> usize {
        self.malformed_lines.len()
    }
}

pub fn parse_csi_log(path: impl AsRef<Path>, cfg: &FormatConfig) -> Result<ParsedLog, IngestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csi_str(&text, cfg)
}

fn parse_line(line: &str) -> Option<(f64, Vec<i64>)> {
    let mut fields = line.split(',').map(str::trim);
    let ts: f64 = fields.next()?.parse().ok()?;
    if !ts.is_finite() {
        return None;
    }
    let ints = fields.map(|f| f.parse::<i64>().ok()).collect::<Option<Vec<_>>>()?;
    if ints.is_empty() || ints.len() % 2 != 0 {
        return None;
    }
    Some((ts, ints))
}

pub fn parse_csi_str(text: &str, cfg: &FormatConfig) -> Result<ParsedLog, IngestError> {
    let mut records = Vec::new();
    let mut malformed_lines = Vec::new();
    let mut expected_k = cfg.subcarriers;
    let mut indices: Option<Vec<i32>> = None;
    let mut data_lines = 0usize;
    let mut header_pending = cfg.header;

    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if header_pending {
            header_pending = false;
            continue;
        }
        data_lines += 1;
        let Some((timestamp, ints)) = parse_line(line) else {
            malformed_lines.push(n + 1);
            continue;
        };
        let k = ints.len() / 2;
        match expected_k {
            Some(e) if e != k => {
                return Err(IngestError::InconsistentK {
                    line: n + 1,
                    expected: e,
                    found: k,
                })
            }
            _ => expected_k = Some(k),
        }
        let layout = indices.get_or_insert_with(|| {
            cfg.subcarrier_indices
                .clone()
                .unwrap_or_else(|| default_subcarrier_indices(k))
        });
        if layout.len() != k {
            return Err(IngestError::BadSubcarrierIndices(k));
        }
        let iq = ints
            .chunks_exact(2)
            .map(|p| match cfg.iq_order {
                IqOrder::RealFirst => Complex64::new(p[0] as f64, p[1] as f64),
                IqOrder::ImagFirst => Complex64::new(p[1] as f64, p[0] as f64),
            })
            .collect();
        records.push(CsiRecord {
            timestamp,
            iq,
            subcarrier_indices: layout.clone(),
        });
    }

    if records.is_empty() {
        return Err(IngestError::NoRecords);
    }
    if malformed_lines.len() as f64 > MAX_MALFORMED_FRACTION * data_lines as f64 {
        return Err(IngestError::TooManyMalformed {
            malformed: malformed_lines.len(),
            total: data_lines,
        });
    }
    let session = CsiSession::new(records, cfg.sample_rate_hz)?;
    Ok(ParsedLog {
        session,
        malformed_lines,
    })
}

/// Renders a session in the log format [`parse_csi_str`] reads.
///
/// Components are rounded to the nearest integer.
pub fn format_csi_log(session: &CsiSession, iq_order: IqOrder) -> String {
    let mut out = String::with_capacity(session.len() * (12 + session.k() * 10));
    for r in session.records() {
        let _ = write!(out, "{:.6}", r.timestamp);
        for c in &r.iq {
            let (a, b) = match iq_order {
                IqOrder::RealFirst => (c.re, c.im),
                IqOrder::ImagFirst => (c.im, c.re),
            };
            let _ = write!(out, ", {},{}", a.round() as i64, b.round() as i64);
        }
        out.push('\n');
    }
    out
}

pub fn write_csi_log(
    session: &CsiSession,
    path: impl AsRef<Path>,
    iq_order: IqOrder,
) -> Result<(), IngestError> {
    let path = path.as_ref();
    fs::write(path, format_csi_log(session, iq_order)).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Amplitude `|H|` and phase `atan2(Im, Re)` per cell.
///
/// A zero channel estimate yields amplitude 0 and phase 0. The phase lies in
/// `(-π, π]`; `atan2` returns `-π` only for a negative zero imaginary part,
/// which is folded to `+π`.
pub fn extract_amplitude_phase(session: &CsiSession) -> AmplitudePhaseMatrix {
    let (t, k) = (session.len(), session.k());
    let mut amplitude = Array2::zeros((t, k));
    let mut phase = Array2::zeros((t, k));
    for (i, r) in session.records().iter().enumerate() {
        for (j, c) in r.iq.iter().enumerate() {
            amplitude[[i, j]] = c.re.hypot(c.im);
            phase[[i, j]] = if c.re == 0.0 && c.im == 0.0 {
                0.0
            } else {
                let p = c.im.atan2(c.re);
                if p <= -PI {
                    PI
                } else {
                    p
                }
            };
        }
    }
    AmplitudePhaseMatrix {
        amplitude,
        phase,
        subcarrier_indices: session.subcarrier_indices().to_vec(),
        sample_rate_hz: session.sample_rate_hz(),
    }
}

/// Gap between consecutive packets exceeding three nominal periods.
#[derive(Debug, Clone, PartialEq)]
pub struct Gap {
    /// Index of the packet after the gap.
    pub index: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub records: usize,
    pub k: usize,
    /// Last minus first timestamp plus one nominal period.
    pub duration_s: f64,
    pub nominal_rate_hz: f64,
    pub measured_rate_hz: f64,
    /// `(measured - nominal) / nominal`.
    pub rate_deviation: f64,
    pub gaps: Vec<Gap>,
}

impl SessionReport {
    /// `key=value` lines for machine consumption.
    pub fn to_key_values(&self) -> String {
        let gaps: Vec<String> = self.gaps.iter().map(|g| format!("{}:{}", g.index, g.seconds)).collect();
        format!(
            "records={}\nk={}\nduration_s={}\nnominal_rate_hz={}\nmeasured_rate_hz={}\nrate_deviation={}\ngap_count={}\ngaps={}\n",
            self.records,
            self.k,
            self.duration_s,
            self.nominal_rate_hz,
            self.measured_rate_hz,
            self.rate_deviation,
            self.gaps.len(),
            gaps.join(";")
        )
    }
}

impl fmt::Display for SessionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "packets      {}", self.records)?;
        writeln!(f, "subcarriers  {}", self.k)?;
        writeln!(f, "duration     {:.3} s", self.duration_s)?;
        writeln!(
            f,
            "packet rate  {:.3} Hz (nominal {:.3} Hz, {:+.3}%)",
            self.measured_rate_hz,
            self.nominal_rate_hz,
            100.0 * self.rate_deviation
        )?;
        write!(f, "gaps         {}", self.gaps.len())?;
        for g in self.gaps.iter().take(20) {
            write!(f, "\n  before packet {}: {:.3} s", g.index, g.seconds)?;
        }
        if self.gaps.len() > 20 {
            write!(f, "\n  ... {} more", self.gaps.len() - 20)?;
        }
        Ok(())
    }
}

pub fn validate_session(session: &CsiSession) -> SessionReport {
    let recs = session.records();
    let fs = session.sample_rate_hz();
    let span = recs[recs.len() - 1].timestamp - recs[0].timestamp;
    let limit = 3.0 / fs;
    let gaps = recs
        .windows(2)
        .enumerate()
        .filter_map(|(i, w)| {
            let dt = w[1].timestamp - w[0].timestamp;
            (dt > limit).then_some(Gap {
                index: i + 1,
                seconds: dt,
            })
        })
        .collect();
    let measured = if span > 0.0 {
        (recs.len() - 1) as f64 / span
    } else {
        f64::INFINITY
    };
    SessionReport {
        records: recs.len(),
        k: session.k(),
        duration_s: span + 1.0 / fs,
        nominal_rate_hz: fs,
        measured_rate_hz: measured,
        rate_deviation: (measured - fs) / fs,
        gaps,
    }
}
