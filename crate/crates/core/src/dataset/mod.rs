//! Sequential train/val/test splitting and sliding-window extraction.
//!
//! Each session is split on its own (first 70% train, next 10% validation,
//! last 20% test) and only then cut into overlapping windows, so no window
//! spans two splits.

mod cache;
mod manifest;

pub use cache::{read_dataset_cache, write_dataset_cache, CACHE_MAGIC, CACHE_VERSION};
pub use manifest::{parse_manifest, read_manifest, write_manifest, ManifestEntry};

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ingest::AmplitudePhaseMatrix;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("{split} segment of {len} rows is shorter than one window of {window}")]
    SegmentTooShort {
        split: &'static str,
        len: usize,
        window: usize,
    },
    #[error("fewer than 2 classes ({0} found)")]
    TooFewClasses(usize),
    #[error("class {class} is missing from the {split} split")]
    MissingClass { class: usize, split: &'static str },
    #[error("session {session} has {found} subcarriers, expected {expected}")]
    SubcarrierMismatch {
        session: usize,
        expected: usize,
        found: usize,
    },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("dataset cache: {0}")]
    Cache(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<(), DatasetError> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !(*f > 0.0)) || ((all.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidConfig(format!(
                "split fractions must be positive and sum to 1, got {all:?}"
            )));
        }
        Ok(())
    }

    /// Row ranges for a series of `rows` rows: boundaries at
    /// `floor(train * rows)` and `floor((train + val) * rows)`.
    pub fn boundaries(&self, rows: usize) -> [Range<usize>; 3] {
        // guard against 0.7 + 0.1 = 0.7999... style rounding
        let cut = |f: f64| ((f * rows as f64) + 1e-9).floor() as usize;
        let a = cut(self.train).min(rows);
        let b = cut(self.train + self.val).clamp(a, rows);
        [0..a, a..b, b..rows]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub len: usize,
    pub overlap: f64,
    /// Window length counts rows of the temporally reduced series. When
    /// false, `len` counts raw packets and is halved on reduced data.
    pub on_reduced: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            len: 100,
            overlap: 0.5,
            on_reduced: true,
        }
    }
}

impl WindowConfig {
    pub fn stride(&self) -> usize {
        stride_for(self.len, self.overlap)
    }

    /// Window configuration in rows of the data actually windowed.
    pub fn effective(&self, data_is_reduced: bool) -> WindowConfig {
        if data_is_reduced && !self.on_reduced {
            WindowConfig {
                len: (self.len / 2).max(1),
                on_reduced: true,
                ..*self
            }
        } else {
            *self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub window: WindowConfig,
    pub split: SplitFractions,
    /// Shuffle the train split once at build time.
    pub shuffle_train: bool,
    pub seed: u64,
    /// Z-score both channels per subcarrier with train statistics.
    pub normalize: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            split: SplitFractions::default(),
            shuffle_train: false,
            seed: 0,
            normalize: false,
        }
    }
}

fn stride_for(window_len: usize, overlap: f64) -> usize {
    ((window_len as f64) * (1.0 - overlap)).round().max(1.0) as usize
}

/// `floor((len - window) / stride) + 1`, or 0 when the series is too short.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if len < window || window == 0 || stride == 0 {
        0
    } else {
        (len - window) / stride + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSource {
    pub session: usize,
    /// First row, relative to the start of the split segment.
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub amplitude: Array2<f64>,
    pub phase: Array2<f64>,
    pub label: usize,
    pub source: WindowSource,
}

/// The three contiguous segments of one session.
#[derive(Debug, Clone)]
pub struct SplitSegments<'a> {
    pub train: (ArrayView2<'a, f64>, ArrayView2<'a, f64>),
    pub val: (ArrayView2<'a, f64>, ArrayView2<'a, f64>),
    pub test: (ArrayView2<'a, f64>, ArrayView2<'a, f64>),
}

pub fn sequential_split<'a>(
    m: &'a AmplitudePhaseMatrix,
    fractions: &SplitFractions,
    window_len: usize,
) -> Result<SplitSegments<'a>, DatasetError> {
    fractions.validate()?;
    let [tr, va, te] = fractions.boundaries(m.rows());
    for (name, r) in [("train", &tr), ("val", &va), ("test", &te)] {
        if r.len() < window_len {
            return Err(DatasetError::SegmentTooShort {
                split: name,
                len: r.len(),
                window: window_len,
            });
        }
    }
    let seg = |r: Range<usize>| {
        (
            m.amplitude.slice(s![r.clone(), ..]),
            m.phase.slice(s![r, ..]),
        )
    };
    Ok(SplitSegments {
        train: seg(tr),
        val: seg(va),
        test: seg(te),
    })
}

pub fn make_windows(
    amplitude: ArrayView2<'_, f64>,
    phase: ArrayView2<'_, f64>,
    window_len: usize,
    overlap: f64,
    label: usize,
    session: usize,
) -> Result<Vec<WindowSample>, DatasetError> {
    if !(0.0..1.0).contains(&overlap) || window_len == 0 {
        return Err(DatasetError::InvalidConfig(format!(
            "window length {window_len} with overlap {overlap}"
        )));
    }
    if amplitude.dim() != phase.dim() {
        return Err(DatasetError::InvalidConfig(format!(
            "amplitude {:?} and phase {:?} differ",
            amplitude.dim(),
            phase.dim()
        )));
    }
    let len = amplitude.nrows();
    if len < window_len {
        return Err(DatasetError::SegmentTooShort {
            split: "segment",
            len,
            window: window_len,
        });
    }
    let stride = stride_for(window_len, overlap);
    Ok((0..window_count(len, window_len, stride))
        .map(|i| {
            let start = i * stride;
            let rows = s![start..start + window_len, ..];
            WindowSample {
                amplitude: amplitude.slice(rows).to_owned(),
                phase: phase.slice(rows).to_owned(),
                label,
                source: WindowSource { session, start },
            }
        })
        .collect())
}

/// A preprocessed session with its class id.
#[derive(Debug, Clone)]
pub struct LabeledMatrix {
    pub matrix: AmplitudePhaseMatrix,
    pub label: usize,
}

/// Per-subcarrier mean and standard deviation of each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub amp_mean: Vec<f64>,
    pub amp_std: Vec<f64>,
    pub phase_mean: Vec<f64>,
    pub phase_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub class_count: usize,
    pub window_len: usize,
    pub subcarriers: usize,
    pub overlap: f64,
    pub normalization: Option<Normalization>,
}

impl WindowedDataset {
    pub fn shuffle_train(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.train.shuffle(&mut rng);
    }

    fn splits(&self) -> [(&'static str, &[WindowSample]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    /// Computes train statistics and z-scores every split.
    pub fn normalize(&mut self) -> Normalization {
        let k = self.subcarriers;
        let stats = |pick: fn(&WindowSample) -> &Array2<f64>, data: &[WindowSample]| {
            let mut sum = vec![0.0; k];
            let mut sq = vec![0.0; k];
            let mut n = 0usize;
            for w in data {
                for row in pick(w).rows() {
                    for (j, v) in row.iter().enumerate() {
                        sum[j] += v;
                        sq[j] += v * v;
                    }
                    n += 1;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            let std = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-12))
                .collect::<Vec<_>>();
            (mean, std)
        };
        let (amp_mean, amp_std) = stats(|w| &w.amplitude, &self.train);
        let (phase_mean, phase_std) = stats(|w| &w.phase, &self.train);
        let norm = Normalization {
            amp_mean,
            amp_std,
            phase_mean,
            phase_std,
        };
        self.apply_normalization(&norm);
        norm
    }

    pub fn apply_normalization(&mut self, norm: &Normalization) {
        let apply = |m: &mut Array2<f64>, mean: &[f64], std: &[f64]| {
            for mut row in m.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[j]) / std[j];
                }
            }
        };
        for w in self.train.iter_mut().chain(&mut self.val).chain(&mut self.test) {
            apply(&mut w.amplitude, &norm.amp_mean, &norm.amp_std);
            apply(&mut w.phase, &norm.phase_mean, &norm.phase_std);
        }
        self.normalization = Some(norm.clone());
    }
}

/// Splits each session, windows each segment, and pools the windows.
///
/// `data_is_reduced` tells whether the matrices went through temporal pair
/// averaging (relevant when windows are specified in raw packets).
pub fn build_dataset(
    sessions: &[LabeledMatrix],
    cfg: &DatasetConfig,
    data_is_reduced: bool,
) -> Result<WindowedDataset, DatasetError> {
    let win = cfg.window.effective(data_is_reduced);
    let class_count = sessions.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let distinct = {
        let mut l: Vec<usize> = sessions.iter().map(|s| s.label).collect();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(DatasetError::TooFewClasses(distinct));
    }
    let k = sessions[0].matrix.k();
    let mut ds = WindowedDataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        class_count,
        window_len: win.len,
        subcarriers: k,
        overlap: win.overlap,
        normalization: None,
    };
    for (id, s) in sessions.iter().enumerate() {
        if s.matrix.k() != k {
            return Err(DatasetError::SubcarrierMismatch {
                session: id,
                expected: k,
                found: s.matrix.k(),
            });
        }
        let seg = sequential_split(&s.matrix, &cfg.split, win.len)?;
        for ((a, p), out) in [seg.train, seg.val, seg.test]
            .into_iter()
            .zip([&mut ds.train, &mut ds.val, &mut ds.test])
        {
            out.extend(make_windows(a, p, win.len, win.overlap, s.label, id)?);
        }
    }
    for (name, split) in ds.splits() {
        let mut seen = vec![false; class_count];
        split.iter().for_each(|w| seen[w.label] = true);
        if let Some(class) = seen.iter().position(|s| !s) {
            return Err(DatasetError::MissingClass { class, split: name });
        }
    }
    if cfg.shuffle_train {
        ds.shuffle_train(cfg.seed);
    }
    if cfg.normalize {
        ds.normalize();
    }
    Ok(ds)
}
