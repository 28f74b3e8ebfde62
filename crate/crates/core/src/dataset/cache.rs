//! Binary dataset cache.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CSIW" | version u32 | classes u32 | window u32 | subcarriers u32
//! then for train, val, test:
//!   count u32, and per window:
//!     label u32 | session u32 | start u32 | amplitude W*K f32 | phase W*K f32
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{DatasetError, WindowSample, WindowSource, WindowedDataset};

pub const CACHE_MAGIC: &[u8; 4] = b"CSIW";
pub const CACHE_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), DatasetError> {
    let v = u32::try_from(v).map_err(|_| DatasetError::Cache(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_dataset(ds: &WindowedDataset) -> Result<Vec<u8>, DatasetError> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    put_u32(&mut out, CACHE_VERSION as usize)?;
    put_u32(&mut out, ds.class_count)?;
    put_u32(&mut out, ds.window_len)?;
    put_u32(&mut out, ds.subcarriers)?;
    for split in [&ds.train, &ds.val, &ds.test] {
        put_u32(&mut out, split.len())?;
        for w in split {
            if w.amplitude.dim() != (ds.window_len, ds.subcarriers) || w.phase.dim() != w.amplitude.dim() {
                return Err(DatasetError::Cache(format!("window shape {:?} disagrees with header", w.amplitude.dim())));
            }
            put_u32(&mut out, w.label)?;
            put_u32(&mut out, w.source.session)?;
            put_u32(&mut out, w.source.start)?;
            for v in w.amplitude.iter().chain(w.phase.iter()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DatasetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| DatasetError::Cache("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>, DatasetError> {
        let bytes = self.take(rows * cols * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<WindowedDataset, DatasetError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CACHE_MAGIC {
        return Err(DatasetError::Cache("bad magic, not a CSIW file".into()));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION as usize {
        return Err(DatasetError::Cache(format!("unsupported version {version}")));
    }
    let class_count = r.u32()?;
    let window_len = r.u32()?;
    let subcarriers = r.u32()?;
    let mut splits: [Vec<WindowSample>; 3] = Default::default();
    for split in &mut splits {
        let n = r.u32()?;
        for _ in 0..n {
            let label = r.u32()?;
            let session = r.u32()?;
            let start = r.u32()?;
            if label >= class_count {
                return Err(DatasetError::Cache(format!("label {label} outside {class_count} classes")));
            }
            let amplitude = r.matrix(window_len, subcarriers)?;
            let phase = r.matrix(window_len, subcarriers)?;
            split.push(WindowSample {
                amplitude,
                phase,
                label,
                source: WindowSource { session, start },
            });
        }
    }
    if r.pos != buf.len() {
        return Err(DatasetError::Cache(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let [train, val, test] = splits;
    Ok(WindowedDataset {
        train,
        val,
        test,
        class_count,
        window_len,
        subcarriers,
        overlap: 0.0,
        normalization: None,
    })
}

pub fn write_dataset_cache(path: impl AsRef<Path>, ds: &WindowedDataset) -> Result<(), DatasetError> {
    let path = path.as_ref();
    fs::write(path, encode_dataset(ds)?).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a cache file. Overlap and normalization are not stored.
pub fn read_dataset_cache(path: impl AsRef<Path>) -> Result<WindowedDataset, DatasetError> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_dataset(&buf)
}
