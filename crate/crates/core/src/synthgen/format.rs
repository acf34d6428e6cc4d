//! `PGL1` binary dataset format.
//!
//! All integers and floats are little-endian:
//!
//! | field            | type            |
//! |------------------|-----------------|
//! | magic            | `b"PGL1"`       |
//! | version          | u16 (= 1)       |
//! | height, width    | u32, u32        |
//! | lat0, lon0, cell | f64, f64, f64   |
//! | channel count    | u16 (= 7)       |
//! | day count        | u32             |
//! | first day index  | u32             |
//! | payload          | per day, per channel (TCWV, CAPE, ω500, u850, v850, SP, rain): `H·W` row-major f32 |
//! | extreme truth    | `days·H·W` bits, day-major then row-major, LSB first, zero padded to a byte |

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::grid::{GridError, GridSpec, PredictorStack, RainField, N_PREDICTORS};
use crate::scalar::Scalar;

use super::{SampleSet, SynthError};

pub const DATASET_MAGIC: [u8; 4] = *b"PGL1";
pub const DATASET_VERSION: u16 = 1;
const CHANNELS: u16 = N_PREDICTORS as u16 + 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 8 * 3 + 2 + 4 + 4;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"PGL1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {found}, expected {DATASET_VERSION}")]
    VersionMismatch { found: u16 },
    #[error("truncated payload: need {needed} bytes, file has {got}")]
    Truncated { needed: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid data: {0}")]
    Invalid(#[from] SynthError),
    #[error("invalid grid: {0}")]
    Grid(#[from] GridError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(FormatError::Truncated { needed: end, got: self.buf.len() });
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serializes a sample set. Values are stored as `f32`.
pub fn encode_dataset<T: Scalar>(set: &SampleSet<T>) -> Vec<u8> {
    let spec = set.spec();
    let days = set.len();
    let px = spec.len();
    let mut out = Vec::with_capacity(HEADER_LEN + days * px * 4 * CHANNELS as usize + (days * px).div_ceil(8));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.height() as u32).to_le_bytes());
    out.extend_from_slice(&(spec.width() as u32).to_le_bytes());
    for v in [spec.lat0(), spec.lon0(), spec.cell_deg()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&CHANNELS.to_le_bytes());
    out.extend_from_slice(&(days as u32).to_le_bytes());
    out.extend_from_slice(&(set.first_day() as u32).to_le_bytes());
    for (stack, rain) in set.predictors().iter().zip(set.targets()) {
        for channel in stack.channels().iter().map(Vec::as_slice).chain(std::iter::once(rain.values())) {
            for v in channel {
                out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
            }
        }
    }
    let mut bits = vec![0u8; (days * px).div_ceil(8)];
    for (i, &b) in set.extreme_truth().iter().flatten().enumerate() {
        if b {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bits);
    out
}

pub fn decode_dataset<T: Scalar>(bytes: &[u8]) -> Result<SampleSet<T>, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().unwrap(),
        None => return Err(FormatError::Truncated { needed: 4, got: bytes.len() }),
    };
    if magic != DATASET_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    r.take(4)?;
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(FormatError::VersionMismatch { found: version });
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let (lat0, lon0, cell) = (r.f64()?, r.f64()?, r.f64()?);
    let channels = r.u16()?;
    let days = r.u32()? as usize;
    let first_day = r.u32()? as usize;
    if channels != CHANNELS {
        return Err(FormatError::DimensionMismatch(format!("{channels} channels, expected {CHANNELS}")));
    }
    if height == 0 || width == 0 || days == 0 {
        return Err(FormatError::DimensionMismatch(format!("{days} days of {height}x{width}")));
    }
    let spec = GridSpec::new(height, width, lat0, lon0, cell)?;
    let px = spec.len();
    let expected_len = HEADER_LEN + days * px * 4 * CHANNELS as usize + (days * px).div_ceil(8);
    if bytes.len() < expected_len {
        return Err(FormatError::Truncated { needed: expected_len, got: bytes.len() });
    }
    if bytes.len() > expected_len {
        return Err(FormatError::DimensionMismatch(format!(
            "{} trailing bytes after {days} days of {height}x{width}",
            bytes.len() - expected_len
        )));
    }

    let read_plane = |r: &mut Reader<'_>| -> Result<Vec<T>, FormatError> {
        let raw = r.take(px * 4)?;
        Ok(raw.chunks_exact(4).map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap()).collect())
    };
    let mut predictors = Vec::with_capacity(days);
    let mut targets = Vec::with_capacity(days);
    for d in 0..days {
        let chans = (0..N_PREDICTORS).map(|_| read_plane(&mut r)).collect::<Result<Vec<_>, _>>()?;
        predictors.push(PredictorStack::new(spec, chans, first_day + d)?);
        targets.push(RainField::new(spec, read_plane(&mut r)?, first_day + d)?);
    }
    let bits = r.take((days * px).div_ceil(8))?;
    let truth =
        (0..days).map(|d| (0..px).map(|p| bits[(d * px + p) / 8] >> ((d * px + p) % 8) & 1 == 1).collect()).collect();
    Ok(SampleSet::new(predictors, targets, truth)?)
}

pub fn write_dataset<T: Scalar>(set: &SampleSet<T>, path: impl AsRef<Path>) -> Result<(), FormatError> {
    fs::write(path, encode_dataset(set))?;
    Ok(())
}

pub fn read_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<SampleSet<T>, FormatError> {
    decode_dataset(&fs::read(path)?)
}
