//! `PGW1` parameter checkpoint.
//!
//! All integers and floats are little-endian. Strings are a u16 byte length
//! followed by UTF-8 bytes.
//!
//! | field              | type                                        |
//! |--------------------|---------------------------------------------|
//! | magic              | `b"PGW1"`                                   |
//! | version            | u16 (= 1)                                   |
//! | model kind         | string (`pg-lode` or `convlstm`)            |
//! | grid               | height u32, width u32, lat0/lon0/cell f64   |
//! | gated              | u8 (0 or 1)                                 |
//! | config             | u16 count, then key string, value string    |
//! | parameter groups   | u32 count, then per group: name string, u16 rank, u32 dims, f64 values |
//!
//! The predictor normalization statistics are stored as the final two
//! groups, `norm.mean` and `norm.std`, each of shape `[6]`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::grid::{ChannelStats, GridError, GridSpec, N_PREDICTORS};
use crate::scalar::Scalar;

use super::{Model, ModelConfig, ModelError, ModelKind, ParamStore};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PGW1";
pub const CHECKPOINT_VERSION: u16 = 1;
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"PGW1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found}, expected {CHECKPOINT_VERSION}")]
    VersionMismatch { found: u16 },
    #[error("truncated checkpoint: need {needed} bytes, file has {got}")]
    Truncated { needed: usize, got: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not describe a valid model: {0}")]
    Model(#[from] ModelError),
    #[error("invalid grid: {0}")]
    Grid(#[from] GridError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A trained model with the statistics used to normalize its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub stats: ChannelStats<T>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_group<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_str(out, name);
    out.extend_from_slice(&(t.shape().len() as u16).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
}

fn config_entries(cfg: &ModelConfig) -> [(&'static str, String); 7] {
    [
        ("history_t", cfg.history_t.to_string()),
        ("lead_tau", cfg.lead_tau.to_string()),
        ("latent_channels", cfg.latent_channels.to_string()),
        ("hidden_channels", cfg.hidden_channels.to_string()),
        ("rk4_steps", cfg.rk4_steps.to_string()),
        ("seed", cfg.seed.to_string()),
        ("beta_init", cfg.beta_init.to_string()),
    ]
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let model = &ckpt.model;
    let spec = model.spec();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, model.kind().name());
    out.extend_from_slice(&(spec.height() as u32).to_le_bytes());
    out.extend_from_slice(&(spec.width() as u32).to_le_bytes());
    for v in [spec.lat0(), spec.lon0(), spec.cell_deg()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(model.gated as u8);
    let entries = config_entries(model.config());
    out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    for (k, v) in &entries {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    out.extend_from_slice(&(model.params().len() as u32 + 2).to_le_bytes());
    for (name, t) in model.params().iter() {
        put_group(&mut out, name, t);
    }
    let stat = |v: &[T]| Tensor::new(vec![v.len()], v.to_vec()).expect("1-d tensor");
    put_group(&mut out, NORM_MEAN, &stat(&ckpt.stats.mean));
    put_group(&mut out, NORM_STD, &stat(&ckpt.stats.std));
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated { needed: end, got: self.buf.len() });
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("string is not UTF-8".into()))
    }
}

fn parse<V: std::str::FromStr>(entries: &[(String, String)], key: &str) -> Result<V, CheckpointError> {
    let (_, v) = entries
        .iter()
        .find(|(k, _)| k == key)
        .ok_or_else(|| CheckpointError::Malformed(format!("config key {key:?} missing")))?;
    v.parse().map_err(|_| CheckpointError::Malformed(format!("config {key} = {v:?} does not parse")))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let magic: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().unwrap(),
        None => return Err(CheckpointError::Truncated { needed: 4, got: bytes.len() }),
    };
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let kind: ModelKind = r.string()?.parse()?;
    let (height, width) = (r.u32()? as usize, r.u32()? as usize);
    let spec = GridSpec::new(height, width, r.f64()?, r.f64()?, r.f64()?)?;
    let gated = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(CheckpointError::Malformed(format!("gated flag {b}"))),
    };
    let n_entries = r.u16()? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        entries.push((r.string()?, r.string()?));
    }
    let config = ModelConfig {
        history_t: parse(&entries, "history_t")?,
        lead_tau: parse(&entries, "lead_tau")?,
        latent_channels: parse(&entries, "latent_channels")?,
        hidden_channels: parse(&entries, "hidden_channels")?,
        rk4_steps: parse(&entries, "rk4_steps")?,
        seed: parse(&entries, "seed")?,
        beta_init: parse(&entries, "beta_init")?,
    };

    let n_groups = r.u32()? as usize;
    let mut params = ParamStore::new();
    let (mut mean, mut std) = (None, None);
    for _ in 0..n_groups {
        let name = r.string()?;
        let rank = r.u16()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or_else(|| CheckpointError::Malformed(format!("group {name:?} has absurd shape {dims:?}")))?;
        let raw = r.take(n * 8)?;
        let values: Vec<T> =
            raw.chunks_exact(8).map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())).unwrap()).collect();
        let tensor = Tensor::new(dims, values).map_err(ModelError::from)?;
        match name.as_str() {
            NORM_MEAN => mean = Some(tensor.into_data()),
            NORM_STD => std = Some(tensor.into_data()),
            _ => params.insert(name, tensor),
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let (Some(mean), Some(std)) = (mean, std) else {
        return Err(CheckpointError::Malformed("normalization statistics missing".into()));
    };
    if mean.len() != N_PREDICTORS || std.len() != N_PREDICTORS {
        return Err(CheckpointError::Malformed("normalization statistics must have 6 entries".into()));
    }
    let model = Model::from_parts(kind, config, spec, params, gated)?;
    Ok(Checkpoint { model, stats: ChannelStats { mean, std } })
}

pub fn write_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}
