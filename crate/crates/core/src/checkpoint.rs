//! Single-file checkpoints: a JSON header followed by raw little-endian tensors.
//!
//! Layout: the 8-byte magic `TDNETCKP`, the header length as a little-endian u64, the
//! JSON header, then every parameter tensor followed by every velocity tensor.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"TDNETCKP";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    /// Bytes per stored value: 4 or 8.
    value_bytes: usize,
    config: TrainConfig,
    iteration: usize,
    best: Option<BestScore>,
    param_lengths: Vec<usize>,
    has_velocity: bool,
    crate_version: String,
}

/// Best validation score seen so far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestScore {
    pub iteration: usize,
    pub mean_dsc: f64,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    /// Number of completed iterations.
    pub iteration: usize,
    pub best: Option<BestScore>,
    pub params: Vec<Vec<T>>,
    /// Optimizer momentum buffers, parallel to `params`; empty when not stored.
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Writes to a temporary sibling and renames, so readers never see a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let value_bytes = std::mem::size_of::<T>();
        let has_velocity = !self.velocity.is_empty();
        if has_velocity && self.velocity.len() != self.params.len() {
            return Err(Error::Checkpoint("velocity and parameter lists differ in length".into()));
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            value_bytes,
            config: self.config.clone(),
            iteration: self.iteration,
            best: self.best,
            param_lengths: self.params.iter().map(Vec::len).collect(),
            has_velocity,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let json = serde_json::to_vec(&header)?;
        let total: usize = self.params.iter().map(Vec::len).sum::<usize>() * if has_velocity { 2 } else { 1 };
        let mut buf = Vec::with_capacity(16 + json.len() + total * value_bytes);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for tensor in self.params.iter().chain(self.velocity.iter()) {
            for &v in tensor {
                match value_bytes {
                    4 => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                    _ => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
                }
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Reads a checkpoint, converting stored values to `T` if the precision differs.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", header.format_version)));
        }
        if header.value_bytes != 4 && header.value_bytes != 8 {
            return Err(bad("unsupported value width"));
        }
        let count: usize = header.param_lengths.iter().sum::<usize>() * if header.has_velocity { 2 } else { 1 };
        let body = &bytes[body_start..];
        if body.len() != count * header.value_bytes {
            return Err(bad("tensor data has the wrong length"));
        }
        let mut values = body.chunks_exact(header.value_bytes).map(|c| match c.len() {
            4 => T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
            _ => T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
        });
        let mut read_tensors = || -> Vec<Vec<T>> {
            header.param_lengths.iter().map(|&n| values.by_ref().take(n).collect()).collect()
        };
        let params = read_tensors();
        let velocity = if header.has_velocity { read_tensors() } else { Vec::new() };
        Ok(Self {
            config: header.config,
            iteration: header.iteration,
            best: header.best,
            params,
            velocity,
        })
    }
}
