//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes   "MOEBUFCK"
//! version      u32       1
//! config       9 x 8     blocks, d_model, vocab, max_seq_len, experts,
//!                        top_k (u64), capacity_slack (f64 bits), d_ff, seed (u64)
//! matrices     u64       count
//! per matrix   u64 rows, u64 cols, rows*cols f64 in row-major order
//! ```
//!
//! Matrices appear in `ModelConfig::matrix_shapes` order. Reading checks the
//! magic, the version and every shape against the embedded config, so a
//! round trip is bit-exact and a foreign file is rejected before any weights
//! are trusted.

use std::fs;
use std::path::Path;

use moebuf_core::{Matrix, ModelConfig, ToyModel};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MOEBUFCK";
pub const VERSION: u32 = 1;

pub fn encode(model: &ToyModel) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [cfg.blocks, cfg.d_model, cfg.vocab, cfg.max_seq_len, cfg.experts, cfg.top_k] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&cfg.capacity_slack.to_bits().to_le_bytes());
    out.extend_from_slice(&(cfg.d_ff as u64).to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    let matrices = model.matrices();
    out.extend_from_slice(&(matrices.len() as u64).to_le_bytes());
    for m in matrices {
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.at)));
        };
        let bytes = &self.buf[self.at..end];
        self.at = end;
        Ok(bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit usize")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ToyModel> {
    let mut r = Reader { buf: bytes, at: 0 };
    let magic = r.take(8).map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            std::str::from_utf8(MAGIC).expect("ascii")
        )));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, this build reads version {VERSION}"
        )));
    }
    let config = ModelConfig {
        blocks: r.usize()?,
        d_model: r.usize()?,
        vocab: r.usize()?,
        max_seq_len: r.usize()?,
        experts: r.usize()?,
        top_k: r.usize()?,
        capacity_slack: f64::from_bits(r.u64()?),
        d_ff: r.usize()?,
        seed: r.u64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("embedded config invalid: {e}")))?;
    let shapes = config.matrix_shapes();
    let count = r.usize()?;
    if count != shapes.len() {
        return Err(Error::Checkpoint(format!(
            "{count} matrices stored, config implies {}",
            shapes.len()
        )));
    }
    let mut matrices = Vec::with_capacity(count);
    for (name, rows, cols) in shapes {
        let (got_r, got_c) = (r.usize()?, r.usize()?);
        if (got_r, got_c) != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "{name}: stored {got_r}x{got_c}, expected {rows}x{cols}"
            )));
        }
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        matrices.push(Matrix::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?);
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(ToyModel::from_matrices(config, matrices)?)
}

pub fn save(model: &ToyModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ToyModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
