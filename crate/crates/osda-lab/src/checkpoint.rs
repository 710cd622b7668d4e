//! Binary checkpoint of a [`ModelBundle`].
//!
//! Layout, all integers `u32` and all values `f64`, little-endian:
//! magic `OSDACKPT`, version, `|C^S|`, `m`, number of widths, the widths,
//! then every parameter tensor in [`ModelBundle::tensors`] order.

use std::io::{Read, Write};
use std::path::Path;

use osda_core::nn::ModelBundle;

pub const MAGIC: &[u8; 8] = b"OSDACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after the last parameter")]
    Trailing(usize),
    #[error("invalid header: {0}")]
    Header(#[from] osda_core::Error),
}

pub fn encode(bundle: &ModelBundle) -> Vec<u8> {
    let widths = bundle.feature.widths();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [VERSION, bundle.n_common as u32, bundle.m() as u32, widths.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for w in widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    for t in bundle.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.0.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn word(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelBundle, CheckpointError> {
    let mut cur = Cursor(bytes);
    if cur.take(8)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = cur.word()? as u32;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let n_common = cur.word()?;
    let m = cur.word()?;
    let n_widths = cur.word()?;
    let widths = (0..n_widths).map(|_| cur.word()).collect::<Result<Vec<_>, _>>()?;
    let expected = param_count(&widths, n_common, m)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| osda_core::Error::InvalidConfig(format!("widths {widths:?} overflow")))?;
    if cur.0.len() < expected {
        return Err(CheckpointError::Truncated);
    }
    if cur.0.len() > expected {
        return Err(CheckpointError::Trailing(cur.0.len() - expected));
    }
    let mut bundle = ModelBundle::seeded(&widths, n_common, m, 0)?;
    for t in bundle.tensors_mut() {
        for v in t.data_mut() {
            *v = f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        }
    }
    Ok(bundle)
}

fn param_count(widths: &[usize], n_common: usize, m: usize) -> Option<usize> {
    let linear = |i: usize, o: usize| i.checked_mul(o)?.checked_add(o);
    let mut n = 0usize;
    for w in widths.windows(2) {
        n = n.checked_add(linear(w[0], w[1])?)?;
    }
    let f = *widths.last()?;
    n = n.checked_add(linear(f, n_common.checked_add(1)?)?)?;
    n.checked_add(linear(f, n_common)?.checked_mul(m.checked_add(1)?)?)
}

pub fn save(bundle: &ModelBundle, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&encode(bundle)).map_err(io)?;
    f.sync_all().map_err(io)
}

pub fn load(path: &Path) -> Result<ModelBundle, CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io)?;
    decode(&bytes)
}
