//! Self-describing binary container for complex matrices.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "BDRISDAT"
//! 8       4     u32 format version (1)
//! 12      4     u32 header length H in bytes
//! 16      H     UTF-8 JSON header:
//!               {"kind": "...", "meta": {...},
//!                "matrices": [{"name": "...", "rows": r, "cols": c}, ...]}
//! 16+H    ...   matrix payloads in header order; each is rows*cols complex
//!               entries in row-major order, every entry stored as two
//!               IEEE-754 f64 values (re, im)
//! ```
//!
//! The payload is raw doubles, so a write/read round trip is bit-exact.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::{CMatrix, Error, Result, C64};

pub const MAGIC: &[u8; 8] = b"BDRISDAT";
pub const VERSION: u32 = 1;

/// Upper bound on the JSON header, to reject garbage lengths early.
const MAX_HEADER: u32 = 16 << 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    matrices: Vec<MatrixEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub matrices: Vec<(String, CMatrix)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            matrices: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: CMatrix) {
        self.matrices.push((name.into(), m));
    }

    pub fn matrix(&self, name: &str) -> Result<&CMatrix> {
        self.matrices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("missing matrix '{name}'")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            matrices: self
                .matrices
                .iter()
                .map(|(name, m)| MatrixEntry {
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for (_, m) in &self.matrices {
            buf.clear();
            buf.reserve(m.len() * 16);
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    let z = m[(i, j)];
                    buf.extend_from_slice(&z.re.to_le_bytes());
                    buf.extend_from_slice(&z.im.to_le_bytes());
                }
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let len = read_u32(&mut r)?;
        if len > MAX_HEADER {
            return Err(Error::Format(format!("header length {len} too large")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
        let mut matrices = Vec::with_capacity(header.matrices.len());
        for entry in header.matrices {
            let count = entry
                .rows
                .checked_mul(entry.cols)
                .ok_or_else(|| Error::Format("matrix size overflow".into()))?;
            let mut raw = vec![0u8; count * 16];
            r.read_exact(&mut raw)
                .map_err(|_| Error::Format(format!("truncated payload for '{}'", entry.name)))?;
            let mut m = CMatrix::zeros(entry.rows, entry.cols);
            for (idx, chunk) in raw.chunks_exact(16).enumerate() {
                let re = f64::from_le_bytes(chunk[..8].try_into().unwrap());
                let im = f64::from_le_bytes(chunk[8..].try_into().unwrap());
                m[(idx / entry.cols, idx % entry.cols)] = C64::new(re, im);
            }
            matrices.push((entry.name, m));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            matrices,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
