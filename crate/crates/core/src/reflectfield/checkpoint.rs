//! Binary field checkpoint: magic, version, C, N, H as little-endian u32,
//! then every parameter as a little-endian f32.

use std::fs;
use std::path::Path;

use super::field::{FieldDims, TriplaneField};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RFLD";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

impl TriplaneField {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.params.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            self.dims.channels as u32,
            self.dims.resolution as u32,
            self.dims.hidden as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                offset: bytes.len(),
                what: "checkpoint header".into(),
            });
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a field checkpoint (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != CHECKPOINT_VERSION {
            return Err(Error::Unsupported(format!(
                "checkpoint version {}",
                word(0)
            )));
        }
        let dims = FieldDims {
            channels: word(1) as usize,
            resolution: word(2) as usize,
            hidden: word(3) as usize,
        };
        dims.validate()?;
        let count = dims.layout().total;
        let body = &bytes[HEADER_LEN..];
        if body.len() < 4 * count {
            return Err(Error::Truncated {
                offset: HEADER_LEN + body.len() / 4 * 4,
                what: "checkpoint parameters".into(),
            });
        }
        if body.len() > 4 * count {
            return Err(Error::Format(
                "trailing bytes after checkpoint parameters".into(),
            ));
        }
        let params = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        TriplaneField::from_params(dims, params)
    }
}

pub fn save_field(field: &TriplaneField, path: &Path) -> Result<()> {
    fs::write(path, field.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_field(path: &Path) -> Result<TriplaneField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TriplaneField::from_bytes(&bytes)
}
