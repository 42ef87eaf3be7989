//! The `NIAB-EMB1` binary embedding table.
//!
//! Little-endian layout: the 9 magic bytes `NIAB-EMB1`, `u32` dim, `u32` token
//! count, then per token a `u16` byte length, the UTF-8 token and `dim` `f32`
//! values. Files must be consumed exactly; trailing bytes are an error.

use std::collections::HashMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::EmbeddingError;
use crate::episode::is_valid_token;

pub const EMB_MAGIC: &[u8; 9] = b"NIAB-EMB1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    values: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` pairs, checking every invariant.
    pub fn new(dim: usize, entries: Vec<(String, Vec<f32>)>) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::BadFormat("dim must be positive".into()));
        }
        let mut table = EmbeddingTable {
            dim,
            tokens: Vec::with_capacity(entries.len()),
            values: Vec::with_capacity(entries.len() * dim),
            index: HashMap::with_capacity(entries.len()),
        };
        for (token, vector) in entries {
            table.push(token, &vector)?;
        }
        Ok(table)
    }

    fn push(&mut self, token: String, vector: &[f32]) -> Result<(), EmbeddingError> {
        if !is_valid_token(&token) {
            return Err(EmbeddingError::BadFormat(format!("invalid token `{token}`")));
        }
        if vector.len() != self.dim {
            return Err(EmbeddingError::DimMismatch { expected: self.dim, got: vector.len() });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::BadFormat(format!("non-finite value for `{token}`")));
        }
        if vector.iter().all(|&v| v == 0.0) {
            return Err(EmbeddingError::ZeroVector(token));
        }
        if self.index.insert(token.clone(), self.tokens.len()).is_some() {
            return Err(EmbeddingError::BadFormat(format!("duplicate token `{token}`")));
        }
        self.tokens.push(token);
        self.values.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.index.get(token).map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        let mut cur = Cursor::new(bytes);
        let truncated = |_| EmbeddingError::BadFormat("truncated file".into());
        let mut magic = [0u8; 9];
        cur.read_exact(&mut magic).map_err(truncated)?;
        if &magic != EMB_MAGIC {
            return Err(EmbeddingError::BadFormat("bad magic".into()));
        }
        let dim = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let count = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if dim == 0 {
            return Err(EmbeddingError::BadFormat("dim must be positive".into()));
        }
        // Every entry needs at least 2 + 1 + 4 * dim bytes; reject impossible headers early.
        let remaining = bytes.len() - cur.position() as usize;
        if count.saturating_mul(3 + 4 * dim) > remaining {
            return Err(EmbeddingError::BadFormat("header promises more data than present".into()));
        }
        let mut table = EmbeddingTable {
            dim,
            tokens: Vec::with_capacity(count),
            values: Vec::with_capacity(count * dim),
            index: HashMap::with_capacity(count),
        };
        let mut vector = vec![0f32; dim];
        for _ in 0..count {
            let len = cur.read_u16::<LittleEndian>().map_err(truncated)? as usize;
            let mut raw = vec![0u8; len];
            cur.read_exact(&mut raw).map_err(truncated)?;
            let token = String::from_utf8(raw)
                .map_err(|_| EmbeddingError::BadFormat("token is not UTF-8".into()))?;
            cur.read_f32_into::<LittleEndian>(&mut vector).map_err(truncated)?;
            table.push(token, &vector)?;
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(EmbeddingError::BadFormat("trailing bytes after last entry".into()));
        }
        Ok(table)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.len() * (2 + 24 + 4 * self.dim));
        out.write_all(EMB_MAGIC).unwrap();
        out.write_u32::<LittleEndian>(self.dim as u32).unwrap();
        out.write_u32::<LittleEndian>(self.len() as u32).unwrap();
        for (i, token) in self.tokens.iter().enumerate() {
            out.write_u16::<LittleEndian>(token.len() as u16).unwrap();
            out.write_all(token.as_bytes()).unwrap();
            for v in &self.values[i * self.dim..(i + 1) * self.dim] {
                out.write_f32::<LittleEndian>(*v).unwrap();
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let bytes = std::fs::read(path).map_err(|e| EmbeddingError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| EmbeddingError::Io(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingTable {
        EmbeddingTable::new(
            3,
            vec![
                ("no_op".into(), vec![1.0, 0.0, 0.0]),
                ("wash_tomato".into(), vec![0.1, -2.5, f32::MIN_POSITIVE]),
                ("find_knife".into(), vec![1e-30, 3.0e7, -0.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let table = sample();
        let bytes = table.to_bytes();
        let back = EmbeddingTable::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("find_knife").unwrap()[2].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.tokens(), table.tokens());
    }

    #[test]
    fn every_header_corruption_is_rejected() {
        let bytes = sample().to_bytes();
        for pos in 0..17 {
            for bit in 0..8 {
                let mut bad = bytes.clone();
                bad[pos] ^= 1 << bit;
                assert!(EmbeddingTable::from_bytes(&bad).is_err(), "byte {pos} bit {bit}");
            }
            for value in [0x00, 0xff, 0x7f, 0x80] {
                let mut bad = bytes.clone();
                if bad[pos] == value {
                    continue;
                }
                bad[pos] = value;
                assert!(EmbeddingTable::from_bytes(&bad).is_err(), "byte {pos} = {value:#x}");
            }
        }
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            assert!(EmbeddingTable::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(EmbeddingTable::from_bytes(&long).is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(matches!(
            EmbeddingTable::new(2, vec![("a".into(), vec![0.0, 0.0])]),
            Err(EmbeddingError::ZeroVector(_))
        ));
        assert!(matches!(
            EmbeddingTable::new(2, vec![("a".into(), vec![1.0])]),
            Err(EmbeddingError::DimMismatch { .. })
        ));
        assert!(EmbeddingTable::new(1, vec![("a".into(), vec![1.0]), ("a".into(), vec![2.0])]).is_err());
        assert!(EmbeddingTable::new(0, vec![]).is_err());
    }
}
