//! Table byte layout (all little-endian):
//!
//! ```text
//! magic "PELTTBL1" | u32 version | 32-byte checkpoint fingerprint
//! u32 d | f32 L | u32 entry count, then per entry:
//!   u32 id length | id bytes | u32 occurrence count | f32 vector[d]
//! ```
//!
//! The source-corpus tag lives only in memory; loaded entries carry
//! [`LOADED_SOURCE`].

use std::collections::HashMap;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{fingerprint_hex, Checkpoint};

pub const TABLE_MAGIC: &[u8; 8] = b"PELTTBL1";
pub const TABLE_VERSION: u32 = 1;
pub const LOADED_SOURCE: &str = "file";

#[derive(Clone, Debug, PartialEq)]
pub struct TableEntry {
    pub id: String,
    pub vector: Vec<f32>,
    pub count: u32,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityEmbeddingTable {
    pub fingerprint: [u8; 32],
    pub d: usize,
    pub l: f32,
    pub entries: Vec<TableEntry>,
}

impl EntityEmbeddingTable {
    pub fn empty(fingerprint: [u8; 32], d: usize, l: f32) -> Self {
        Self {
            fingerprint,
            d,
            l,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TableEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Id → vector map for fast lookups.
    pub fn index(&self) -> HashMap<&str, &[f32]> {
        self.entries
            .iter()
            .map(|e| (e.id.as_str(), e.vector.as_slice()))
            .collect()
    }

    /// Refuses use with any checkpoint other than the one the table was built
    /// from.
    pub fn verify(&self, ckpt: &Checkpoint<f32>) -> Result<()> {
        let fp = ckpt.fingerprint()?;
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                table: fingerprint_hex(&self.fingerprint),
                checkpoint: fingerprint_hex(&fp),
            });
        }
        ckpt.expect_dim(self.d)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(TABLE_MAGIC);
        w.u32(TABLE_VERSION);
        w.bytes(&self.fingerprint);
        w.len_u32(self.d)?;
        w.f32(self.l);
        w.len_u32(self.entries.len())?;
        for e in &self.entries {
            if e.vector.len() != self.d {
                return Err(Error::Shape {
                    op: "table entry",
                    left: vec![self.d],
                    right: vec![e.vector.len()],
                });
            }
            w.str(&e.id)?;
            w.u32(e.count);
            for &x in &e.vector {
                w.f32(x);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "table");
        let bad = || Error::Format("not an entity table (bad magic)".into());
        if r.take(8).map_err(|_| bad())? != TABLE_MAGIC {
            return Err(bad());
        }
        let version = r.u32()?;
        if version != TABLE_VERSION {
            return Err(Error::Format(format!("table version {version} is not supported")));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let d = r.u32()? as usize;
        let l = r.f32()?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let id = r.str()?;
            let count = r.u32()?;
            let vector = r.f32s(d)?;
            entries.push(TableEntry {
                id,
                vector,
                count,
                source: LOADED_SOURCE.to_string(),
            });
        }
        r.finish()?;
        Ok(Self {
            fingerprint,
            d,
            l,
            entries,
        })
    }
}

pub fn save_table(table: &EntityEmbeddingTable, path: &Path) -> Result<()> {
    std::fs::write(path, table.to_bytes()?)?;
    Ok(())
}

pub fn load_table(path: &Path) -> Result<EntityEmbeddingTable> {
    EntityEmbeddingTable::from_bytes(&std::fs::read(path)?)
}
