//! Entity lookup tables built from output representations at masked
//! occurrences.
//!
//! An entity's vector is `L · s / ‖s‖` where `s` sums the head outputs at the
//! mask of every occurrence. Only the direction of `s` matters, so any scale
//! applied to the sum is irrelevant.

mod oracle;
mod table;

use rayon::prelude::*;

pub use oracle::{gradient_direction_oracle, OracleReport};
pub use table::{load_table, save_table, EntityEmbeddingTable, TableEntry, TABLE_MAGIC, TABLE_VERSION};

use crate::corpus::{index_occurrences, OccurrenceSet, Sentence};
use crate::error::{Error, Result};
use crate::model::{token_slots, Checkpoint};
use crate::numerics::Scalar;

/// Head outputs at the mask of each stored sentence, in set order.
pub fn collect_masked_outputs<T: Scalar>(set: &OccurrenceSet, ckpt: &Checkpoint<T>) -> Result<Vec<Vec<T>>> {
    if set.is_empty() {
        return Err(Error::NoOccurrences(set.entity.clone()));
    }
    let items: Vec<_> = set
        .items
        .iter()
        .map(|o| (token_slots(&o.tokens), o.mask_pos))
        .collect();
    ckpt.outputs_at(&items)
}

/// Unit vector along the sum of `vectors`, accumulated in 64-bit.
pub fn direction<T: Scalar>(vectors: &[Vec<T>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidArgument("no vectors to aggregate".into()))?;
    let d = first.len();
    let mut sum = vec![0.0f64; d];
    let mut scale = 0.0f64;
    for v in vectors {
        if v.len() != d {
            return Err(Error::Shape {
                op: "direction",
                left: vec![d],
                right: vec![v.len()],
            });
        }
        let mut sq = 0.0;
        for (s, &x) in sum.iter_mut().zip(v) {
            let x = x.as_f64();
            *s += x;
            sq += x * x;
        }
        scale += sq.sqrt();
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= 1e-12 * scale || norm == 0.0 {
        return Err(Error::DegenerateDirection);
    }
    Ok(sum.into_iter().map(|x| x / norm).collect())
}

/// `L · s / ‖s‖` for `s = Σ vectors`.
pub fn build_embedding<T: Scalar>(vectors: &[Vec<T>], l: f64) -> Result<Vec<T>> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::InvalidArgument(format!("norm constant must be positive, got {l}")));
    }
    Ok(direction(vectors)?.into_iter().map(|u| T::from_f64(u * l)).collect())
}

/// Why an entity did not make it into a table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SkipReason {
    NoOccurrences,
    DegenerateDirection,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SkipReport {
    pub skipped: Vec<(String, SkipReason)>,
}

impl SkipReport {
    pub fn contains(&self, id: &str) -> bool {
        self.skipped.iter().any(|(e, _)| e == id)
    }
}

/// Per-entity unit directions, from which tables at any norm are cut.
#[derive(Clone, Debug, PartialEq)]
pub struct Directions {
    pub fingerprint: [u8; 32],
    pub d: usize,
    /// (entity id, unit direction, occurrence count), sorted by id.
    pub entries: Vec<(String, Vec<f64>, u32)>,
    pub source: String,
    pub skipped: SkipReport,
}

impl Directions {
    /// Indexes occurrences of every entity in `corpus` (in parallel), harvests
    /// head outputs and normalises their sum.
    pub fn build(
        entities: &[String],
        corpus: &[Sentence],
        ckpt: &Checkpoint<f32>,
        cap: usize,
        source: &str,
    ) -> Result<Self> {
        let results: Vec<(String, Result<(Vec<f64>, u32)>)> = entities
            .par_iter()
            .map(|e| {
                let set = index_occurrences(e, corpus, cap, source);
                let r = collect_masked_outputs(&set, ckpt)
                    .and_then(|rs| Ok((direction(&rs)?, rs.len() as u32)));
                (e.clone(), r)
            })
            .collect();
        let mut entries = Vec::new();
        let mut skipped = SkipReport::default();
        for (id, r) in results {
            match r {
                Ok((u, n)) => entries.push((id, u, n)),
                Err(Error::NoOccurrences(_)) => skipped.skipped.push((id, SkipReason::NoOccurrences)),
                Err(Error::DegenerateDirection) => {
                    skipped.skipped.push((id, SkipReason::DegenerateDirection))
                }
                Err(e) => return Err(e),
            }
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        entries.dedup_by(|a, b| a.0 == b.0);
        skipped.skipped.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self {
            fingerprint: ckpt.fingerprint()?,
            d: ckpt.d(),
            entries,
            source: source.to_string(),
            skipped,
        })
    }

    pub fn table(&self, l: f64) -> Result<EntityEmbeddingTable> {
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::InvalidArgument(format!("norm constant must be positive, got {l}")));
        }
        let entries = self
            .entries
            .iter()
            .map(|(id, u, n)| TableEntry {
                id: id.clone(),
                vector: u.iter().map(|&x| (x * l) as f32).collect(),
                count: *n,
                source: self.source.clone(),
            })
            .collect();
        let t = EntityEmbeddingTable {
            fingerprint: self.fingerprint,
            d: self.d,
            l: l as f32,
            entries,
        };
        if t.is_empty() {
            log::warn!("entity table is empty: no entity had usable occurrences");
        }
        Ok(t)
    }
}

/// Builds a table at norm `l` plus the list of entities left out.
pub fn build_table(
    entities: &[String],
    corpus: &[Sentence],
    ckpt: &Checkpoint<f32>,
    l: f64,
    cap: usize,
    source: &str,
) -> Result<(EntityEmbeddingTable, SkipReport)> {
    let dirs = Directions::build(entities, corpus, ckpt, cap, source)?;
    Ok((dirs.table(l)?, dirs.skipped))
}

#[cfg(test)]
mod tests;
