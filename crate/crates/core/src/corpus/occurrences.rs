use std::collections::HashSet;

use rayon::prelude::*;

use super::{Sentence, MASK_ID};

pub const DEFAULT_CAP: usize = 256;

/// A sentence with one entity mention collapsed to a single `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Occurrence {
    pub tokens: Vec<u32>,
    pub mask_pos: usize,
}

impl Occurrence {
    /// Puts the entity's subwords back in place of the mask.
    pub fn restore(&self, pieces: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.tokens.len() + pieces.len() - 1);
        out.extend_from_slice(&self.tokens[..self.mask_pos]);
        out.extend_from_slice(pieces);
        out.extend_from_slice(&self.tokens[self.mask_pos + 1..]);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccurrenceSet {
    pub entity: String,
    /// Which corpus the sentences came from.
    pub source: String,
    pub items: Vec<Occurrence>,
}

impl OccurrenceSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// True when the entity never occurred in the source corpus.
    pub fn no_occurrences(&self) -> bool {
        self.items.is_empty()
    }
}

/// Collects masked occurrences of `entity` in first-encounter order. Every
/// mention yields its own occurrence; identical masked sequences are kept
/// once; at most `cap` are returned.
pub fn index_occurrences(entity: &str, corpus: &[Sentence], cap: usize, source: &str) -> OccurrenceSet {
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    'outer: for s in corpus {
        for m in s.mentions.iter().filter(|m| m.entity == entity) {
            if items.len() == cap {
                break 'outer;
            }
            let mut tokens = Vec::with_capacity(s.tokens.len() - (m.end - m.start) + 1);
            tokens.extend_from_slice(&s.tokens[..m.start]);
            tokens.push(MASK_ID);
            tokens.extend_from_slice(&s.tokens[m.end..]);
            if seen.insert(tokens.clone()) {
                items.push(Occurrence {
                    tokens,
                    mask_pos: m.start,
                });
            }
        }
    }
    if items.is_empty() {
        log::debug!("no occurrences of `{entity}` in {source}");
    }
    OccurrenceSet {
        entity: entity.to_string(),
        source: source.to_string(),
        items,
    }
}

/// [`index_occurrences`] for many entities, in parallel; output order follows
/// `entities`.
pub fn index_all(entities: &[String], corpus: &[Sentence], cap: usize, source: &str) -> Vec<OccurrenceSet> {
    entities
        .par_iter()
        .map(|e| index_occurrences(e, corpus, cap, source))
        .collect()
}
