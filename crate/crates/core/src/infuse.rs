//! Splicing table vectors into inputs as `( vector )` after entity mentions.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::corpus::{Sentence, LBRACKET_ID, MASK_ID, RBRACKET_ID};
use crate::error::{Error, Result};
use crate::model::{rank_tokens, Checkpoint, Slot};
use crate::numerics::Tensor;
use crate::pelt::EntityEmbeddingTable;

#[derive(Clone, Debug, PartialEq)]
pub enum AugSlot<'t> {
    Token(u32),
    Entity { id: &'t str, vector: &'t [f32] },
}

/// An input with inserted entity vectors and a map back to the original
/// positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSequence<'t> {
    pub slots: Vec<AugSlot<'t>>,
    /// Original position of every slot; `None` for inserted slots.
    pub provenance: Vec<Option<usize>>,
    /// Augmented position of every original token.
    pub positions: Vec<usize>,
}

impl<'t> AugmentedSequence<'t> {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn insertions(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, AugSlot::Entity { .. }))
            .count()
    }

    /// Drops every inserted `(`, vector, `)` triple.
    pub fn strip(&self) -> Vec<u32> {
        self.slots
            .iter()
            .zip(&self.provenance)
            .filter_map(|(s, p)| match (s, p) {
                (AugSlot::Token(t), Some(_)) => Some(*t),
                _ => None,
            })
            .collect()
    }

    pub fn model_slots(&self) -> Vec<Slot<'t, f32>> {
        self.slots
            .iter()
            .map(|s| match s {
                AugSlot::Token(t) => Slot::Token(*t),
                AugSlot::Entity { vector, .. } => Slot::Vector(vector),
            })
            .collect()
    }
}

/// Inserts `( E(e) )` after the last subword of every mention whose entity is
/// in `index`; other mentions are left alone. Original subwords are kept.
pub fn augment<'t>(
    sentence: &Sentence,
    index: &HashMap<&'t str, &'t [f32]>,
    max_len: usize,
) -> Result<AugmentedSequence<'t>> {
    let mut ends: HashMap<usize, (&'t str, &'t [f32])> = HashMap::new();
    for m in &sentence.mentions {
        if let Some((&id, &v)) = index.get_key_value(m.entity.as_str()) {
            ends.insert(m.end - 1, (id, v));
        }
    }
    let n = sentence.tokens.len() + 3 * ends.len();
    if n > max_len {
        return Err(Error::Length {
            what: format!("augmented sentence `{:?}`", sentence.tokens),
            len: n,
            max: max_len,
        });
    }
    let mut slots = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(sentence.tokens.len());
    for (i, &t) in sentence.tokens.iter().enumerate() {
        positions.push(slots.len());
        slots.push(AugSlot::Token(t));
        provenance.push(Some(i));
        if let Some(&(id, vector)) = ends.get(&i) {
            slots.push(AugSlot::Token(LBRACKET_ID));
            slots.push(AugSlot::Entity { id, vector });
            slots.push(AugSlot::Token(RBRACKET_ID));
            provenance.extend([None, None, None]);
        }
    }
    Ok(AugmentedSequence {
        slots,
        provenance,
        positions,
    })
}

/// A checkpoint paired with a table built from it.
pub struct InfusedModel<'a> {
    pub ckpt: &'a Checkpoint<f32>,
    pub table: &'a EntityEmbeddingTable,
    index: HashMap<&'a str, &'a [f32]>,
}

impl<'a> InfusedModel<'a> {
    /// Fails unless `table` was built from `ckpt`.
    pub fn new(ckpt: &'a Checkpoint<f32>, table: &'a EntityEmbeddingTable) -> Result<Self> {
        table.verify(ckpt)?;
        Ok(Self {
            ckpt,
            table,
            index: table.index(),
        })
    }

    pub fn augment(&self, sentence: &Sentence) -> Result<AugmentedSequence<'a>> {
        augment(sentence, &self.index, self.ckpt.config.max_len)
    }

    pub fn encode(&self, aug: &AugmentedSequence<'_>) -> Result<Tensor<f32>> {
        self.ckpt.encode(&aug.model_slots())
    }

    /// Tied-softmax logits at original position `mask_pos` of each query,
    /// after augmentation.
    pub fn logits_batch(&self, queries: &[(Sentence, usize)]) -> Result<Vec<Vec<f32>>> {
        let augs = queries
            .iter()
            .map(|(s, p)| {
                if s.tokens.get(*p) != Some(&MASK_ID) {
                    return Err(Error::Contract(format!("position {p} does not hold the mask")));
                }
                let a = self.augment(s)?;
                let pos = a.positions[*p];
                Ok((a, pos))
            })
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<_> = augs.iter().map(|(a, p)| (a.model_slots(), *p)).collect();
        let rs: Vec<Vec<Vec<f32>>> = items
            .par_chunks(32)
            .map(|c| self.ckpt.outputs_at(c))
            .collect::<Result<_>>()?;
        Ok(rs.into_iter().flatten().map(|r| self.ckpt.logits(&r)).collect())
    }

    pub fn cloze_predict(
        &self,
        sentence: &Sentence,
        mask_pos: usize,
        k: usize,
        candidates: Option<&[u32]>,
    ) -> Result<Vec<u32>> {
        let logits = self
            .logits_batch(&[(sentence.clone(), mask_pos)])?
            .pop()
            .expect("one query");
        Ok(rank_tokens(&logits, k, candidates))
    }
}
