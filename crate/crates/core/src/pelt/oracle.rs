use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::collect_masked_outputs;
use crate::corpus::OccurrenceSet;
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::numerics::{kernels, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub entity: String,
    pub occurrences: usize,
    /// Number of ordinary words in the partition function.
    pub partition_size: usize,
    /// Largest |∂L/∂E(e) + Σr| over coordinates and probe points, with the
    /// partition function held fixed.
    pub surrogate_max_dev: f64,
    /// Cosine between the first descent step of the full loss from E(e)=0 and
    /// Σr.
    pub full_cosine: f64,
}

const ENTITY: &str = "entity";

fn entity_store(v: Vec<f64>) -> Result<ParamStore<f64>> {
    let d = v.len();
    let mut s = ParamStore::new();
    s.insert(ENTITY, Tensor::matrix(1, d, v)?)?;
    Ok(s)
}

/// Checks that the loss of a new embedding row `E(e)`, summed over the masked
/// occurrences of `e`, has gradient `−Σr` once the partition functions are
/// frozen, and measures how close the exact first step is to that direction.
///
/// `partition` limits the ordinary vocabulary in the partition function to
/// its first rows; `None` uses all of it.
pub fn gradient_direction_oracle(
    set: &OccurrenceSet,
    ckpt: &Checkpoint<f64>,
    partition: Option<usize>,
) -> Result<OracleReport> {
    let rs = collect_masked_outputs(set, ckpt)?;
    let d = ckpt.d();
    let m = rs.len();
    let v = partition.unwrap_or(ckpt.config.vocab_size);
    if v == 0 || v > ckpt.config.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "partition size {v} outside 1..={}",
            ckpt.config.vocab_size
        )));
    }
    let r_flat: Vec<f64> = rs.iter().flatten().copied().collect();
    let mut sum_r = vec![0.0; d];
    for r in &rs {
        for (s, x) in sum_r.iter_mut().zip(r) {
            *s += x;
        }
    }
    let e_rows = &ckpt.word_embeddings().data()[..v * d];

    // Surrogate: Σ log Z_i (over V only, a constant) − E(e)ᵀ Σ r_i.
    let log_z: f64 = rs
        .iter()
        .map(|r| {
            let logits: Vec<f64> = (0..v).map(|w| kernels::dot(r, &e_rows[w * d..(w + 1) * d])).collect();
            kernels::log_sum_exp(&logits)
        })
        .sum();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut surrogate_max_dev = 0.0f64;
    for probe in 0..4 {
        let point: Vec<f64> = (0..d)
            .map(|_| if probe == 0 { 0.0 } else { rng.random_range(-3.0..3.0) })
            .collect();
        let store = entity_store(point)?;
        let mut tape = Tape::new(&store);
        let ent = tape.param(ENTITY)?;
        let r = tape.constant(m, d, r_flat.clone())?;
        let dots = tape.matmul_t(r, ent)?;
        let total = tape.sum(dots);
        let neg = tape.scale(total, -1.0);
        let z = tape.constant(1, 1, vec![log_z])?;
        let loss = tape.add(neg, z)?;
        let back = tape.backward(loss)?;
        let g = back.grad(ent).ok_or_else(|| Error::MissingGradient(ENTITY.into()))?;
        for (gi, si) in g.iter().zip(&sum_r) {
            surrogate_max_dev = surrogate_max_dev.max((gi + si).abs());
        }
    }

    // Full loss with e inside every partition function, at E(e) = 0.
    let store = entity_store(vec![0.0; d])?;
    let mut tape = Tape::new(&store);
    let ent = tape.param(ENTITY)?;
    let r = tape.constant(m, d, r_flat)?;
    let words = tape.constant(v, d, e_rows.to_vec())?;
    let lv = tape.matmul_t(r, words)?;
    let le = tape.matmul_t(r, ent)?;
    let logits = tape.concat_cols(&[lv, le])?;
    let loss = tape.cross_entropy(logits, &vec![v; m])?;
    let back = tape.backward(loss)?;
    let g = back.grad(ent).ok_or_else(|| Error::MissingGradient(ENTITY.into()))?;
    let step: Vec<f64> = g.iter().map(|x| -x).collect();
    let full_cosine = cosine(&step, &sum_r);

    Ok(OracleReport {
        entity: set.entity.clone(),
        occurrences: m,
        partition_size: v,
        surrogate_max_dev,
        full_cosine,
    })
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let ab = kernels::dot(a, b);
    let aa = kernels::dot(a, a);
    let bb = kernels::dot(b, b);
    ab / (aa.sqrt() * bb.sqrt())
}
