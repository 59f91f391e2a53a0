//! Post-LN transformer encoder with a tied-weight masked-LM head.
//!
//! Input features are `LayerNorm(E[x] + P[i])`; the head maps a hidden row to
//! `r = LayerNorm(GELU(W h + b))` and scores the vocabulary as `r · Eᵀ`. No
//! separate output matrix or output bias exists.

mod io;
mod train;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use io::{fingerprint_hex, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{mask_sentence, mask_with_apposition, train_mlm, MaskedExample, TrainLog, TrainOptions};

use crate::corpus::PAD_ID;
use crate::error::{Error, Result};
use crate::numerics::{grad_check, GatherRow, GradCheckReport, Gradients, ParamStore, Scalar, Tape, Tensor, Var};

pub const WORD: &str = "embed.word";
pub const POS: &str = "embed.pos";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub ln_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_len: 64,
            vocab_size: 0,
            ln_eps: 1e-5,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of the head count {}",
                self.d, self.heads
            )));
        }
        if self.vocab_size < 2 || self.max_len == 0 || self.ffn_mult == 0 {
            return Err(Error::Config(
                "vocabulary size, max length and FFN multiplier must be positive".into(),
            ));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config(format!("invalid layer-norm epsilon {}", self.ln_eps)));
        }
        Ok(())
    }

    pub fn ffn(&self) -> usize {
        self.d * self.ffn_mult
    }
}

/// Model parameters plus training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub step: u64,
    pub loss: f64,
}

/// One input position: a vocabulary index looked up in `E`, or a vector used
/// directly in its place.
#[derive(Clone, Copy, Debug)]
pub enum Slot<'a, T> {
    Token(u32),
    Vector(&'a [T]),
}

pub fn token_slots<T>(tokens: &[u32]) -> Vec<Slot<'static, T>> {
    tokens.iter().map(|&t| Slot::Token(t)).collect()
}

fn layer_names(l: usize) -> [String; 16] {
    [
        "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
        "ln1.gain", "ln1.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.gain", "ln2.bias",
    ]
    .map(|s| format!("layer{l}.{s}"))
}

impl<T: Scalar> Checkpoint<T> {
    /// Fresh parameters drawn from a seeded generator. Linear weights use
    /// N(0, 1/fan_in), embeddings N(0, 0.02²), gains 1 and biases 0.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f, v) = (config.d, config.ffn(), config.vocab_size);
        let mut params = ParamStore::new();
        let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor<T> {
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols)
                .map(|_| T::from_f64(dist.sample(&mut rng)))
                .collect();
            Tensor::new(vec![rows, cols], data).expect("shape matches")
        };
        let ones = |n: usize| Tensor::filled(vec![n], T::one());
        let zeros = |n: usize| Tensor::zeros(vec![n]);

        params.insert(WORD, normal(v, d, 0.02))?;
        params.insert(POS, normal(config.max_len, d, 0.02))?;
        params.insert("embed.ln.gain", ones(d))?;
        params.insert("embed.ln.bias", zeros(d))?;
        let lin = |n: usize| (1.0 / n as f64).sqrt();
        for l in 0..config.layers {
            let n = layer_names(l);
            for i in 0..4 {
                params.insert(n[2 * i].clone(), normal(d, d, lin(d)))?;
                params.insert(n[2 * i + 1].clone(), zeros(d))?;
            }
            params.insert(n[8].clone(), ones(d))?;
            params.insert(n[9].clone(), zeros(d))?;
            params.insert(n[10].clone(), normal(d, f, lin(d)))?;
            params.insert(n[11].clone(), zeros(f))?;
            params.insert(n[12].clone(), normal(f, d, lin(f)))?;
            params.insert(n[13].clone(), zeros(d))?;
            params.insert(n[14].clone(), ones(d))?;
            params.insert(n[15].clone(), zeros(d))?;
        }
        params.insert("head.w", normal(d, d, lin(d)))?;
        params.insert("head.b", zeros(d))?;
        params.insert("head.ln.gain", ones(d))?;
        params.insert("head.ln.bias", zeros(d))?;
        Ok(Self {
            config,
            params,
            step: 0,
            loss: 0.0,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.cast(),
            step: self.step,
            loss: self.loss,
        }
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Fails with a configuration error unless the hidden size is `d`.
    pub fn expect_dim(&self, d: usize) -> Result<()> {
        if self.config.d != d {
            return Err(Error::Config(format!(
                "checkpoint has hidden size {}, expected {d}",
                self.config.d
            )));
        }
        Ok(())
    }

    /// The word embedding matrix, also the output projection.
    pub fn word_embeddings(&self) -> &Tensor<T> {
        self.params.get(WORD).expect("checkpoint always holds the word table")
    }

    pub fn eps(&self) -> T {
        T::from_f64(self.config.ln_eps)
    }

    /// Contextual representations, one row per position.
    pub fn encode(&self, slots: &[Slot<'_, T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.params);
        let h = encoder(&mut tape, &self.config, &[slots])?;
        let (n, d) = tape.shape(h);
        Tensor::matrix(n, d, tape.value(h).to_vec())
    }

    pub fn encode_tokens(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        self.encode(&token_slots(tokens))
    }

    /// Head transform of a single hidden vector.
    pub fn output_repr(&self, h: &[T]) -> Result<Vec<T>> {
        if h.len() != self.config.d {
            return Err(Error::Shape {
                op: "output_repr",
                left: vec![self.config.d],
                right: vec![h.len()],
            });
        }
        let mut tape = Tape::new(&self.params);
        let hv = tape.constant(1, h.len(), h.to_vec())?;
        let r = head(&mut tape, &self.config, hv)?;
        Ok(tape.value(r).to_vec())
    }

    /// Output representations at one position of each sequence, computed in
    /// fixed-size batches so results do not depend on the caller's grouping.
    pub fn outputs_at(&self, items: &[(Vec<Slot<'_, T>>, usize)]) -> Result<Vec<Vec<T>>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(CHUNK) {
            let seqs: Vec<&[Slot<'_, T>]> = chunk.iter().map(|(s, _)| s.as_slice()).collect();
            let mut rows = Vec::with_capacity(chunk.len());
            let mut offset = 0;
            for (s, p) in chunk {
                if *p >= s.len() {
                    return Err(Error::Index {
                        what: "position",
                        index: *p,
                        bound: s.len(),
                    });
                }
                rows.push(offset + p);
                offset += s.len();
            }
            let mut tape = Tape::new(&self.params);
            let h = encoder(&mut tape, &self.config, &seqs)?;
            let sel = tape.select_rows(h, &rows)?;
            let r = head(&mut tape, &self.config, sel)?;
            for i in 0..rows.len() {
                out.push(tape.row(r, i).to_vec());
            }
        }
        Ok(out)
    }

    /// Tied-softmax logits `r · Eᵀ`.
    pub fn logits(&self, r: &[T]) -> Vec<T> {
        let e = self.word_embeddings();
        (0..self.config.vocab_size)
            .map(|t| crate::numerics::kernels::dot(r, e.row(t)))
            .collect()
    }

    /// Top-`k` tokens at `pos`, optionally restricted to `candidates`; ties go
    /// to the lower index. `k` is clamped to the number of eligible tokens.
    pub fn predict_topk(
        &self,
        slots: &[Slot<'_, T>],
        pos: usize,
        k: usize,
        candidates: Option<&[u32]>,
    ) -> Result<Vec<u32>> {
        let r = self
            .outputs_at(&[(slots.to_vec(), pos)])?
            .pop()
            .expect("one item in, one out");
        Ok(rank_tokens(&self.logits(&r), k, candidates))
    }

    /// Mean cross-entropy over all masked positions of `batch`, with gradients
    /// when `want_grad` is set.
    pub fn mlm_loss(
        &self,
        batch: &[MaskedExample],
        want_grad: bool,
    ) -> Result<(T, Option<Gradients<T>>)> {
        mlm_loss(&self.config, &self.params, batch, want_grad)
    }
}

/// Finite-difference check of the full masked-LM loss in 64-bit precision,
/// on a fresh model built from `config` and a seeded random batch of four
/// twelve-token sequences with three masks each.
pub fn check_mlm_gradient(
    config: ModelConfig,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let ckpt = Checkpoint::<f64>::init(config)?;
    let cfg = &ckpt.config;
    let len = cfg.max_len.min(12);
    if cfg.vocab_size <= crate::corpus::RBRACKET_ID as usize + 1 || len < 3 {
        return Err(Error::Config("gradient check needs a vocabulary beyond the specials and room for three masks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = crate::corpus::RBRACKET_ID + 1;
    let batch: Vec<MaskedExample> = (0..4)
        .map(|_| {
            let mut tokens: Vec<u32> = (0..len)
                .map(|_| rng.random_range(first..cfg.vocab_size as u32))
                .collect();
            let mut targets = Vec::new();
            for p in rand::seq::index::sample(&mut rng, len, 3).into_vec() {
                targets.push((p, tokens[p]));
                tokens[p] = crate::corpus::MASK_ID;
            }
            targets.sort_unstable();
            MaskedExample { tokens, targets }
        })
        .collect();
    grad_check(&ckpt.params, h, coords, seed, |p, want| mlm_loss(cfg, p, &batch, want))
}

/// Sorts by descending logit, breaking ties toward the lower index.
pub fn rank_tokens<T: Scalar>(logits: &[T], k: usize, candidates: Option<&[u32]>) -> Vec<u32> {
    let mut ids: Vec<u32> = match candidates {
        Some(c) => {
            let mut c: Vec<u32> = c
                .iter()
                .copied()
                .filter(|&t| (t as usize) < logits.len())
                .collect();
            c.sort_unstable();
            c.dedup();
            c
        }
        None => (0..logits.len() as u32).collect(),
    };
    ids.sort_by(|&a, &b| {
        logits[b as usize]
            .partial_cmp(&logits[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(k.min(ids.len()));
    ids
}

pub(crate) fn mlm_loss<T: Scalar>(
    config: &ModelConfig,
    params: &ParamStore<T>,
    batch: &[MaskedExample],
    want_grad: bool,
) -> Result<(T, Option<Gradients<T>>)> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    let mut slots = Vec::with_capacity(batch.len());
    for ex in batch {
        for &(p, t) in &ex.targets {
            if p >= ex.tokens.len() || ex.tokens[p] == PAD_ID {
                return Err(Error::Contract(format!(
                    "masked position {p} is padding or out of range"
                )));
            }
            if t as usize >= config.vocab_size {
                return Err(Error::Index {
                    what: "target",
                    index: t as usize,
                    bound: config.vocab_size,
                });
            }
            rows.push(offset + p);
            targets.push(t as usize);
        }
        offset += ex.tokens.len();
        slots.push(token_slots::<T>(&ex.tokens));
    }
    if rows.is_empty() {
        return Err(Error::Contract("batch has no masked position".into()));
    }
    let seqs: Vec<&[Slot<'_, T>]> = slots.iter().map(Vec::as_slice).collect();
    let mut tape = Tape::new(params);
    let h = encoder(&mut tape, config, &seqs)?;
    let sel = tape.select_rows(h, &rows)?;
    let r = head(&mut tape, config, sel)?;
    let word = tape.param(WORD)?;
    let logits = tape.matmul_t(r, word)?;
    let ce = tape.cross_entropy(logits, &targets)?;
    let loss = tape.scale(ce, T::one() / T::from_f64(rows.len() as f64));
    let value = tape.scalar(loss);
    let grads = if want_grad {
        Some(tape.backward(loss)?.param_grads(&tape))
    } else {
        None
    };
    Ok((value, grads))
}

/// Builds the encoder over several sequences laid out back to back; each
/// sequence attends only within itself and restarts its positions at 0.
pub(crate) fn encoder<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    seqs: &[&[Slot<'_, T>]],
) -> Result<Var> {
    let mut word_rows = Vec::new();
    let mut pos_rows = Vec::new();
    let mut segments: Vec<Range<usize>> = Vec::with_capacity(seqs.len());
    let mut key_mask = Vec::new();
    for (si, seq) in seqs.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        if seq.len() > cfg.max_len {
            return Err(Error::Length {
                what: format!("sequence {si}"),
                len: seq.len(),
                max: cfg.max_len,
            });
        }
        let start = word_rows.len();
        for (i, slot) in seq.iter().enumerate() {
            match *slot {
                Slot::Token(t) => {
                    if t as usize >= cfg.vocab_size {
                        return Err(Error::Index {
                            what: "token",
                            index: t as usize,
                            bound: cfg.vocab_size,
                        });
                    }
                    word_rows.push(GatherRow::Row(t as usize));
                    key_mask.push(t != PAD_ID);
                }
                Slot::Vector(v) => {
                    if v.len() != cfg.d {
                        return Err(Error::Config(format!(
                            "input vector has dimension {}, model expects {}",
                            v.len(),
                            cfg.d
                        )));
                    }
                    word_rows.push(GatherRow::Fixed(v));
                    key_mask.push(true);
                }
            }
            pos_rows.push(GatherRow::Row(i));
        }
        segments.push(start..word_rows.len());
    }
    let eps = T::from_f64(cfg.ln_eps);
    let word = tape.param(WORD)?;
    let pos = tape.param(POS)?;
    let e = tape.gather(word, &word_rows)?;
    let p = tape.gather(pos, &pos_rows)?;
    let x = tape.add(e, p)?;
    let g = tape.param("embed.ln.gain")?;
    let b = tape.param("embed.ln.bias")?;
    let mut h = tape.layer_norm(x, g, b, eps)?;

    for l in 0..cfg.layers {
        let n = layer_names(l);
        let lin = |tape: &mut Tape<'_, T>, x: Var, w: &str, b: &str| -> Result<Var> {
            let w = tape.param(w)?;
            let b = tape.param(b)?;
            let y = tape.matmul(x, w)?;
            tape.add_row(y, b)
        };
        let q = lin(tape, h, &n[0], &n[1])?;
        let k = lin(tape, h, &n[2], &n[3])?;
        let v = lin(tape, h, &n[4], &n[5])?;
        let a = tape.attention(q, k, v, cfg.heads, &segments, &key_mask)?;
        let o = lin(tape, a, &n[6], &n[7])?;
        let res = tape.add(h, o)?;
        let (g1, b1) = (tape.param(&n[8])?, tape.param(&n[9])?);
        let h1 = tape.layer_norm(res, g1, b1, eps)?;
        let f = lin(tape, h1, &n[10], &n[11])?;
        let f = tape.gelu(f);
        let f = lin(tape, f, &n[12], &n[13])?;
        let res = tape.add(h1, f)?;
        let (g2, b2) = (tape.param(&n[14])?, tape.param(&n[15])?);
        h = tape.layer_norm(res, g2, b2, eps)?;
    }
    Ok(h)
}

/// `LayerNorm(GELU(h W + b))` on every row of `h`.
pub(crate) fn head<T: Scalar>(tape: &mut Tape<'_, T>, cfg: &ModelConfig, h: Var) -> Result<Var> {
    let w = tape.param("head.w")?;
    let b = tape.param("head.b")?;
    let y = tape.matmul(h, w)?;
    let y = tape.add_row(y, b)?;
    let y = tape.gelu(y);
    let g = tape.param("head.ln.gain")?;
    let bb = tape.param("head.ln.bias")?;
    tape.layer_norm(y, g, bb, T::from_f64(cfg.ln_eps))
}
