use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mlm_loss, Checkpoint, ModelConfig};
use crate::corpus::{Sentence, LBRACKET_ID, MASK_ID, RBRACKET_ID};
use crate::error::{Error, Result};
use crate::numerics::Adam;

/// A training input with its masked positions and their targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub tokens: Vec<u32>,
    pub targets: Vec<(usize, u32)>,
}

/// Masks a sentence. Each mention is selected with `entity_rate` and
/// collapses to one `[MASK]` whose target is the mention's last subword;
/// every other token is selected with `token_rate`. If nothing is selected,
/// one unit is drawn uniformly so the example always carries a target.
pub fn mask_sentence<R: Rng>(s: &Sentence, rng: &mut R, entity_rate: f64, token_rate: f64) -> MaskedExample {
    mask_with_apposition(s, rng, entity_rate, token_rate, 0.0, usize::MAX)
}

/// [`mask_sentence`], after which each unmasked mention is followed by
/// `( last subword )` with probability `apposition_rate`, as long as the
/// example stays within `max_len`. The inserted tokens are never targets.
pub fn mask_with_apposition<R: Rng>(
    s: &Sentence,
    rng: &mut R,
    entity_rate: f64,
    token_rate: f64,
    apposition_rate: f64,
    max_len: usize,
) -> MaskedExample {
    // Units: (start, end, is_mention)
    let mut units = Vec::with_capacity(s.tokens.len());
    let mut mentions = s.mentions.iter().peekable();
    let mut i = 0;
    while i < s.tokens.len() {
        match mentions.peek() {
            Some(m) if m.start == i => {
                units.push((m.start, m.end, true));
                i = m.end;
                mentions.next();
            }
            _ => {
                units.push((i, i + 1, false));
                i += 1;
            }
        }
    }
    let mut picked: Vec<bool> = units
        .iter()
        .map(|&(_, _, ent)| rng.random_bool(if ent { entity_rate } else { token_rate }))
        .collect();
    if !units.is_empty() && !picked.iter().any(|&p| p) {
        picked[rng.random_range(0..units.len())] = true;
    }
    let mut apposed = vec![false; units.len()];
    if apposition_rate > 0.0 {
        let mut len: usize = units
            .iter()
            .zip(&picked)
            .map(|(&(a, b, _), &p)| if p { 1 } else { b - a })
            .sum();
        for (k, &(_, _, ent)) in units.iter().enumerate() {
            if ent && !picked[k] && rng.random_bool(apposition_rate) && len + 3 <= max_len {
                apposed[k] = true;
                len += 3;
            }
        }
    }
    let mut tokens = Vec::with_capacity(s.tokens.len());
    let mut targets = Vec::new();
    for ((&(a, b, _), &p), &ap) in units.iter().zip(&picked).zip(&apposed) {
        if p {
            targets.push((tokens.len(), s.tokens[b - 1]));
            tokens.push(MASK_ID);
        } else {
            tokens.extend_from_slice(&s.tokens[a..b]);
            if ap {
                tokens.extend([LBRACKET_ID, s.tokens[b - 1], RBRACKET_ID]);
            }
        }
    }
    MaskedExample { tokens, targets }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub entity_mask_rate: f64,
    pub token_mask_rate: f64,
    /// Chance that an unmasked mention is followed by `( last subword )`.
    pub apposition_rate: f64,
    pub warmup_frac: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 8000,
            lr: 2e-3,
            batch_size: 32,
            entity_mask_rate: 0.15,
            token_mask_rate: 0.15,
            apposition_rate: 0.5,
            warmup_frac: 0.1,
            clip: 1.0,
            log_every: 250,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Loss of every step, before that step's update.
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the first `w` steps.
    pub fn head_mean(&self, w: usize) -> f64 {
        mean(&self.losses[..w.min(self.losses.len())])
    }

    /// Mean loss over the last `w` steps.
    pub fn tail_mean(&self, w: usize) -> f64 {
        mean(&self.losses[self.losses.len().saturating_sub(w)..])
    }
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        f64::NAN
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

fn lr_at(opts: &TrainOptions, step: usize) -> f64 {
    let warm = ((opts.steps as f64 * opts.warmup_frac).round() as usize).max(1);
    if step < warm {
        opts.lr * (step + 1) as f64 / warm as f64
    } else {
        let rest = (opts.steps - warm).max(1) as f64;
        opts.lr * ((opts.steps - step) as f64 / rest).max(0.0)
    }
}

/// Trains from a fresh initialisation. The same corpus, config (including
/// its seed) and options give a bit-identical checkpoint.
pub fn train_mlm(
    corpus: &[Sentence],
    config: ModelConfig,
    opts: &TrainOptions,
) -> Result<(Checkpoint<f32>, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    if opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
    }
    if let Some((i, s)) = corpus.iter().enumerate().find(|(_, s)| s.tokens.len() > config.max_len) {
        return Err(Error::Length {
            what: format!("training sentence {i}"),
            len: s.tokens.len(),
            max: config.max_len,
        });
    }
    let max_len = config.max_len;
    let mut ckpt = Checkpoint::<f32>::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ckpt.config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(opts.lr, (0.9, 0.999), 1e-8);
    let mut log = TrainLog::default();

    for step in 0..opts.steps {
        let batch: Vec<MaskedExample> = (0..opts.batch_size)
            .map(|_| {
                let s = &corpus[rng.random_range(0..corpus.len())];
                mask_with_apposition(
                    s,
                    &mut rng,
                    opts.entity_mask_rate,
                    opts.token_mask_rate,
                    opts.apposition_rate,
                    max_len,
                )
            })
            .collect();
        let (loss, grads) = mlm_loss(&ckpt.config, &ckpt.params, &batch, true)?;
        let loss = loss as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        log.losses.push(loss);
        let grads = grads.expect("requested");
        ckpt.params.zero_grad();
        ckpt.params.accumulate(&grads)?;
        for (_, t) in ckpt.params.iter_mut() {
            if t.grad().is_none() {
                t.accumulate_grad(&vec![0.0; t.len()])?;
            }
        }
        if opts.clip > 0.0 {
            let norm = ckpt
                .params
                .iter()
                .flat_map(|(_, t)| t.grad().unwrap_or_default().iter())
                .map(|&g| (g as f64) * (g as f64))
                .sum::<f64>()
                .sqrt();
            if norm > opts.clip {
                let c = (opts.clip / norm) as f32;
                for (_, t) in ckpt.params.iter_mut() {
                    for g in t.grad_mut().into_iter().flatten() {
                        *g *= c;
                    }
                }
            }
        }
        adam.lr = lr_at(opts, step);
        adam.step(&mut ckpt.params)?;
        if opts.log_every > 0 && (step + 1) % opts.log_every == 0 {
            log::info!(
                "step {:>6}  loss {:.4}  lr {:.2e}",
                step + 1,
                log.tail_mean(opts.log_every),
                adam.lr
            );
        }
    }
    ckpt.params.zero_grad();
    ckpt.step = opts.steps as u64;
    ckpt.loss = log.tail_mean(100);
    Ok((ckpt, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Mention;

    fn sentence() -> Sentence {
        // ent_ 042 lives in paris .
        Sentence {
            tokens: vec![10, 11, 12, 13, 14, 15],
            mentions: vec![Mention {
                entity: "e042".into(),
                start: 0,
                end: 2,
            }],
        }
    }

    #[test]
    fn selected_mention_collapses_to_one_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = mask_sentence(&sentence(), &mut rng, 1.0, 0.0);
        assert_eq!(ex.tokens, vec![MASK_ID, 12, 13, 14, 15]);
        assert_eq!(ex.targets, vec![(0, 11)]);
    }

    #[test]
    fn every_example_has_a_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let ex = mask_sentence(&sentence(), &mut rng, 0.0, 0.0);
            assert_eq!(ex.targets.len(), 1);
            let (p, _) = ex.targets[0];
            assert_eq!(ex.tokens[p], MASK_ID);
        }
    }

    #[test]
    fn ordinary_tokens_keep_their_own_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = mask_sentence(&sentence(), &mut rng, 0.0, 1.0);
        assert_eq!(ex.tokens, vec![10, 11, MASK_ID, MASK_ID, MASK_ID, MASK_ID]);
        assert_eq!(ex.targets, vec![(2, 12), (3, 13), (4, 14), (5, 15)]);
    }

    #[test]
    fn apposition_repeats_the_last_subword_in_brackets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = mask_with_apposition(&sentence(), &mut rng, 0.0, 0.0, 1.0, 64);
        assert_eq!(&ex.tokens[..5], &[10, 11, LBRACKET_ID, 11, RBRACKET_ID]);
        // the forced target never lands on an inserted token
        assert_eq!(ex.targets.len(), 1);
        assert!(ex.targets[0].0 == 0 || ex.targets[0].0 >= 5);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = mask_with_apposition(&sentence(), &mut rng, 1.0, 0.0, 1.0, 64);
        assert_eq!(ex.tokens, vec![MASK_ID, 12, 13, 14, 15]);
        assert_eq!(ex.targets, vec![(0, 11)]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = mask_with_apposition(&sentence(), &mut rng, 0.0, 1.0, 1.0, 8);
        assert_eq!(ex.tokens.len(), 6);
    }

    #[test]
    fn zero_apposition_rate_is_plain_masking() {
        for seed in 0..20 {
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(
                mask_sentence(&sentence(), &mut a, 0.3, 0.3),
                mask_with_apposition(&sentence(), &mut b, 0.3, 0.3, 0.0, 64)
            );
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let opts = TrainOptions {
            steps: 100,
            lr: 1.0,
            warmup_frac: 0.1,
            ..TrainOptions::default()
        };
        assert!((lr_at(&opts, 0) - 0.1).abs() < 1e-12);
        assert!((lr_at(&opts, 9) - 1.0).abs() < 1e-12);
        assert!(lr_at(&opts, 50) < lr_at(&opts, 20));
        assert!(lr_at(&opts, 99) > 0.0);
    }
}
