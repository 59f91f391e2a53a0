//! Cloze probing: P@1 per relation, macro and micro means, frequency-bucket
//! breakdown, and the sweep over the table norm.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::corpus::{ClozeQuery, FrequencyBucket, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::infuse::InfusedModel;
use crate::model::{fingerprint_hex, rank_tokens, token_slots, Checkpoint};
use crate::pelt::Directions;

/// Anything that scores the vocabulary at a masked position.
pub trait Predictor: Sync {
    fn logits_batch(&self, queries: &[(Sentence, usize)]) -> Result<Vec<Vec<f32>>>;
}

impl Predictor for Checkpoint<f32> {
    fn logits_batch(&self, queries: &[(Sentence, usize)]) -> Result<Vec<Vec<f32>>> {
        let items: Vec<_> = queries
            .iter()
            .map(|(s, p)| (token_slots(&s.tokens), *p))
            .collect();
        let rs: Vec<Vec<Vec<f32>>> = items
            .par_chunks(32)
            .map(|c| self.outputs_at(c))
            .collect::<Result<_>>()?;
        Ok(rs.into_iter().flatten().map(|r| self.logits(&r)).collect())
    }
}

impl Predictor for InfusedModel<'_> {
    fn logits_batch(&self, queries: &[(Sentence, usize)]) -> Result<Vec<Vec<f32>>> {
        InfusedModel::logits_batch(self, queries)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeEcho {
    pub mode: String,
    pub l: Option<f32>,
    pub fingerprint: [u8; 32],
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub subject: String,
    pub relation: String,
    pub gold: String,
    pub train_freq: usize,
    pub top1: String,
    pub correct: bool,
    /// 1-based rank of the gold token among the eligible candidates.
    pub gold_rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rate {
    pub hits: usize,
    pub total: usize,
}

impl Rate {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketStat {
    pub bucket: FrequencyBucket,
    pub queries: usize,
    /// Macro over the relations present in the bucket.
    pub mean_p1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub echo: ProbeEcho,
    pub restricted: bool,
    pub rejected: Vec<(usize, String)>,
    pub per_relation: BTreeMap<String, Rate>,
    pub macro_p1: f64,
    pub micro_p1: f64,
    pub buckets: Vec<BucketStat>,
    pub results: Vec<QueryResult>,
}

fn macro_mean<'a>(results: impl Iterator<Item = &'a QueryResult>) -> (f64, BTreeMap<String, Rate>) {
    let mut per: BTreeMap<String, Rate> = BTreeMap::new();
    for r in results {
        let e = per.entry(r.relation.clone()).or_insert(Rate { hits: 0, total: 0 });
        e.total += 1;
        e.hits += r.correct as usize;
    }
    let m = if per.is_empty() {
        0.0
    } else {
        per.values().map(Rate::value).sum::<f64>() / per.len() as f64
    };
    (m, per)
}

/// Answer-type candidates: every gold token seen for each relation.
pub fn relation_candidates(queries: &[ClozeQuery], vocab: &Vocabulary) -> BTreeMap<String, Vec<u32>> {
    let mut out: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
    for q in queries {
        if let Some(id) = vocab.id(&q.gold) {
            out.entry(q.relation.clone()).or_default().insert(id);
        }
    }
    out.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect()
}

/// Ranks every query's mask and aggregates. Queries whose gold answer is not
/// a vocabulary token (or that fail to parse) are rejected and listed.
pub fn run_probe<P: Predictor + ?Sized>(
    queries: &[ClozeQuery],
    vocab: &Vocabulary,
    predictor: &P,
    restrict: bool,
    echo: ProbeEcho,
) -> Result<ProbeReport> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("cloze set is empty".into()));
    }
    let mut rejected = Vec::new();
    let mut accepted = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        let Some(gold) = vocab.id(&q.gold) else {
            rejected.push((i, format!("gold answer `{}` is not a vocabulary token", q.gold)));
            continue;
        };
        match q.parse(vocab) {
            Ok((s, p)) => accepted.push((q, gold, s, p)),
            Err(e) => rejected.push((i, e.to_string())),
        }
    }
    let inputs: Vec<(Sentence, usize)> = accepted.iter().map(|(_, _, s, p)| (s.clone(), *p)).collect();
    let logits = predictor.logits_batch(&inputs)?;
    let cands = relation_candidates(queries, vocab);

    let mut results = Vec::with_capacity(accepted.len());
    for ((q, gold, _, _), l) in accepted.iter().zip(&logits) {
        let c = if restrict {
            cands.get(&q.relation).map(Vec::as_slice)
        } else {
            None
        };
        let ranked = rank_tokens(l, usize::MAX, c);
        let top1 = ranked.first().copied().unwrap_or(0);
        let gold_rank = ranked
            .iter()
            .position(|&t| t == *gold)
            .map_or(ranked.len() + 1, |p| p + 1);
        results.push(QueryResult {
            subject: q.subject.clone(),
            relation: q.relation.clone(),
            gold: q.gold.clone(),
            train_freq: q.train_freq,
            top1: vocab.token(top1).unwrap_or("?").to_string(),
            correct: top1 == *gold,
            gold_rank,
        });
    }

    let (macro_p1, per_relation) = macro_mean(results.iter());
    let micro_p1 = if results.is_empty() {
        0.0
    } else {
        results.iter().filter(|r| r.correct).count() as f64 / results.len() as f64
    };
    let buckets = FrequencyBucket::ALL
        .iter()
        .map(|&b| {
            let members: Vec<&QueryResult> = results
                .iter()
                .filter(|r| FrequencyBucket::of(r.train_freq) == b)
                .collect();
            BucketStat {
                bucket: b,
                queries: members.len(),
                mean_p1: macro_mean(members.into_iter()).0,
            }
        })
        .collect();
    Ok(ProbeReport {
        echo,
        restricted: restrict,
        rejected,
        per_relation,
        macro_p1,
        micro_p1,
        buckets,
        results,
    })
}

impl ProbeReport {
    pub fn bucket(&self, b: FrequencyBucket) -> &BucketStat {
        self.buckets
            .iter()
            .find(|s| s.bucket == b)
            .expect("every bucket is reported")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mode {}  L {}  model {}  candidates {}",
            self.echo.mode,
            self.echo.l.map_or("-".to_string(), |l| format!("{l}")),
            &fingerprint_hex(&self.echo.fingerprint)[..16],
            if self.restricted { "answer-type" } else { "full-vocabulary" }
        );
        for (i, why) in &self.rejected {
            let _ = writeln!(s, "rejected query {i}: {why}");
        }
        let _ = writeln!(s, "{:<20} {:>8} {:>8}", "relation", "queries", "P@1");
        for (rel, r) in &self.per_relation {
            let _ = writeln!(s, "{:<20} {:>8} {:>8.4}", rel, r.total, r.value());
        }
        let _ = writeln!(s, "{:<20} {:>8} {:>8.4}", "mean (macro)", self.results.len(), self.macro_p1);
        let _ = writeln!(s, "{:<20} {:>8} {:>8.4}", "mean (micro)", self.results.len(), self.micro_p1);
        let _ = writeln!(s, "{:<20} {:>8} {:>8}", "bucket", "queries", "P@1");
        for b in &self.buckets {
            let _ = writeln!(s, "{:<20} {:>8} {:>8.4}", b.bucket.label(), b.queries, b.mean_p1);
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("kind\tkey\tqueries\tp_at_1\n");
        for (rel, r) in &self.per_relation {
            let _ = writeln!(s, "relation\t{rel}\t{}\t{:.6}", r.total, r.value());
        }
        let _ = writeln!(s, "mean\tmacro\t{}\t{:.6}", self.results.len(), self.macro_p1);
        let _ = writeln!(s, "mean\tmicro\t{}\t{:.6}", self.results.len(), self.micro_p1);
        for b in &self.buckets {
            let _ = writeln!(s, "bucket\t{}\t{}\t{:.6}", b.bucket.label(), b.queries, b.mean_p1);
        }
        for r in &self.results {
            let _ = writeln!(
                s,
                "query\t{}/{}\t{}\t{}\t{}\t{}\t{}",
                r.subject, r.relation, r.gold, r.top1, r.correct as u8, r.gold_rank, r.train_freq
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    /// (L, macro mean P@1), ascending in L.
    pub curve: Vec<(f64, f64)>,
    pub selected: f64,
    pub duplicates_removed: usize,
}

/// Probes one table per norm value, all cut from the same directions.
/// The best L wins; ties go to the smaller L.
pub fn sweep_norm(
    queries: &[ClozeQuery],
    vocab: &Vocabulary,
    ckpt: &Checkpoint<f32>,
    dirs: &Directions,
    ls: &[f64],
    restrict: bool,
) -> Result<SweepResult> {
    if ls.is_empty() || ls.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument("norm values must be positive".into()));
    }
    let mut sorted = ls.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let duplicates_removed = ls.len() - sorted.len();
    if duplicates_removed > 0 {
        log::warn!("removed {duplicates_removed} duplicate norm value(s)");
    }
    let mut curve = Vec::with_capacity(sorted.len());
    for &l in &sorted {
        let table = dirs.table(l)?;
        let model = InfusedModel::new(ckpt, &table)?;
        let echo = ProbeEcho {
            mode: "infused".into(),
            l: Some(table.l),
            fingerprint: table.fingerprint,
        };
        let report = run_probe(queries, vocab, &model, restrict, echo)?;
        log::info!("L {l}: mean P@1 {:.4}", report.macro_p1);
        curve.push((l, report.macro_p1));
    }
    let mut best = curve[0];
    for &(l, p) in &curve[1..] {
        if p > best.1 {
            best = (l, p);
        }
    }
    Ok(SweepResult {
        curve,
        selected: best.0,
        duplicates_removed,
    })
}

impl SweepResult {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:>8} {:>10}\n", "L", "mean P@1");
        for (l, p) in &self.curve {
            let _ = writeln!(s, "{l:>8} {p:>10.4}");
        }
        let _ = writeln!(s, "selected L {}", self.selected);
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("l\tmean_p_at_1\n");
        for (l, p) in &self.curve {
            let _ = writeln!(s, "{l}\t{p:.6}");
        }
        let _ = writeln!(s, "selected\t{}", self.selected);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, parse_corpus, CorpusConfig, DEFAULT_CAP};
    use crate::model::ModelConfig;
    use crate::pelt::EntityEmbeddingTable;

    struct GoldStub<'a> {
        vocab: &'a Vocabulary,
        queries: &'a [ClozeQuery],
    }

    impl Predictor for GoldStub<'_> {
        fn logits_batch(&self, queries: &[(Sentence, usize)]) -> Result<Vec<Vec<f32>>> {
            Ok(queries
                .iter()
                .map(|(s, _)| {
                    let q = self
                        .queries
                        .iter()
                        .find(|q| q.parse(self.vocab).map(|x| &x.0 == s).unwrap_or(false))
                        .unwrap();
                    let mut l = vec![0.0; self.vocab.len()];
                    l[self.vocab.id(&q.gold).unwrap() as usize] = 1.0;
                    l
                })
                .collect())
        }
    }

    fn echo() -> ProbeEcho {
        ProbeEcho {
            mode: "vanilla".into(),
            l: None,
            fingerprint: [0; 32],
        }
    }

    fn corpus() -> crate::corpus::GeneratedCorpus {
        generate_corpus(&CorpusConfig {
            entities: 12,
            unseen: 2,
            train_mentions: 400,
            lookup_per_entity: 3,
            type_sentences: 0,
            seed: 21,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn gold_stub_scores_one_and_oov_is_rejected() {
        let g = corpus();
        let mut qs = g.cloze.clone();
        let stub = GoldStub {
            vocab: &g.vocab,
            queries: &g.cloze,
        };
        let r = run_probe(&qs, &g.vocab, &stub, false, echo()).unwrap();
        assert_eq!(r.macro_p1, 1.0);
        assert_eq!(r.micro_p1, 1.0);
        assert!(r.results.iter().all(|x| x.gold_rank == 1));
        assert_eq!(r.buckets.iter().map(|b| b.queries).sum::<usize>(), qs.len());

        qs[0].gold = "atlantis".into();
        let r = run_probe(&qs, &g.vocab, &stub, false, echo()).unwrap();
        assert_eq!(r.rejected.len(), 1);
        assert_eq!(r.results.len(), qs.len() - 1);
        assert!(r.to_text().contains("rejected query 0"));
        assert!(run_probe(&[], &g.vocab, &stub, false, echo()).is_err());
    }

    #[test]
    fn macro_mean_matches_brute_recount() {
        let g = corpus();
        let c = Checkpoint::<f32>::init(ModelConfig {
            d: 16,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_len: 32,
            vocab_size: g.vocab.len(),
            ln_eps: 1e-5,
            seed: 2,
        })
        .unwrap();
        for restrict in [false, true] {
            let r = run_probe(&g.cloze, &g.vocab, &c, restrict, echo()).unwrap();
            let rels: BTreeSet<&str> = r.results.iter().map(|x| x.relation.as_str()).collect();
            let brute = rels
                .iter()
                .map(|rel| {
                    let xs: Vec<_> = r.results.iter().filter(|x| x.relation == *rel).collect();
                    xs.iter().filter(|x| x.correct).count() as f64 / xs.len() as f64
                })
                .sum::<f64>()
                / rels.len() as f64;
            assert!((brute - r.macro_p1).abs() < 1e-15);
            for b in &r.buckets {
                assert!((0.0..=1.0).contains(&b.mean_p1));
            }
            for x in &r.results {
                assert_eq!(x.train_freq, g.catalog.get(&x.subject).unwrap().train_freq);
            }
            if restrict {
                let cands = relation_candidates(&g.cloze, &g.vocab);
                for x in &r.results {
                    let id = g.vocab.id(&x.top1).unwrap();
                    assert!(cands[&x.relation].contains(&id));
                }
            }
        }
    }

    #[test]
    fn empty_table_report_equals_vanilla() {
        let g = corpus();
        let c = Checkpoint::<f32>::init(ModelConfig {
            d: 16,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_len: 32,
            vocab_size: g.vocab.len(),
            ln_eps: 1e-5,
            seed: 3,
        })
        .unwrap();
        let t = EntityEmbeddingTable::empty(c.fingerprint().unwrap(), 16, 1.0);
        let m = InfusedModel::new(&c, &t).unwrap();
        let a = run_probe(&g.cloze, &g.vocab, &c, false, echo()).unwrap();
        let b = run_probe(&g.cloze, &g.vocab, &m, false, echo()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_dedups_and_is_deterministic() {
        let g = corpus();
        let lookup = parse_corpus(&g.lookup.join("\n"), &g.vocab).unwrap();
        let c = Checkpoint::<f32>::init(ModelConfig {
            d: 16,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_len: 32,
            vocab_size: g.vocab.len(),
            ln_eps: 1e-5,
            seed: 4,
        })
        .unwrap();
        let dirs = Directions::build(&g.catalog.ids(), &lookup, &c, DEFAULT_CAP, "lookup").unwrap();
        let ls: Vec<f64> = (1..=10).map(f64::from).collect();
        let a = sweep_norm(&g.cloze, &g.vocab, &c, &dirs, &ls, false).unwrap();
        assert_eq!(a.curve.len(), 10);
        assert!(ls.contains(&a.selected));
        let best = a.curve.iter().map(|x| x.1).fold(f64::MIN, f64::max);
        let first_best = a.curve.iter().find(|x| x.1 == best).unwrap().0;
        assert_eq!(a.selected, first_best);
        let b = sweep_norm(&g.cloze, &g.vocab, &c, &dirs, &[3.0, 1.0, 3.0, 2.0], false).unwrap();
        assert_eq!(b.duplicates_removed, 1);
        assert_eq!(b.curve.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        assert_eq!(b.curve[..3], a.curve[..3]);
        assert!(sweep_norm(&g.cloze, &g.vocab, &c, &dirs, &[0.0], false).is_err());
    }
}
