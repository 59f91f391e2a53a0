//! Synthetic fact corpora, entity catalogs, cloze sets and occurrence
//! indexing.
//!
//! Corpus files hold one sentence per line with mentions marked inline as
//! `[[entity_id|surface text]]`.

mod generate;
mod occurrences;
mod vocab;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub use generate::{generate_corpus, CorpusConfig, GeneratedCorpus, Relation};
pub use occurrences::{index_all, index_occurrences, Occurrence, OccurrenceSet, DEFAULT_CAP};
pub use vocab::*;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mention {
    pub entity: String,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sentence {
    pub tokens: Vec<u32>,
    pub mentions: Vec<Mention>,
}

impl Sentence {
    /// Checks span bounds, ordering, and that every span spells its entity's
    /// subword decomposition.
    pub fn validate(&self, catalog: &EntityCatalog, vocab: &Vocabulary) -> Result<()> {
        let mut prev_end = 0;
        for m in &self.mentions {
            if m.start >= m.end || m.end > self.tokens.len() || m.start < prev_end {
                return Err(Error::Contract(format!(
                    "mention span {}..{} of `{}` is invalid in a sentence of {} tokens",
                    m.start,
                    m.end,
                    m.entity,
                    self.tokens.len()
                )));
            }
            prev_end = m.end;
            let ent = catalog
                .get(&m.entity)
                .ok_or_else(|| Error::Contract(format!("unknown entity `{}`", m.entity)))?;
            if self.tokens[m.start..m.end] != ent.piece_ids(vocab)? {
                return Err(Error::Contract(format!(
                    "span of `{}` does not match its subwords",
                    m.entity
                )));
            }
        }
        Ok(())
    }
}

/// Parses one marked-up line. Surface text inside a mention is tokenised like
/// any other text; the span covers exactly those tokens.
pub fn parse_marked(line: &str, vocab: &Vocabulary) -> Result<Sentence> {
    let mut tokens = Vec::new();
    let mut mentions = Vec::new();
    let mut rest = line;
    while let Some(open) = rest.find("[[") {
        tokens.extend(vocab.tokenize(&rest[..open]));
        let after = &rest[open + 2..];
        let close = after
            .find("]]")
            .ok_or_else(|| Error::Format(format!("unterminated mention in {line:?}")))?;
        let inner = &after[..close];
        let (id, surface) = inner
            .split_once('|')
            .ok_or_else(|| Error::Format(format!("mention without `|` in {line:?}")))?;
        if id.trim().is_empty() || surface.trim().is_empty() {
            return Err(Error::Format(format!("empty mention field in {line:?}")));
        }
        let start = tokens.len();
        tokens.extend(vocab.tokenize(surface));
        mentions.push(Mention {
            entity: id.trim().to_string(),
            start,
            end: tokens.len(),
        });
        rest = &after[close + 2..];
    }
    tokens.extend(vocab.tokenize(rest));
    Ok(Sentence { tokens, mentions })
}

/// Reads a corpus file, skipping blank lines.
pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<Sentence>> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text, vocab)
}

pub fn parse_corpus(text: &str, vocab: &Vocabulary) -> Result<Vec<Sentence>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_marked(l, vocab).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub id: String,
    pub surface: String,
    pub pieces: Vec<String>,
    /// (relation, answer) pairs.
    pub facts: Vec<(String, String)>,
    /// Mentions in the training corpus.
    pub train_freq: usize,
}

impl Entity {
    pub fn piece_ids(&self, vocab: &Vocabulary) -> Result<Vec<u32>> {
        self.pieces
            .iter()
            .map(|p| {
                vocab
                    .id(p)
                    .ok_or_else(|| Error::Config(format!("piece `{p}` of `{}` not in vocabulary", self.id)))
            })
            .collect()
    }

    pub fn fact(&self, relation: &str) -> Option<&str> {
        self.facts
            .iter()
            .find(|(r, _)| r == relation)
            .map(|(_, v)| v.as_str())
    }
}

const CATALOG_HEADER: &str = "#id\tsurface\tpieces\ttrain_freq\tfacts";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EntityCatalog {
    entities: Vec<Entity>,
    index: HashMap<String, usize>,
}

impl EntityCatalog {
    pub fn new(entities: Vec<Entity>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, e) in entities.iter().enumerate() {
            if e.pieces.len() < 2 {
                return Err(Error::Config(format!(
                    "entity `{}` must decompose into at least two subwords",
                    e.id
                )));
            }
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate entity id `{}`", e.id)));
            }
        }
        Ok(Self { entities, index })
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Entity> {
        self.index.get(id).map(|&i| &self.entities[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entity> {
        self.entities.iter()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entities.iter().map(|e| e.id.clone()).collect()
    }

    /// Checks that every piece exists and every fact answer is one token.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        for e in &self.entities {
            e.piece_ids(vocab)?;
            if vocab.tokenize(&e.surface) != e.piece_ids(vocab)? {
                return Err(Error::Config(format!(
                    "surface `{}` does not tokenise to its pieces",
                    e.surface
                )));
            }
            for (rel, v) in &e.facts {
                if vocab.id(v).is_none() {
                    return Err(Error::Config(format!(
                        "answer `{v}` for {}/{rel} is not a single vocabulary token",
                        e.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(CATALOG_HEADER);
        s.push('\n');
        for e in &self.entities {
            let facts: Vec<String> = e.facts.iter().map(|(r, v)| format!("{r}={v}")).collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                e.id,
                e.surface,
                e.pieces.join(" "),
                e.train_freq,
                facts.join(",")
            );
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entities = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err("expected 5 tab-separated fields"));
            }
            let facts = f[4]
                .split(',')
                .filter(|x| !x.is_empty())
                .map(|kv| {
                    kv.split_once('=')
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .ok_or_else(|| err("fact without `=`"))
                })
                .collect::<Result<Vec<_>>>()?;
            entities.push(Entity {
                id: f[0].to_string(),
                surface: f[1].to_string(),
                pieces: f[2].split(' ').map(str::to_string).collect(),
                train_freq: f[3].parse().map_err(|_| err("bad train_freq"))?,
                facts,
            });
        }
        Self::new(entities)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }
}

/// Train-frequency bucket with edges 0, 10, 50, 100.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FrequencyBucket {
    Rare,
    Low,
    Mid,
    High,
}

impl FrequencyBucket {
    pub const ALL: [FrequencyBucket; 4] = [Self::Rare, Self::Low, Self::Mid, Self::High];

    pub fn of(freq: usize) -> Self {
        match freq {
            0..=9 => Self::Rare,
            10..=49 => Self::Low,
            50..=99 => Self::Mid,
            _ => Self::High,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Rare => "[0,10)",
            Self::Low => "[10,50)",
            Self::Mid => "[50,100)",
            Self::High => "[100,inf)",
        }
    }
}

const CLOZE_HEADER: &str = "#subject\trelation\tgold\ttrain_freq\tquery";

/// One fact query; `text` holds a single `[MASK]` and the subject marked up
/// as a mention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClozeQuery {
    pub subject: String,
    pub relation: String,
    pub gold: String,
    pub train_freq: usize,
    pub text: String,
}

impl ClozeQuery {
    /// Tokenises the query and locates its mask.
    pub fn parse(&self, vocab: &Vocabulary) -> Result<(Sentence, usize)> {
        let s = parse_marked(&self.text, vocab)?;
        let masks: Vec<usize> = (0..s.tokens.len())
            .filter(|&i| s.tokens[i] == MASK_ID)
            .collect();
        match masks.as_slice() {
            [p] => Ok((s, *p)),
            _ => Err(Error::Format(format!(
                "cloze query must hold exactly one {MASK}: {:?}",
                self.text
            ))),
        }
    }

    pub fn bucket(&self) -> FrequencyBucket {
        FrequencyBucket::of(self.train_freq)
    }
}

pub fn cloze_to_tsv(queries: &[ClozeQuery]) -> String {
    let mut s = String::from(CLOZE_HEADER);
    s.push('\n');
    for q in queries {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            q.subject, q.relation, q.gold, q.train_freq, q.text
        );
    }
    s
}

pub fn cloze_from_tsv(text: &str) -> Result<Vec<ClozeQuery>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected 5 tab-separated fields".into(),
            });
        }
        out.push(ClozeQuery {
            subject: f[0].to_string(),
            relation: f[1].to_string(),
            gold: f[2].to_string(),
            train_freq: f[3].parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: "bad train_freq".into(),
            })?,
            text: f[4].to_string(),
        });
    }
    Ok(out)
}

pub fn load_cloze(path: &Path) -> Result<Vec<ClozeQuery>> {
    cloze_from_tsv(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Vocabulary, EntityCatalog) {
        let v = Vocabulary::new(["ent_", "042", "007", "lives", "in", "paris", "."]).unwrap();
        let c = EntityCatalog::new(vec![
            Entity {
                id: "e042".into(),
                surface: "ent_042".into(),
                pieces: vec!["ent_".into(), "042".into()],
                facts: vec![("located_in".into(), "paris".into())],
                train_freq: 3,
            },
            Entity {
                id: "e007".into(),
                surface: "ent_007".into(),
                pieces: vec!["ent_".into(), "007".into()],
                facts: vec![],
                train_freq: 120,
            },
        ])
        .unwrap();
        (v, c)
    }

    #[test]
    fn markup_yields_spans_over_subwords() {
        let (v, c) = setup();
        let s = parse_marked("[[e042|ent_042]] lives in paris .", &v).unwrap();
        assert_eq!(s.tokens.len(), 6);
        assert_eq!(
            s.mentions,
            vec![Mention {
                entity: "e042".into(),
                start: 0,
                end: 2
            }]
        );
        s.validate(&c, &v).unwrap();
        assert_eq!(
            v.tokenize("ent_042"),
            c.get("e042").unwrap().piece_ids(&v).unwrap()
        );
    }

    #[test]
    fn malformed_markup_is_rejected() {
        let (v, _) = setup();
        assert!(parse_marked("[[e042|ent_042 lives", &v).is_err());
        assert!(parse_marked("[[e042 ent_042]] lives", &v).is_err());
        let bad = parse_corpus("paris .\n[[x|]] .\n", &v);
        assert!(matches!(bad, Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn validate_catches_wrong_spans() {
        let (v, c) = setup();
        let mut s = parse_marked("[[e042|ent_042]] lives in paris .", &v).unwrap();
        s.mentions[0].entity = "e007".into();
        assert!(s.validate(&c, &v).is_err());
    }

    #[test]
    fn catalog_and_cloze_round_trip() {
        let (_, c) = setup();
        assert_eq!(EntityCatalog::from_tsv(&c.to_tsv()).unwrap(), c);
        let q = vec![ClozeQuery {
            subject: "e042".into(),
            relation: "located_in".into(),
            gold: "paris".into(),
            train_freq: 3,
            text: "[[e042|ent_042]] lives in [MASK] .".into(),
        }];
        assert_eq!(cloze_from_tsv(&cloze_to_tsv(&q)).unwrap(), q);
    }

    #[test]
    fn single_piece_entities_are_rejected() {
        let r = EntityCatalog::new(vec![Entity {
            id: "x".into(),
            surface: "x".into(),
            pieces: vec!["x".into()],
            facts: vec![],
            train_freq: 0,
        }]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn cloze_query_locates_its_mask() {
        let (v, _) = setup();
        let q = ClozeQuery {
            subject: "e042".into(),
            relation: "located_in".into(),
            gold: "paris".into(),
            train_freq: 3,
            text: "[[e042|ent_042]] lives in [MASK] .".into(),
        };
        let (s, p) = q.parse(&v).unwrap();
        assert_eq!(p, 4);
        assert_eq!(s.tokens[p], MASK_ID);
    }

    #[test]
    fn buckets_partition_the_frequency_axis() {
        let edges = [(0, 0), (9, 0), (10, 1), (49, 1), (50, 2), (99, 2), (100, 3), (10_000, 3)];
        for (f, b) in edges {
            assert_eq!(FrequencyBucket::of(f), FrequencyBucket::ALL[b], "freq {f}");
        }
    }
}
