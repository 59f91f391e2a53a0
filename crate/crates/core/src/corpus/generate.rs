use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexSet;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cloze_to_tsv, ClozeQuery, Entity, EntityCatalog, Vocabulary, MASK, SPECIALS};
use crate::error::{Error, Result};

/// A relation with its answer inventory and surface templates. Templates hold
/// `{e}` (subject) and `{v}` (answer) exactly once each.
#[derive(Clone, Debug, PartialEq)]
pub struct Relation {
    pub name: String,
    pub values: Vec<String>,
    pub templates: Vec<String>,
    /// Optional `{v}`-only sentence stating the answer's type.
    pub type_template: Option<String>,
}

impl Relation {
    fn new(name: &str, values: &[&str], templates: &[&str], type_template: &str) -> Self {
        Self {
            name: name.into(),
            values: values.iter().map(|s| s.to_string()).collect(),
            templates: templates.iter().map(|s| s.to_string()).collect(),
            type_template: Some(type_template.into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub entities: usize,
    /// Entities with train frequency 0; they appear in the lookup corpus only.
    pub unseen: usize,
    pub zipf: f64,
    /// Total entity mentions in the training corpus.
    pub train_mentions: usize,
    pub lookup_per_entity: usize,
    /// Share of lookup lines stating two facts about the entity.
    pub two_fact_rate: f64,
    pub type_sentences: usize,
    /// Number of shared fact profiles; 0 draws every fact independently.
    pub profiles: usize,
    /// Chance that a fact copies the entity's profile instead of being drawn
    /// uniformly.
    pub profile_fidelity: f64,
    pub seed: u64,
    pub relations: Vec<Relation>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            entities: 50,
            unseen: 8,
            zipf: 1.2,
            train_mentions: 2500,
            lookup_per_entity: 12,
            two_fact_rate: 0.5,
            type_sentences: 100,
            profiles: 5,
            profile_fidelity: 0.9,
            seed: 42,
            relations: default_relations(),
        }
    }
}

pub fn default_relations() -> Vec<Relation> {
    vec![
        Relation::new(
            "located_in",
            &[
                "paris", "london", "berlin", "madrid", "rome", "vienna", "oslo", "lisbon", "prague",
                "dublin",
            ],
            &[
                "{e} lives in {v} .",
                "{e} is based in {v} .",
                "{e} resides in {v} .",
                "the home of {e} is {v} .",
            ],
            "{v} is a city .",
        ),
        Relation::new(
            "works_as",
            &[
                "doctor", "lawyer", "teacher", "farmer", "pilot", "chef", "painter", "nurse",
                "baker", "writer",
            ],
            &[
                "{e} works as a {v} .",
                "{e} is a {v} by trade .",
                "{e} earns a living as a {v} .",
                "the job of {e} is {v} .",
            ],
            "{v} is a job .",
        ),
        Relation::new(
            "speaks",
            &[
                "french", "english", "german", "spanish", "italian", "dutch", "polish", "greek",
            ],
            &[
                "{e} speaks {v} .",
                "{e} is fluent in {v} .",
                "the language of {e} is {v} .",
                "{e} talks in {v} .",
            ],
            "{v} is a language .",
        ),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCorpus {
    pub vocab: Vocabulary,
    pub catalog: EntityCatalog,
    pub train: Vec<String>,
    pub lookup: Vec<String>,
    pub cloze: Vec<ClozeQuery>,
}

pub const ENTITY_PREFIX: &str = "ent_";

impl GeneratedCorpus {
    /// Writes `vocab.txt`, `catalog.tsv`, `train.txt`, `lookup.txt` and
    /// `cloze.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        self.catalog.save(&dir.join("catalog.tsv"))?;
        std::fs::write(dir.join("train.txt"), lines(&self.train))?;
        std::fs::write(dir.join("lookup.txt"), lines(&self.lookup))?;
        std::fs::write(dir.join("cloze.tsv"), cloze_to_tsv(&self.cloze))?;
        Ok(())
    }
}

fn lines(v: &[String]) -> String {
    let mut s = v.join("\n");
    s.push('\n');
    s
}

fn validate(cfg: &CorpusConfig) -> Result<()> {
    if cfg.entities < 2 {
        return Err(Error::Config("entity count must be at least 2".into()));
    }
    if cfg.unseen >= cfg.entities {
        return Err(Error::Config("at least one entity must be seen in training".into()));
    }
    if !(cfg.zipf.is_finite() && cfg.zipf >= 0.0) {
        return Err(Error::Config(format!("invalid Zipf exponent {}", cfg.zipf)));
    }
    if !(0.0..=1.0).contains(&cfg.profile_fidelity) {
        return Err(Error::Config("profile_fidelity must lie in [0,1]".into()));
    }
    if !(0.0..=1.0).contains(&cfg.two_fact_rate) {
        return Err(Error::Config("two_fact_rate must lie in [0,1]".into()));
    }
    if cfg.relations.is_empty() {
        return Err(Error::Config("grammar has no relations".into()));
    }
    let mut names = HashSet::new();
    for r in &cfg.relations {
        if !names.insert(&r.name) || r.name.contains(['\t', ',', '=']) {
            return Err(Error::Config(format!("bad or duplicate relation name `{}`", r.name)));
        }
        if r.values.is_empty() {
            return Err(Error::Config(format!("relation `{}` has no answers", r.name)));
        }
        for v in &r.values {
            let single = !v.is_empty() && !v.chars().any(char::is_whitespace);
            if !single || SPECIALS.contains(&v.as_str()) || v.starts_with(ENTITY_PREFIX) {
                return Err(Error::Config(format!(
                    "answer {v:?} of `{}` is not expressible as a single token",
                    r.name
                )));
            }
        }
        if r.templates.len() < 2 {
            return Err(Error::Config(format!(
                "relation `{}` needs at least two templates so one can be held out",
                r.name
            )));
        }
        for t in &r.templates {
            if t.matches("{e}").count() != 1 || t.matches("{v}").count() != 1 {
                return Err(Error::Config(format!(
                    "template {t:?} must hold {{e}} and {{v}} once"
                )));
            }
        }
    }
    Ok(())
}

fn render(template: &str, subject: &str, value: &str) -> String {
    template.replace("{e}", subject).replace("{v}", value)
}

/// Deterministic corpus generation from `cfg` (including its seed).
///
/// Seen entities receive mention counts proportional to `rank^-zipf`; each
/// (entity, relation) pair has one template reserved for its cloze query and
/// never used elsewhere. Lookup lines never coincide with a training line.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<GeneratedCorpus> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = (cfg.entities - 1).to_string().len().max(3);

    let mut order: Vec<usize> = (0..cfg.entities).collect();
    order.shuffle(&mut rng);
    let mut freq = vec![0usize; cfg.entities];
    let seen = &order[cfg.unseen..];
    let weights: Vec<f64> = (1..=seen.len())
        .map(|k| (k as f64).powf(-cfg.zipf))
        .collect();
    let total: f64 = weights.iter().sum();
    for (&e, w) in seen.iter().zip(&weights) {
        freq[e] = (cfg.train_mentions as f64 * w / total).round() as usize;
    }

    let profiles: Vec<Vec<usize>> = (0..cfg.profiles)
        .map(|_| {
            cfg.relations
                .iter()
                .map(|r| rng.random_range(0..r.values.len()))
                .collect()
        })
        .collect();
    let mut entities = Vec::with_capacity(cfg.entities);
    let mut held_out = Vec::with_capacity(cfg.entities);
    for (i, &f) in freq.iter().enumerate() {
        let num = format!("{i:0width$}");
        let profile = (!profiles.is_empty()).then(|| &profiles[rng.random_range(0..profiles.len())]);
        let facts = cfg
            .relations
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let v = match profile {
                    Some(p) if rng.random_bool(cfg.profile_fidelity) => p[k],
                    _ => rng.random_range(0..r.values.len()),
                };
                (r.name.clone(), r.values[v].clone())
            })
            .collect();
        held_out.push(
            cfg.relations
                .iter()
                .map(|r| rng.random_range(0..r.templates.len()))
                .collect::<Vec<_>>(),
        );
        entities.push(Entity {
            id: format!("e{num}"),
            surface: format!("{ENTITY_PREFIX}{num}"),
            pieces: vec![ENTITY_PREFIX.to_string(), num],
            facts,
            train_freq: f,
        });
    }

    let markup = |e: &Entity| format!("[[{}|{}]]", e.id, e.surface);
    let fact_line = |rng: &mut ChaCha8Rng, e: usize, r: usize| -> String {
        let rel = &cfg.relations[r];
        let mut t = rng.random_range(0..rel.templates.len() - 1);
        if t >= held_out[e][r] {
            t += 1;
        }
        render(&rel.templates[t], &markup(&entities[e]), &entities[e].facts[r].1)
    };

    let mut train = Vec::with_capacity(cfg.train_mentions + cfg.type_sentences);
    for (e, &f) in freq.iter().enumerate() {
        for _ in 0..f {
            let r = rng.random_range(0..cfg.relations.len());
            train.push(fact_line(&mut rng, e, r));
        }
    }
    let typed: Vec<&Relation> = cfg
        .relations
        .iter()
        .filter(|r| r.type_template.is_some())
        .collect();
    if !typed.is_empty() {
        for _ in 0..cfg.type_sentences {
            let rel = typed[rng.random_range(0..typed.len())];
            let v = &rel.values[rng.random_range(0..rel.values.len())];
            train.push(rel.type_template.as_deref().unwrap_or_default().replace("{v}", v));
        }
    }
    train.shuffle(&mut rng);
    let train_set: HashSet<&str> = train.iter().map(String::as_str).collect();

    let mut lookup = Vec::new();
    for e in 0..cfg.entities {
        let mut mine = IndexSet::new();
        let budget = cfg.lookup_per_entity * 20;
        for _ in 0..budget {
            if mine.len() == cfg.lookup_per_entity {
                break;
            }
            let two = cfg.relations.len() > 1 && rng.random_bool(cfg.two_fact_rate);
            let r1 = rng.random_range(0..cfg.relations.len());
            let mut line = fact_line(&mut rng, e, r1);
            if two {
                let mut r2 = rng.random_range(0..cfg.relations.len() - 1);
                if r2 >= r1 {
                    r2 += 1;
                }
                line.push(' ');
                line.push_str(&fact_line(&mut rng, e, r2));
            }
            if !train_set.contains(line.as_str()) {
                mine.insert(line);
            }
        }
        lookup.extend(mine);
    }
    lookup.shuffle(&mut rng);

    let mut cloze = Vec::with_capacity(cfg.entities * cfg.relations.len());
    for (e, ent) in entities.iter().enumerate() {
        for (r, rel) in cfg.relations.iter().enumerate() {
            let template = &rel.templates[held_out[e][r]];
            let q = ClozeQuery {
                subject: ent.id.clone(),
                relation: rel.name.clone(),
                gold: ent.facts[r].1.clone(),
                train_freq: ent.train_freq,
                text: render(template, &markup(ent), MASK),
            };
            if train_set.contains(q.text.replace(MASK, &q.gold).as_str()) {
                return Err(Error::Contract(format!(
                    "cloze query for {}/{} appears verbatim in the training corpus",
                    q.subject, q.relation
                )));
            }
            cloze.push(q);
        }
    }

    let vocab = build_vocab(cfg, &entities)?;
    let catalog = EntityCatalog::new(entities)?;
    catalog.check_vocab(&vocab)?;
    Ok(GeneratedCorpus {
        vocab,
        catalog,
        train,
        lookup,
        cloze,
    })
}

fn build_vocab(cfg: &CorpusConfig, entities: &[Entity]) -> Result<Vocabulary> {
    let mut pieces: IndexSet<String> = IndexSet::new();
    for r in &cfg.relations {
        let texts = r.templates.iter().chain(r.type_template.iter());
        for t in texts {
            for w in t.split_whitespace() {
                if w != "{e}" && w != "{v}" && !SPECIALS.contains(&w) {
                    pieces.insert(w.to_string());
                }
            }
        }
    }
    for r in &cfg.relations {
        pieces.extend(r.values.iter().cloned());
    }
    for e in entities {
        pieces.extend(e.pieces.iter().cloned());
    }
    Vocabulary::new(pieces)
}
