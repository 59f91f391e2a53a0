//! String-match entity linking over a small hyperlinked page graph.
//!
//! Graph files are line oriented and tab separated:
//!
//! ```text
//! PAGE  <id>  <title>  [alias ...]
//! EDGE  <src> <dst>    <kind>
//! DOC   <id>  <text with [[page_id|anchor]] and {{candidate}} markup>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Page {
    pub id: String,
    pub title: String,
    /// Always contains the title.
    pub aliases: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub kind: String,
}

/// A pre-linked span in a document's plain text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Anchor {
    pub page: String,
    pub start: usize,
    pub end: usize,
}

/// An unlinked name span in a document's plain text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    /// Text with markup removed; span offsets are byte offsets into it.
    pub text: String,
    pub anchors: Vec<Anchor>,
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Debug, Default)]
pub struct PageGraph {
    pub pages: IndexMap<String, Page>,
    pub edges: Vec<Edge>,
    pub documents: Vec<Document>,
    neighbors: HashMap<String, BTreeSet<String>>,
}

/// Case folding plus whitespace collapse.
pub fn normalize_alias(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits `[[page|anchor]]` and `{{candidate}}` markup out of `raw`.
pub fn parse_document(id: &str, raw: &str) -> std::result::Result<Document, String> {
    let mut text = String::with_capacity(raw.len());
    let mut anchors = Vec::new();
    let mut candidates = Vec::new();
    let mut rest = raw;
    loop {
        let a = rest.find("[[");
        let c = rest.find("{{");
        let (at, is_anchor) = match (a, c) {
            (None, None) => break,
            (Some(a), Some(c)) if c < a => (c, false),
            (Some(a), _) => (a, true),
            (None, Some(c)) => (c, false),
        };
        text.push_str(&rest[..at]);
        let body = &rest[at + 2..];
        let close = if is_anchor { "]]" } else { "}}" };
        let end = body
            .find(close)
            .ok_or_else(|| format!("unterminated markup at `{}`", &rest[at..]))?;
        let inner = &body[..end];
        if inner.contains("[[") || inner.contains("{{") {
            return Err(format!("nested markup in `{inner}`"));
        }
        let start = text.len();
        if is_anchor {
            let (page, surface) = inner
                .split_once('|')
                .ok_or_else(|| format!("anchor `{inner}` lacks `page|text`"))?;
            if page.trim().is_empty() || surface.trim().is_empty() {
                return Err(format!("empty anchor `{inner}`"));
            }
            text.push_str(surface);
            anchors.push(Anchor {
                page: page.trim().to_string(),
                start,
                end: text.len(),
            });
        } else {
            if inner.trim().is_empty() {
                return Err("empty candidate".into());
            }
            text.push_str(inner);
            candidates.push(Candidate {
                surface: inner.to_string(),
                start,
                end: text.len(),
            });
        }
        rest = &body[end + 2..];
    }
    text.push_str(rest);
    Ok(Document {
        id: id.to_string(),
        text,
        anchors,
        candidates,
    })
}

impl PageGraph {
    pub fn parse(text: &str) -> Result<Self> {
        let mut g = PageGraph::default();
        let mut pending_edges = Vec::new();
        let mut pending_docs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            let err = |msg: String| Error::Parse { line: ln, msg };
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[0] {
                "PAGE" => {
                    if fields.len() < 3 || fields[1].is_empty() || fields[2].trim().is_empty() {
                        return Err(err("PAGE needs an id and a title".into()));
                    }
                    let id = fields[1].to_string();
                    let title = fields[2].to_string();
                    let mut aliases = vec![title.clone()];
                    for a in &fields[3..] {
                        if !a.trim().is_empty() && !aliases.iter().any(|x| x == a) {
                            aliases.push(a.to_string());
                        }
                    }
                    if g.pages.contains_key(&id) {
                        return Err(err(format!("duplicate page `{id}`")));
                    }
                    g.pages.insert(id.clone(), Page { id, title, aliases });
                }
                "EDGE" => {
                    if fields.len() != 4 {
                        return Err(err("EDGE needs src, dst and kind".into()));
                    }
                    pending_edges.push((
                        ln,
                        Edge {
                            src: fields[1].into(),
                            dst: fields[2].into(),
                            kind: fields[3].into(),
                        },
                    ));
                }
                "DOC" => {
                    if fields.len() != 3 {
                        return Err(err("DOC needs an id and a text".into()));
                    }
                    pending_docs.push((ln, parse_document(fields[1], fields[2]).map_err(err)?));
                }
                other => return Err(err(format!("unknown record type `{other}`"))),
            }
        }
        for (ln, e) in pending_edges {
            for end in [&e.src, &e.dst] {
                if !g.pages.contains_key(end) {
                    return Err(Error::Parse {
                        line: ln,
                        msg: format!("edge endpoint `{end}` is not a page"),
                    });
                }
            }
            g.neighbors.entry(e.src.clone()).or_default().insert(e.dst.clone());
            g.neighbors.entry(e.dst.clone()).or_default().insert(e.src.clone());
            g.edges.push(e);
        }
        for (ln, d) in pending_docs {
            if let Some(a) = d.anchors.iter().find(|a| !g.pages.contains_key(&a.page)) {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("anchor references unknown page `{}`", a.page),
                });
            }
            if g.documents.iter().any(|x| x.id == d.id) {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("duplicate document `{}`", d.id),
                });
            }
            g.documents.push(d);
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Pages joined to `page` by an edge in either direction.
    pub fn neighbors(&self, page: &str) -> impl Iterator<Item = &str> {
        self.neighbors
            .get(page)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }
}

/// Normalized alias → pages carrying it.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AliasTable {
    pub map: BTreeMap<String, BTreeSet<String>>,
}

impl AliasTable {
    pub fn pages(&self, name: &str) -> Option<&BTreeSet<String>> {
        self.map.get(&normalize_alias(name))
    }

    pub fn ambiguous(&self) -> impl Iterator<Item = (&str, &BTreeSet<String>)> {
        self.map
            .iter()
            .filter(|(_, p)| p.len() > 1)
            .map(|(a, p)| (a.as_str(), p))
    }
}

pub fn build_alias_table<'p>(pages: impl IntoIterator<Item = &'p Page>) -> AliasTable {
    let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for p in pages {
        for a in &p.aliases {
            map.entry(normalize_alias(a)).or_default().insert(p.id.clone());
        }
    }
    AliasTable { map }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SimpleLink {
    Unique(String),
    Ambiguous(Vec<String>),
    None,
}

pub fn link_simple(name: &str, aliases: &AliasTable) -> SimpleLink {
    match aliases.pages(name) {
        None => SimpleLink::None,
        Some(p) if p.len() == 1 => SimpleLink::Unique(p.iter().next().expect("one page").clone()),
        Some(p) => SimpleLink::Ambiguous(p.iter().cloned().collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Round {
    pub index: usize,
    /// Pages seeding this round.
    pub seeds: BTreeSet<String>,
    /// Their neighbors, the only pages eligible this round.
    pub frontier: BTreeSet<String>,
    /// Candidate indices linked this round, with their pages.
    pub assigned: Vec<(usize, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkAssignment {
    pub doc: String,
    /// Candidate index → (page, round).
    pub links: BTreeMap<usize, (String, usize)>,
    pub unresolved: BTreeSet<usize>,
    pub trace: Vec<Round>,
}

impl LinkAssignment {
    pub fn rounds(&self) -> usize {
        self.trace.len()
    }
}

/// Iterative disambiguation seeded by the anchors of `doc`.
///
/// Each round, the frontier is every page adjacent to the current seeds. A
/// pending candidate is linked when its alias names exactly one frontier page.
/// All matches are decided before any is applied, and the linked pages seed
/// the next round. The loop ends when a round links nothing.
pub fn link_iterate(doc: &Document, graph: &PageGraph, aliases: &AliasTable) -> LinkAssignment {
    let mut seeds: BTreeSet<String> = doc.anchors.iter().map(|a| a.page.clone()).collect();
    let mut pending: BTreeSet<usize> = (0..doc.candidates.len()).collect();
    let mut links = BTreeMap::new();
    let mut trace = Vec::new();
    while !seeds.is_empty() {
        let index = trace.len() + 1;
        let frontier: BTreeSet<String> = seeds
            .iter()
            .flat_map(|s| graph.neighbors(s))
            .map(str::to_string)
            .collect();
        let assigned: Vec<(usize, String)> = pending
            .iter()
            .filter_map(|&c| {
                let pages = aliases.pages(&doc.candidates[c].surface)?;
                let mut hits = pages.iter().filter(|p| frontier.contains(*p));
                match (hits.next(), hits.next()) {
                    (Some(p), None) => Some((c, p.clone())),
                    _ => None,
                }
            })
            .collect();
        let next: BTreeSet<String> = assigned.iter().map(|(_, p)| p.clone()).collect();
        for (c, p) in &assigned {
            pending.remove(c);
            links.insert(*c, (p.clone(), index));
        }
        trace.push(Round {
            index,
            seeds: std::mem::replace(&mut seeds, next),
            frontier,
            assigned,
        });
    }
    LinkAssignment {
        doc: doc.id.clone(),
        links,
        unresolved: pending,
        trace,
    }
}

pub const UNRESOLVED: &str = "UNRESOLVED";

/// Bundled 20-page graph with five ambiguous aliases.
pub const TOY_GRAPH: &str = include_str!("../data/toy_graph.txt");
/// Hand-traced linking output for [`TOY_GRAPH`].
pub const TOY_GRAPH_EXPECTED: &str = include_str!("../data/toy_graph.expected.tsv");

/// One row per candidate: doc, span, surface, page or `UNRESOLVED`, round
/// (0 when unresolved).
pub fn assignments_to_tsv(graph: &PageGraph, results: &[LinkAssignment]) -> String {
    let mut out = String::from("#doc\tspan\tsurface\tpage\tround\n");
    for r in results {
        let Some(doc) = graph.document(&r.doc) else {
            continue;
        };
        for (i, c) in doc.candidates.iter().enumerate() {
            let (page, round) = match r.links.get(&i) {
                Some((p, k)) => (p.as_str(), *k),
                None => (UNRESOLVED, 0),
            };
            let _ = writeln!(
                out,
                "{}\t{}..{}\t{}\t{}\t{}",
                doc.id, c.start, c.end, c.surface, page, round
            );
        }
    }
    out
}

/// Links every document of `graph`, in file order.
pub fn link_all(graph: &PageGraph) -> Vec<LinkAssignment> {
    use rayon::prelude::*;
    let aliases = build_alias_table(graph.pages.values());
    graph
        .documents
        .par_iter()
        .map(|d| link_iterate(d, graph, &aliases))
        .collect()
}

#[cfg(test)]
mod tests;
