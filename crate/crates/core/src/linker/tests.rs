use proptest::prelude::*;

use super::*;

fn graph(text: &str) -> PageGraph {
    PageGraph::parse(text).unwrap()
}

fn link_doc(g: &PageGraph, id: &str) -> LinkAssignment {
    let aliases = build_alias_table(g.pages.values());
    link_iterate(g.document(id).unwrap(), g, &aliases)
}

fn by_span(doc: &Document, a: &LinkAssignment) -> BTreeMap<(usize, usize), Option<(String, usize)>> {
    doc.candidates
        .iter()
        .enumerate()
        .map(|(i, c)| ((c.start, c.end), a.links.get(&i).cloned()))
        .collect()
}

#[test]
fn alias_table_examples() {
    let g = graph(
        "PAGE\tsolo\tSolo\n\
         PAGE\tmp\tMercury (planet)\tmercury\n\
         PAGE\tme\tMercury (element)\tMercury\n\
         PAGE\tcov\tCOVID-19\tcovid-19\n",
    );
    let t = build_alias_table(g.pages.values());
    assert_eq!(t.pages("solo").unwrap().len(), 1);
    let m: Vec<_> = t.pages("MERCURY").unwrap().iter().cloned().collect();
    assert_eq!(m, ["me", "mp"]);
    assert_eq!(t.pages("covid-19").unwrap().len(), 1);
    assert_eq!(t.map.keys().filter(|k| k.starts_with("covid")).count(), 1);
    assert_eq!(t.ambiguous().count(), 1);
    assert_eq!(normalize_alias("  Lamar \t  COUNTY "), "lamar county");

    assert_eq!(link_simple("Solo", &t), SimpleLink::Unique("solo".into()));
    assert_eq!(
        link_simple("mercury", &t),
        SimpleLink::Ambiguous(vec!["me".into(), "mp".into()])
    );
    assert_eq!(link_simple("pluto", &t), SimpleLink::None);
}

#[test]
fn neighbor_of_anchor_links_in_first_round() {
    let g = graph(
        "PAGE\ta\tA\n\
         PAGE\tb\tB\n\
         EDGE\ta\tb\thyperlink\n\
         DOC\tx\tsee [[a|A]] and {{b}} .\n",
    );
    let r = link_doc(&g, "x");
    assert_eq!(r.links[&0], ("b".to_string(), 1));
    assert!(r.unresolved.is_empty());
    assert_eq!(r.trace[0].seeds, BTreeSet::from(["a".to_string()]));
    assert_eq!(r.trace[0].frontier, BTreeSet::from(["b".to_string()]));
    // round 2 expands from b back to a and links nothing
    assert_eq!(r.rounds(), 2);
}

#[test]
fn ambiguity_inside_the_frontier_never_resolves() {
    let g = graph(
        "PAGE\ta\tA\n\
         PAGE\tb1\tB one\tb\n\
         PAGE\tb2\tB two\tb\n\
         EDGE\ta\tb1\tr\n\
         EDGE\tb2\ta\tr\n\
         DOC\tx\t[[a|A]] {{b}}\n",
    );
    let r = link_doc(&g, "x");
    assert_eq!(r.unresolved, BTreeSet::from([0]));
    assert!(r.links.is_empty());
    assert_eq!(r.rounds(), 1);

    // once a unique match re-seeds the loop, the pending span is retried
    // against the new frontier only
    let g = graph(
        "PAGE\ta\tA\n\
         PAGE\tb1\tB one\tb\n\
         PAGE\tb2\tB two\tb\n\
         EDGE\ta\tb1\tr\n\
         EDGE\ta\tb2\tr\n\
         EDGE\tb1\tb2\tr\n\
         DOC\tx\t[[a|A]] {{b}} {{B one}}\n",
    );
    let r = link_doc(&g, "x");
    assert_eq!(r.links[&1], ("b1".to_string(), 1));
    assert_eq!(r.links[&0], ("b2".to_string(), 2));
    assert_eq!(r.rounds(), 3);
}

#[test]
fn no_anchors_means_no_rounds() {
    let g = graph("PAGE\ta\tA\nDOC\tx\t{{A}} and {{a}}\n");
    let r = link_doc(&g, "x");
    assert!(r.links.is_empty());
    assert_eq!(r.unresolved.len(), 2);
    assert_eq!(r.rounds(), 0);
}

#[test]
fn parse_errors_carry_line_numbers() {
    let bad = [
        ("PAGE\ta\tA\nEDGE\ta\tz\tr\n", 2),
        ("PAGE\ta\tA\n\nDOC\tx\t[[q|Q]]\n", 3),
        ("DOC\tx\t{{open\n", 1),
        ("PAGE\ta\n", 1),
        ("WHAT\ta\n", 1),
        ("PAGE\ta\tA\nPAGE\ta\tB\n", 2),
    ];
    for (text, line) in bad {
        match PageGraph::parse(text) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn document_markup_offsets() {
    let d = parse_document("x", "[[p|Pa ris]] met {{Bob}} .").unwrap();
    assert_eq!(d.text, "Pa ris met Bob .");
    assert_eq!(d.anchors[0], Anchor { page: "p".into(), start: 0, end: 6 });
    assert_eq!(&d.text[d.candidates[0].start..d.candidates[0].end], "Bob");
}

#[test]
fn toy_graph_matches_hand_trace() {
    let g = graph(TOY_GRAPH);
    assert_eq!(g.pages.len(), 20);
    let aliases = build_alias_table(g.pages.values());
    assert_eq!(aliases.ambiguous().count(), 5);
    let results = link_all(&g);
    assert_eq!(assignments_to_tsv(&g, &results), TOY_GRAPH_EXPECTED);

    let rounds: Vec<usize> = results.iter().map(|r| r.rounds()).collect();
    assert_eq!(rounds, [3, 2, 3, 3, 2, 2, 0, 2]);
    for (doc, r) in g.documents.iter().zip(&results) {
        assert!(r.rounds() <= doc.candidates.len() + 1);
        for round in &r.trace {
            for (c, p) in &round.assigned {
                assert!(round.frontier.contains(p));
                assert_eq!(r.links[c], (p.clone(), round.index));
                assert!(!r.unresolved.contains(c));
            }
        }
    }
}

proptest! {
    #[test]
    fn candidate_order_does_not_matter(
        doc_ix in 0usize..8,
        keys in proptest::collection::vec(any::<u32>(), 3),
    ) {
        let g = graph(TOY_GRAPH);
        let aliases = build_alias_table(g.pages.values());
        let doc = &g.documents[doc_ix];
        let base = link_iterate(doc, &g, &aliases);

        let mut shuffled = doc.clone();
        let mut order: Vec<usize> = (0..shuffled.candidates.len()).collect();
        order.sort_by_key(|&i| keys[i]);
        shuffled.candidates = order.iter().map(|&i| doc.candidates[i].clone()).collect();
        let again = link_iterate(&shuffled, &g, &aliases);
        prop_assert_eq!(by_span(doc, &base), by_span(&shuffled, &again));
        prop_assert_eq!(base.rounds(), again.rounds());
    }
}
