use proptest::prelude::*;

use super::*;
use crate::corpus::{generate_corpus, index_all, parse_corpus, CorpusConfig, DEFAULT_CAP};
use crate::model::ModelConfig;

fn ckpt(vocab: usize, seed: u64) -> Checkpoint<f32> {
    Checkpoint::<f32>::init(ModelConfig {
        d: 16,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        max_len: 40,
        vocab_size: vocab,
        ln_eps: 1e-5,
        seed,
    })
    .unwrap()
}

fn small_corpus() -> crate::corpus::GeneratedCorpus {
    generate_corpus(&CorpusConfig {
        entities: 10,
        unseen: 2,
        train_mentions: 120,
        lookup_per_entity: 4,
        type_sentences: 5,
        seed: 11,
        ..CorpusConfig::default()
    })
    .unwrap()
}

#[test]
fn single_occurrence_is_plain_output_repr() {
    let g = small_corpus();
    let lookup = parse_corpus(&g.lookup.join("\n"), &g.vocab).unwrap();
    let c = ckpt(g.vocab.len(), 1).cast::<f64>();
    let mut set = index_occurrences("e003", &lookup, 1, "lookup");
    assert_eq!(set.len(), 1);
    let rs = collect_masked_outputs(&set, &c).unwrap();
    let occ = &set.items[0];
    let h = c.encode_tokens(&occ.tokens).unwrap();
    let r = c.output_repr(h.row(occ.mask_pos)).unwrap();
    for (a, b) in r.iter().zip(&rs[0]) {
        assert!((a - b).abs() < 1e-12);
    }
    set.items.clear();
    assert!(matches!(
        collect_masked_outputs(&set, &c),
        Err(Error::NoOccurrences(id)) if id == "e003"
    ));
}

#[test]
fn parallel_and_serial_collection_agree() {
    let g = small_corpus();
    let lookup = parse_corpus(&g.lookup.join("\n"), &g.vocab).unwrap();
    let c = ckpt(g.vocab.len(), 2);
    let ids = g.catalog.ids();
    let sets = index_all(&ids, &lookup, DEFAULT_CAP, "lookup");
    let par: Vec<_> = sets
        .par_iter()
        .map(|s| collect_masked_outputs(s, &c).unwrap())
        .collect();
    for (s, p) in sets.iter().zip(&par) {
        assert_eq!(&collect_masked_outputs(s, &c).unwrap(), p);
    }
}

#[test]
fn hand_example_and_single_vector_identity() {
    let e = build_embedding(&[vec![3.0f64, 0.0], vec![0.0, 4.0]], 10.0).unwrap();
    assert!((e[0] - 6.0).abs() < 1e-6 && (e[1] - 8.0).abs() < 1e-6);

    let r = vec![0.3f64, -1.2, 2.5, 0.7];
    let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let e = build_embedding(std::slice::from_ref(&r), norm).unwrap();
    for (a, b) in e.iter().zip(&r) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn opposite_vectors_are_degenerate() {
    let v = vec![1.5f64, -2.0, 0.25];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    assert!(matches!(build_embedding(&[v, neg], 3.0), Err(Error::DegenerateDirection)));
    assert!(build_embedding(&[vec![1.0f64]], 0.0).is_err());
}

proptest! {
    #[test]
    fn norm_is_l_and_scale_and_order_do_not_matter(
        vs in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 8), 1..20),
        l in 0.1f64..20.0,
        c in 1e-3f64..1e3,
        rot in 0usize..20,
    ) {
        let s: Vec<f64> = (0..8).map(|i| vs.iter().map(|v| v[i]).sum()).collect();
        prop_assume!(s.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3);
        let e = build_embedding(&vs, l).unwrap();
        let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - l).abs() <= 1e-5 * l);

        let scaled: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
        let e2 = build_embedding(&scaled, l).unwrap();
        for (a, b) in e.iter().zip(&e2) {
            prop_assert!((a - b).abs() < 1e-9 * l);
        }

        let mut shuffled = vs.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let e3 = build_embedding(&shuffled, l).unwrap();
        for (a, b) in e.iter().zip(&e3) {
            prop_assert!((a - b).abs() < 1e-12 * l.max(1.0) * 10.0);
        }
    }
}

#[test]
fn table_contents_skips_and_determinism() {
    let g = small_corpus();
    let lookup = parse_corpus(&g.lookup.join("\n"), &g.vocab).unwrap();
    let c = ckpt(g.vocab.len(), 3);
    let mut ids = g.catalog.ids();
    ids.push("e999".into());
    let (t, skip) = build_table(&ids, &lookup, &c, 4.0, DEFAULT_CAP, "lookup").unwrap();
    assert!(skip.contains("e999"));
    assert!(t.get("e999").is_none());
    assert_eq!(t.len(), g.catalog.len());
    for e in &t.entries {
        let n = e.vector.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 4.0).abs() < 4e-5);
        assert!(e.count >= 1);
        assert_eq!(e.source, "lookup");
    }
    for unseen in g.catalog.iter().filter(|e| e.train_freq == 0) {
        assert!(t.get(&unseen.id).unwrap().count >= 1);
    }
    let (t2, _) = build_table(&ids, &lookup, &c, 4.0, DEFAULT_CAP, "lookup").unwrap();
    assert_eq!(t.to_bytes().unwrap(), t2.to_bytes().unwrap());

    // directions do not depend on L
    let dirs = Directions::build(&ids, &lookup, &c, DEFAULT_CAP, "lookup").unwrap();
    let a = dirs.table(1.0).unwrap();
    let b = dirs.table(10.0).unwrap();
    for (x, y) in a.entries.iter().zip(&b.entries) {
        let xs: Vec<f64> = x.vector.iter().map(|&v| v as f64).collect();
        let ys: Vec<f64> = y.vector.iter().map(|&v| v as f64).collect();
        assert!((oracle::cosine(&xs, &ys) - 1.0).abs() < 1e-6);
    }
    let (_, tbl_skip) = build_table(&["e999".to_string()], &lookup, &c, 1.0, 8, "lookup").unwrap();
    assert_eq!(tbl_skip.skipped, vec![("e999".to_string(), SkipReason::NoOccurrences)]);
}

#[test]
fn table_files_round_trip_and_check_fingerprints() {
    let g = small_corpus();
    let lookup = parse_corpus(&g.lookup.join("\n"), &g.vocab).unwrap();
    let a = ckpt(g.vocab.len(), 4);
    let b = ckpt(g.vocab.len(), 5);
    let (t, _) = build_table(&g.catalog.ids(), &lookup, &a, 2.5, DEFAULT_CAP, "lookup").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    save_table(&t, &path).unwrap();
    let back = load_table(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    assert_eq!(back.len(), t.len());
    back.verify(&a).unwrap();
    match back.verify(&b) {
        Err(Error::FingerprintMismatch { table, checkpoint }) => {
            assert_eq!(table.len(), 64);
            assert_ne!(table, checkpoint);
        }
        other => panic!("expected fingerprint error, got {other:?}"),
    }

    let empty = EntityEmbeddingTable::empty(a.fingerprint().unwrap(), 16, 3.0);
    let bytes = empty.to_bytes().unwrap();
    let back = EntityEmbeddingTable::from_bytes(&bytes).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[3] = b'?';
    assert!(matches!(EntityEmbeddingTable::from_bytes(&bad), Err(Error::Format(_))));
    assert!(matches!(
        EntityEmbeddingTable::from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::Corrupt(_))
    ));
}

#[test]
fn oracle_surrogate_is_exact_and_large_vocab_is_aligned() {
    let c = Checkpoint::<f64>::init(ModelConfig {
        d: 16,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        max_len: 16,
        vocab_size: 512,
        ln_eps: 1e-5,
        seed: 8,
    })
    .unwrap();
    let set = OccurrenceSet {
        entity: "x".into(),
        source: "synthetic".into(),
        items: (0..12)
            .map(|i| crate::corpus::Occurrence {
                tokens: vec![10 + i, crate::corpus::MASK_ID, 100 + 3 * i, 400 - i],
                mask_pos: 1,
            })
            .collect(),
    };
    let full = gradient_direction_oracle(&set, &c, None).unwrap();
    assert!(full.surrogate_max_dev < 1e-10, "{full:?}");
    assert!(full.full_cosine >= 0.99, "{full:?}");
    let tiny = gradient_direction_oracle(&set, &c, Some(2)).unwrap();
    assert!(tiny.surrogate_max_dev < 1e-10);
    assert!(tiny.full_cosine < full.full_cosine, "{tiny:?} vs {full:?}");
    assert!(gradient_direction_oracle(&set, &c, Some(0)).is_err());
}
