use std::path::Path;
use std::process::{Command, Output};

fn pelt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pelt"))
        .args(["--threads", "1"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = pelt(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn small_corpus(dir: &Path, seed: &str) {
    ok(&[
        "gen-corpus",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        seed,
        "--entities",
        "12",
        "--unseen",
        "2",
        "--train-mentions",
        "200",
        "--lookup-per-entity",
        "4",
        "--type-sentences",
        "10",
    ]);
}

#[test]
fn gen_corpus_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    small_corpus(&a, "5");
    small_corpus(&b, "5");
    for f in ["vocab.txt", "catalog.tsv", "train.txt", "lookup.txt", "cloze.tsv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn exit_codes_distinguish_usage_and_runtime_errors() {
    assert_eq!(pelt(&["probe", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(pelt(&[]).status.code(), Some(2));
    let o = pelt(&["probe", "--corpus", "/nonexistent", "--ckpt", "/nonexistent/m.bin"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
    assert_eq!(pelt(&["--help"]).status.code(), Some(0));
}

#[test]
fn link_reproduces_the_bundled_trace() {
    let out = ok(&["link"]);
    let (header, body) = out.split_once('\n').unwrap();
    assert!(header.starts_with("# pelt ") && header.contains("seed=-") && header.contains("threads=1"));
    assert_eq!(body, pelt_core::linker::TOY_GRAPH_EXPECTED);
}

#[test]
fn gradcheck_passes_on_a_small_model() {
    let out = ok(&[
        "gradcheck", "--d", "8", "--layers", "1", "--heads", "2", "--vocab", "40", "--coords", "40",
    ]);
    assert!(out.contains("checked 40 coordinates"));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# small run\nseed = 7\nentities=10\nunseen=2\ntrain_mentions=100\nlookup_per_entity=3\n",
    )
    .unwrap();
    let out_dir = t.path().join("c");
    let out = ok(&[
        "--config",
        cfg.to_str().unwrap(),
        "gen-corpus",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.contains("seed=7"), "{out}");
    assert!(out.contains("entities 10"), "{out}");
    let out = ok(&[
        "--config",
        cfg.to_str().unwrap(),
        "gen-corpus",
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert!(out.contains("seed=9"), "{out}");

    std::fs::write(&cfg, "bogus=1\n").unwrap();
    let o = pelt(&["--config", cfg.to_str().unwrap(), "gen-corpus", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pipeline_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path().join("corpus");
    small_corpus(&dir, "3");
    let d = dir.to_str().unwrap();
    let ck = t.path().join("m.bin");
    let ck2 = t.path().join("m2.bin");
    let tb = t.path().join("t.bin");
    let train = |out: &Path, seed: &str| {
        ok(&[
            "train", "--corpus", d, "--out", out.to_str().unwrap(), "--d", "16", "--heads", "2",
            "--layers", "1", "--steps", "20", "--batch-size", "8", "--seed", seed,
        ])
    };
    let out = train(&ck, "1");
    assert!(out.lines().next().unwrap().contains("ckpt="));
    train(&ck2, "2");

    let out = ok(&[
        "build-table", "--corpus", d, "--ckpt", ck.to_str().unwrap(), "--l", "4", "--out",
        tb.to_str().unwrap(),
    ]);
    assert!(out.contains("built 12 entries"), "{out}");

    let out = ok(&[
        "probe", "--corpus", d, "--ckpt", ck.to_str().unwrap(), "--table", tb.to_str().unwrap(),
    ]);
    assert!(out.contains("mode vanilla") && out.contains("mode infused"), "{out}");

    let out = ok(&[
        "probe", "--corpus", d, "--ckpt", ck.to_str().unwrap(), "--tsv", "--strict",
    ]);
    assert!(out.contains("mean\tmacro\t"), "{out}");

    let o = pelt(&[
        "probe", "--corpus", d, "--ckpt", ck2.to_str().unwrap(), "--table", tb.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint mismatch"));

    let frozen = t.path().join("best.bin");
    let out = ok(&[
        "sweep", "--corpus", d, "--ckpt", ck.to_str().unwrap(), "--l", "1..3", "--tsv",
        "--out-table", frozen.to_str().unwrap(),
    ]);
    let rows = out.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count();
    assert_eq!(rows, 3, "{out}");
    assert!(out.contains("selected\t"));
    assert!(frozen.is_file());

    let out = ok(&[
        "oracle", "--corpus", d, "--ckpt", ck.to_str().unwrap(), "--entity", "e001",
    ]);
    assert!(out.contains("full-loss cosine"), "{out}");
}
