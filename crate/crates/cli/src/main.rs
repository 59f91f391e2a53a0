use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pelt_core::corpus::{
    generate_corpus, index_occurrences, load_cloze, read_corpus, CorpusConfig, EntityCatalog, Vocabulary,
    DEFAULT_CAP,
};
use pelt_core::infuse::InfusedModel;
use pelt_core::linker::{assignments_to_tsv, link_all, PageGraph, TOY_GRAPH};
use pelt_core::model::{
    check_mlm_gradient, fingerprint_hex, load_checkpoint, save_checkpoint, train_mlm, ModelConfig, TrainOptions,
};
use pelt_core::pelt::{gradient_direction_oracle, load_table, save_table, Directions};
use pelt_core::probe::{run_probe, sweep_norm, ProbeEcho, ProbeReport};

#[derive(Parser, Debug)]
#[command(name = "pelt", version, about = "Entity lookup tables for a tied-weight masked language model")]
#[command(args_override_self = true)]
struct Cli {
    /// key=value file supplying defaults for the subcommand's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for all parallel work (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic fact corpus into a directory.
    GenCorpus(GenCorpusArgs),
    /// Train a masked language model on a corpus directory.
    Train(TrainArgs),
    /// Build an entity table from a lookup corpus.
    BuildTable(BuildTableArgs),
    /// Run the cloze probe, vanilla and optionally infused.
    Probe(ProbeArgs),
    /// Probe tables at several norms and pick the best.
    Sweep(SweepArgs),
    /// Link candidate names in a page graph.
    Link(LinkArgs),
    /// Finite-difference check of the masked-LM loss gradient.
    Gradcheck(GradcheckArgs),
    /// Compare the gradient direction of a new entity row with its summed outputs.
    Oracle(OracleArgs),
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    entities: usize,
    #[arg(long, default_value_t = 8)]
    unseen: usize,
    #[arg(long, default_value_t = 1.2)]
    zipf: f64,
    #[arg(long, default_value_t = 2500)]
    train_mentions: usize,
    #[arg(long, default_value_t = 12)]
    lookup_per_entity: usize,
    #[arg(long, default_value_t = 0.5)]
    two_fact_rate: f64,
    #[arg(long, default_value_t = 100)]
    type_sentences: usize,
    #[arg(long, default_value_t = 5)]
    profiles: usize,
    #[arg(long, default_value_t = 0.9)]
    profile_fidelity: f64,
}

#[derive(Args, Debug)]
struct CorpusDir {
    /// Directory written by `gen-corpus` (vocab.txt, catalog.tsv, ...).
    #[arg(long)]
    corpus: PathBuf,
}

impl CorpusDir {
    fn file(&self, name: &str) -> PathBuf {
        self.corpus.join(name)
    }

    fn vocab(&self) -> Result<Vocabulary> {
        let p = self.file("vocab.txt");
        Vocabulary::load(&p).with_context(|| format!("reading {}", p.display()))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    dir: CorpusDir,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    ffn_mult: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 8000)]
    steps: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.15)]
    entity_mask_rate: f64,
    #[arg(long, default_value_t = 0.15)]
    token_mask_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    apposition_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    warmup_frac: f64,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Write the per-step loss curve here as TSV.
    #[arg(long)]
    losses: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildTableArgs {
    #[command(flatten)]
    dir: CorpusDir,
    #[arg(long)]
    ckpt: PathBuf,
    /// Lookup corpus (default: lookup.txt in the corpus directory).
    #[arg(long)]
    lookup: Option<PathBuf>,
    /// Comma-separated entity ids (default: every catalog entity).
    #[arg(long, value_delimiter = ',')]
    entities: Vec<String>,
    #[arg(long, default_value_t = 5.0)]
    l: f64,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    dir: CorpusDir,
    #[arg(long)]
    ckpt: PathBuf,
    /// Cloze set (default: cloze.tsv in the corpus directory).
    #[arg(long)]
    cloze: Option<PathBuf>,
    /// Also report the infused model using this table.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Rank only the answers seen for each relation.
    #[arg(long)]
    restrict: bool,
    #[arg(long)]
    tsv: bool,
    /// Fail if any query is rejected.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    dir: CorpusDir,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    cloze: Option<PathBuf>,
    #[arg(long)]
    lookup: Option<PathBuf>,
    /// Norm values: an inclusive integer range `a..b` or a comma list.
    #[arg(long, default_value = "1..10", value_parser = parse_norms)]
    l: Norms,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: usize,
    #[arg(long)]
    restrict: bool,
    #[arg(long)]
    tsv: bool,
    /// Save the table at the selected norm here.
    #[arg(long)]
    out_table: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LinkArgs {
    /// Page graph file (default: the bundled toy graph).
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Print each document's rounds to stderr.
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 512)]
    vocab: usize,
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    dir: CorpusDir,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    lookup: Option<PathBuf>,
    #[arg(long)]
    entity: String,
    /// Restrict the partition function to the first K words.
    #[arg(long)]
    partition: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: usize,
}

#[derive(Clone, Debug)]
struct Norms(Vec<f64>);

fn parse_norms(s: &str) -> std::result::Result<Norms, String> {
    let v: Vec<f64> = if let Some((a, b)) = s.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
        let b: u32 = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
        if a > b {
            return Err(format!("empty range {s}"));
        }
        (a..=b).map(f64::from).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| format!("bad norm `{x}`: {e}")))
            .collect::<std::result::Result<_, _>>()?
    };
    if v.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err("norm values must be positive".into());
    }
    Ok(Norms(v))
}

/// Splices `--key value` pairs from the `--config` file right after the
/// subcommand, so flags given on the command line (which come later) win.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let Some(i) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match args[i].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => match args.get(i + 1) {
            Some(p) => p.clone(),
            None => return Ok(args),
        },
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{path}:{}: expected key=value", n + 1);
        };
        let flag = format!("--{}", k.trim().replace('_', "-"));
        match v.trim() {
            "true" => extra.push(flag),
            "false" => {}
            v => {
                extra.push(flag);
                extra.push(v.to_string());
            }
        }
    }
    let names = [
        "gen-corpus", "train", "build-table", "probe", "sweep", "link", "gradcheck", "oracle",
    ];
    let Some(sub) = args.iter().skip(1).position(|a| names.contains(&a.as_str())) else {
        return Ok(args);
    };
    let at = sub + 2;
    let mut out = args[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

fn provenance(seed: Option<u64>, fingerprints: &[(&str, [u8; 32])]) -> String {
    let mut s = format!(
        "# pelt {} seed={} threads={}",
        env!("CARGO_PKG_VERSION"),
        seed.map_or("-".to_string(), |s| s.to_string()),
        rayon::current_num_threads()
    );
    for (name, fp) in fingerprints {
        s.push_str(&format!(" {name}={}", fingerprint_hex(fp)));
    }
    s
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!("input file {} does not exist", p.display());
    }
    Ok(())
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let cfg = CorpusConfig {
        entities: a.entities,
        unseen: a.unseen,
        zipf: a.zipf,
        train_mentions: a.train_mentions,
        lookup_per_entity: a.lookup_per_entity,
        two_fact_rate: a.two_fact_rate,
        type_sentences: a.type_sentences,
        profiles: a.profiles,
        profile_fidelity: a.profile_fidelity,
        seed: a.seed,
        ..CorpusConfig::default()
    };
    let g = generate_corpus(&cfg)?;
    g.write(&a.out)?;
    println!("{}", provenance(Some(a.seed), &[]));
    println!(
        "wrote {}: vocabulary {}, entities {}, train {} lines, lookup {} lines, cloze {} queries",
        a.out.display(),
        g.vocab.len(),
        g.catalog.len(),
        g.train.len(),
        g.lookup.len(),
        g.cloze.len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let train_path = a.dir.file("train.txt");
    require_file(&train_path)?;
    let vocab = a.dir.vocab()?;
    let corpus = read_corpus(&train_path, &vocab)?;
    let config = ModelConfig {
        d: a.d,
        layers: a.layers,
        heads: a.heads,
        ffn_mult: a.ffn_mult,
        max_len: a.max_len,
        vocab_size: vocab.len(),
        seed: a.seed,
        ..ModelConfig::default()
    };
    let opts = TrainOptions {
        steps: a.steps,
        lr: a.lr,
        batch_size: a.batch_size,
        entity_mask_rate: a.entity_mask_rate,
        token_mask_rate: a.token_mask_rate,
        apposition_rate: a.apposition_rate,
        warmup_frac: a.warmup_frac,
        clip: a.clip,
        ..TrainOptions::default()
    };
    let (ckpt, log) = train_mlm(&corpus, config, &opts)?;
    save_checkpoint(&ckpt, &a.out)?;
    if let Some(p) = &a.losses {
        let mut s = String::from("step\tloss\n");
        for (i, l) in log.losses.iter().enumerate() {
            s.push_str(&format!("{}\t{l}\n", i + 1));
        }
        std::fs::write(p, s)?;
    }
    println!("{}", provenance(Some(a.seed), &[("ckpt", ckpt.fingerprint()?)]));
    println!(
        "trained {} steps: loss {:.4} (first 100) -> {:.4} (last 100); saved {}",
        a.steps,
        log.head_mean(100),
        log.tail_mean(100),
        a.out.display()
    );
    Ok(())
}

fn entity_list(dir: &CorpusDir, given: Vec<String>) -> Result<Vec<String>> {
    if !given.is_empty() {
        return Ok(given);
    }
    let p = dir.file("catalog.tsv");
    Ok(EntityCatalog::load(&p)
        .with_context(|| format!("reading {}", p.display()))?
        .ids())
}

fn build_table_cmd(a: BuildTableArgs) -> Result<()> {
    let lookup_path = a.lookup.clone().unwrap_or_else(|| a.dir.file("lookup.txt"));
    require_file(&a.ckpt)?;
    require_file(&lookup_path)?;
    let vocab = a.dir.vocab()?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let lookup = read_corpus(&lookup_path, &vocab)?;
    let ids = entity_list(&a.dir, a.entities)?;
    let dirs = Directions::build(&ids, &lookup, &ckpt, a.cap, &lookup_path.display().to_string())?;
    let table = dirs.table(a.l)?;
    save_table(&table, &a.out)?;
    println!("{}", provenance(Some(ckpt.config.seed), &[("ckpt", table.fingerprint)]));
    println!("built {} entries at L {} into {}", table.len(), a.l, a.out.display());
    for (id, why) in &dirs.skipped.skipped {
        println!("skipped {id}: {why:?}");
    }
    Ok(())
}

fn print_report(r: &ProbeReport, tsv: bool) {
    if tsv {
        print!("{}", r.to_tsv());
    } else {
        print!("{}", r.to_text());
    }
}

fn probe(a: ProbeArgs) -> Result<()> {
    let cloze_path = a.cloze.clone().unwrap_or_else(|| a.dir.file("cloze.tsv"));
    require_file(&a.ckpt)?;
    require_file(&cloze_path)?;
    if let Some(t) = &a.table {
        require_file(t)?;
    }
    let vocab = a.dir.vocab()?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let queries = load_cloze(&cloze_path)?;
    let fp = ckpt.fingerprint()?;
    let table = a.table.as_deref().map(load_table).transpose()?;
    let infused = table.as_ref().map(|t| InfusedModel::new(&ckpt, t)).transpose()?;

    let mut fps = vec![("ckpt", fp)];
    if let Some(t) = &table {
        fps.push(("table", t.fingerprint));
    }
    println!("{}", provenance(Some(ckpt.config.seed), &fps));
    let echo = ProbeEcho {
        mode: "vanilla".into(),
        l: None,
        fingerprint: fp,
    };
    let vanilla = run_probe(&queries, &vocab, &ckpt, a.restrict, echo)?;
    let mut reports = vec![vanilla];
    if let (Some(m), Some(t)) = (&infused, &table) {
        let echo = ProbeEcho {
            mode: "infused".into(),
            l: Some(t.l),
            fingerprint: fp,
        };
        reports.push(run_probe(&queries, &vocab, m, a.restrict, echo)?);
    }
    for r in &reports {
        print_report(r, a.tsv);
    }
    if a.strict && !reports[0].rejected.is_empty() {
        bail!("{} queries were rejected", reports[0].rejected.len());
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cloze_path = a.cloze.clone().unwrap_or_else(|| a.dir.file("cloze.tsv"));
    let lookup_path = a.lookup.clone().unwrap_or_else(|| a.dir.file("lookup.txt"));
    for p in [&a.ckpt, &cloze_path, &lookup_path] {
        require_file(p)?;
    }
    let vocab = a.dir.vocab()?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let queries = load_cloze(&cloze_path)?;
    let lookup = read_corpus(&lookup_path, &vocab)?;
    let ids = entity_list(&a.dir, Vec::new())?;
    let dirs = Directions::build(&ids, &lookup, &ckpt, a.cap, &lookup_path.display().to_string())?;
    let result = sweep_norm(&queries, &vocab, &ckpt, &dirs, &a.l.0, a.restrict)?;
    println!("{}", provenance(Some(ckpt.config.seed), &[("ckpt", ckpt.fingerprint()?)]));
    if a.tsv {
        print!("{}", result.to_tsv());
    } else {
        print!("{}", result.to_text());
    }
    if let Some(p) = &a.out_table {
        save_table(&dirs.table(result.selected)?, p)?;
    }
    Ok(())
}

fn link(a: LinkArgs) -> Result<()> {
    let graph = match &a.graph {
        Some(p) => {
            require_file(p)?;
            PageGraph::load(p)?
        }
        None => PageGraph::parse(TOY_GRAPH)?,
    };
    let results = link_all(&graph);
    println!("{}", provenance(None, &[]));
    print!("{}", assignments_to_tsv(&graph, &results));
    if a.trace {
        for r in &results {
            for round in &r.trace {
                eprintln!(
                    "{} round {}: seeds {:?} frontier {:?} assigned {:?}",
                    r.doc, round.index, round.seeds, round.frontier, round.assigned
                );
            }
        }
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let config = ModelConfig {
        d: a.d,
        layers: a.layers,
        heads: a.heads,
        ffn_mult: 2,
        max_len: 16,
        vocab_size: a.vocab,
        seed: a.seed,
        ..ModelConfig::default()
    };
    let r = check_mlm_gradient(config, a.coords, a.h, a.seed)?;
    println!("{}", provenance(Some(a.seed), &[]));
    println!(
        "checked {} coordinates: max relative error {:.3e} at {:?} (analytic {:.6e}, numeric {:.6e})",
        r.checked, r.max_rel_error, r.worst, r.analytic, r.numeric
    );
    if !(r.max_rel_error < a.tol) {
        bail!("max relative error {:.3e} exceeds {:.1e}", r.max_rel_error, a.tol);
    }
    Ok(())
}

fn oracle(a: OracleArgs) -> Result<()> {
    let lookup_path = a.lookup.clone().unwrap_or_else(|| a.dir.file("lookup.txt"));
    require_file(&a.ckpt)?;
    require_file(&lookup_path)?;
    let vocab = a.dir.vocab()?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let lookup = read_corpus(&lookup_path, &vocab)?;
    let set = index_occurrences(&a.entity, &lookup, a.cap, &lookup_path.display().to_string());
    let r = gradient_direction_oracle(&set, &ckpt.cast::<f64>(), a.partition)?;
    println!("{}", provenance(Some(ckpt.config.seed), &[("ckpt", ckpt.fingerprint()?)]));
    println!(
        "entity {} occurrences {} partition {}: surrogate deviation {:.3e}, full-loss cosine {:.6}",
        r.entity, r.occurrences, r.partition_size, r.surrogate_max_dev, r.full_cosine
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.cmd {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::BuildTable(a) => build_table_cmd(a),
        Command::Probe(a) => probe(a),
        Command::Sweep(a) => sweep(a),
        Command::Link(a) => link(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Oracle(a) => oracle(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
