//! `g2t`: preprocess graph-text corpora, train, generate, evaluate and
//! inspect models.
//!
//! Exit status is 0 on success, 1 on runtime failure and 2 on usage errors.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::Serialize;

use g2t_core::config::RunConfig;
use g2t_core::decoding::{generate, generation_text, SearchConfig, SearchMode};
use g2t_core::eval::{bleu, bucket_report, bucket_table, GraphProperty, MetricReport, Smoothing};
use g2t_core::graph::{graph_stats, MultiRelGraph};
use g2t_core::ingest::vocab::{build_vocab, Vocab};
use g2t_core::ingest::{
    corpus_strings, encode_examples, load_dataset, read_amr_file, read_kg_records, save_dataset, Example, RawExample,
};
use g2t_core::model::{GraphInput, Model};
use g2t_core::numerics::checkpoint::{config_hash, Checkpoint};
use g2t_core::numerics::gradcheck::{finite_diff_check, GradCheckConfig};
use g2t_core::training::{dgp_loss, lm_loss, train, MetricRecord};

#[derive(Parser)]
#[command(name = "g2t", version, about = "Graph-to-text generation with structure-aware cross-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    /// PENMAN graphs with `# ::snt` sentences, blank-line separated.
    Amr,
    /// Line-delimited `{"nodes", "triples", "text"}` records.
    Kg,
    /// A dataset written by `preprocess`.
    Bin,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Beam,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw corpora into binary datasets plus a vocabulary.
    Preprocess {
        #[arg(long, value_enum)]
        format: InputFormat,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Reuse this vocabulary instead of building one from the training split.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long)]
        keep_case: bool,
    },
    /// Train a model described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `section.key=value` override, repeatable.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Decode every example of a dataset with a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the vocabulary named in the checkpoint's config.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Output records; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "beam")]
        mode: Mode,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Per-step gate values, one record per generated token.
        #[arg(long)]
        gate_trace: Option<PathBuf>,
    },
    /// Score hypotheses against references.
    Evaluate {
        /// Records from `generate` or plain text, one hypothesis per line.
        #[arg(long)]
        hyps: PathBuf,
        /// Plain-text references, one per line.
        #[arg(long, conflicts_with = "data")]
        refs: Option<PathBuf>,
        /// Dataset providing references and graphs.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        bucket: Option<GraphProperty>,
        /// Comma-separated, strictly increasing upper bounds.
        #[arg(long, value_delimiter = ',', requires = "bucket")]
        boundaries: Vec<usize>,
        /// Machine-readable report records.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Graph size, diameter and reentrancy statistics of a corpus.
    Analyze {
        #[arg(long, value_enum)]
        format: InputFormat,
        #[arg(long)]
        input: PathBuf,
    },
    /// Finite-difference check of the full model's gradients.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 24)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess { format, train, dev, test, out_dir, vocab, min_freq, keep_case } => {
            preprocess(format, &train, dev.as_deref(), test.as_deref(), &out_dir, vocab.as_deref(), min_freq, !keep_case)
        }
        Command::Train { config, overrides } => train_cmd(&config, &overrides),
        Command::Generate { checkpoint, data, vocab, out, mode, beam, max_len, gate_trace } => {
            generate_cmd(&checkpoint, &data, vocab.as_deref(), out.as_deref(), mode, beam, max_len, gate_trace.as_deref())
        }
        Command::Evaluate { hyps, refs, data, bucket, boundaries, records } => {
            evaluate_cmd(&hyps, refs.as_deref(), data.as_deref(), bucket, &boundaries, records.as_deref())
        }
        Command::Analyze { format, input } => analyze_cmd(format, &input),
        Command::Gradcheck { config, overrides, coords, tolerance } => {
            gradcheck_cmd(config.as_deref(), &overrides, coords, tolerance)
        }
    }
}

fn read_raw(format: InputFormat, path: &Path) -> Result<Vec<RawExample>> {
    let raws = match format {
        InputFormat::Amr => read_amr_file(path)?,
        InputFormat::Kg => read_kg_records(path)?,
        InputFormat::Bin => bail!("{} is already preprocessed", path.display()),
    };
    Ok(raws)
}

fn read_graphs(format: InputFormat, path: &Path) -> Result<Vec<MultiRelGraph>> {
    Ok(match format {
        InputFormat::Bin => load_dataset(path)?.into_iter().map(|e| e.graph).collect(),
        _ => read_raw(format, path)?.into_iter().map(|r| r.graph).collect(),
    })
}

fn load_data(path: &Path) -> Result<Vec<Example>> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn preprocess(
    format: InputFormat,
    train: &Path,
    dev: Option<&Path>,
    test: Option<&Path>,
    out_dir: &Path,
    vocab_path: Option<&Path>,
    min_freq: usize,
    lowercase: bool,
) -> Result<()> {
    let train_raw = read_raw(format, train).with_context(|| format!("reading {}", train.display()))?;
    let vocab = match vocab_path {
        Some(p) => Vocab::load(p, lowercase).with_context(|| format!("reading vocabulary {}", p.display()))?,
        None => build_vocab(corpus_strings(&train_raw), min_freq, lowercase),
    };
    fs::create_dir_all(out_dir)?;
    vocab.save(&out_dir.join("vocab.txt"))?;
    let mut splits = vec![("train", train_raw)];
    for (name, path) in [("dev", dev), ("test", test)] {
        if let Some(p) = path {
            splits.push((name, read_raw(format, p).with_context(|| format!("reading {}", p.display()))?));
        }
    }
    for (name, raws) in splits {
        let examples = encode_examples(&raws, &vocab)?;
        let path = out_dir.join(format!("{name}.bin"));
        save_dataset(&path, &examples)?;
        eprintln!("{name}: {} examples -> {}", examples.len(), path.display());
    }
    eprintln!("vocabulary: {} entries", vocab.len());
    Ok(())
}

fn train_cmd(config: &Path, overrides: &[String]) -> Result<()> {
    let cfg = RunConfig::load(config)?.with_overrides(overrides)?;
    let text = cfg.to_toml()?;
    let vocab = Vocab::load(&cfg.data.vocab, true).with_context(|| format!("reading {}", cfg.data.vocab.display()))?;
    let train_set = load_data(&cfg.data.train)?;
    let dev_set = if cfg.data.dev.as_os_str().is_empty() { Vec::new() } else { load_data(&cfg.data.dev)? };
    let out = &cfg.data.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), &text)?;

    let mut model = Model::new(&cfg.model, vocab.len())?;
    eprintln!(
        "model: {} ({} parameters), {} train / {} dev examples",
        model.variant().name(),
        model.store.num_scalars(),
        train_set.len(),
        dev_set.len()
    );
    let mut log = BufWriter::new(fs::File::create(out.join("metrics.jsonl"))?);
    let mut write_err: Option<io::Error> = None;
    let outcome = train(&mut model, &cfg.train, &train_set, &dev_set, &vocab, |r: &MetricRecord| {
        if let Err(e) = serde_json::to_writer(&mut log, r).map_err(io::Error::from).and_then(|_| writeln!(log)) {
            write_err.get_or_insert(e);
        }
        if r.dev_bleu.is_some() || r.step.is_multiple_of(50) {
            eprintln!(
                "step {:>6}  lm {:.4}  dgp {:.4}  total {:.4}{}",
                r.step,
                r.lm,
                r.dgp,
                r.total,
                r.dev_bleu.map(|b| format!("  dev BLEU {b:.2}")).unwrap_or_default()
            );
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metric log");
    }
    log.flush()?;
    let ckpt = out.join("model.ckpt");
    Checkpoint::from_store(&model.store, &text, outcome.best_step).save(&ckpt)?;
    match outcome.best_dev_bleu {
        Some(b) => eprintln!("kept step {} (dev BLEU {b:.2}) -> {}", outcome.best_step, ckpt.display()),
        None => eprintln!("saved step {} -> {}", outcome.best_step, ckpt.display()),
    }
    Ok(())
}

/// Rebuild a model from a checkpoint, checking the stored config hash.
fn load_model(path: &Path, vocab_size: usize) -> Result<(RunConfig, Model)> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    if config_hash(&ck.config_text) != ck.config_hash {
        bail!("checkpoint {} has a config hash mismatch", path.display());
    }
    let cfg = RunConfig::from_toml(&ck.config_text)?;
    let mut model = Model::new(&cfg.model, vocab_size)?;
    model.store.load_named(ck.arrays).context("checkpoint does not match its config")?;
    Ok((cfg, model))
}

fn checkpoint_config(path: &Path) -> Result<RunConfig> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(RunConfig::from_toml(&ck.config_text)?)
}

#[derive(Serialize)]
struct OutputRecord<'a> {
    id: usize,
    text: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct GateRecord<'a> {
    id: usize,
    step: usize,
    gates: &'a [f64],
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

#[allow(clippy::too_many_arguments)]
fn generate_cmd(
    checkpoint: &Path,
    data: &Path,
    vocab: Option<&Path>,
    out: Option<&Path>,
    mode: Mode,
    beam: Option<usize>,
    max_len: Option<usize>,
    gate_trace: Option<&Path>,
) -> Result<()> {
    let stored = checkpoint_config(checkpoint)?;
    let vocab_path = vocab.map(Path::to_path_buf).unwrap_or_else(|| stored.data.vocab.clone());
    let vocab = Vocab::load(&vocab_path, true).with_context(|| format!("reading {}", vocab_path.display()))?;
    let (cfg, model) = load_model(checkpoint, vocab.len())?;
    let examples = load_data(data)?;
    let search = SearchConfig {
        mode: match mode {
            Mode::Greedy => SearchMode::Greedy,
            Mode::Beam => SearchMode::Beam(beam.unwrap_or(cfg.train.beam_size)),
        },
        max_len: max_len.unwrap_or(cfg.train.max_len),
        length_penalty: cfg.train.length_penalty,
    };
    let mut writer = open_output(out)?;
    let mut trace = gate_trace.map(|p| open_output(Some(p))).transpose()?;
    for (id, ex) in examples.iter().enumerate() {
        let session = model.session(&ex.token_graph)?;
        let g = generate(&session, &search)?;
        let text = generation_text(&vocab, &g);
        serde_json::to_writer(&mut writer, &OutputRecord { id, text: &text, score: g.score })?;
        writeln!(writer)?;
        if let Some(t) = trace.as_mut() {
            for (step, gates) in g.gate_trace.iter().enumerate() {
                serde_json::to_writer(&mut *t, &GateRecord { id, step, gates })?;
                writeln!(t)?;
            }
        }
    }
    writer.flush()?;
    if let Some(mut t) = trace {
        t.flush()?;
    }
    eprintln!("decoded {} examples", examples.len());
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(BufReader::new(f).lines().collect::<io::Result<_>>()?)
}

/// Hypothesis text per line: the `text` field of a JSON record, or the
/// line itself.
fn read_hypotheses(path: &Path) -> Result<Vec<String>> {
    Ok(read_lines(path)?
        .into_iter()
        .map(|line| {
            serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("text").and_then(|t| t.as_str()).map(str::to_string))
                .unwrap_or(line)
        })
        .collect())
}

fn evaluate_cmd(
    hyps: &Path,
    refs: Option<&Path>,
    data: Option<&Path>,
    bucket: Option<GraphProperty>,
    boundaries: &[usize],
    records: Option<&Path>,
) -> Result<()> {
    let hyps = read_hypotheses(hyps)?;
    let (refs, graphs) = match (refs, data) {
        (Some(r), _) => (read_lines(r)?, None),
        (None, Some(d)) => {
            let ex = load_data(d)?;
            (ex.iter().map(|e| e.target_text.clone()).collect(), Some(ex))
        }
        (None, None) => bail!("either --refs or --data is required"),
    };
    let h: Vec<&str> = hyps.iter().map(String::as_str).collect();
    let r: Vec<&str> = refs.iter().map(String::as_str).collect();
    let report = MetricReport::compute(&h, &r)?;
    print!("{}", report.table());
    let mut rec = records.map(|p| open_output(Some(p))).transpose()?;
    if let Some(w) = rec.as_mut() {
        serde_json::to_writer(&mut *w, &report)?;
        writeln!(w)?;
    }
    if let (Some(property), Some(examples)) = (bucket, graphs) {
        let stats: Vec<_> = examples.iter().map(|e| graph_stats(&e.graph)).collect();
        let buckets = bucket_report(&stats, &h, &r, property, boundaries, |h, r| bleu(h, r, Smoothing::default()))?;
        println!();
        print!("{}", bucket_table(&buckets));
        if let Some(w) = rec.as_mut() {
            for b in &buckets {
                serde_json::to_writer(&mut *w, b)?;
                writeln!(w)?;
            }
        }
    }
    if let Some(mut w) = rec {
        w.flush()?;
    }
    Ok(())
}

fn analyze_cmd(format: InputFormat, input: &Path) -> Result<()> {
    let graphs = read_graphs(format, input).with_context(|| format!("reading {}", input.display()))?;
    if graphs.is_empty() {
        bail!("{} holds no graphs", input.display());
    }
    let n = graphs.len() as f64;
    let stats: Vec<_> = graphs.iter().map(graph_stats).collect();
    let avg = |f: &dyn Fn(usize) -> usize| (0..graphs.len()).map(f).sum::<usize>() as f64 / n;
    let max = |f: &dyn Fn(usize) -> usize| (0..graphs.len()).map(f).max().unwrap_or(0);
    let relations: std::collections::BTreeSet<&str> = graphs.iter().flat_map(|g| g.relation_labels()).collect();
    println!("{:<16} {:>10} {:>10}", "statistic", "average", "max");
    println!("{:<16} {:>10}", "graphs", graphs.len());
    println!("{:<16} {:>10}", "relations", relations.len());
    let rows: [(&str, &dyn Fn(usize) -> usize); 4] = [
        ("nodes", &|i| stats[i].size),
        ("triples", &|i| graphs[i].triples().len()),
        ("diameter", &|i| stats[i].diameter),
        ("reentrancies", &|i| stats[i].reentrancies),
    ];
    for (name, f) in rows {
        println!("{name:<16} {:>10.2} {:>10}", avg(f), max(f));
    }
    Ok(())
}

/// Five entities, four triples, one two-word label, four-token target.
fn gradcheck_example() -> RawExample {
    let graph = MultiRelGraph::from_parts(
        vec!["alice", "bob", "new york", "paris", "music"],
        vec![(0, "knows", 1), (0, "lives", 2), (1, "visits", 3), (2, "likes", 4)],
    )
    .expect("valid graph");
    RawExample { graph, text: "alice knows bob".into() }
}

fn gradcheck_cmd(config: Option<&Path>, overrides: &[String], coords: usize, tolerance: f64) -> Result<()> {
    let base = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    let raw = gradcheck_example();
    let vocab = build_vocab(corpus_strings(std::slice::from_ref(&raw)), 1, true);
    let ex = Example::encode(&raw, &vocab)?;
    let mut model = Model::new(&cfg.model, vocab.len())?;
    model.store.perturb(&mut StdRng::seed_from_u64(cfg.train.seed), 0.1);
    let lambda = cfg.train.lambda;
    let targets = ex.target_ids.clone();
    let len = targets.len();
    let mut store = std::mem::take(&mut model.store);
    let report = finite_diff_check(
        &mut store,
        |t| {
            let input = GraphInput::new(&ex.token_graph);
            let enc = model.encode(t, input)?;
            let tf = model.teacher_forced(t, input, &enc, &targets, len)?;
            let lm = lm_loss(t, tf.logits, &targets, &vec![true; len], len as f64)?;
            match tf.gates {
                Some(g) => {
                    let d = dgp_loss(t, g, len as f64);
                    let d = t.scale(d, lambda);
                    t.add(lm, d)
                }
                None => Ok(lm),
            }
        },
        GradCheckConfig { coords_per_param: coords, ..Default::default() },
    )?;
    println!("{:<40} {:>8} {:>12}", "parameter", "checked", "max rel err");
    for p in &report.per_param {
        println!("{:<40} {:>8} {:>12.3e}", p.name, p.checked, p.max_rel_error);
    }
    println!("overall max relative error {:.3e} (tolerance {tolerance:.1e})", report.max_rel_error);
    if !(report.max_rel_error < tolerance) {
        bail!("gradient check failed: {:.3e} >= {tolerance:.1e}", report.max_rel_error);
    }
    Ok(())
}
