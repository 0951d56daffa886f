use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use g2t_core::ingest::write_kg_records;
use g2t_core::synthetic::{memorization_set, path_set};
use tempfile::TempDir;

fn g2t(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_g2t")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn analyze_reports_path_graph_sizes() {
    let dir = TempDir::new().unwrap();
    let kg = dir.path().join("paths.jsonl");
    write_kg_records(&kg, &path_set(10, 5, 3)).unwrap();
    let text = stdout(&g2t(&["analyze", "--format", "kg", "--input", p(&kg)]));
    let row = |name: &str| -> Vec<String> {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap_or_else(|| panic!("no {name} row in\n{text}"));
        line.split_whitespace().map(str::to_string).collect()
    };
    assert_eq!(row("graphs")[1], "10");
    assert_eq!(row("nodes")[1..], ["5.00", "5"]);
    assert_eq!(row("triples")[1..], ["4.00", "4"]);
    assert_eq!(row("diameter")[1..], ["4.00", "4"]);
    assert_eq!(row("reentrancies")[1..], ["0.00", "0"]);
}

#[test]
fn evaluating_references_against_themselves_is_perfect() {
    let dir = TempDir::new().unwrap();
    let refs = dir.path().join("refs.txt");
    fs::write(&refs, "the cat sat on the mat\nalice knows bob\n").unwrap();
    let records = dir.path().join("report.jsonl");
    let text = stdout(&g2t(&["evaluate", "--hyps", p(&refs), "--refs", p(&refs), "--records", p(&records)]));
    assert!(text.contains("BLEU"), "{text}");
    let report: serde_json::Value = serde_json::from_str(fs::read_to_string(&records).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(report["bleu"], 100.0);
    assert_eq!(report["chrf_pp"], 100.0);
    assert_eq!(report["count"], 2);
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    assert_eq!(g2t(&["evaluate"]).status.code(), Some(2));
    assert_eq!(g2t(&["no-such-command"]).status.code(), Some(2));
    let missing = g2t(&["analyze", "--format", "kg", "--input", "/nonexistent/graphs.jsonl"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}

#[test]
fn gradcheck_passes_on_a_small_model() {
    let text = stdout(&g2t(&[
        "gradcheck",
        "--set",
        "model.model_dim=8",
        "--set",
        "model.heads=2",
        "--set",
        "model.ffn_dim=12",
        "--set",
        "model.adapter_dim=6",
        "--set",
        "model.saca_dim=6",
        "--set",
        "train.lambda=0.1",
        "--coords",
        "10",
    ]));
    assert!(text.contains("overall max relative error"), "{text}");
}

#[test]
fn generated_text_scores_like_the_logged_dev_bleu() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let raws = memorization_set(12, 5);
    write_kg_records(&d.join("train.jsonl"), &raws).unwrap();
    write_kg_records(&d.join("dev.jsonl"), &raws[..6]).unwrap();
    let data = d.join("data");
    let out = g2t(&[
        "preprocess",
        "--format",
        "kg",
        "--train",
        p(&d.join("train.jsonl")),
        "--dev",
        p(&d.join("dev.jsonl")),
        "--out-dir",
        p(&data),
    ]);
    stdout(&out);

    let run = d.join("run");
    let config = d.join("run.toml");
    fs::write(
        &config,
        format!(
            "[model]\nmodel_dim = 16\nheads = 2\nffn_dim = 32\nencoder_layers = 1\ndecoder_layers = 1\n\
             adapter_dim = 8\nsaca_dim = 8\nmax_positions = 64\n\n\
             [train]\nlr = 3e-3\nmax_steps = 60\neval_every = 20\nmax_len = 24\n\n\
             [data]\ntrain = {:?}\ndev = {:?}\nvocab = {:?}\noutput_dir = {:?}\n",
            p(&data.join("train.bin")),
            p(&data.join("dev.bin")),
            p(&data.join("vocab.txt")),
            p(&run)
        ),
    )
    .unwrap();
    stdout(&g2t(&["train", "--config", p(&config), "--set", "train.seed=4"]));
    let log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 60);
    let best = records.iter().filter_map(|r| r["dev_bleu"].as_f64()).fold(f64::NEG_INFINITY, f64::max);

    let hyps = d.join("hyps.jsonl");
    let trace = d.join("gates.jsonl");
    let ckpt = run.join("model.ckpt");
    let dev = data.join("dev.bin");
    stdout(&g2t(&[
        "generate",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&dev),
        "--mode",
        "greedy",
        "--out",
        p(&hyps),
        "--gate-trace",
        p(&trace),
    ]));
    let lines = fs::read_to_string(&hyps).unwrap();
    assert_eq!(lines.lines().count(), 6);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], 0);
    assert!(first["score"].as_f64().unwrap() <= 0.0);
    assert!(fs::read_to_string(&trace).unwrap().lines().count() > 0);

    let report_path = d.join("report.jsonl");
    stdout(&g2t(&[
        "evaluate",
        "--hyps",
        p(&hyps),
        "--data",
        p(&dev),
        "--bucket",
        "size",
        "--boundaries",
        "4,5",
        "--records",
        p(&report_path),
    ]));
    let report = fs::read_to_string(&report_path).unwrap();
    let mut rec = report.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap());
    let bleu = rec.next().unwrap()["bleu"].as_f64().unwrap();
    assert!((bleu - best).abs() < 1e-9, "generate+evaluate {bleu} vs logged {best}");
    assert_eq!(rec.map(|b| b["count"].as_u64().unwrap()).sum::<u64>(), 6);
}

#[test]
fn example_config_spells_out_the_defaults() {
    use g2t_core::config::RunConfig;
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let cfg = RunConfig::load(&path).unwrap();
    let defaults = RunConfig::default();
    assert_eq!(cfg.model, defaults.model);
    assert_eq!(cfg.train, defaults.train);
    assert_eq!(cfg.data.train, Path::new("data/train.bin"));
}
