use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ckge_core::synth::{Pattern, SynthSpec};

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ckge"));
    cmd.args(args).env_remove("MFCKGE_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn ckge")
}

fn ok(args: &[&str]) -> String {
    let out = run(args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn spec(seed: u64, n_entities: usize, n_relations: usize, triples: usize) -> SynthSpec {
    SynthSpec {
        n_snapshots: 3,
        pattern: Pattern::Facet,
        n_entities,
        n_relations,
        n_domains: 3,
        triples_per_snapshot: vec![triples; 3],
        seed,
        noise: 0.05,
        latent_dim: 4,
        tail_choices: 3,
        hub_fraction: 0.4,
        facet_correlation: 0.0,
        relation_scale: 3.0,
        repeat_fraction: vec![],
    }
}

fn synthesize(root: &Path, spec: &SynthSpec) -> std::path::PathBuf {
    let path = root.join("spec.json");
    fs::write(&path, serde_json::to_string(spec).unwrap()).unwrap();
    let data = root.join("data");
    ok(&["synthesize", "--spec", p(&path), "--out", p(&data)]);
    data
}

fn small_trained(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = synthesize(root, &spec(3, 80, 6, 120));
    let ck = root.join("ck");
    ok(&[
        "train", "--dataset", p(&data), "--out", p(&ck), "--dim", "8", "--lr", "0.02", "--epochs", "60", "--seed",
        "4", "--workers", "1",
    ]);
    (data, ck)
}

fn mrr(stdout: &str) -> f64 {
    let line = stdout.lines().find(|l| l.contains("mrr")).expect("mrr line");
    let mut words = line.split_whitespace();
    words.find(|w| *w == "mrr").unwrap();
    words.next().unwrap().parse().unwrap()
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(run(&["train", "--bogus"], &[]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"], &[]).status.code(), Some(2));
    assert_eq!(run(&["--help"], &[]).status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let out = run(&["evaluate", "--dataset", p(&missing), "--ckpt", p(&missing), "--out", p(tmp.path())], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(run(&["stats", p(&missing)], &[]).status.code(), Some(1));
}

#[test]
fn seed_flag_beats_environment_beats_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, "seed = 9\n").unwrap();
    let seed_of = |extra: &[&str], envs: &[(&str, &str)]| {
        let mut args = vec!["train", "--dataset", "x", "--out", "y", "--config", p(&cfg), "--print-config"];
        args.extend_from_slice(extra);
        let out = run(&args, envs);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        text.lines().find(|l| l.starts_with("seed")).unwrap().to_string()
    };
    assert_eq!(seed_of(&[], &[]), "seed = 9");
    assert_eq!(seed_of(&[], &[("MFCKGE_SEED", "77")]), "seed = 77");
    assert_eq!(seed_of(&["--seed", "5"], &[("MFCKGE_SEED", "77")]), "seed = 5");
    assert_eq!(run(&["train", "--dataset", "x", "--out", "y", "--print-config"], &[("MFCKGE_SEED", "abc")]).status.code(), Some(1));
}

#[test]
fn train_evaluate_predict_explain_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = small_trained(tmp.path());
    for f in ["config.txt", "decoupling.csv", "metrics.csv", "run.json", "space_0.bin", "space_2.bin"] {
        assert!(ck.join(f).is_file(), "{f} missing");
    }

    let stats = ok(&["stats", p(&data)]);
    assert_eq!(stats.lines().count(), 4);

    let ev = tmp.path().join("ev");
    let text = ok(&["evaluate", "--dataset", p(&data), "--ckpt", p(&ck), "--out", p(&ev), "--workers", "1"]);
    assert!((0.0..=1.0).contains(&mrr(&text)));
    assert!(ev.join("metrics.csv").is_file());

    let predicted = ok(&["predict", "--ckpt", p(&ck), "--dataset", p(&data), "--query", "e8,r1,?", "-m", "5", "--verify"]);
    let ranked: Vec<&str> = predicted.lines().filter(|l| l.contains("\trank ")).collect();
    assert_eq!(ranked.len(), 5);
    for (n, line) in ranked.iter().enumerate() {
        assert!(line.starts_with(&format!("{}\t", n + 1)));
        assert!(line.ends_with(&format!("rank {} oracle {}", n + 1, n + 1)), "{line}");
    }

    let explained = ok(&["explain", "--ckpt", p(&ck), "--dataset", p(&data), "--query", "?,r1,e0", "-m", "2"]);
    let betas: f64 = explained
        .lines()
        .skip(1)
        .take(3)
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((betas - 1.0).abs() < 1e-4);
    assert_eq!(explained.lines().filter(|l| l.starts_with("space ")).count(), 3);

    let bad = run(&["predict", "--ckpt", p(&ck), "--dataset", p(&data), "--query", "?,r1,?"], &[]);
    assert_eq!(bad.status.code(), Some(1));

    let original = fs::read(ck.join("metrics.csv")).unwrap();
    let again = tmp.path().join("again");
    ok(&["replay", p(&ck.join("run.json")), "--out", p(&again), "--workers", "1"]);
    assert_eq!(fs::read(again.join("metrics.csv")).unwrap(), original);
    let ev_again = tmp.path().join("ev_again");
    ok(&["replay", p(&ev.join("run.json")), "--out", p(&ev_again), "--workers", "1"]);
    assert_eq!(fs::read(ev_again.join("metrics.csv")).unwrap(), fs::read(ev.join("metrics.csv")).unwrap());
}

#[test]
fn recompress_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = small_trained(tmp.path());
    let hm = tmp.path().join("heatmap.csv");
    ok(&["report", "heatmap", "--dataset", p(&data), "--ckpt", p(&ck), "--out", p(&hm)]);
    assert!(fs::read_to_string(&hm).unwrap().lines().count() > 1);
    let comp = tmp.path().join("compression.csv");
    ok(&["report", "compression", "--dataset", p(&data), "--ckpt", p(&ck), "--out", p(&comp), "--thetas", "0.8,0.9"]);
    assert_eq!(fs::read_to_string(&comp).unwrap().lines().count(), 3);

    ok(&["recompress", "--ckpt", p(&ck), "--theta", "0.5"]);
    assert!(fs::read_to_string(ck.join("config.txt")).unwrap().contains("theta = 0.5"));
    assert_eq!(run(&["recompress", "--ckpt", p(&ck), "--theta", "0.99"], &[]).status.code(), Some(1));
}

#[test]
fn uniform_importance_loses_to_learned_importance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synthesize(tmp.path(), &spec(1, 500, 30, 3000));
    let ck = tmp.path().join("ck");
    ok(&[
        "train", "--dataset", p(&data), "--out", p(&ck), "--dim", "8", "--margin", "8", "--lr", "0.02", "--batch",
        "512", "--epochs", "1000", "--eval-every", "10", "--alpha", "0.1", "--eta", "0.1", "--theta", "0.95",
        "--seed", "1", "--workers", "1", "--no-eval",
    ]);
    let learned = mrr(&ok(&["evaluate", "--dataset", p(&data), "--ckpt", p(&ck), "--out", p(&tmp.path().join("a"))]));
    let uniform = mrr(&ok(&[
        "evaluate", "--dataset", p(&data), "--ckpt", p(&ck), "--out", p(&tmp.path().join("b")), "--uniform-importance",
    ]));
    assert!(learned > uniform, "learned {learned} uniform {uniform}");
}
