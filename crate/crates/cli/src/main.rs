use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ckge_core::checkpoint::{load_checkpoint, save_checkpoint};
use ckge_core::decoupler::{recompress, stats_csv};
use ckge_core::evaluator::{
    compression_csv, compression_report, evaluate_snapshot, export_importance_heatmap, filter_for, lifelong_run_with,
    MetricsMatrix, RunManifest,
};
use ckge_core::inference::{InferenceOptions, Predictor, Query, RankResult};
use ckge_core::kg::load_growing_kg;
use ckge_core::oracle::brute_force_rank;
use ckge_core::synth::{dataset_stats, stats_table, synthesize_growing_kg, SynthSpec};
use ckge_core::{EmbeddingStore, GrowingKg, Incidence, TrainConfig};

const SEED_ENV: &str = "MFCKGE_SEED";
const CONFIG_FILE: &str = "config.txt";
const RUN_FILE: &str = "run.json";

#[derive(Parser)]
#[command(name = "ckge", version, about = "Lifelong knowledge graph embedding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-snapshot entity, relation and fact counts of a dataset.
    Stats { dataset: PathBuf },
    /// Writes a synthetic growing KG described by a JSON spec.
    Synthesize {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains every snapshot in order and writes a checkpoint.
    Train(TrainArgs),
    /// Evaluates the final model of a checkpoint on every test snapshot.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        infer: InferFlags,
    },
    /// Re-applies decoupling to a checkpoint with a new threshold.
    Recompress {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        theta: f32,
    },
    /// Top-ranked answers for one query.
    Predict(QueryArgs),
    /// Snapshot importance and per-snapshot answers for one query.
    Explain(QueryArgs),
    #[command(subcommand)]
    Report(Report),
    /// Re-runs a train or evaluate run from its manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    theta: Option<f32>,
    /// Top-k relation similarities averaged per snapshot.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    margin: Option<f32>,
    /// Relation alignment weight (grid 0.01, 0.1, 1).
    #[arg(long)]
    alpha: Option<f32>,
    /// Reconstruction weight (grid 0.01, 0.1, 1).
    #[arg(long)]
    eta: Option<f32>,
    #[arg(long)]
    dim: Option<usize>,
    /// Learning rate (grid 1e-4, 5e-4, 1e-3).
    #[arg(long)]
    lr: Option<f32>,
    /// Batch size (grid 512, 1024, 2048).
    #[arg(long)]
    batch: Option<usize>,
    /// Falls back to MFCKGE_SEED, then to the config file or default.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    norm: Option<u8>,
    #[arg(long)]
    keep_dropped: bool,
    #[arg(long)]
    no_decoupling: bool,
    #[command(flatten)]
    infer: InferFlags,
    /// Skip per-snapshot evaluation.
    #[arg(long)]
    no_eval: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Clone, Default)]
struct InferFlags {
    #[arg(long)]
    uniform_importance: bool,
    /// Sum weighted scores without renormalizing over contributing snapshots.
    #[arg(long)]
    no_renorm: bool,
    #[arg(long)]
    incidence: Option<Incidence>,
    /// Evaluation threads; defaults to all cores.
    #[arg(long)]
    workers: Option<usize>,
}

impl InferFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        cfg.uniform_importance |= self.uniform_importance;
        if self.no_renorm {
            cfg.renormalize = false;
        }
        if let Some(x) = self.incidence {
            cfg.incidence = x;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
    }
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// `head,relation,?` or `?,relation,tail`.
    #[arg(long)]
    query: String,
    /// Snapshot to query; defaults to the last trained one.
    #[arg(long)]
    snapshot: Option<usize>,
    #[arg(short = 'm', default_value_t = 10)]
    m: usize,
    /// Recompute every listed rank with the reference implementation.
    #[arg(long)]
    verify: bool,
    #[command(flatten)]
    infer: InferFlags,
}

#[derive(Subcommand)]
enum Report {
    /// Mean importance of snapshot space j for queries of Q_i.
    Heatmap {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compression ratio and final MRR across thresholds.
    Compression {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.90, 0.94, 0.97, 0.99, 1.0])]
        thetas: Vec<f32>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", chain(&e));
            ExitCode::from(1)
        }
    }
}

/// Error chain without causes already spelled out by their parent.
fn chain(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Stats { dataset } => {
            print!("{}", stats_table(&dataset_stats(&dataset)?));
            Ok(())
        }
        Command::Synthesize { spec, out } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SynthSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
            let synth = synthesize_growing_kg(&spec, &out)?;
            print!("{}", stats_table(&ckge_core::synth::kg_stats(&synth.kg)));
            Ok(())
        }
        Command::Train(args) => train(args),
        Command::Evaluate { dataset, ckpt, out, infer } => {
            let mut cfg = read_config(&ckpt)?;
            infer.apply(&mut cfg);
            evaluate(&dataset, &ckpt, &out, cfg)
        }
        Command::Recompress { ckpt, theta } => {
            let mut cfg = read_config(&ckpt)?;
            let mut store = load_checkpoint(&ckpt)?;
            let stats = recompress(&mut store, theta, cfg.theta, cfg.keep_dropped)?;
            save_checkpoint(&store, &ckpt)?;
            cfg.theta = theta;
            write_config(&ckpt, &cfg)?;
            print!("{}", stats_csv(&stats));
            Ok(())
        }
        Command::Predict(args) => predict(args, false),
        Command::Explain(args) => predict(args, true),
        Command::Report(report) => self::report(report),
        Command::Replay { manifest, out, workers } => replay(&manifest, &out, workers),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not a seed"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(anyhow!("{SEED_ENV}: {e}")),
    }
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_kv(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    macro_rules! take {
        ($($flag:ident => $field:ident),*) => {
            $( if let Some(v) = args.$flag { cfg.$field = v; } )*
        };
    }
    take!(theta => theta, k => top_k, margin => margin, alpha => alpha, eta => eta, dim => dim,
          lr => learning_rate, batch => batch_size, seed => seed, epochs => max_epochs,
          patience => patience, eval_every => eval_every, negatives => negatives_per_positive, norm => norm);
    cfg.keep_dropped |= args.keep_dropped;
    cfg.no_decoupling |= args.no_decoupling;
    args.infer.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&args)?;
    if args.print_config {
        print!("{}", cfg.to_kv());
        return Ok(());
    }
    let kg = load_growing_kg(&args.dataset)?;
    run_training(&kg, &args.dataset, &args.out, cfg, !args.no_eval)
}

fn run_training(kg: &GrowingKg, dataset: &Path, out: &Path, cfg: TrainConfig, evaluate: bool) -> Result<()> {
    let run = lifelong_run_with(kg, kg, &cfg, evaluate, |ev| {
        eprintln!(
            "snapshot {}: {} epochs, {} dropped, {} retained",
            ev.snapshot, ev.report.epochs_run, ev.decoupling.dropped, ev.decoupling.retained
        );
        Ok(())
    })?;
    save_checkpoint(&run.store, out)?;
    write_config(out, &cfg)?;
    write_file(&out.join("decoupling.csv"), &stats_csv(&run.decoupling))?;
    if evaluate {
        write_file(&out.join("metrics.csv"), &run.matrix.to_csv())?;
        if let Some(m) = run.matrix.last_aggregate() {
            println!("final mrr {:.4} hits@1 {:.4} hits@3 {:.4} hits@10 {:.4}", m.mrr, m.hits1, m.hits3, m.hits10);
        }
    }
    let manifest = RunManifest {
        command: "train".into(),
        seed: cfg.seed,
        dataset: absolute(dataset)?,
        dataset_hash: kg.content_hash(),
        checkpoint: Some(absolute(out)?),
        checkpoint_hash: Some(run.store.checksum()),
        skipped_queries: skipped(&run.matrix),
        config: cfg,
    };
    manifest.write(&out.join(RUN_FILE))?;
    Ok(())
}

fn skipped(matrix: &MetricsMatrix) -> usize {
    matrix.rows.iter().map(|r| r.aggregate.skipped.total()).sum()
}

fn evaluate(dataset: &Path, ckpt: &Path, out: &Path, cfg: TrainConfig) -> Result<()> {
    let kg = load_growing_kg(dataset)?;
    let store = load_checkpoint(ckpt)?;
    let last = last_space(&store)?;
    let row = evaluate_snapshot(&store, &kg, last, &cfg)?;
    let matrix = MetricsMatrix { rows: vec![row] };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("metrics.csv"), &matrix.to_csv())?;
    let m = matrix.last_aggregate().expect("one row");
    println!("mrr {:.4} hits@1 {:.4} hits@3 {:.4} hits@10 {:.4}", m.mrr, m.hits1, m.hits3, m.hits10);
    RunManifest {
        command: "evaluate".into(),
        seed: cfg.seed,
        dataset: absolute(dataset)?,
        dataset_hash: kg.content_hash(),
        checkpoint: Some(absolute(ckpt)?),
        checkpoint_hash: Some(store.checksum()),
        skipped_queries: skipped(&matrix),
        config: cfg,
    }
    .write(&out.join(RUN_FILE))?;
    Ok(())
}

fn replay(manifest: &Path, out: &Path, workers: Option<usize>) -> Result<()> {
    let m = RunManifest::read(manifest)?;
    let mut cfg = m.config.clone();
    if let Some(w) = workers {
        cfg.workers = w;
    }
    let dataset = PathBuf::from(&m.dataset);
    let kg = load_growing_kg(&dataset)?;
    if kg.content_hash() != m.dataset_hash {
        bail!("dataset {} changed since the run was recorded", m.dataset);
    }
    match m.command.as_str() {
        "train" => run_training(&kg, &dataset, out, cfg, true),
        "evaluate" => {
            let ckpt = PathBuf::from(m.checkpoint.as_deref().ok_or_else(|| anyhow!("manifest names no checkpoint"))?);
            let store = load_checkpoint(&ckpt)?;
            if Some(store.checksum()) != m.checkpoint_hash {
                bail!("checkpoint {} changed since the run was recorded", ckpt.display());
            }
            evaluate(&dataset, &ckpt, out, cfg)
        }
        other => bail!("cannot replay a {other:?} run"),
    }
}

fn absolute(p: &Path) -> Result<String> {
    let full = fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))?;
    Ok(full.display().to_string())
}

fn read_config(ckpt: &Path) -> Result<TrainConfig> {
    let path = ckpt.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TrainConfig::from_kv(&text)?)
}

fn write_config(ckpt: &Path, cfg: &TrainConfig) -> Result<()> {
    write_file(&ckpt.join(CONFIG_FILE), &cfg.to_kv())
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn last_space(store: &EmbeddingStore) -> Result<usize> {
    store
        .num_spaces()
        .checked_sub(1)
        .ok_or_else(|| anyhow!("checkpoint holds no trained snapshot"))
}

fn parse_query(kg: &GrowingKg, text: &str, snapshot: usize) -> Result<Query> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [h, r, t] = parts[..] else {
        bail!("query must look like \"head,relation,?\" or \"?,relation,tail\"");
    };
    let relation = kg.relations().id(r).ok_or_else(|| anyhow!("unknown relation {r:?}"))?;
    let entity = |label: &str| kg.entities().id(label).ok_or_else(|| anyhow!("unknown entity {label:?}"));
    match (h, t) {
        (h, "?") if h != "?" => Ok(Query::tail(entity(h)?, relation, snapshot)),
        ("?", t) if t != "?" => Ok(Query::head(relation, entity(t)?, snapshot)),
        _ => bail!("exactly one of head and tail must be \"?\""),
    }
}

fn label(kg: &GrowingKg, e: u32) -> &str {
    kg.entities().label(e).unwrap_or("?")
}

fn predict(args: QueryArgs, explain: bool) -> Result<()> {
    let mut cfg = read_config(&args.ckpt)?;
    args.infer.apply(&mut cfg);
    let kg = load_growing_kg(&args.dataset)?;
    let store = load_checkpoint(&args.ckpt)?;
    let snapshot = match args.snapshot {
        Some(i) => i,
        None => last_space(&store)?,
    };
    let query = parse_query(&kg, &args.query, snapshot)?;
    let predictor = Predictor::new(&kg, &store, InferenceOptions::from_config(&cfg)?)?;
    let ex = predictor.explain(&query, args.m)?;
    if explain {
        println!("snapshot,delta,beta");
        for (j, (d, b)) in ex.importance.delta.iter().zip(&ex.importance.beta).enumerate() {
            println!("{j},{d:.6},{b:.6}");
        }
        for (j, top) in ex.per_snapshot_top.iter().enumerate() {
            let list: Vec<String> = top.iter().map(|(e, s)| format!("{}:{s:.4}", label(&kg, *e))).collect();
            println!("space {j}: {}", list.join(" "));
        }
    }
    let no_filter = Default::default();
    for (n, (e, score)) in ex.final_top.iter().enumerate() {
        let mut line = format!("{}\t{}\t{score:.6}", n + 1, label(&kg, *e));
        if args.verify {
            let main = match predictor.rank(&query, *e, &no_filter, 0)? {
                RankResult::Ranked(o) => Some(o.rank),
                RankResult::Skipped(_) => None,
            };
            let oracle = brute_force_rank(&query, *e, &no_filter, &kg, &store, &cfg)?;
            if main != oracle {
                bail!("rank mismatch for {}: main {main:?}, oracle {oracle:?}", label(&kg, *e));
            }
            line.push_str(&format!("\trank {} oracle {}", fmt_rank(main), fmt_rank(oracle)));
        }
        println!("{line}");
    }
    if args.verify {
        let filter = filter_for(&kg, snapshot)?;
        let known = ex.final_top.iter().filter(|(e, _)| filter.contains(&query.complete(*e))).count();
        println!("verified {} ranks ({known} already known facts)", ex.final_top.len());
    }
    Ok(())
}

fn fmt_rank(r: Option<usize>) -> String {
    r.map_or_else(|| "-".into(), |r| r.to_string())
}

fn report(report: Report) -> Result<()> {
    match report {
        Report::Heatmap { dataset, ckpt, out } => {
            let cfg = read_config(&ckpt)?;
            let kg = load_growing_kg(&dataset)?;
            let store = load_checkpoint(&ckpt)?;
            let hm = export_importance_heatmap(&kg, &store, &cfg)?;
            write_file(&out, &hm.to_csv())
        }
        Report::Compression { dataset, ckpt, out, thetas } => {
            let cfg = read_config(&ckpt)?;
            let kg = load_growing_kg(&dataset)?;
            let store = load_checkpoint(&ckpt)?;
            let points = compression_report(&kg, &store, &cfg, cfg.theta, &thetas)
                .context("thresholds above the training threshold need a checkpoint trained with --keep-dropped")?;
            write_file(&out, &compression_csv(&points))
        }
    }
}
