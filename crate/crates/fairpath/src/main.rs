//! Command-line front door: train one model, sweep a lambda-by-seed grid,
//! emit path-curve diagnostics for a checkpoint, or run the closed-form
//! verification suite. Every artifact directory gets a manifest sufficient
//! to replay the run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use fairpath::data::{load_adult, split, synth_two_group, Dataset, SplitSpec};
use fairpath::metrics::Constraint;
use fairpath::mixup::{mu_path, uniform_grid, PairedBatch, PenaltyForm, Space};
use fairpath::model::MlpModel;
use fairpath::trainer::{
    evaluate, summarize, sweep, train, write_tradeoff_csv, Method, SweepCell, TradeoffRecord,
    TrainConfig,
};
use fairpath::verify::{run_all, VerifyOptions};
use fairpath::Real;

const SALT_SPLIT: u64 = 0x5bd1_e995_1b87_3593;

#[derive(Parser)]
#[command(name = "fairpath", version, about = "Fair classification with path-based mixup penalties")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoint, metrics record, and manifest.
    Train(TrainArgs),
    /// Run a lambda-by-seed grid and write tradeoff and summary tables.
    Sweep(SweepArgs),
    /// Emit mean-output path curves for a trained checkpoint.
    Path(PathArgs),
    /// Run the closed-form and differentiation verification suite.
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset family.
    #[arg(long, value_parser = ["adult", "synth"])]
    dataset: String,
    /// Directory holding adult.data and adult.test (adult only).
    #[arg(long)]
    data_path: Option<PathBuf>,
    /// Train/val/test fractions.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    split: String,
    /// Synthetic samples per (group, label) cell.
    #[arg(long, default_value_t = 500)]
    synth_n: usize,
    /// Synthetic mean shift between groups.
    #[arg(long, default_value_t = 1.0)]
    group_shift: Real,
    /// Synthetic mean shift between labels.
    #[arg(long, default_value_t = 2.0)]
    label_shift: Real,
    /// Synthetic feature dimension.
    #[arg(long, default_value_t = 10)]
    dim: usize,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, value_parser = ["dp", "eo"], default_value = "dp")]
    constraint: String,
    #[arg(long, value_parser = ["input", "latent"], default_value = "input")]
    space: String,
    /// Comma-separated hidden layer widths.
    #[arg(long, default_value = "200")]
    hidden_dims: String,
    /// Layer index separating encoder from head.
    #[arg(long, default_value_t = 1)]
    split_index: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: Real,
    /// Finite-difference half-width for the mixup penalty.
    #[arg(long, default_value_t = 0.1)]
    h: Real,
    #[arg(long, value_parser = ["abs", "squared"], default_value = "abs")]
    penalty_form: String,
    /// Adversary hidden width (adv_debias).
    #[arg(long, default_value_t = 8)]
    adv_hidden: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "erm")]
    method: String,
    #[arg(long, default_value_t = 0.0)]
    lambda: Real,
    /// Global seed; falls back to FAIRPATH_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated methods to sweep.
    #[arg(long, default_value = "fair_mixup")]
    methods: String,
    /// Comma-separated lambda values.
    #[arg(long, default_value = "0,0.5,1,2,5,10")]
    lambda_list: String,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: String,
    /// Worker threads for the grid.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Seed for data generation and splitting; falls back to FAIRPATH_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PathArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of grid points on [0,1].
    #[arg(long, default_value_t = 51)]
    t_grid: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Override the penalty weight in the closed-form checks.
    #[arg(long)]
    lambda1: Option<Real>,
    /// Multiplier on every check tolerance.
    #[arg(long, default_value_t = 1.0)]
    tolerance_scale: Real,
    /// Where to write report.json (stdout summary either way).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    wall_clock_secs: f64,
    version: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let tmp = dir.join("manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(manifest)?)?;
    std::fs::rename(&tmp, dir.join("manifest.json"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("FAIRPATH_SEED").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| anyhow::anyhow!("bad {what} entry '{p}'")))
        .collect()
}

fn load_dataset(args: &DataArgs, seed: u64) -> Result<(Dataset, Vec<InputDigest>)> {
    match args.dataset.as_str() {
        "synth" => {
            let ds = synth_two_group(seed, args.synth_n, args.group_shift, args.label_shift, args.dim)?;
            Ok((ds, Vec::new()))
        }
        "adult" => {
            let dir = args
                .data_path
                .as_ref()
                .context("--data-path is required for --dataset adult")?;
            let data = dir.join("adult.data");
            let test = dir.join("adult.test");
            let digests = vec![
                InputDigest { path: data.display().to_string(), sha256: sha256_file(&data)? },
                InputDigest { path: test.display().to_string(), sha256: sha256_file(&test)? },
            ];
            Ok((load_adult(&data, &test)?, digests))
        }
        other => bail!("unknown dataset '{other}'"),
    }
}

fn make_splits(ds: &Dataset, spec_str: &str, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let fracs: Vec<Real> = parse_list(spec_str, "--split")?;
    if fracs.len() != 3 {
        bail!("--split needs three comma-separated fractions");
    }
    let spec = SplitSpec::new(fracs[0], fracs[1], fracs[2], seed ^ SALT_SPLIT)?;
    Ok(split(ds, &spec)?)
}

fn build_config(m: &ModelArgs, method: Method, lambda: Real, seed: u64, input_dim: usize) -> Result<TrainConfig> {
    let hidden: Vec<usize> = parse_list(&m.hidden_dims, "--hidden-dims")?;
    let mut layer_dims = vec![input_dim];
    layer_dims.extend(hidden);
    layer_dims.push(1);
    Ok(TrainConfig {
        method,
        constraint: match m.constraint.as_str() {
            "eo" => Constraint::Eo,
            _ => Constraint::Dp,
        },
        space: match m.space.as_str() {
            "latent" => Space::Latent,
            _ => Space::Input,
        },
        lambda,
        penalty_form: match m.penalty_form.as_str() {
            "squared" => PenaltyForm::Squared,
            _ => PenaltyForm::Abs,
        },
        h: m.h,
        epochs: m.epochs,
        batch_size: m.batch_size,
        learning_rate: m.lr,
        seed,
        layer_dims,
        split_index: m.split_index,
        adv_hidden: m.adv_hidden,
    })
}

/// Deterministic test-set pairing: the first n rows of each group, n the
/// smaller group size.
fn test_pair(ds: &Dataset) -> Result<PairedBatch> {
    let g0 = ds.group_indices(0);
    let g1 = ds.group_indices(1);
    let n = g0.len().min(g1.len());
    Ok(PairedBatch::new(ds.x.select_rows(&g0[..n]), ds.x.select_rows(&g1[..n]))?)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    let seed = resolve_seed(args.seed);
    let method: Method = args.method.parse().map_err(|e: String| anyhow::anyhow!(e))?;
    let (ds, inputs) = load_dataset(&args.data, seed)?;
    let (tr, va, te) = make_splits(&ds, &args.data.split, seed)?;
    let cfg = build_config(&args.model, method, args.lambda, seed, ds.dim())?;

    let outcome = train(&cfg, &tr, &va)?;
    let train_m = evaluate(&outcome.model, &tr)?;
    let test_m = evaluate(&outcome.model, &te)?;
    let record = TradeoffRecord {
        method: cfg.method,
        constraint: cfg.constraint,
        space: cfg.space,
        lambda: cfg.lambda,
        seed,
        epoch_selected: outcome.selected_epoch,
        train_ap: train_m.ap,
        test_ap: test_m.ap,
        train_ddp: train_m.ddp,
        test_ddp: test_m.ddp,
        train_deo: train_m.deo,
        test_deo: test_m.deo,
        test_mean_thresh_dp: test_m.mean_thresh_dp,
        test_mean_thresh_eo: test_m.mean_thresh_eo,
    };

    std::fs::create_dir_all(&args.out_dir)?;
    let ckpt = args.out_dir.join("model.json");
    outcome.model.save_checkpoint(&ckpt)?;
    let record_path = args.out_dir.join("record.json");
    std::fs::write(&record_path, serde_json::to_string_pretty(&record)?)?;
    write_manifest(
        &args.out_dir,
        &RunManifest {
            command: "train".into(),
            config: serde_json::to_value(&cfg)?,
            inputs,
            outputs: vec![ckpt.display().to_string(), record_path.display().to_string()],
            wall_clock_secs: start.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").into(),
        },
    )?;
    println!(
        "trained {method} lambda={} seed={seed}: test ap {:.4}, test ddp {:.4}, test deo {:.4}",
        cfg.lambda, record.test_ap, record.test_ddp, record.test_deo
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let start = Instant::now();
    let seed = resolve_seed(args.seed);
    if args.jobs > 1 {
        // a second invocation in-process keeps the first pool; fine for a CLI
        let _ = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build_global();
    }
    let methods: Vec<Method> = parse_list(&args.methods, "--methods")?;
    let lambdas: Vec<Real> = parse_list(&args.lambda_list, "--lambda-list")?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "--seeds")?;
    let (ds, inputs) = load_dataset(&args.data, seed)?;
    let (tr, va, te) = make_splits(&ds, &args.data.split, seed)?;

    let mut records: Vec<TradeoffRecord> = Vec::new();
    let mut summary_rows = String::from(
        "method,lambda,completed,failed,mean_test_ap,std_test_ap,mean_test_gap,std_test_gap\n",
    );
    let mut failures = 0usize;
    for &method in &methods {
        let base = build_config(&args.model, method, 0.0, seed, ds.dim())?;
        let cells: Vec<SweepCell> = sweep(&base, &lambdas, &seeds, &tr, &va, &te);
        for cell in &cells {
            match &cell.outcome {
                Ok(rec) => records.push(rec.clone()),
                Err(msg) => {
                    failures += 1;
                    eprintln!(
                        "cell failed: method={method} lambda={} seed={}: {msg}",
                        cell.lambda, cell.seed
                    );
                }
            }
        }
        for s in summarize(&cells) {
            summary_rows.push_str(&format!(
                "{method},{},{},{},{},{},{},{}\n",
                s.lambda,
                s.completed,
                s.failed,
                s.mean_test_ap,
                s.std_test_ap,
                s.mean_test_gap,
                s.std_test_gap
            ));
        }
    }

    std::fs::create_dir_all(&args.out_dir)?;
    let table = args.out_dir.join("tradeoff.csv");
    write_tradeoff_csv(&records, &table)?;
    let summary = args.out_dir.join("summary.csv");
    std::fs::write(&summary, summary_rows)?;
    write_manifest(
        &args.out_dir,
        &RunManifest {
            command: "sweep".into(),
            config: serde_json::json!({
                "methods": args.methods,
                "lambda_list": args.lambda_list,
                "seeds": args.seeds,
                "seed": seed,
                "dataset": args.data.dataset,
                "split": args.data.split,
                "base": serde_json::to_value(build_config(&args.model, methods[0], 0.0, seed, ds.dim())?)?,
            }),
            inputs,
            outputs: vec![table.display().to_string(), summary.display().to_string()],
            wall_clock_secs: start.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").into(),
        },
    )?;
    println!(
        "sweep finished: {} rows, {} failed cells -> {}",
        records.len(),
        failures,
        table.display()
    );
    if records.is_empty() {
        bail!("every sweep cell failed");
    }
    Ok(())
}

fn cmd_path(args: &PathArgs) -> Result<()> {
    let start = Instant::now();
    let seed = resolve_seed(args.seed);
    if args.t_grid < 3 {
        bail!("--t-grid needs at least 3 points");
    }
    let model = MlpModel::load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let (ds, mut inputs) = load_dataset(&args.data, seed)?;
    inputs.push(InputDigest {
        path: args.checkpoint.display().to_string(),
        sha256: sha256_file(&args.checkpoint)?,
    });
    let (_, _, te) = make_splits(&ds, &args.data.split, seed)?;
    let pair = test_pair(&te)?;
    let grid = uniform_grid(args.t_grid);

    std::fs::create_dir_all(&args.out_dir)?;
    let mut outputs = Vec::new();
    for space in [Space::Input, Space::Latent] {
        let curve = mu_path(&model, &pair, &grid, space)?;
        let path = args.out_dir.join(format!("path_{space}.csv"));
        curve.write_csv(&path)?;
        println!(
            "{space}: endpoint gap |mu_calibrated(1)| = {:.6}",
            curve.calibrated.last().unwrap().abs()
        );
        outputs.push(path.display().to_string());
    }
    write_manifest(
        &args.out_dir,
        &RunManifest {
            command: "path".into(),
            config: serde_json::json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "t_grid": args.t_grid,
                "seed": seed,
                "dataset": args.data.dataset,
                "split": args.data.split,
            }),
            inputs,
            outputs,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").into(),
        },
    )?;
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let opts = VerifyOptions {
        seed: resolve_seed(args.seed),
        lambda1: args.lambda1,
        tolerance_scale: args.tolerance_scale,
    };
    let report = run_all(&opts);
    for c in &report.checks {
        println!(
            "{} {}: max error {:.3e} vs tolerance {:.3e} ({})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.max_error,
            c.tolerance,
            c.detail
        );
    }
    println!("overall: {}", if report.passed { "PASS" } else { "FAIL" });
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Path(a) => cmd_path(a),
        Command::Verify(a) => match cmd_verify(a) {
            Ok(true) => Ok(()),
            Ok(false) => Err(anyhow::anyhow!("verification checks failed")),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
