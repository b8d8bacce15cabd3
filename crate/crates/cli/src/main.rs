//! `ppt`: data generation, training, evaluation and reporting for the
//! history-conditioned preference transformer and its soups baseline.

mod report;
mod workdir;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use ppt_core::config::ExperimentConfig;
use ppt_core::datagen::{generate_offline, save_dataset};
use ppt_core::dpo::{train_ppt_with, train_ps_models_with};
use ppt_core::eval::{evaluate_seed, seed_rng, write_csv, CurveTable, SeedArtifacts, SeedEval};
use ppt_core::numcore::save_checkpoint;
use ppt_core::selftest;
use serde_json::json;

use crate::workdir::Workdir;

#[derive(Parser, Debug)]
#[command(name = "ppt", version, about = "In-context preference personalization experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// Experiment config (JSON). Mutually exclusive with --preset.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: paper-500, paper-1000 or ci. Default: paper-500.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; falls back to paths.workdir in the config, then `runs`.
    #[arg(long, global = true, env = "PPT_WORKDIR")]
    workdir: Option<PathBuf>,
    /// Evaluation seeds processed concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the offline preference dataset for every evaluation seed.
    GenData,
    /// Train the history-conditioned policy.
    TrainPpt,
    /// Train the per-group baseline models.
    TrainPs,
    /// Run online evaluation of both methods and write curves.csv.
    Eval,
    /// Aggregate curves.csv into a summary table and plots.
    Report {
        /// CSV files to aggregate (repeatable); defaults to the workdir's curves.csv.
        #[arg(long)]
        csv: Vec<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selftest {
        /// Fewer gradient-check restarts.
        #[arg(long)]
        quick: bool,
    },
    /// Print the resolved config.
    ShowConfig,
}

/// Errors that should exit with the "failed check" status.
#[derive(Debug)]
struct ChecksFailed(usize);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

/// Config problems are usage errors.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn resolve_config(args: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?,
        (None, Some(name)) => ExperimentConfig::preset(name).map_err(|e| UsageError(e.to_string()))?,
        (None, None) => ExperimentConfig::preset("paper-500").expect("built-in preset"),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.jobs == 0 {
        return Err(UsageError("--jobs must be at least 1".into()).into());
    }
    Ok(cfg)
}

fn workdir_path(args: &GlobalArgs, cfg: &ExperimentConfig) -> PathBuf {
    args.workdir
        .clone()
        .or_else(|| cfg.paths.workdir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Selftest { quick } = cli.command {
        return run_selftest(quick);
    }
    let cfg = resolve_config(&cli.global)?;
    let wd = Workdir::new(workdir_path(&cli.global, &cfg), &cfg);
    match cli.command {
        Command::GenData => gen_data(&cfg, &wd),
        Command::TrainPpt => train_ppt_cmd(&cfg, &wd),
        Command::TrainPs => train_ps_cmd(&cfg, &wd),
        Command::Eval => eval_cmd(&cfg, &wd, cli.global.jobs),
        Command::Report { csv } => {
            let csv = if csv.is_empty() { vec![wd.curves_path()] } else { csv };
            report::run(&csv, &wd.root)
        }
        Command::ShowConfig => {
            println!("{}", cfg.to_json_pretty());
            println!("config_hash={}", cfg.hash());
            Ok(())
        }
        Command::Selftest { .. } => unreachable!(),
    }
}

fn run_selftest(quick: bool) -> Result<()> {
    let outcomes = selftest::run_all(quick);
    let mut failed = 0;
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:<34} {:>7.2}s  {}", o.name, o.secs, o.detail);
        if !o.passed {
            failed += 1;
        }
    }
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        return Err(ChecksFailed(failed).into());
    }
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig, wd: &Workdir) -> Result<()> {
    wd.write_config()?;
    for &seed in &cfg.eval.seeds {
        let mut ds = generate_offline(
            &seed_rng(cfg, seed).fork("data"),
            &cfg.env,
            cfg.data.n_c,
            &cfg.data.coverage,
            cfg.data.horizon,
        )?;
        ds.config.config_hash = Some(wd.hash.clone());
        let path = wd.dataset_path(seed);
        save_dataset(&ds, &path)?;
        println!(
            "seed {seed}: {} triples {:?}, histories {:?} -> {}",
            ds.triple_counts().iter().sum::<usize>(),
            ds.triple_counts(),
            ds.sequence_counts(),
            path.display()
        );
    }
    Ok(())
}

fn train_ppt_cmd(cfg: &ExperimentConfig, wd: &Workdir) -> Result<()> {
    wd.check_config()?;
    for &seed in &cfg.eval.seeds {
        let ds = wd.load_dataset(seed)?;
        let (params, report) = train_ppt_with(&seed_rng(cfg, seed).fork("train-ppt"), &ds, &cfg.model, &cfg.dpo, |e, loss| {
            eprintln!("seed {seed} ppt epoch {:>3}: loss {loss:.6}", e + 1);
        })?;
        save_checkpoint(&wd.ppt_path(seed), &params, wd.checkpoint_meta(seed, "ppt"))?;
        wd.write_log(seed, "train-ppt", &json!({ "reports": [report] }))?;
        println!(
            "seed {seed}: ppt initial loss {:.6}, final loss {:.6}, {} steps in {:.1}s",
            report.initial_loss, report.final_loss, report.steps, report.wall_clock_secs
        );
    }
    Ok(())
}

fn train_ps_cmd(cfg: &ExperimentConfig, wd: &Workdir) -> Result<()> {
    wd.check_config()?;
    for &seed in &cfg.eval.seeds {
        let ds = wd.load_dataset(seed)?;
        let (models, reports) = train_ps_models_with(&seed_rng(cfg, seed).fork("train-ps"), &ds, &cfg.model, &cfg.dpo, |g, e, loss| {
            eprintln!("seed {seed} ps group {} epoch {:>3}: loss {loss:.6}", g + 1, e + 1);
        })?;
        for (g, params) in models.iter().enumerate() {
            save_checkpoint(&wd.ps_path(seed, g), params, wd.checkpoint_meta(seed, &format!("ps-group{}", g + 1)))?;
        }
        wd.write_log(seed, "train-ps", &json!({ "reports": reports }))?;
        for r in &reports {
            println!("seed {seed}: {} final loss {:.6} in {:.1}s", r.label, r.final_loss, r.wall_clock_secs);
        }
    }
    Ok(())
}

fn eval_one(cfg: &ExperimentConfig, wd: &Workdir, seed: u64) -> Result<SeedEval> {
    let start = Instant::now();
    let artifacts = SeedArtifacts {
        dataset: wd.load_dataset(seed)?,
        ppt: wd.load_ppt(seed)?,
        ps_models: wd.load_ps(seed, cfg.env.num_groups)?,
    };
    let out = evaluate_seed(cfg, seed, &artifacts)?;
    wd.write_log(
        seed,
        "eval",
        &json!({
            "mixed_user": out.mixed_user.weights(),
            "ps_selection": out.ps_traces.iter().map(|(u, t)| json!({"user": u, "trace": t})).collect::<Vec<_>>(),
            "wall_clock_secs": start.elapsed().as_secs_f64(),
        }),
    )?;
    eprintln!("seed {seed}: evaluated in {:.1}s", start.elapsed().as_secs_f64());
    Ok(out)
}

fn eval_cmd(cfg: &ExperimentConfig, wd: &Workdir, jobs: usize) -> Result<()> {
    wd.check_config()?;
    // Fail fast on missing artifacts before any long computation.
    for &seed in &cfg.eval.seeds {
        wd.require_checkpoints(seed, cfg.env.num_groups)?;
    }
    let seeds = &cfg.eval.seeds;
    let mut results: Vec<Option<Result<SeedEval>>> = (0..seeds.len()).map(|_| None).collect();
    for (chunk_idx, chunk) in seeds.chunks(jobs).enumerate() {
        let outs: Vec<Result<SeedEval>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || eval_one(cfg, wd, seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| bail!("evaluation thread panicked")))
                .collect()
        });
        for (i, o) in outs.into_iter().enumerate() {
            results[chunk_idx * jobs + i] = Some(o);
        }
    }
    let mut table = CurveTable::default();
    for (seed, r) in seeds.iter().zip(results) {
        let r = r.expect("every seed evaluated").with_context(|| format!("evaluating seed {seed}"))?;
        table.records.extend(r.records);
    }
    let seeds_str = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
    write_csv(
        &table,
        &wd.curves_path(),
        &[("config_hash", wd.hash.clone()), ("master_seed", cfg.seed.to_string()), ("seeds", seeds_str)],
    )?;
    println!("wrote {} rows to {}", table.records.len(), wd.curves_path().display());
    Ok(())
}
