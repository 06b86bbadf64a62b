//! np-lab: reproducible front end for the neural-process objective lab.
//!
//! Subcommands: `train` (run directory with manifest, metrics CSV, and
//! checkpoint), `eval` (multi-sample Monte Carlo evaluation or asymptotic
//! context sweeps of a checkpoint), `gen-tasks` (versioned task files), and
//! `selftest` (named verification checks).
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical abort
//! (non-finite loss, Cholesky failure), 3 I/O failure.

mod config;
mod selftest;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use np_lab_core::model::{load_checkpoint, save_checkpoint};
use np_lab_core::objectives::ObjectiveKind;
use np_lab_core::tasks::{
    grid_task_from_image, load_tasks, sample_gp_task, save_tasks, KernelKind, Task,
};
use np_lab_core::trainer::{
    asymptotic_sweep, evaluate_mc, train_with_metrics, EvalRecord, TrainConfig,
};

use config::{resolve_train_config, TrainOverrides};

#[derive(Parser)]
#[command(name = "np-lab", version, about = "Neural-process objective laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model into a timestamped run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint (optionally sweeping context counts).
    Eval(EvalArgs),
    /// Generate a task file from a GP kernel or a grid image.
    GenTasks(GenTasksArgs),
    /// Run the built-in verification checks.
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; the run writes to <out>/<timestamp>-seed<seed>.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Objective: np, cnp, ml-np, si-np.
    #[arg(long)]
    objective: Option<String>,
    /// Training particle count B.
    #[arg(long)]
    particles: Option<usize>,
    /// Prior-term damping coefficient in [0,1).
    #[arg(long)]
    alpha: Option<f64>,
    /// GP kernel task source: matern52, rbf, periodic.
    #[arg(long)]
    kernel: Option<String>,
    /// Task-file source (overrides --kernel).
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_particles: Option<usize>,
    #[arg(long)]
    eval_tasks: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint JSON written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task file to evaluate on.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Kernel to sample fresh evaluation tasks from (with --count).
    #[arg(long)]
    kernel: Option<String>,
    /// Number of fresh tasks when sampling with --kernel.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Evaluation particle count B.
    #[arg(long, default_value_t = 32)]
    particles: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Objective kind override (controls the collapsed CNP latent);
    /// defaults to the kind stored in the checkpoint.
    #[arg(long)]
    objective: Option<String>,
    /// Comma-separated context counts for an asymptotic sweep.
    #[arg(long)]
    context_counts: Option<String>,
    /// Output path prefix; writes <prefix>.json and <prefix>.csv.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Args)]
struct GenTasksArgs {
    /// GP kernel: matern52, rbf, periodic.
    #[arg(long)]
    kernel: Option<String>,
    /// Grid image (PGM or CSV) to cut into completion tasks.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Context size for grid tasks.
    #[arg(long, default_value_t = 50)]
    context: usize,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are success, not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::GenTasks(args) => cmd_gen_tasks(args),
        Command::Selftest => selftest::cmd_selftest(),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            classify_exit(&err)
        }
    }
}

/// Map error chains onto the documented exit codes.
fn classify_exit(err: &anyhow::Error) -> i32 {
    use np_lab_core::Error as CoreError;
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::NonFiniteLoss { .. }
                | CoreError::CholeskyFailure { .. }
                | CoreError::NonFiniteWeight { .. }
                | CoreError::Domain { .. } => 2,
                CoreError::Io { .. } => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    seed: u64,
    config: TrainConfig,
    checkpoint: String,
    metrics: String,
    eval: String,
    started_unix: u64,
    finished_unix: Option<u64>,
    status: String,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let overrides = TrainOverrides {
        seed: args.seed,
        objective: args.objective,
        particles: args.particles,
        alpha: args.alpha,
        kernel: args.kernel,
        tasks: args.tasks,
        steps: args.steps,
        batch_size: args.batch_size,
        lr: args.lr,
        eval_every: args.eval_every,
        eval_particles: args.eval_particles,
        eval_tasks: args.eval_tasks,
    };
    let cfg = resolve_train_config(args.config.as_deref(), overrides)?;
    cfg.validate()?;

    let run_dir = create_run_dir(&args.out, cfg.seed)?;
    let manifest_path = run_dir.join("manifest.json");
    let metrics_path = run_dir.join("metrics.csv");
    let checkpoint_path = run_dir.join("checkpoint.json");
    let eval_path = run_dir.join("eval.json");

    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        checkpoint: "checkpoint.json".to_string(),
        metrics: "metrics.csv".to_string(),
        eval: "eval.json".to_string(),
        started_unix: unix_now(),
        finished_unix: None,
        status: "running".to_string(),
    };
    write_json(&manifest_path, &manifest)?;

    let mut metrics = fs::File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    eprintln!(
        "training {} on {:?} for {} steps (seed {})",
        cfg.objective.kind, cfg.source, cfg.steps, cfg.seed
    );
    let outcome = train_with_metrics(&cfg, Some(&mut metrics));
    metrics.flush()?;

    match outcome {
        Ok(run) => {
            save_checkpoint(
                &run.params,
                Some(&cfg.objective.kind.to_string()),
                &checkpoint_path,
            )?;
            write_json(&eval_path, &run.evals)?;
            manifest.finished_unix = Some(unix_now());
            manifest.status = "ok".to_string();
            write_json(&manifest_path, &manifest)?;
            println!("{}", run_dir.display());
            Ok(())
        }
        Err(err) => {
            manifest.finished_unix = Some(unix_now());
            manifest.status = format!("failed: {err}");
            write_json(&manifest_path, &manifest)?;
            Err(err).context("training aborted")
        }
    }
}

fn create_run_dir(root: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let stamp = unix_now();
    for attempt in 0u32.. {
        let name = if attempt == 0 {
            format!("{stamp}-seed{seed}")
        } else {
            format!("{stamp}-seed{seed}-{attempt}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!("run dir attempts are unbounded")
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint: String,
    objective: String,
    particles: usize,
    seed: u64,
    records: Vec<EvalEntry>,
}

#[derive(Serialize)]
struct EvalEntry {
    n_context: Option<usize>,
    #[serde(flatten)]
    record: EvalRecord,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (params, stored_kind) = load_checkpoint(&args.checkpoint)?;
    let kind = match &args.objective {
        Some(s) => s.parse::<ObjectiveKind>()?,
        None => stored_kind
            .as_deref()
            .map(str::parse)
            .transpose()?
            .unwrap_or(ObjectiveKind::SiNp),
    };

    let tasks: Vec<Task> = match (&args.tasks, &args.kernel) {
        (Some(path), _) => load_tasks(path)?,
        (None, Some(kernel)) => {
            if args.count == 0 {
                bail!("--count must be at least 1 when sampling evaluation tasks");
            }
            let kind: KernelKind = kernel.parse()?;
            let mut rng = rand_seed(args.seed);
            (0..args.count)
                .map(|_| sample_gp_task(kind, &mut rng))
                .collect::<np_lab_core::Result<_>>()?
        }
        (None, None) => bail!("eval needs --tasks <file> or --kernel <kind>"),
    };
    if tasks.is_empty() {
        bail!("evaluation task set is empty");
    }
    let dims = params.dims;
    for t in &tasks {
        if t.x_dim != dims.x_dim {
            bail!(
                "task dims (x_dim {}) do not match model dims (x_dim {}, y_dim {}, z_dim {})",
                t.x_dim,
                dims.x_dim,
                dims.y_dim,
                dims.z_dim
            );
        }
    }

    let mut records: Vec<EvalEntry> = Vec::new();
    match &args.context_counts {
        Some(spec) => {
            let counts = parse_counts(spec)?;
            let sweep = asymptotic_sweep(&params, &tasks, &counts, args.particles, kind, args.seed)?;
            for (n, record) in sweep {
                records.push(EvalEntry {
                    n_context: Some(n),
                    record,
                });
            }
        }
        None => {
            let record = evaluate_mc(&params, &tasks, args.particles, kind, args.seed)?;
            records.push(EvalEntry {
                n_context: None,
                record,
            });
        }
    }
    // Wallclock is zeroed so identical inputs give identical output bytes.
    for e in &mut records {
        e.record.wallclock = 0.0;
    }

    let out_json = args.out.with_extension("json");
    let out_csv = args.out.with_extension("csv");
    let output = EvalOutput {
        checkpoint: args.checkpoint.display().to_string(),
        objective: kind.to_string(),
        particles: args.particles,
        seed: args.seed,
        records,
    };
    write_json(&out_json, &output)?;

    let mut csv = String::from(
        "n_context,ll_context,ll_target,ll_context_sum,ll_target_sum,prior_trace,ess\n",
    );
    for e in &output.records {
        let n = e
            .n_context
            .map(|n| n.to_string())
            .unwrap_or_default();
        let r = &e.record;
        csv.push_str(&format!(
            "{n},{},{},{},{},{},{}\n",
            r.context_ll_per_point,
            r.target_ll_per_point,
            r.context_ll_sum,
            r.target_ll_sum,
            r.prior_trace_mean,
            r.ess_mean
        ));
    }
    fs::write(&out_csv, csv).with_context(|| format!("writing {}", out_csv.display()))?;
    println!("{}", out_json.display());
    Ok(())
}

fn parse_counts(spec: &str) -> Result<Vec<usize>> {
    let counts: Vec<usize> = spec
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("bad context count '{}'", t.trim()))
        })
        .collect::<Result<_>>()?;
    if counts.is_empty() || counts.contains(&0) {
        bail!("context counts must be positive");
    }
    Ok(counts)
}

fn cmd_gen_tasks(args: GenTasksArgs) -> Result<()> {
    if args.count == 0 {
        bail!("--count must be at least 1");
    }
    let mut rng = rand_seed(args.seed);
    let tasks: Vec<Task> = match (&args.image, &args.kernel) {
        (Some(image), _) => (0..args.count)
            .map(|_| grid_task_from_image(image, args.context, &mut rng))
            .collect::<np_lab_core::Result<_>>()?,
        (None, Some(kernel)) => {
            let kind: KernelKind = kernel.parse()?;
            (0..args.count)
                .map(|_| sample_gp_task(kind, &mut rng))
                .collect::<np_lab_core::Result<_>>()?
        }
        (None, None) => bail!("gen-tasks needs --kernel <kind> or --image <path>"),
    };
    save_tasks(&tasks, &args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

fn rand_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
