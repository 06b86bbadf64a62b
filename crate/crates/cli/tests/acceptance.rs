//! End-to-end acceptance suite.
//!
//! Seven checks, one printed PASS/FAIL line each: gradient correctness of
//! all four objectives against central finite differences, GP oracle
//! equivalence against an independent dense solver, the headline objective
//! ordering after a scaled training budget, prior collapse under
//! single-particle training, particle-count monotonicity at evaluation
//! time, asymptotic behavior in the context-set size, and the standalone
//! selftest binary.
//!
//! Training is bitwise deterministic given its config, so trained
//! checkpoints and their evaluations are cached under
//! `target/acceptance_cache`, keyed by the exact serialized config; a cache
//! hit is indistinguishable from a recompute. `cargo clean` (or deleting
//! the directory) forces the full training runs again. Run with
//! `--nocapture` to watch progress.

use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use np_lab_core::model::{load_checkpoint, save_checkpoint, Dims, ModelParams};
use np_lab_core::objectives::{loss_cnp, loss_ml, loss_np, loss_si, ObjectiveConfig, ObjectiveKind};
use np_lab_core::tasks::{
    kernel_eval, sample_gp_task, sample_gp_task_sized, KernelKind, Task, OBS_NOISE_STD,
};
use np_lab_core::trainer::{
    asymptotic_sweep, evaluate_mc, evaluate_tasks, train_with_metrics, EvalRecord, TaskSource,
    TrainConfig,
};

/// Fresh-task stream used to score the ordering runs (criterion 3) and the
/// checkpoint reused by criteria 5 and 6.
const ORDERING_TASK_SEED: u64 = 0x0acc_e55e;
const ORDERING_EVAL_SEED: u64 = 0x0e7a_1001;
const ORDERING_EVAL_TASKS: usize = 500;
const ORDERING_EVAL_PARTICLES: usize = 32;

fn report(name: &str, ok: bool, detail: &str) {
    println!(
        "acceptance {name}: {} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "acceptance {name} failed: {detail}");
}

fn cache_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance_cache");
    fs::create_dir_all(&dir).expect("cache dir should be creatable");
    dir
}

#[derive(Serialize, Deserialize)]
struct RunMeta {
    config: serde_json::Value,
    train_seconds: f64,
}

/// Train under `cfg`, or reuse the cached checkpoint if one exists for the
/// exact same config. Returns the parameters and the (possibly recorded)
/// fresh training time in seconds.
fn cached_train(label: &str, cfg: &TrainConfig) -> (ModelParams, f64) {
    let dir = cache_dir();
    let ck_path = dir.join(format!("{label}.checkpoint.json"));
    let meta_path = dir.join(format!("{label}.meta.json"));
    let cfg_value = serde_json::to_value(cfg).expect("config serializes");
    if let (Ok(meta_raw), true) = (fs::read_to_string(&meta_path), ck_path.exists()) {
        if let Ok(meta) = serde_json::from_str::<RunMeta>(&meta_raw) {
            if meta.config == cfg_value {
                if let Ok((params, _)) = load_checkpoint(&ck_path) {
                    println!("  [cache] {label}: reusing checkpoint");
                    return (params, meta.train_seconds);
                }
            }
        }
    }
    // Stale artifacts (e.g. evaluations of an older checkpoint) must go
    // before a retrain, or they would be served against the new weights.
    if let Ok(entries) = fs::read_dir(&dir) {
        for e in entries.flatten() {
            if e.file_name().to_string_lossy().starts_with(&format!("{label}.")) {
                let _ = fs::remove_file(e.path());
            }
        }
    }
    println!("  [train] {label}: {} steps ...", cfg.steps);
    let started = Instant::now();
    let mut metrics = Vec::new();
    let run = train_with_metrics(cfg, Some(&mut metrics))
        .unwrap_or_else(|e| panic!("training {label} failed: {e}"));
    let train_seconds = started.elapsed().as_secs_f64();
    fs::write(dir.join(format!("{label}.metrics.csv")), &metrics).expect("metrics write");
    save_checkpoint(&run.params, Some(&cfg.objective.kind.to_string()), &ck_path)
        .expect("checkpoint write");
    let meta = RunMeta {
        config: cfg_value,
        train_seconds,
    };
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
    .expect("meta write");
    println!("  [train] {label}: done in {train_seconds:.0}s");
    (run.params, train_seconds)
}

/// Evaluate a cached run on a shared task set, memoizing the record. The key
/// names every input that determines the result; the checkpoint itself is
/// pinned by `cached_train` invalidating `{label}.*` on retrain.
fn cached_eval(
    label: &str,
    params: &ModelParams,
    tasks: &[Task],
    particles: usize,
    kind: ObjectiveKind,
    eval_seed: u64,
    task_seed: u64,
) -> EvalRecord {
    let path = cache_dir().join(format!(
        "{label}.eval-n{}-b{particles}-t{task_seed:x}-e{eval_seed:x}.json",
        tasks.len()
    ));
    if let Ok(raw) = fs::read_to_string(&path) {
        if let Ok(rec) = serde_json::from_str::<EvalRecord>(&raw) {
            return rec;
        }
    }
    let rec = evaluate_mc(params, tasks, particles, kind, eval_seed)
        .unwrap_or_else(|e| panic!("evaluating {label} failed: {e}"));
    fs::write(&path, serde_json::to_string_pretty(&rec).expect("record serializes"))
        .expect("eval cache write");
    rec
}

fn ordering_config(kind: ObjectiveKind, seed: u64) -> TrainConfig {
    TrainConfig {
        objective: ObjectiveConfig::new(kind, 16),
        source: TaskSource::Kernel {
            kind: KernelKind::Rbf,
        },
        dims: Dims::default(),
        batch_size: 16,
        steps: 20_000,
        adam: Default::default(),
        seed,
        eval_every: 2_000,
        eval_particles: 16,
        eval_tasks: 50,
    }
}

fn objective_label(kind: ObjectiveKind) -> &'static str {
    match kind {
        ObjectiveKind::Np => "np",
        ObjectiveKind::Cnp => "cnp",
        ObjectiveKind::MlNp => "ml-np",
        ObjectiveKind::SiNp => "si-np",
    }
}

fn fresh_rbf_tasks(count: usize, seed: u64) -> Vec<Task> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| sample_gp_task(KernelKind::Rbf, &mut rng).expect("rbf sampling succeeds"))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard error of the mean.
fn stderr(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

// --- 1. gradient suite -----------------------------------------------------

/// Central finite differences over every flat parameter, compared with the
/// analytic gradient using the same relative-error convention as
/// `grad_check`. `value_fn` must be deterministic in the parameters (fixed
/// rng seed inside).
fn max_rel_fd_error(
    params: &ModelParams,
    analytic: &[f64],
    value_fn: &dyn Fn(&ModelParams) -> f64,
) -> (f64, usize, f64, f64) {
    let eps = 1e-5;
    let base = params.flat();
    let mut probe_params = params.clone();
    let mut worst = (0.0, 0usize, 0.0, 0.0);
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        probe_params.set_flat(&probe).expect("probe length matches");
        let fp = value_fn(&probe_params);
        probe[i] = base[i] - eps;
        probe_params.set_flat(&probe).expect("probe length matches");
        let fm = value_fn(&probe_params);
        probe[i] = base[i];
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst.0 {
            worst = (rel, i, analytic[i], numeric);
        }
    }
    worst
}

#[test]
fn a1_gradients_match_finite_differences_for_all_objectives() {
    let started = Instant::now();
    let dims = Dims {
        x_dim: 1,
        y_dim: 1,
        r_dim: 6,
        z_dim: 5,
        hidden: 7,
        dec_layers: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let task = sample_gp_task_sized(KernelKind::Rbf, &mut rng, 3, 4).expect("task samples");
    let params = ModelParams::init(dims, &mut rng).expect("init succeeds");
    let snapshot = params.clone();
    let si_cfg = ObjectiveConfig::new(ObjectiveKind::SiNp, 8);

    let cases: Vec<(&str, Box<dyn Fn(&ModelParams) -> np_lab_core::objectives::LossBundle>)> = vec![
        (
            "np",
            Box::new(|p: &ModelParams| {
                loss_np(p, &task, &mut ChaCha8Rng::seed_from_u64(5)).expect("np loss")
            }),
        ),
        (
            "cnp",
            Box::new(|p: &ModelParams| loss_cnp(p, &task).expect("cnp loss")),
        ),
        (
            "ml-np",
            Box::new(|p: &ModelParams| {
                loss_ml(p, &task, 8, &mut ChaCha8Rng::seed_from_u64(5)).expect("ml loss")
            }),
        ),
        (
            "si-np",
            Box::new(|p: &ModelParams| {
                loss_si(
                    p,
                    &snapshot,
                    &task,
                    &si_cfg,
                    &mut ChaCha8Rng::seed_from_u64(5),
                )
                .expect("si loss")
            }),
        ),
    ];

    let mut details = Vec::new();
    let mut all_ok = true;
    for (name, build) in &cases {
        let bundle = build(&params);
        bundle.loss.backward().expect("backward succeeds");
        let analytic = bundle.graph.collect_grads();
        let value_fn = |p: &ModelParams| build(p).loss.value();
        let (rel, idx, a, n) = max_rel_fd_error(&params, &analytic, &value_fn);
        let ok = rel < 1e-4;
        all_ok &= ok;
        details.push(format!("{name} max_rel {rel:.2e} at {idx} (a {a:.3e}, fd {n:.3e})"));
    }
    let secs = started.elapsed().as_secs_f64();
    all_ok &= secs < 120.0;
    report(
        "1 gradient suite",
        all_ok,
        &format!("{}; {secs:.1}s", details.join("; ")),
    );
}

// --- 2. oracle equivalence ---------------------------------------------------

/// Independent joint Gaussian log-density: dense Gaussian elimination, no
/// Cholesky anywhere. The covariance gets the same diagonal treatment as the
/// sampler and the oracle: observation noise plus a jitter ladder from
/// 1e-6 s^2 escalating tenfold to 1e-2 s^2, accepting the first
/// positive-definite matrix (positive definiteness tested through the
/// elimination pivots, which must all stay positive).
fn dense_joint_loglik(task: &Task) -> f64 {
    let cfg = task.kernel.as_ref().expect("task has kernel provenance");
    let mut jitter = 1e-6 * cfg.s * cfg.s;
    while jitter <= 1e-2 * cfg.s * cfg.s * (1.0 + 1e-12) {
        if let Some(ll) = dense_attempt(task, jitter) {
            return ll;
        }
        jitter *= 10.0;
    }
    panic!("dense solver exhausted the jitter ladder");
}

fn dense_attempt(task: &Task, jitter: f64) -> Option<f64> {
    let cfg = task.kernel.as_ref().expect("task has kernel provenance");
    let n = task.total_points();
    let xs = &task.x_all;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = kernel_eval(cfg, xs[i], xs[j]);
        }
        k[i * n + i] += OBS_NOISE_STD * OBS_NOISE_STD + jitter;
    }
    // Unpivoted symmetric elimination; for a positive-definite matrix every
    // pivot is positive, so a bad pivot means this jitter level is rejected.
    let mut a = task.y_all.clone();
    let mut logdet = 0.0;
    for col in 0..n {
        let d = k[col * n + col];
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        logdet += d.ln();
        for row in (col + 1)..n {
            let f = k[row * n + col] / d;
            for j in col..n {
                k[row * n + j] -= f * k[col * n + j];
            }
            a[row] -= f * a[col];
        }
    }
    for row in (0..n).rev() {
        for j in (row + 1)..n {
            a[row] -= k[row * n + j] * a[j];
        }
        a[row] /= k[row * n + row];
    }
    let quad: f64 = task.y_all.iter().zip(&a).map(|(y, ai)| y * ai).sum();
    Some(-0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[test]
fn a2_gp_oracle_matches_dense_solver_and_reference_mean() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let kinds = [KernelKind::Rbf, KernelKind::Matern52, KernelKind::Periodic];
    let mut checked = 0usize;
    let mut max_err: f64 = 0.0;
    let mut attempts = 0usize;
    while checked < 100 && attempts < 1000 {
        attempts += 1;
        let kind = kinds[attempts % kinds.len()];
        let n = 1 + attempts % 3;
        let m = attempts % 4;
        // The periodic form is not PSD in general; skip draws that exhaust
        // the jitter ladder and keep the ones that sample cleanly.
        let Ok(task) = sample_gp_task_sized(kind, &mut rng, n, m) else {
            continue;
        };
        let got = np_lab_core::tasks::gp_oracle_loglik(&task).expect("oracle runs");
        let want = dense_joint_loglik(&task) / task.total_points() as f64;
        max_err = max_err.max((got - want).abs());
        checked += 1;
    }

    let oracle_tasks = fresh_rbf_tasks(1000, 1);
    let per_point: Vec<f64> = oracle_tasks
        .iter()
        .map(|t| np_lab_core::tasks::gp_oracle_loglik(t).expect("oracle runs"))
        .collect();
    let oracle_mean = mean(&per_point);

    let secs = started.elapsed().as_secs_f64();
    let ok = checked == 100
        && max_err < 1e-8
        && (oracle_mean - 1.18).abs() <= 0.05
        && secs < 300.0;
    report(
        "2 oracle equivalence",
        ok,
        &format!(
            "{checked} tasks, max |diff| {max_err:.2e}; rbf oracle mean {oracle_mean:.4} vs 1.18 +- 0.05; {secs:.1}s"
        ),
    );
}

// --- 3. objective ordering ----------------------------------------------------

#[test]
fn a3_objective_ordering_after_scaled_training() {
    let tasks = fresh_rbf_tasks(ORDERING_EVAL_TASKS, ORDERING_TASK_SEED);
    let kinds = [
        ObjectiveKind::SiNp,
        ObjectiveKind::MlNp,
        ObjectiveKind::Np,
        ObjectiveKind::Cnp,
    ];
    let mut means = std::collections::BTreeMap::new();
    let mut max_train_secs: f64 = 0.0;
    for kind in kinds {
        let name = objective_label(kind);
        let mut lls = Vec::new();
        for seed in 0..3u64 {
            let label = format!("c3-{name}-seed{seed}");
            let cfg = ordering_config(kind, seed);
            let (params, secs) = cached_train(&label, &cfg);
            max_train_secs = max_train_secs.max(secs);
            let rec = cached_eval(
                &label,
                &params,
                &tasks,
                ORDERING_EVAL_PARTICLES,
                kind,
                ORDERING_EVAL_SEED,
                ORDERING_TASK_SEED,
            );
            println!("  [eval] {label}: target ll/point {:.4}", rec.target_ll_per_point);
            lls.push(rec.target_ll_per_point);
        }
        means.insert(name, mean(&lls));
    }
    let (si, np, cnp, ml) = (means["si-np"], means["np"], means["cnp"], means["ml-np"]);
    let ok = si >= np + 0.25 && si >= cnp - 0.05 && si >= ml - 0.05 && max_train_secs <= 2400.0;
    report(
        "3 objective ordering",
        ok,
        &format!(
            "target ll/point over 3 seeds x {ORDERING_EVAL_TASKS} tasks at B={ORDERING_EVAL_PARTICLES}: \
             si-np {si:.4}, np {np:.4}, cnp {cnp:.4}, ml-np {ml:.4}; \
             need si >= np+0.25, si >= cnp-0.05, si >= ml-0.05; slowest run {max_train_secs:.0}s"
        ),
    );
}

// --- 4. single-particle collapse ------------------------------------------------

#[test]
fn a4_single_particle_training_collapses_the_prior() {
    let pool = fresh_rbf_tasks(8, 0xC0_11A9);
    let mut traces = std::collections::BTreeMap::new();
    for &particles in &[1usize, 16] {
        let mut per_seed = Vec::new();
        for seed in 0..5u64 {
            let label = format!("c4-b{particles}-seed{seed}");
            let cfg = TrainConfig {
                objective: ObjectiveConfig::new(ObjectiveKind::SiNp, particles),
                source: TaskSource::Fixed {
                    tasks: pool.clone(),
                },
                dims: Dims::default(),
                batch_size: 8,
                steps: 5_000,
                adam: Default::default(),
                seed,
                eval_every: 0,
                eval_particles: 4,
                eval_tasks: 8,
            };
            let (params, _) = cached_train(&label, &cfg);
            let evals = evaluate_tasks(&params, &pool, 4, ObjectiveKind::SiNp, 0x7ACE)
                .expect("trace evaluation runs");
            let trace = mean(&evals.iter().map(|e| e.prior_trace).collect::<Vec<_>>());
            println!("  [trace] {label}: mean prior trace {trace:.3e}");
            per_seed.push(trace);
        }
        traces.insert(particles, per_seed);
    }
    let below = traces[&1].iter().filter(|t| **t < 1e-2).count();
    let above = traces[&16].iter().filter(|t| **t > 1e-2).count();
    let ok = below >= 4 && above >= 4;
    report(
        "4 single-particle collapse",
        ok,
        &format!(
            "B=1 traces {:?} ({below}/5 below 1e-2); B=16 traces {:?} ({above}/5 above 1e-2)",
            traces[&1]
                .iter()
                .map(|t| format!("{t:.1e}"))
                .collect::<Vec<_>>(),
            traces[&16]
                .iter()
                .map(|t| format!("{t:.1e}"))
                .collect::<Vec<_>>()
        ),
    );
}

// --- 5. particle monotonicity ---------------------------------------------------

#[test]
fn a5_eval_log_likelihood_is_monotone_in_particles() {
    let (params, _) = cached_train("c3-si-np-seed0", &ordering_config(ObjectiveKind::SiNp, 0));
    let tasks = fresh_rbf_tasks(200, 0xA5_EED5);
    let mut per_b = Vec::new();
    for &b in &[1usize, 4, 32] {
        let evals = evaluate_tasks(&params, &tasks, b, ObjectiveKind::SiNp, 0xEA55)
            .expect("evaluation runs");
        per_b.push(
            evals
                .iter()
                .map(|e| e.target_ll_per_point)
                .collect::<Vec<_>>(),
        );
    }
    // Per-task particle draws share a seed stream across B, so the
    // comparisons are paired and the common noise cancels in the diffs.
    let mut detail = Vec::new();
    let mut ok = true;
    for (lo, hi, names) in [(0, 1, "4 vs 1"), (1, 2, "32 vs 4")]
        .map(|(a, b, n)| (a as usize, b as usize, n))
    {
        let diffs: Vec<f64> = per_b[hi]
            .iter()
            .zip(&per_b[lo])
            .map(|(h, l)| h - l)
            .collect();
        let (m, se) = (mean(&diffs), stderr(&diffs));
        ok &= m >= -2.0 * se;
        detail.push(format!("{names}: mean diff {m:+.4} (se {se:.4})"));
    }
    let b_means: Vec<String> = per_b.iter().map(|v| format!("{:.4}", mean(v))).collect();
    report(
        "5 particle monotonicity",
        ok,
        &format!(
            "target ll/point at B=1,4,32: {}; {}",
            b_means.join(", "),
            detail.join("; ")
        ),
    );
}

// --- 6. asymptotic behavior -----------------------------------------------------

#[test]
fn a6_more_context_improves_predictions_and_shrinks_the_prior() {
    let (params, _) = cached_train("c3-si-np-seed0", &ordering_config(ObjectiveKind::SiNp, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(0xA6_5EED);
    let tasks: Vec<Task> = (0..200)
        .map(|_| {
            sample_gp_task_sized(KernelKind::Rbf, &mut rng, 5, 45).expect("task samples")
        })
        .collect();
    let sweep = asymptotic_sweep(&params, &tasks, &[5, 40], 32, ObjectiveKind::SiNp, 0x51EE)
        .expect("sweep runs");
    let at = |n: usize| -> &EvalRecord {
        &sweep
            .iter()
            .find(|(count, _)| *count == n)
            .expect("count present")
            .1
    };
    let (ll5, ll40) = (at(5).target_ll_per_point, at(40).target_ll_per_point);
    let (tr5, tr40) = (at(5).prior_trace_mean, at(40).prior_trace_mean);
    let ok = ll40 > ll5 && tr40 <= tr5;
    report(
        "6 asymptotic behavior",
        ok,
        &format!(
            "target ll/point {ll5:.4} @5ctx -> {ll40:.4} @40ctx; prior trace {tr5:.3} -> {tr40:.3} over 200 tasks"
        ),
    );
}

// --- 7. standalone selftest -------------------------------------------------------

#[test]
fn a7_selftest_binary_runs_green_quickly() {
    let started = Instant::now();
    let output = Command::new(env!("CARGO_BIN_EXE_np-lab"))
        .arg("selftest")
        .output()
        .expect("selftest binary spawns");
    let secs = started.elapsed().as_secs_f64();
    let ok = output.status.success() && secs < 60.0;
    report(
        "7 selftest binary",
        ok,
        &format!(
            "exit {:?} in {secs:.1}s; stdout tail: {}",
            output.status.code(),
            String::from_utf8_lossy(&output.stdout)
                .lines()
                .last()
                .unwrap_or("")
        ),
    );
}
