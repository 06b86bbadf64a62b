//! Training loop (snapshot-then-update alternation for SI-NP, plain
//! stochastic ascent for the others), Adam, multi-sample Monte Carlo
//! evaluation, prior-trace diagnostics, and asymptotic context sweeps.
//!
//! Determinism: given (seed, config) the final parameters are bitwise
//! reproducible. Per-task rng seeds are pre-generated in task order and
//! per-task gradients are summed in task order, so results do not depend on
//! the worker thread count (`NP_LAB_THREADS`, default: available
//! parallelism). Evaluation uses rng streams derived from, but decoupled
//! from, the training stream.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::LN_2PI;
use crate::error::{Error, Result};
use crate::model::{Dims, ModelGraph, ModelParams};
use crate::objectives::{
    compute_loss, effective_sample_size, loss_proposal_kl, loss_si_full, self_normalize,
    ObjectiveConfig, ObjectiveKind, ProposalMode,
};
use crate::tasks::{load_tasks, sample_gp_task, KernelKind, Task};

pub const METRICS_HEADER: &str = "step,split,ll_context,ll_target,prior_trace,ess,seconds";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> AdamHyper {
        AdamHyper {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// One bias-corrected Adam update in place. A zero gradient leaves both the
/// parameter and its moments untouched.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    let len = params.flat_len();
    if grads.len() != len || state.m.len() != len {
        return Err(Error::DimMismatch {
            what: "adam_step gradient length".to_string(),
            expected: len,
            got: grads.len(),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    let (m, v) = (&mut state.m, &mut state.v);
    params.update_in_place(|i, p| {
        let g = grads[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    });
    Ok(())
}

/// Where training and evaluation tasks come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TaskSource {
    /// Fresh GP tasks sampled every step.
    Kernel { kind: KernelKind },
    /// A fixed task file, cycled deterministically.
    File { path: PathBuf },
    /// An in-memory fixed task set, cycled deterministically.
    Fixed { tasks: Vec<Task> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub source: TaskSource,
    pub dims: Dims,
    pub batch_size: usize,
    pub steps: u64,
    pub adam: AdamHyper,
    pub seed: u64,
    /// Evaluation cadence in steps; 0 disables intermediate evals. A final
    /// eval always runs when steps > 0.
    pub eval_every: u64,
    pub eval_particles: usize,
    pub eval_tasks: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.dims.validate()?;
        let bad = |detail: String| Error::Invalid {
            what: "train config",
            detail,
        };
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(bad(format!("lr {} must be positive and finite", self.adam.lr)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(bad(format!(
                "betas ({}, {}) must lie in [0, 1)",
                self.adam.beta1, self.adam.beta2
            )));
        }
        if !(self.adam.eps > 0.0) {
            return Err(bad(format!("adam eps {} must be positive", self.adam.eps)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size must be at least 1".to_string()));
        }
        if self.eval_particles == 0 {
            return Err(bad("eval_particles must be at least 1".to_string()));
        }
        if self.eval_tasks == 0 {
            return Err(bad("eval_tasks must be at least 1".to_string()));
        }
        if let TaskSource::Kernel { .. } = self.source {
            if self.dims.x_dim != 1 || self.dims.y_dim != 1 {
                return Err(bad(format!(
                    "GP task source needs x_dim 1 and y_dim 1, got {} and {}",
                    self.dims.x_dim, self.dims.y_dim
                )));
            }
        }
        if self.objective.train_proposal && self.objective.kind != ObjectiveKind::SiNp {
            return Err(bad(format!(
                "proposal training applies to si-np, not {}",
                self.objective.kind
            )));
        }
        if self.objective.kind == ObjectiveKind::SiNp
            && self.objective.proposal_mode == ProposalMode::Learned
            && !self.objective.train_proposal
        {
            return Err(bad(
                "learned proposal mode requires train_proposal so the trainer has a proposal to draw from"
                    .to_string(),
            ));
        }
        Ok(())
    }
}

/// Aggregated evaluation metrics, per-point and raw per-task sums.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub context_ll_per_point: f64,
    pub target_ll_per_point: f64,
    pub context_ll_sum: f64,
    pub target_ll_sum: f64,
    pub prior_trace_mean: f64,
    pub ess_mean: f64,
    pub wallclock: f64,
}

/// Per-task evaluation values (for paired statistics).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskEval {
    pub context_ll_per_point: f64,
    pub target_ll_per_point: f64,
    pub context_ll_sum: f64,
    pub target_ll_sum: f64,
    pub ess: f64,
    pub prior_trace: f64,
    pub points: usize,
}

pub struct TrainRun {
    pub params: ModelParams,
    pub evals: Vec<EvalRecord>,
    pub proposal: Option<ModelParams>,
}

pub fn train(cfg: &TrainConfig) -> Result<TrainRun> {
    train_with_metrics(cfg, None)
}

/// Run the training loop, streaming metrics rows (CSV, [`METRICS_HEADER`])
/// to `metrics` as they are produced.
pub fn train_with_metrics(
    cfg: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(cfg.dims, &mut rng)?;
    let mut state = AdamState::new(params.flat_len());
    let mut proposal: Option<(ModelParams, AdamState)> = if cfg.objective.train_proposal {
        let p = ModelParams::init(cfg.dims, &mut rng)?;
        let len = p.flat_len();
        Some((p, AdamState::new(len)))
    } else {
        None
    };

    let pool: Option<Vec<Task>> = match &cfg.source {
        TaskSource::Kernel { .. } => None,
        TaskSource::File { path } => Some(load_tasks(path)?),
        TaskSource::Fixed { tasks } => Some(tasks.clone()),
    };
    if let Some(pool) = &pool {
        if pool.is_empty() {
            return Err(Error::EmptySet {
                what: "training task pool",
            });
        }
        for t in pool {
            t.validate()?;
            if t.x_dim != cfg.dims.x_dim {
                return Err(Error::DimMismatch {
                    what: "task x_dim vs model dims".to_string(),
                    expected: cfg.dims.x_dim,
                    got: t.x_dim,
                });
            }
        }
    }

    // Evaluation tasks come from a stream derived from, but decoupled from,
    // the training stream, so eval cost never perturbs training draws.
    let eval_seed = derive_seed(cfg.seed, 0x45_56_41_4c);
    let eval_tasks: Vec<Task> = match (&cfg.source, &pool) {
        (TaskSource::Kernel { kind }, _) => {
            let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x45_54_41_53));
            (0..cfg.eval_tasks)
                .map(|_| sample_gp_task(*kind, &mut erng))
                .collect::<Result<_>>()?
        }
        (_, Some(pool)) => pool.iter().take(cfg.eval_tasks).cloned().collect(),
        _ => unreachable!("pooled sources always build a pool"),
    };

    if let Some(w) = metrics.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io("metrics stream".to_string(), e))?;
    }

    let mut evals: Vec<EvalRecord> = Vec::new();
    let kind = cfg.objective.kind;
    for step in 1..=cfg.steps {
        let batch: Vec<Task> = match (&cfg.source, &pool) {
            (TaskSource::Kernel { kind }, _) => (0..cfg.batch_size)
                .map(|_| sample_gp_task(*kind, &mut rng))
                .collect::<Result<_>>()?,
            (_, Some(pool)) => {
                let base = ((step - 1) as usize).wrapping_mul(cfg.batch_size) % pool.len();
                (0..cfg.batch_size)
                    .map(|j| pool[(base + j) % pool.len()].clone())
                    .collect()
            }
            _ => unreachable!("pooled sources always build a pool"),
        };
        let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();

        let obj = cfg.objective;
        let params_ref = &params;
        // In learned-proposal mode the SI particles come from the live
        // proposal network; every other configuration goes through the plain
        // dispatch.
        let si_proposal: Option<&ModelParams> =
            match (&proposal, obj.kind, obj.proposal_mode) {
                (Some((p, _)), ObjectiveKind::SiNp, ProposalMode::Learned) => Some(p),
                _ => None,
            };
        let outcomes = parallel_map(&batch, |i, task| {
            let mut trng = ChaCha8Rng::seed_from_u64(seeds[i]);
            let bundle = match si_proposal {
                Some(prop) => {
                    loss_si_full(params_ref, params_ref, Some(prop), task, &obj, &mut trng)?
                }
                None => compute_loss(params_ref, task, &obj, &mut trng)?,
            };
            let loss = bundle.loss.value();
            bundle.loss.backward()?;
            Ok(TaskOutcome {
                grads: bundle.graph.collect_grads(),
                loss,
                gen_ll: bundle.gen_ll,
                prior_trace: bundle.prior_trace,
                ess: bundle.ess,
                points: task.total_points(),
            })
        })?;

        if outcomes.iter().any(|o| !o.loss.is_finite()) {
            let diagnostics: Vec<String> = outcomes
                .iter()
                .enumerate()
                .map(|(i, o)| format!("task {i}: loss {} gen_ll {} ess {}", o.loss, o.gen_ll, o.ess))
                .collect();
            return Err(Error::NonFiniteLoss {
                step,
                diagnostics: diagnostics.join("; "),
            });
        }

        // Batch-mean gradient, accumulated in task order for thread-count
        // independence.
        let mut grads = vec![0.0; params.flat_len()];
        for outcome in &outcomes {
            for (g, o) in grads.iter_mut().zip(&outcome.grads) {
                *g += o;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for g in &mut grads {
            *g *= scale;
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                diagnostics: format!("gradient component {bad} is {}", grads[bad]),
            });
        }

        // The proposal pairs with the particles the SI loss just drew under
        // the pre-update snapshot, so compute its gradients before updating.
        let proposal_grads = if let Some((prop, _)) = &proposal {
            let prop_ref = &*prop;
            let outcomes = parallel_map(&batch, |i, task| {
                let mut trng = ChaCha8Rng::seed_from_u64(seeds[i]);
                let bundle = loss_proposal_kl(prop_ref, params_ref, task, &obj, &mut trng)?;
                bundle.loss.backward()?;
                Ok(bundle.graph.collect_grads())
            })?;
            let mut pg = vec![0.0; prop.flat_len()];
            for task_grads in &outcomes {
                for (g, o) in pg.iter_mut().zip(task_grads) {
                    *g += o;
                }
            }
            for g in &mut pg {
                *g *= scale;
            }
            Some(pg)
        } else {
            None
        };

        adam_step(&mut params, &grads, &mut state, &cfg.adam)?;
        if let (Some((prop, pstate)), Some(pg)) = (&mut proposal, proposal_grads) {
            adam_step(prop, &pg, pstate, &cfg.adam)?;
        }

        let due = cfg.eval_every != 0 && step % cfg.eval_every == 0;
        if due || step == cfg.steps {
            let total_points: usize = outcomes.iter().map(|o| o.points).sum();
            let gen_sum: f64 = outcomes.iter().map(|o| o.gen_ll).sum();
            let train_ll = gen_sum / total_points as f64;
            let trace = mean(outcomes.iter().map(|o| o.prior_trace));
            let ess = mean(outcomes.iter().map(|o| o.ess));
            let elapsed = start.elapsed().as_secs_f64();
            if let Some(w) = metrics.as_deref_mut() {
                write_metrics_row(w, step, "train", train_ll, train_ll, trace, ess, elapsed)?;
            }
            let mut record = evaluate_mc(&params, &eval_tasks, cfg.eval_particles, kind, eval_seed)?;
            record.step = step;
            record.wallclock = start.elapsed().as_secs_f64();
            if let Some(w) = metrics.as_deref_mut() {
                write_metrics_row(
                    w,
                    step,
                    "eval",
                    record.context_ll_per_point,
                    record.target_ll_per_point,
                    record.prior_trace_mean,
                    record.ess_mean,
                    record.wallclock,
                )?;
            }
            evals.push(record);
        }
    }

    Ok(TrainRun {
        params,
        evals,
        proposal: proposal.map(|(p, _)| p),
    })
}

struct TaskOutcome {
    grads: Vec<f64>,
    loss: f64,
    gen_ll: f64,
    prior_trace: f64,
    ess: f64,
    points: usize,
}

/// Multi-sample Monte Carlo evaluation: per task, logsumexp over B prior
/// draws of the summed log-likelihood minus ln B, normalized per point;
/// reported over the context prefix and over all target points. CNP
/// evaluates at the collapsed latent z = mu regardless of B.
pub fn evaluate_mc(
    params: &ModelParams,
    tasks: &[Task],
    particles: usize,
    kind: ObjectiveKind,
    seed: u64,
) -> Result<EvalRecord> {
    let start = Instant::now();
    let per_task = evaluate_tasks(params, tasks, particles, kind, seed)?;
    let record = EvalRecord {
        step: 0,
        context_ll_per_point: mean(per_task.iter().map(|t| t.context_ll_per_point)),
        target_ll_per_point: mean(per_task.iter().map(|t| t.target_ll_per_point)),
        context_ll_sum: mean(per_task.iter().map(|t| t.context_ll_sum)),
        target_ll_sum: mean(per_task.iter().map(|t| t.target_ll_sum)),
        prior_trace_mean: mean(per_task.iter().map(|t| t.prior_trace)),
        ess_mean: mean(per_task.iter().map(|t| t.ess)),
        wallclock: start.elapsed().as_secs_f64(),
    };
    let finite = record.context_ll_per_point.is_finite()
        && record.target_ll_per_point.is_finite()
        && record.prior_trace_mean.is_finite()
        && record.ess_mean.is_finite();
    if !finite {
        return Err(Error::Domain {
            op: "evaluate_mc",
            detail: "non-finite aggregate metric".to_string(),
        });
    }
    Ok(record)
}

/// Per-task evaluation values behind [`evaluate_mc`]. Particle draws are
/// nested: the first particles of a larger B reuse the rng stream of a
/// smaller B, giving common random numbers across particle counts.
pub fn evaluate_tasks(
    params: &ModelParams,
    tasks: &[Task],
    particles: usize,
    kind: ObjectiveKind,
    seed: u64,
) -> Result<Vec<TaskEval>> {
    if tasks.is_empty() {
        return Err(Error::EmptySet {
            what: "evaluation tasks",
        });
    }
    if particles == 0 {
        return Err(Error::Invalid {
            what: "evaluate_mc",
            detail: "particle count must be at least 1".to_string(),
        });
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = tasks.iter().map(|_| seeder.gen()).collect();
    parallel_map(tasks, |i, task| eval_task(params, task, particles, kind, seeds[i]))
}

fn eval_task(
    params: &ModelParams,
    task: &Task,
    particles: usize,
    kind: ObjectiveKind,
    seed: u64,
) -> Result<TaskEval> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = ModelGraph::detached(params);
    let prior = g.encode(task.ctx_xs(), task.ctx_ys())?;
    let zs = if kind == ObjectiveKind::Cnp {
        prior.mu().detach()
    } else {
        prior.sample_rt_rows(&mut rng, particles)?.0
    };
    let b = zs.rows();
    let (xs_t, ys_t) = g.xy_tensors(&task.x_all, &task.y_all, "evaluate_mc")?;
    let pred = g.decode_rows(&xs_t, &zs)?;
    let (q, yd, n) = (ys_t.rows(), ys_t.cols(), task.n_context);
    let means = pred.mean.data();
    let sigs = pred.sigma_hat.data();
    let ys = ys_t.data();
    let mut sum_ctx = vec![0.0; b];
    let mut sum_all = vec![0.0; b];
    for bi in 0..b {
        for i in 0..q {
            let mut ll = 0.0;
            for d in 0..yd {
                let idx = (bi * q + i) * yd + d;
                let s = sigs[idx];
                let diff = ys[i * yd + d] - means[idx];
                ll += -diff * diff / (2.0 * s * s) - s.ln() - 0.5 * LN_2PI;
            }
            sum_all[bi] += ll;
            if i < n {
                sum_ctx[bi] += ll;
            }
        }
    }
    let lnb = (b as f64).ln();
    let target_ll_sum = logsumexp(&sum_all) - lnb;
    let context_ll_sum = logsumexp(&sum_ctx) - lnb;
    let weights = self_normalize(&sum_all)?;
    Ok(TaskEval {
        context_ll_per_point: context_ll_sum / n as f64,
        target_ll_per_point: target_ll_sum / q as f64,
        context_ll_sum,
        target_ll_sum,
        ess: effective_sample_size(&weights),
        prior_trace: prior.trace_cov(),
        points: q,
    })
}

/// Evaluate the same tasks re-split to each context count (prefix cut),
/// tracking how likelihood and prior spread move with more context.
pub fn asymptotic_sweep(
    params: &ModelParams,
    tasks: &[Task],
    context_counts: &[usize],
    particles: usize,
    kind: ObjectiveKind,
    seed: u64,
) -> Result<Vec<(usize, EvalRecord)>> {
    if context_counts.is_empty() {
        return Err(Error::EmptySet {
            what: "context counts",
        });
    }
    let mut out = Vec::with_capacity(context_counts.len());
    for &nc in context_counts {
        let re_split: Vec<Task> = tasks
            .iter()
            .map(|t| t.with_context(nc))
            .collect::<Result<_>>()?;
        let record = evaluate_mc(params, &re_split, particles, kind, seed)?;
        out.push((nc, record));
    }
    Ok(out)
}

fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for v in it {
        sum += v;
        count += 1;
    }
    sum / count as f64
}

fn write_metrics_row(
    w: &mut dyn Write,
    step: u64,
    split: &str,
    ll_context: f64,
    ll_target: f64,
    prior_trace: f64,
    ess: f64,
    seconds: f64,
) -> Result<()> {
    writeln!(
        w,
        "{step},{split},{ll_context},{ll_target},{prior_trace},{ess},{seconds:.3}"
    )
    .map_err(|e| Error::io("metrics stream".to_string(), e))
}

/// Mix a seed with a stream tag (splitmix64 finalizer) so derived streams
/// never overlap the training stream.
fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn worker_threads(items: usize) -> usize {
    let configured = std::env::var("NP_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|v| v.get())
                .unwrap_or(1)
        });
    configured.clamp(1, items.max(1))
}

/// Index-ordered parallel map over tasks; results (and the first error, if
/// any) are identical for every worker thread count.
fn parallel_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync,
{
    let threads = worker_threads(items.len());
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut gathered: Vec<(usize, Result<U>)> = std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut i = w;
                    while i < items.len() {
                        out.push((i, f(i, &items[i])));
                        i += threads;
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    gathered.sort_by_key(|(i, _)| *i);
    gathered.into_iter().map(|(_, r)| r).collect()
}
