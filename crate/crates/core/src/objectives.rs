//! Training objectives for the latent neural process family: the variational
//! objective with a consistency KL (NP), the deterministic conditional
//! objective (CNP), Monte Carlo maximum likelihood (ML-NP), and
//! surrogate-likelihood training via self-normalized importance sampling
//! (SI-NP), plus the optional learned-proposal distillation loss.
//!
//! Every loss returns a scalar tensor to minimize (the negated objective)
//! together with detached diagnostics. SI-NP evaluates its importance weights
//! under a snapshot of the parameters whose network never receives gradients;
//! the particles themselves are reparameterized draws through the live prior,
//! so learning flows through the sampling path as well as the weighted
//! generative and prior terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::distributions::kl_diag;
use crate::error::{Error, Result};
use crate::model::{ModelGraph, ModelParams};
use crate::tasks::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Np,
    Cnp,
    MlNp,
    SiNp,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ObjectiveKind> {
        match s.to_ascii_lowercase().as_str() {
            "np" => Ok(ObjectiveKind::Np),
            "cnp" => Ok(ObjectiveKind::Cnp),
            "ml-np" | "mlnp" | "ml" => Ok(ObjectiveKind::MlNp),
            "si-np" | "sinp" | "si" => Ok(ObjectiveKind::SiNp),
            other => Err(Error::Invalid {
                what: "objective kind",
                detail: format!("unknown objective '{other}' (np, cnp, ml-np, si-np)"),
            }),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ObjectiveKind::Np => "np",
            ObjectiveKind::Cnp => "cnp",
            ObjectiveKind::MlNp => "ml-np",
            ObjectiveKind::SiNp => "si-np",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalMode {
    Prior,
    Learned,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Monte Carlo particle count B (ignored by CNP).
    pub particles: usize,
    /// Damps the prior-likelihood term of SI-NP by (1 - alpha); in [0, 1).
    pub alpha: f64,
    pub proposal_mode: ProposalMode,
    pub train_proposal: bool,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind, particles: usize) -> ObjectiveConfig {
        ObjectiveConfig {
            kind,
            particles,
            alpha: 0.0,
            proposal_mode: ProposalMode::Prior,
            train_proposal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Invalid {
                what: "objective config",
                detail: "particles must be at least 1".to_string(),
            });
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Invalid {
                what: "objective config",
                detail: format!("alpha {} outside [0, 1)", self.alpha),
            });
        }
        Ok(())
    }
}

/// A scalar loss to minimize plus detached diagnostics. `graph` holds the
/// attached parameter leaves that receive gradients when `loss` is
/// backpropagated.
pub struct LossBundle {
    pub loss: Tensor,
    pub graph: ModelGraph,
    /// Generative log-likelihood term (weighted mean for particle losses).
    pub gen_ll: f64,
    /// Functional-prior log-likelihood term (SI-NP only; 0 elsewhere).
    pub prior_ll: f64,
    /// Posterior-to-prior KL (NP only; 0 elsewhere).
    pub kl: f64,
    /// Trace of the context-encoding (functional prior) covariance.
    pub prior_trace: f64,
    /// Effective sample size of the normalized weights.
    pub ess: f64,
    /// Normalized particle weights (sum to 1).
    pub weights: Vec<f64>,
}

/// Self-normalized weights from log-weights via a max-shifted softmax.
/// The output is invariant to a constant shift of all inputs, bitwise.
pub fn self_normalize(log_w: &[f64]) -> Result<Vec<f64>> {
    if log_w.is_empty() {
        return Err(Error::EmptySet {
            what: "importance weights",
        });
    }
    for (i, &v) in log_w.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteWeight { index: i, value: v });
        }
    }
    if log_w.len() == 1 {
        return Ok(vec![1.0]);
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// 1 / sum of squared normalized weights; ranges from 1 (degenerate) to B
/// (uniform).
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    if sq > 0.0 {
        1.0 / sq
    } else {
        0.0
    }
}

/// Variational objective: one reparameterized draw from the full-set
/// encoding, generative term minus KL[q(z | all) || q(z | context)].
pub fn loss_np<R: Rng>(params: &ModelParams, task: &Task, rng: &mut R) -> Result<LossBundle> {
    task.validate()?;
    let g = ModelGraph::attached(params);
    let (ctx, full) = g.encode_prefix_and_full(&task.x_all, &task.y_all, task.n_context)?;
    let (z, _eps) = full.sample_rt_rows(rng, 1)?;
    let (xs_t, ys_t) = g.xy_tensors(&task.x_all, &task.y_all, "loss_np")?;
    let gen = g.gen_loglik_rows(&xs_t, &ys_t, &z)?.reshape(1, 1)?;
    let kl = kl_diag(&full, &ctx)?;
    let loss = gen.sub(&kl)?.neg();
    Ok(LossBundle {
        gen_ll: gen.value(),
        kl: kl.value(),
        prior_trace: ctx.trace_cov(),
        loss,
        graph: g,
        prior_ll: 0.0,
        ess: 1.0,
        weights: vec![1.0],
    })
}

/// Conditional objective: the latent collapses to the context-encoding mean,
/// no sampling and no KL.
pub fn loss_cnp(params: &ModelParams, task: &Task) -> Result<LossBundle> {
    task.validate()?;
    let g = ModelGraph::attached(params);
    let ctx = g.encode(task.ctx_xs(), task.ctx_ys())?;
    let z = ctx.mu().clone();
    let (xs_t, ys_t) = g.xy_tensors(&task.x_all, &task.y_all, "loss_cnp")?;
    let gen = g.gen_loglik_rows(&xs_t, &ys_t, &z)?.reshape(1, 1)?;
    let loss = gen.neg();
    Ok(LossBundle {
        gen_ll: gen.value(),
        prior_trace: ctx.trace_cov(),
        loss,
        graph: g,
        prior_ll: 0.0,
        kl: 0.0,
        ess: 1.0,
        weights: vec![1.0],
    })
}

/// Monte Carlo maximum likelihood: B attached reparameterized prior draws,
/// objective logsumexp_b(gen_ll_b) - ln B.
pub fn loss_ml<R: Rng>(
    params: &ModelParams,
    task: &Task,
    particles: usize,
    rng: &mut R,
) -> Result<LossBundle> {
    task.validate()?;
    if particles == 0 {
        return Err(Error::Invalid {
            what: "loss_ml",
            detail: "particles must be at least 1".to_string(),
        });
    }
    let g = ModelGraph::attached(params);
    let prior = g.encode(task.ctx_xs(), task.ctx_ys())?;
    let (zs, _eps) = prior.sample_rt_rows(rng, particles)?;
    let (xs_t, ys_t) = g.xy_tensors(&task.x_all, &task.y_all, "loss_ml")?;
    let gen = g.gen_loglik_rows(&xs_t, &ys_t, &zs)?;
    let obj = gen
        .logsumexp_axis(0)?
        .add_scalar(-(particles as f64).ln())
        .reshape(1, 1)?;
    let weights = self_normalize(gen.data())?;
    let ess = effective_sample_size(&weights);
    let loss = obj.neg();
    Ok(LossBundle {
        gen_ll: obj.value(),
        prior_trace: prior.trace_cov(),
        loss,
        graph: g,
        prior_ll: 0.0,
        kl: 0.0,
        ess,
        weights,
    })
}

/// Surrogate-likelihood objective via self-normalized importance sampling.
///
/// With the default prior proposal, B particles are reparameterized draws
/// through the live prior (values identical to snapshot draws, since the two
/// share parameter values); in learned mode they come detached from the
/// proposal network. Log-weights are evaluated under `snapshot` and
/// normalized as constants; with the prior proposal the prior and proposal
/// densities cancel, so the log-weight of a particle is exactly its
/// generative log-likelihood under the snapshot. The loss is the negated
/// weighted sum of the generative and (1 - alpha)-damped prior
/// log-likelihoods under the live `params`.
///
/// The reparameterized sampling path is what gives the single-particle case
/// its collapse-to-conditional behavior: at B = 1 the weighted prior term
/// reduces analytically to the negative log-sigma of the prior, a constant
/// pressure toward a deterministic latent, while at larger B the weighted
/// generative term rewards particle diversity and opposes it.
///
/// Passing the same allocation for `params` and `snapshot` realizes the usual
/// training scheme where the snapshot is the detached current iterate; a
/// separate equal-valued copy produces the identical result.
pub fn loss_si<R: Rng>(
    params: &ModelParams,
    snapshot: &ModelParams,
    task: &Task,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<LossBundle> {
    loss_si_full(params, snapshot, None, task, cfg, rng)
}

/// [`loss_si`] with an optional learned proposal network.
pub fn loss_si_full<R: Rng>(
    params: &ModelParams,
    snapshot: &ModelParams,
    proposal: Option<&ModelParams>,
    task: &Task,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<LossBundle> {
    task.validate()?;
    cfg.validate()?;
    if cfg.kind != ObjectiveKind::SiNp {
        return Err(Error::Invalid {
            what: "loss_si",
            detail: format!("objective config has kind {}, expected si-np", cfg.kind),
        });
    }
    let b = cfg.particles;
    let live = ModelGraph::attached(params);
    let prior_live = live.encode(task.ctx_xs(), task.ctx_ys())?;

    // Particles: reparameterized draws through the live prior by default, so
    // the sampling path carries gradients into the encoder; in learned mode
    // the particles come from the proposal network as constants.
    let (zs, proposal_ll) = match (cfg.proposal_mode, proposal) {
        (ProposalMode::Prior, _) => {
            let (zs, _eps) = prior_live.sample_rt_rows(rng, b)?;
            (zs, None)
        }
        (ProposalMode::Learned, Some(eta)) => {
            let q = ModelGraph::detached(eta).encode(&task.x_all, &task.y_all)?;
            let (zs, _eps) = q.sample_rt_rows(rng, b)?;
            let ll = q.log_prob_rows(&zs)?;
            (zs, Some(ll))
        }
        (ProposalMode::Learned, None) => {
            return Err(Error::Invalid {
                what: "loss_si",
                detail: "learned proposal mode requires proposal parameters".to_string(),
            });
        }
    };

    let (xs_t, ys_t) = g_xy(&live, task)?;
    let gen_live = live.gen_loglik_rows(&xs_t, &ys_t, &zs)?;
    let prior_ll_live = prior_live.log_prob_rows(&zs)?;

    // Log-weights under the snapshot. The snapshot network enters as detached
    // constants, so no gradient ever reaches it, while the particles keep
    // their sampling path: re-weighting re-ranks live draws. With the prior
    // proposal the prior and proposal densities cancel exactly and only the
    // generative term remains; in learned mode the particles are constants
    // and so are the weights.
    let snap = ModelGraph::detached(snapshot);
    let gen_snap = snap.gen_loglik_rows(&xs_t, &ys_t, &zs)?;
    let log_w_t = match proposal_ll {
        None => gen_snap,
        Some(ref qll) => {
            let prior_snap = snap.encode(task.ctx_xs(), task.ctx_ys())?;
            gen_snap.add(&prior_snap.log_prob_rows(&zs)?)?.sub(qll)?
        }
    };
    let log_w: Vec<f64> = log_w_t.data().to_vec();
    let weights = self_normalize(&log_w)?;
    let ess = effective_sample_size(&weights);

    // Normalized weights as a tensor: a softmax of the log-weights with the
    // max shift held constant. Softmax is shift-invariant, so the constant
    // shift leaves both the value and the gradient exact while keeping the
    // exponentials bounded.
    let shift = log_w.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let scaled = log_w_t.add_scalar(-shift).exp();
    let per_particle = gen_live.add(&prior_ll_live.scale(1.0 - cfg.alpha))?;
    let loss = scaled
        .mul(&per_particle)?
        .sum_all()
        .div(&scaled.sum_all())?
        .neg();

    let dot = |t: &Tensor| -> f64 {
        t.data()
            .iter()
            .zip(&weights)
            .map(|(v, w)| v * w)
            .sum::<f64>()
    };
    Ok(LossBundle {
        gen_ll: dot(&gen_live),
        prior_ll: dot(&prior_ll_live),
        prior_trace: prior_live.trace_cov(),
        loss,
        graph: live,
        kl: 0.0,
        ess,
        weights,
    })
}

/// Learned-proposal distillation: with the particles and weights of the
/// paired [`loss_si`] call (same rng state), minimize the weighted negative
/// proposal log-density. Differentiable only in the proposal parameters.
pub fn loss_proposal_kl<R: Rng>(
    proposal: &ModelParams,
    snapshot: &ModelParams,
    task: &Task,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<LossBundle> {
    task.validate()?;
    cfg.validate()?;
    let b = cfg.particles;
    let snap = ModelGraph::detached(snapshot);
    let live = ModelGraph::attached(proposal);
    let q_att = live.encode(&task.x_all, &task.y_all)?;

    // Particles exactly as the paired SI call draws them, then detached.
    let (zs, log_w) = match cfg.proposal_mode {
        ProposalMode::Prior => {
            let prior_snap = snap.encode(task.ctx_xs(), task.ctx_ys())?;
            let (zs, _eps) = prior_snap.sample_rt_rows(rng, b)?;
            let (xs_t, ys_t) = g_xy(&snap, task)?;
            let gen = snap.gen_loglik_rows(&xs_t, &ys_t, &zs)?;
            (zs, gen.data().to_vec())
        }
        ProposalMode::Learned => {
            let q_det = q_att.detach();
            let (zs, _eps) = q_det.sample_rt_rows(rng, b)?;
            let (xs_t, ys_t) = g_xy(&snap, task)?;
            let gen = snap.gen_loglik_rows(&xs_t, &ys_t, &zs)?;
            let prior_snap = snap.encode(task.ctx_xs(), task.ctx_ys())?;
            let prior_ll = prior_snap.log_prob_rows(&zs)?;
            let qll = q_det.log_prob_rows(&zs)?;
            let log_w: Vec<f64> = gen
                .data()
                .iter()
                .zip(prior_ll.data())
                .zip(qll.data())
                .map(|((g, p), q)| g + p - q)
                .collect();
            (zs, log_w)
        }
    };
    let weights = self_normalize(&log_w)?;
    let ess = effective_sample_size(&weights);

    let q_of_z = q_att.log_prob_rows(&zs.detach())?;
    let w_t = Tensor::constant(b, 1, weights.clone())?;
    let loss = q_of_z.mul(&w_t)?.sum_all().neg();
    Ok(LossBundle {
        gen_ll: 0.0,
        prior_ll: 0.0,
        kl: 0.0,
        prior_trace: q_att.trace_cov(),
        ess,
        loss,
        graph: live,
        weights,
    })
}

/// Dispatch a training loss for any objective kind. SI-NP uses the same
/// parameters as their own snapshot (refreshed every step).
pub fn compute_loss<R: Rng>(
    params: &ModelParams,
    task: &Task,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<LossBundle> {
    match cfg.kind {
        ObjectiveKind::Np => loss_np(params, task, rng),
        ObjectiveKind::Cnp => loss_cnp(params, task),
        ObjectiveKind::MlNp => loss_ml(params, task, cfg.particles, rng),
        ObjectiveKind::SiNp => loss_si(params, params, task, cfg, rng),
    }
}

fn g_xy(g: &ModelGraph, task: &Task) -> Result<(Tensor, Tensor)> {
    g.xy_tensors(&task.x_all, &task.y_all, "objective target set")
}
