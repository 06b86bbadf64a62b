//! Flat TOML config for `train`, merged as defaults <- file <- CLI flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use np_lab_core::model::Dims;
use np_lab_core::objectives::{ObjectiveConfig, ObjectiveKind, ProposalMode};
use np_lab_core::tasks::{load_tasks, KernelKind};
use np_lab_core::trainer::{AdamHyper, TaskSource, TrainConfig};

/// Keys accepted in the TOML file. Every field is optional; unknown keys are
/// rejected so typos fail loudly.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub objective: Option<String>,
    pub particles: Option<usize>,
    pub alpha: Option<f64>,
    pub train_proposal: Option<bool>,
    pub proposal_mode: Option<String>,
    pub kernel: Option<String>,
    pub tasks: Option<PathBuf>,
    pub batch_size: Option<usize>,
    pub steps: Option<u64>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub seed: Option<u64>,
    pub eval_every: Option<u64>,
    pub eval_particles: Option<usize>,
    pub eval_tasks: Option<usize>,
    pub hidden: Option<usize>,
    pub r_dim: Option<usize>,
    pub z_dim: Option<usize>,
    pub dec_layers: Option<usize>,
}

/// Values supplied as CLI flags; they win over the file.
#[derive(Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub objective: Option<String>,
    pub particles: Option<usize>,
    pub alpha: Option<f64>,
    pub kernel: Option<String>,
    pub tasks: Option<PathBuf>,
    pub steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub eval_every: Option<u64>,
    pub eval_particles: Option<usize>,
    pub eval_tasks: Option<usize>,
}

pub fn resolve_train_config(file: Option<&Path>, over: TrainOverrides) -> Result<TrainConfig> {
    let file_cfg: FileConfig = match file {
        Some(path) => {
            let body = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&body).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => FileConfig::default(),
    };

    let objective_name = over
        .objective
        .or(file_cfg.objective)
        .unwrap_or_else(|| "si-np".to_string());
    let kind: ObjectiveKind = objective_name.parse()?;

    let mut objective = ObjectiveConfig::new(kind, over.particles.or(file_cfg.particles).unwrap_or(16));
    objective.alpha = over.alpha.or(file_cfg.alpha).unwrap_or(0.0);
    objective.train_proposal = file_cfg.train_proposal.unwrap_or(false);
    if let Some(mode) = &file_cfg.proposal_mode {
        objective.proposal_mode = match mode.to_ascii_lowercase().as_str() {
            "prior" => ProposalMode::Prior,
            "learned" => ProposalMode::Learned,
            other => bail!("unknown proposal_mode '{other}' (prior, learned)"),
        };
    }

    let task_file = over.tasks.or(file_cfg.tasks);
    let kernel_name = over.kernel.or(file_cfg.kernel);
    let source = match (task_file, kernel_name) {
        (Some(path), _) => TaskSource::File { path },
        (None, Some(name)) => TaskSource::Kernel {
            kind: name.parse::<KernelKind>()?,
        },
        (None, None) => TaskSource::Kernel {
            kind: KernelKind::Rbf,
        },
    };

    // Grid task files carry 2-d inputs; pick the decoder depth to match.
    let (x_dim, grid) = match &source {
        TaskSource::File { path } => {
            let tasks = load_tasks(path)?;
            let x_dim = tasks.first().map(|t| t.x_dim).unwrap_or(1);
            (x_dim, x_dim == 2)
        }
        _ => (1, false),
    };
    let dims = Dims {
        x_dim,
        y_dim: 1,
        r_dim: file_cfg.r_dim.unwrap_or(128),
        z_dim: file_cfg.z_dim.unwrap_or(128),
        hidden: file_cfg.hidden.unwrap_or(128),
        dec_layers: file_cfg.dec_layers.unwrap_or(if grid { 5 } else { 1 }),
    };

    let adam = AdamHyper {
        lr: over.lr.or(file_cfg.lr).unwrap_or(5e-4),
        beta1: file_cfg.beta1.unwrap_or(0.9),
        beta2: file_cfg.beta2.unwrap_or(0.999),
        eps: file_cfg.adam_eps.unwrap_or(1e-8),
    };

    Ok(TrainConfig {
        objective,
        source,
        dims,
        batch_size: over.batch_size.or(file_cfg.batch_size).unwrap_or(16),
        steps: over.steps.or(file_cfg.steps).unwrap_or(1000),
        adam,
        seed: over.seed.or(file_cfg.seed).unwrap_or(0),
        eval_every: over.eval_every.or(file_cfg.eval_every).unwrap_or(0),
        eval_particles: over.eval_particles.or(file_cfg.eval_particles).unwrap_or(32),
        eval_tasks: over.eval_tasks.or(file_cfg.eval_tasks).unwrap_or(100),
    })
}
