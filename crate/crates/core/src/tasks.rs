//! Meta-learning task generation: GP-sampled 1-D regression tasks with three
//! kernels, the exact GP oracle, a gridded-function adapter for toy 2-D
//! completion, and the versioned task file format.
//!
//! Each task stores all points as one target array whose prefix of length
//! `n_context` is the context set. GP outputs carry observation noise with
//! standard deviation [`OBS_NOISE_STD`] on the Gram diagonal; the oracle
//! scores under the same covariance, which is what places its per-point value
//! on the reference scale for these kernels.

use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::LN_2PI;
use crate::error::{Error, Result};

/// Observation-noise standard deviation baked into sampling and the oracle.
pub const OBS_NOISE_STD: f64 = 2e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Matern52,
    Rbf,
    Periodic,
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<KernelKind> {
        match s.to_ascii_lowercase().as_str() {
            "matern52" | "matern" => Ok(KernelKind::Matern52),
            "rbf" => Ok(KernelKind::Rbf),
            "periodic" => Ok(KernelKind::Periodic),
            other => Err(Error::Invalid {
                what: "kernel kind",
                detail: format!("unknown kernel '{other}' (matern52, rbf, periodic)"),
            }),
        }
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            KernelKind::Matern52 => "matern52",
            KernelKind::Rbf => "rbf",
            KernelKind::Periodic => "periodic",
        };
        f.write_str(name)
    }
}

/// Kernel hyperparameters: output scale s, length scale l, period p
/// (Periodic only; carried but unused otherwise).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub s: f64,
    pub l: f64,
    pub p: f64,
}

/// Kernel value k(x, x') for scalar inputs.
///
/// Matern-5/2 uses the rescaled distance d = 4|x - x'|. Periodic keeps the
/// squared distance inside the sine; that form is not positive semi-definite
/// in general, so sampling from it usually exhausts the jitter ladder.
pub fn kernel_eval(cfg: &KernelConfig, x: f64, xp: f64) -> f64 {
    match cfg.kind {
        KernelKind::Matern52 => {
            let d = 4.0 * (x - xp).abs();
            let sq5 = 5.0f64.sqrt();
            cfg.s * cfg.s
                * (1.0 + sq5 * d / cfg.l + 5.0 * d * d / (3.0 * cfg.l * cfg.l))
                * (-sq5 * d / cfg.l).exp()
        }
        KernelKind::Rbf => {
            let d = x - xp;
            cfg.s * cfg.s * (-d * d / (2.0 * cfg.l * cfg.l)).exp()
        }
        KernelKind::Periodic => {
            let d2 = (x - xp) * (x - xp);
            let sn = (std::f64::consts::PI * d2 / cfg.p).sin();
            cfg.s * cfg.s * (-2.0 * sn * sn / (cfg.l * cfg.l)).exp()
        }
    }
}

/// One regression task. The context set is exactly the prefix of the target
/// arrays: inputs are `x_all` (x_dim values per point), outputs `y_all`
/// (one value per point).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub x_all: Vec<f64>,
    pub y_all: Vec<f64>,
    pub n_context: usize,
    #[serde(default = "default_x_dim")]
    pub x_dim: usize,
    #[serde(default)]
    pub kernel: Option<KernelConfig>,
}

fn default_x_dim() -> usize {
    1
}

impl Task {
    pub fn total_points(&self) -> usize {
        self.y_all.len()
    }

    pub fn ctx_xs(&self) -> &[f64] {
        &self.x_all[..self.n_context * self.x_dim]
    }

    pub fn ctx_ys(&self) -> &[f64] {
        &self.y_all[..self.n_context]
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_dim == 0 {
            return Err(Error::Invalid {
                what: "task",
                detail: "x_dim must be positive".to_string(),
            });
        }
        if self.x_all.len() != self.y_all.len() * self.x_dim {
            return Err(Error::Invalid {
                what: "task",
                detail: format!(
                    "{} x values with x_dim {} does not match {} y values",
                    self.x_all.len(),
                    self.x_dim,
                    self.y_all.len()
                ),
            });
        }
        if self.n_context == 0 || self.n_context > self.total_points() {
            return Err(Error::Invalid {
                what: "task",
                detail: format!(
                    "n_context {} out of range for {} points",
                    self.n_context,
                    self.total_points()
                ),
            });
        }
        Ok(())
    }

    /// Same points with the context prefix re-cut to `n` (for sweeps).
    pub fn with_context(&self, n: usize) -> Result<Task> {
        if n == 0 || n > self.total_points() {
            return Err(Error::Invalid {
                what: "task re-split",
                detail: format!("n_context {n} out of range for {} points", self.total_points()),
            });
        }
        let mut t = self.clone();
        t.n_context = n;
        Ok(t)
    }
}

/// Draw kernel hyperparameters from the benchmark priors:
/// s ~ U[0.1, 1.0], l ~ U[0.1, 0.6], p ~ U[0.1, 0.5].
pub fn sample_kernel_config<R: Rng>(kind: KernelKind, rng: &mut R) -> KernelConfig {
    let s = rng.gen_range(0.1..1.0);
    let l = rng.gen_range(0.1..0.6);
    let p = rng.gen_range(0.1..0.5);
    KernelConfig { kind, s, l, p }
}

/// Sample one GP task: n ~ U[3,47] context points, m ~ U[3,50-n] extra
/// target points, x ~ U[-2,2], y drawn from the noisy Gram Cholesky.
pub fn sample_gp_task<R: Rng>(kind: KernelKind, rng: &mut R) -> Result<Task> {
    let n = rng.gen_range(3..=47usize);
    let m = rng.gen_range(3..=(50 - n));
    sample_gp_task_sized(kind, rng, n, m)
}

/// Sample a GP task with fixed context/extra-target counts.
pub fn sample_gp_task_sized<R: Rng>(
    kind: KernelKind,
    rng: &mut R,
    n_context: usize,
    m_extra: usize,
) -> Result<Task> {
    if n_context == 0 {
        return Err(Error::EmptySet {
            what: "GP task context",
        });
    }
    let cfg = sample_kernel_config(kind, rng);
    let total = n_context + m_extra;
    let xs: Vec<f64> = (0..total).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let ys = sample_gp_values(&cfg, &xs, rng)?;
    Ok(Task {
        x_all: xs,
        y_all: ys,
        n_context,
        x_dim: 1,
        kernel: Some(cfg),
    })
}

/// Draw function values at `xs` from the given kernel (plus observation
/// noise) via Cholesky of the Gram matrix.
pub fn sample_gp_values<R: Rng>(cfg: &KernelConfig, xs: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let k = gram(cfg, xs);
    let l = cholesky_with_jitter(k, xs.len(), cfg.s)?;
    let n = xs.len();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += l[i * n + j] * eps[j];
        }
        y[i] = acc;
    }
    Ok(y)
}

/// Gram matrix with observation noise on the diagonal.
fn gram(cfg: &KernelConfig, xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut v = kernel_eval(cfg, xs[i], xs[j]);
            if i == j {
                v += OBS_NOISE_STD * OBS_NOISE_STD;
            }
            k[i * n + j] = v;
        }
    }
    k
}

/// Lower Cholesky factor with a jitter ladder: 1e-6 * s^2 escalating tenfold
/// up to 1e-2 * s^2 before giving up.
fn cholesky_with_jitter(mut k: Vec<f64>, n: usize, s: f64) -> Result<Vec<f64>> {
    let base = k.clone();
    let mut jitter = 1e-6 * s * s;
    let max_jitter = 1e-2 * s * s;
    loop {
        k.copy_from_slice(&base);
        for i in 0..n {
            k[i * n + i] += jitter;
        }
        if let Some(l) = cholesky(&k, n) {
            return Ok(l);
        }
        jitter *= 10.0;
        if jitter > max_jitter * (1.0 + 1e-12) {
            return Err(Error::CholeskyFailure { max_jitter });
        }
    }
}

/// Plain lower-triangular Cholesky; None on a non-positive pivot.
fn cholesky(k: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = k[j * n + j];
        for t in 0..j {
            d -= l[j * n + t] * l[j * n + t];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[j * n + j] = dj;
        for i in (j + 1)..n {
            let mut v = k[i * n + j];
            for t in 0..j {
                v -= l[i * n + t] * l[j * n + t];
            }
            l[i * n + j] = v / dj;
        }
    }
    Some(l)
}

/// Joint Gaussian log-density ln N(ys; 0, K(xs) + noise) under the kernel.
pub fn gp_joint_loglik(cfg: &KernelConfig, xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::DimMismatch {
            what: "gp_joint_loglik points".to_string(),
            expected: xs.len(),
            got: ys.len(),
        });
    }
    let n = xs.len();
    let k = gram(cfg, xs);
    let l = cholesky_with_jitter(k, n, cfg.s)?;
    // Solve L w = y by forward substitution; then y' K^-1 y = w' w.
    let mut w = ys.to_vec();
    let mut logdet_half = 0.0;
    for i in 0..n {
        let mut v = w[i];
        for j in 0..i {
            v -= l[i * n + j] * w[j];
        }
        w[i] = v / l[i * n + i];
        logdet_half += l[i * n + i].ln();
    }
    let quad: f64 = w.iter().map(|v| v * v).sum();
    Ok(-0.5 * quad - logdet_half - 0.5 * n as f64 * LN_2PI)
}

/// Exact per-point GP score of a task under its true kernel: the conditional
/// log-density of the non-context points given the context plus the context
/// marginal, i.e. the joint log-density of all outputs, divided by the total
/// point count. With m = 0 this is the context-only marginal per point.
pub fn gp_oracle_loglik(task: &Task) -> Result<f64> {
    task.validate()?;
    let cfg = task.kernel.as_ref().ok_or(Error::Invalid {
        what: "gp_oracle_loglik",
        detail: "task has no kernel provenance".to_string(),
    })?;
    if task.x_dim != 1 {
        return Err(Error::Invalid {
            what: "gp_oracle_loglik",
            detail: "oracle applies to 1-d GP tasks".to_string(),
        });
    }
    let joint = gp_joint_loglik(cfg, &task.x_all, &task.y_all)?;
    Ok(joint / task.total_points() as f64)
}

/// The two pieces of the oracle's decomposition: conditional log-density of
/// the non-context outputs given the context, and the context marginal.
pub fn gp_oracle_decomposition(task: &Task) -> Result<(f64, f64)> {
    task.validate()?;
    let cfg = task.kernel.as_ref().ok_or(Error::Invalid {
        what: "gp_oracle_decomposition",
        detail: "task has no kernel provenance".to_string(),
    })?;
    let joint = gp_joint_loglik(cfg, &task.x_all, &task.y_all)?;
    let marginal = gp_joint_loglik(cfg, task.ctx_xs(), task.ctx_ys())?;
    Ok((joint - marginal, marginal))
}

const TASK_FILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TaskFile {
    version: u32,
    tasks: Vec<Task>,
}

/// Write tasks as a versioned JSON record; floats round-trip bitwise.
pub fn save_tasks(tasks: &[Task], path: &Path) -> Result<()> {
    let file = TaskFile {
        version: TASK_FILE_VERSION,
        tasks: tasks.to_vec(),
    };
    let f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::to_writer(BufWriter::new(f), &file).map_err(|e| Error::Invalid {
        what: "task file serialization",
        detail: e.to_string(),
    })
}

pub fn load_tasks(path: &Path) -> Result<Vec<Task>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: TaskFile = serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Invalid {
        what: "task file parse",
        detail: e.to_string(),
    })?;
    if file.version != TASK_FILE_VERSION {
        return Err(Error::Invalid {
            what: "task file version",
            detail: format!("expected {TASK_FILE_VERSION}, got {}", file.version),
        });
    }
    for t in &file.tasks {
        t.validate()?;
    }
    Ok(file.tasks)
}

/// Read a grayscale grid (plain/binary PGM or CSV of rows) as a completion
/// task: every pixel becomes a point with x in [0,1]^2 and y in [0,1], and a
/// random subset of `n_context` pixels forms the context prefix.
pub fn grid_task_from_image<R: Rng>(path: &Path, n_context: usize, rng: &mut R) -> Result<Task> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let grid = if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        parse_pgm(&bytes)?
    } else {
        parse_csv_grid(&bytes)?
    };
    grid_task(&grid, n_context, rng)
}

/// A parsed grid: row-major values in [0,1].
#[derive(Clone, Debug)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

fn grid_task<R: Rng>(grid: &Grid, n_context: usize, rng: &mut R) -> Result<Task> {
    let total = grid.height * grid.width;
    if total == 0 {
        return Err(Error::EmptySet { what: "grid pixels" });
    }
    if n_context == 0 || n_context >= total {
        return Err(Error::Invalid {
            what: "grid task",
            detail: format!("n_context {n_context} must be in [1, {})", total),
        });
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    let coord = |idx: usize, extent: usize| -> f64 {
        if extent <= 1 {
            0.0
        } else {
            idx as f64 / (extent - 1) as f64
        }
    };
    let mut x_all = Vec::with_capacity(2 * total);
    let mut y_all = Vec::with_capacity(total);
    for &pix in &order {
        let (r, c) = (pix / grid.width, pix % grid.width);
        x_all.push(coord(r, grid.height));
        x_all.push(coord(c, grid.width));
        y_all.push(grid.values[pix]);
    }
    Ok(Task {
        x_all,
        y_all,
        n_context,
        x_dim: 2,
        kernel: None,
    })
}

fn parse_pgm(bytes: &[u8]) -> Result<Grid> {
    let bad = |detail: String| Error::Invalid {
        what: "pgm parse",
        detail,
    };
    let binary = bytes.starts_with(b"P5");
    // Header tokens (magic, width, height, maxval) with # comments skipped.
    let mut pos = 0;
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 && pos < bytes.len() {
        let b = bytes[pos];
        if b == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            pos += 1;
        } else {
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
    }
    if tokens.len() < 4 {
        return Err(bad("truncated header".to_string()));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad(format!("bad width '{}'", tokens[1])))?;
    let height: usize = tokens[2]
        .parse()
        .map_err(|_| bad(format!("bad height '{}'", tokens[2])))?;
    let maxval: u32 = tokens[3]
        .parse()
        .map_err(|_| bad(format!("bad maxval '{}'", tokens[3])))?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(bad(format!(
            "unsupported dimensions {width}x{height} maxval {maxval}"
        )));
    }
    let total = width * height;
    let values: Vec<f64> = if binary {
        // One whitespace byte separates the header from the raster.
        let raster = &bytes[pos + 1..];
        if raster.len() < total {
            return Err(bad(format!(
                "raster has {} bytes, expected {total}",
                raster.len()
            )));
        }
        raster[..total].iter().map(|&b| b as f64 / maxval as f64).collect()
    } else {
        let text = String::from_utf8_lossy(&bytes[pos..]);
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| bad(format!("bad pixel value '{t}'")))
            })
            .collect::<Result<Vec<u32>>>()?
            .into_iter()
            .map(|v| v as f64 / maxval as f64)
            .collect();
        if vals.len() != total {
            return Err(bad(format!("{} pixels, expected {total}", vals.len())));
        }
        vals
    };
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(bad("pixel value exceeds maxval".to_string()));
    }
    Ok(Grid {
        height,
        width,
        values,
    })
}

fn parse_csv_grid(bytes: &[u8]) -> Result<Grid> {
    let bad = |detail: String| Error::Invalid {
        what: "csv grid parse",
        detail,
    };
    let text = std::str::from_utf8(bytes).map_err(|_| bad("not utf-8".to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad value '{}' on line {}", t.trim(), lineno + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(bad(format!(
                    "ragged rows: line {} has {} values, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(bad("empty grid".to_string()));
    }
    let (height, width) = (rows.len(), rows[0].len());
    let mut values: Vec<f64> = rows.into_iter().flatten().collect();
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(bad("grid values must be finite and nonnegative".to_string()));
    }
    // Grayscale convention: values above 1 are treated as 0..255 intensities.
    if values.iter().any(|&v| v > 1.0) {
        for v in &mut values {
            *v /= 255.0;
        }
        if values.iter().any(|&v| v > 1.0) {
            return Err(bad("values exceed 255".to_string()));
        }
    }
    Ok(Grid {
        height,
        width,
        values,
    })
}
