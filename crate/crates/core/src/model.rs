//! The neural-process architecture shared by all four objectives: a
//! permutation-invariant set encoder producing a diagonal Gaussian over the
//! global latent z, and a decoder mapping (x, z) to per-point predictive
//! Gaussians with bounded standard deviation.
//!
//! Parameters live in plain f64 banks ([`ModelParams`]); each loss evaluation
//! binds them into a fresh graph through [`ModelGraph`], so gradient state
//! never leaks across steps. The decoder's first layer is stored split into
//! an x-block and a z-block: mathematically identical to one matrix over
//! concat(x, z), but it lets a batch of B latents share the x-side product.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, LN_2PI};
use crate::distributions::DiagGaussian;
use crate::error::{Error, Result};

/// Architecture sizes. `r_dim` is the per-point embedding width emitted by
/// the set encoder, `hidden` the MLP width, `dec_layers` the number of hidden
/// decoder layers (1 for function regression, 5 for gridded tasks).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub x_dim: usize,
    pub y_dim: usize,
    pub r_dim: usize,
    pub z_dim: usize,
    pub hidden: usize,
    pub dec_layers: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            x_dim: 1,
            y_dim: 1,
            r_dim: 128,
            z_dim: 128,
            hidden: 128,
            dec_layers: 1,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.x_dim,
            self.y_dim,
            self.r_dim,
            self.z_dim,
            self.hidden,
            self.dec_layers,
        ];
        if all.iter().any(|&d| d == 0) {
            return Err(Error::Invalid {
                what: "dims",
                detail: format!("all dimensions must be positive: {self:?}"),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn init<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Mat {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen::<f64>() * 2.0 * bound - bound)
            .collect();
        Mat { rows, cols, data }
    }

    fn leaf(&self, requires_grad: bool) -> Tensor {
        Tensor::leaf(self.rows, self.cols, self.data.clone(), requires_grad)
            .expect("stored matrix shape is consistent")
    }
}

/// All trainable weights. Cloning yields a deep, independent snapshot.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub dims: Dims,
    enc_h_w0: Mat,
    enc_h_b0: Mat,
    enc_h_w1: Mat,
    enc_h_b1: Mat,
    enc_g_w: Mat,
    enc_g_b: Mat,
    dec_w0x: Mat,
    dec_w0z: Mat,
    dec_b0: Mat,
    dec_hidden: Vec<(Mat, Mat)>,
    dec_wout: Mat,
    dec_bout: Mat,
}

impl ModelParams {
    /// Seeded uniform initialization in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    /// The decoder's split first layer uses fan_in = x_dim + z_dim for both
    /// blocks, matching the unsplit concat layer it is equivalent to.
    pub fn init<R: Rng>(dims: Dims, rng: &mut R) -> Result<ModelParams> {
        dims.validate()?;
        let in_dim = dims.x_dim + dims.y_dim;
        let dec_in = dims.x_dim + dims.z_dim;
        let enc_h_w0 = Mat::init(in_dim, dims.hidden, in_dim, rng);
        let enc_h_b0 = Mat::init(1, dims.hidden, in_dim, rng);
        let enc_h_w1 = Mat::init(dims.hidden, dims.r_dim, dims.hidden, rng);
        let enc_h_b1 = Mat::init(1, dims.r_dim, dims.hidden, rng);
        let enc_g_w = Mat::init(dims.r_dim, 2 * dims.z_dim, dims.r_dim, rng);
        let enc_g_b = Mat::init(1, 2 * dims.z_dim, dims.r_dim, rng);
        let dec_w0x = Mat::init(dims.x_dim, dims.hidden, dec_in, rng);
        let dec_w0z = Mat::init(dims.z_dim, dims.hidden, dec_in, rng);
        let dec_b0 = Mat::init(1, dims.hidden, dec_in, rng);
        let dec_hidden = (1..dims.dec_layers)
            .map(|_| {
                (
                    Mat::init(dims.hidden, dims.hidden, dims.hidden, rng),
                    Mat::init(1, dims.hidden, dims.hidden, rng),
                )
            })
            .collect();
        let dec_wout = Mat::init(dims.hidden, 2 * dims.y_dim, dims.hidden, rng);
        let dec_bout = Mat::init(1, 2 * dims.y_dim, dims.hidden, rng);
        Ok(ModelParams {
            dims,
            enc_h_w0,
            enc_h_b0,
            enc_h_w1,
            enc_h_b1,
            enc_g_w,
            enc_g_b,
            dec_w0x,
            dec_w0z,
            dec_b0,
            dec_hidden,
            dec_wout,
            dec_bout,
        })
    }

    fn mats(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("enc_h_w0".to_string(), &self.enc_h_w0),
            ("enc_h_b0".to_string(), &self.enc_h_b0),
            ("enc_h_w1".to_string(), &self.enc_h_w1),
            ("enc_h_b1".to_string(), &self.enc_h_b1),
            ("enc_g_w".to_string(), &self.enc_g_w),
            ("enc_g_b".to_string(), &self.enc_g_b),
            ("dec_w0x".to_string(), &self.dec_w0x),
            ("dec_w0z".to_string(), &self.dec_w0z),
            ("dec_b0".to_string(), &self.dec_b0),
        ];
        for (i, (w, b)) in self.dec_hidden.iter().enumerate() {
            out.push((format!("dec_h{}_w", i + 1), w));
            out.push((format!("dec_h{}_b", i + 1), b));
        }
        out.push(("dec_wout".to_string(), &self.dec_wout));
        out.push(("dec_bout".to_string(), &self.dec_bout));
        out
    }

    fn mats_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![
            &mut self.enc_h_w0,
            &mut self.enc_h_b0,
            &mut self.enc_h_w1,
            &mut self.enc_h_b1,
            &mut self.enc_g_w,
            &mut self.enc_g_b,
            &mut self.dec_w0x,
            &mut self.dec_w0z,
            &mut self.dec_b0,
        ];
        for (w, b) in self.dec_hidden.iter_mut() {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.dec_wout);
        out.push(&mut self.dec_bout);
        out
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.mats().iter().map(|(_, m)| m.data.len()).sum()
    }

    /// All parameters flattened in bank order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (_, m) in self.mats() {
            out.extend_from_slice(&m.data);
        }
        out
    }

    /// Overwrite all parameters from a flat vector in bank order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::DimMismatch {
                what: "flat parameter vector".to_string(),
                expected: self.flat_len(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for m in self.mats_mut() {
            let len = m.data.len();
            m.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// Apply an in-place update to every parameter in bank order; `f` receives
    /// the flat index and a mutable reference.
    pub fn update_in_place(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut idx = 0;
        for m in self.mats_mut() {
            for v in m.data.iter_mut() {
                f(idx, v);
                idx += 1;
            }
        }
    }
}

/// Graph-bound parameter leaves for one loss evaluation.
pub struct ModelGraph {
    dims: Dims,
    attached: bool,
    enc_h_w0: Tensor,
    enc_h_b0: Tensor,
    enc_h_w1: Tensor,
    enc_h_b1: Tensor,
    enc_g_w: Tensor,
    enc_g_b: Tensor,
    dec_w0x: Tensor,
    dec_w0z: Tensor,
    dec_b0: Tensor,
    dec_hidden: Vec<(Tensor, Tensor)>,
    dec_wout: Tensor,
    dec_bout: Tensor,
}

/// Per-point predictive Gaussians; rows are particle-major when produced
/// from a batch of latents (row b*n + i is particle b at point i).
#[derive(Clone, Debug)]
pub struct PredictiveGaussian {
    pub mean: Tensor,
    pub sigma_hat: Tensor,
}

/// Monte Carlo predictive mixture over B prior draws (graph-free values).
#[derive(Clone, Debug)]
pub struct Predictive {
    /// Component means, one row per particle, each of length q * y_dim.
    pub means: Vec<Vec<f64>>,
    /// Component standard deviations, aligned with `means`.
    pub sigmas: Vec<Vec<f64>>,
    /// Mixture mean per query output.
    pub pooled_mean: Vec<f64>,
    /// Mixture standard deviation per query output
    /// (mean of variances + variance of means, square-rooted).
    pub pooled_sigma: Vec<f64>,
}

impl ModelGraph {
    /// Bind parameters as gradient-accumulating leaves.
    pub fn attached(params: &ModelParams) -> ModelGraph {
        ModelGraph::bind(params, true)
    }

    /// Bind parameters as constants; forward passes record no graph.
    pub fn detached(params: &ModelParams) -> ModelGraph {
        ModelGraph::bind(params, false)
    }

    fn bind(params: &ModelParams, attached: bool) -> ModelGraph {
        ModelGraph {
            dims: params.dims.clone(),
            attached,
            enc_h_w0: params.enc_h_w0.leaf(attached),
            enc_h_b0: params.enc_h_b0.leaf(attached),
            enc_h_w1: params.enc_h_w1.leaf(attached),
            enc_h_b1: params.enc_h_b1.leaf(attached),
            enc_g_w: params.enc_g_w.leaf(attached),
            enc_g_b: params.enc_g_b.leaf(attached),
            dec_w0x: params.dec_w0x.leaf(attached),
            dec_w0z: params.dec_w0z.leaf(attached),
            dec_b0: params.dec_b0.leaf(attached),
            dec_hidden: params
                .dec_hidden
                .iter()
                .map(|(w, b)| (w.leaf(attached), b.leaf(attached)))
                .collect(),
            dec_wout: params.dec_wout.leaf(attached),
            dec_bout: params.dec_bout.leaf(attached),
        }
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn is_attached(&self) -> bool {
        self.attached
    }

    /// Parameter leaves in bank order (gradient read-out order).
    pub fn leaves(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.enc_h_w0,
            &self.enc_h_b0,
            &self.enc_h_w1,
            &self.enc_h_b1,
            &self.enc_g_w,
            &self.enc_g_b,
            &self.dec_w0x,
            &self.dec_w0z,
            &self.dec_b0,
        ];
        for (w, b) in self.dec_hidden.iter() {
            out.push(w);
            out.push(b);
        }
        out.push(&self.dec_wout);
        out.push(&self.dec_bout);
        out
    }

    /// Gradients of all parameters, flattened in bank order (zeros where a
    /// parameter was unreachable from the loss).
    pub fn collect_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for leaf in self.leaves() {
            match leaf.grad() {
                Some(g) => out.extend_from_slice(&g),
                None => out.extend(std::iter::repeat(0.0).take(leaf.len())),
            }
        }
        out
    }

    fn point_matrix(&self, xs: &[f64], ys: &[f64], what: &'static str) -> Result<(Tensor, usize)> {
        let (xd, yd) = (self.dims.x_dim, self.dims.y_dim);
        if xs.is_empty() || ys.is_empty() {
            return Err(Error::EmptySet { what });
        }
        if xs.len() % xd != 0 || ys.len() % yd != 0 || xs.len() / xd != ys.len() / yd {
            return Err(Error::DimMismatch {
                what: format!("{what} point arrays ({} xs, {} ys)", xs.len(), ys.len()),
                expected: xd + yd,
                got: 0,
            });
        }
        let n = xs.len() / xd;
        let mut data = Vec::with_capacity(n * (xd + yd));
        for i in 0..n {
            data.extend_from_slice(&xs[i * xd..(i + 1) * xd]);
            data.extend_from_slice(&ys[i * yd..(i + 1) * yd]);
        }
        Ok((Tensor::constant(n, xd + yd, data)?, n))
    }

    /// Per-point embeddings r_i = h([x_i, y_i]) for all points, n x r_dim.
    fn embed(&self, points: &Tensor) -> Result<Tensor> {
        let h0 = points
            .matmul(&self.enc_h_w0)?
            .add_row(&self.enc_h_b0)?
            .relu();
        let h1 = h0.matmul(&self.enc_h_w1)?.add_row(&self.enc_h_b1)?.relu();
        Ok(h1)
    }

    fn head(&self, pooled: &Tensor) -> Result<DiagGaussian> {
        let gz = pooled.matmul(&self.enc_g_w)?.add_row(&self.enc_g_b)?;
        let z = self.dims.z_dim;
        let mu = gz.slice(0, 1, 0, z)?;
        let log_sigma = gz.slice(0, 1, z, 2 * z)?;
        DiagGaussian::new(mu, log_sigma)
    }

    /// Set encoding of (xs, ys) into a DiagGaussian over z: per-point
    /// embeddings, mean pooling in index order, then the linear head.
    pub fn encode(&self, xs: &[f64], ys: &[f64]) -> Result<DiagGaussian> {
        let (points, _) = self.point_matrix(xs, ys, "encode")?;
        let r = self.embed(&points)?;
        self.head(&r.mean_axis(0)?)
    }

    /// Context and full-set encodings sharing one embedding pass. The context
    /// is the prefix of length `n_context`, so its embedding rows are reused
    /// bitwise; results equal two independent `encode` calls.
    pub fn encode_prefix_and_full(
        &self,
        xs: &[f64],
        ys: &[f64],
        n_context: usize,
    ) -> Result<(DiagGaussian, DiagGaussian)> {
        let (points, n) = self.point_matrix(xs, ys, "encode")?;
        if n_context == 0 || n_context > n {
            return Err(Error::Invalid {
                what: "encode prefix",
                detail: format!("n_context {n_context} out of range for {n} points"),
            });
        }
        let r = self.embed(&points)?;
        let ctx = self.head(&r.slice(0, n_context, 0, r.cols())?.mean_axis(0)?)?;
        let full = self.head(&r.mean_axis(0)?)?;
        Ok((ctx, full))
    }

    /// Decode query inputs against a batch of latents. `xs_t` is q x x_dim,
    /// `zs` is B x z_dim; the result has B*q particle-major rows.
    pub fn decode_rows(&self, xs_t: &Tensor, zs: &Tensor) -> Result<PredictiveGaussian> {
        if xs_t.cols() != self.dims.x_dim {
            return Err(Error::DimMismatch {
                what: "decode x dim".to_string(),
                expected: self.dims.x_dim,
                got: xs_t.cols(),
            });
        }
        if zs.cols() != self.dims.z_dim {
            return Err(Error::DimMismatch {
                what: "decode z dim".to_string(),
                expected: self.dims.z_dim,
                got: zs.cols(),
            });
        }
        let (q, b) = (xs_t.rows(), zs.rows());
        let xpart = xs_t.matmul(&self.dec_w0x)?.tile_rows(b)?;
        let zpart = zs.matmul(&self.dec_w0z)?.repeat_rows(q)?;
        let mut h = xpart.add(&zpart)?.add_row(&self.dec_b0)?.relu();
        for (w, bias) in self.dec_hidden.iter() {
            h = h.matmul(w)?.add_row(bias)?.relu();
        }
        let out = h.matmul(&self.dec_wout)?.add_row(&self.dec_bout)?;
        let yd = self.dims.y_dim;
        let mean = out.slice(0, b * q, 0, yd)?;
        let raw = out.slice(0, b * q, yd, 2 * yd)?;
        let sigma_hat = raw.sigmoid().scale(0.9).add_scalar(0.1);
        Ok(PredictiveGaussian { mean, sigma_hat })
    }

    /// Decode a single input point against a single latent.
    pub fn decode(&self, x: &[f64], z: &Tensor) -> Result<PredictiveGaussian> {
        if x.len() != self.dims.x_dim {
            return Err(Error::DimMismatch {
                what: "decode input point".to_string(),
                expected: self.dims.x_dim,
                got: x.len(),
            });
        }
        let xs_t = Tensor::constant(1, self.dims.x_dim, x.to_vec())?;
        self.decode_rows(&xs_t, z)
    }

    /// Per-particle generative log-likelihoods sum_i ln p(y_i | x_i, z_b),
    /// one row per particle (B x 1).
    pub fn gen_loglik_rows(&self, xs_t: &Tensor, ys_t: &Tensor, zs: &Tensor) -> Result<Tensor> {
        let (q, b) = (xs_t.rows(), zs.rows());
        if ys_t.rows() != q || ys_t.cols() != self.dims.y_dim {
            return Err(Error::DimMismatch {
                what: "gen_loglik target ys".to_string(),
                expected: q * self.dims.y_dim,
                got: ys_t.rows() * ys_t.cols(),
            });
        }
        let pred = self.decode_rows(xs_t, zs)?;
        let y_rep = ys_t.tile_rows(b)?;
        let diff = y_rep.sub(&pred.mean)?;
        let var2 = pred.sigma_hat.mul(&pred.sigma_hat)?.scale(2.0);
        let quad = diff.mul(&diff)?.div(&var2)?;
        let per_elem = quad
            .neg()
            .sub(&pred.sigma_hat.log()?)?
            .add_scalar(-0.5 * LN_2PI);
        // (B*q) x y_dim -> per-point rows -> per-particle sums.
        per_elem.sum_axis(1)?.reshape(b, q)?.sum_axis(1)
    }

    /// Generative log-likelihood of a point set under one latent (scalar).
    pub fn gen_loglik(&self, xs: &[f64], ys: &[f64], z: &Tensor) -> Result<Tensor> {
        let (xs_t, ys_t) = self.xy_tensors(xs, ys, "gen_loglik")?;
        self.gen_loglik_rows(&xs_t, &ys_t, z)?.reshape(1, 1)
    }

    /// Split flat xs/ys into constant tensors of shape q x x_dim and q x y_dim.
    pub fn xy_tensors(&self, xs: &[f64], ys: &[f64], what: &'static str) -> Result<(Tensor, Tensor)> {
        let (xd, yd) = (self.dims.x_dim, self.dims.y_dim);
        if xs.is_empty() || ys.is_empty() {
            return Err(Error::EmptySet { what });
        }
        if xs.len() % xd != 0 || ys.len() % yd != 0 || xs.len() / xd != ys.len() / yd {
            return Err(Error::DimMismatch {
                what: format!("{what} point arrays ({} xs, {} ys)", xs.len(), ys.len()),
                expected: xd + yd,
                got: 0,
            });
        }
        let q = xs.len() / xd;
        Ok((
            Tensor::constant(q, xd, xs.to_vec())?,
            Tensor::constant(q, yd, ys.to_vec())?,
        ))
    }
}

/// Monte Carlo predictive distribution at query inputs given a context set:
/// B draws from the learned functional prior, each decoded, plus mixture
/// moments. Runs detached (no graph).
pub fn predict<R: Rng>(
    params: &ModelParams,
    ctx_xs: &[f64],
    ctx_ys: &[f64],
    query_xs: &[f64],
    b: usize,
    rng: &mut R,
) -> Result<Predictive> {
    if b == 0 {
        return Err(Error::Domain {
            op: "predict",
            detail: "particle count must be positive".to_string(),
        });
    }
    let g = ModelGraph::detached(params);
    let prior = g.encode(ctx_xs, ctx_ys)?;
    let (zs, _) = prior.sample_rt_rows(rng, b)?;
    let xd = g.dims().x_dim;
    if query_xs.is_empty() || query_xs.len() % xd != 0 {
        return Err(Error::DimMismatch {
            what: "predict query xs".to_string(),
            expected: xd,
            got: query_xs.len(),
        });
    }
    let q = query_xs.len() / xd;
    let xs_t = Tensor::constant(q, xd, query_xs.to_vec())?;
    let pred = g.decode_rows(&xs_t, &zs)?;
    let yd = g.dims().y_dim;
    let out_len = q * yd;
    let mut means = Vec::with_capacity(b);
    let mut sigmas = Vec::with_capacity(b);
    for bi in 0..b {
        let lo = bi * out_len;
        means.push(pred.mean.data()[lo..lo + out_len].to_vec());
        sigmas.push(pred.sigma_hat.data()[lo..lo + out_len].to_vec());
    }
    let mut pooled_mean = vec![0.0; out_len];
    let mut pooled_sigma = vec![0.0; out_len];
    for j in 0..out_len {
        let mut m = 0.0;
        for bi in 0..b {
            m += means[bi][j];
        }
        m /= b as f64;
        let mut v = 0.0;
        for bi in 0..b {
            let dm = means[bi][j] - m;
            v += sigmas[bi][j] * sigmas[bi][j] + dm * dm;
        }
        pooled_mean[j] = m;
        pooled_sigma[j] = (v / b as f64).sqrt();
    }
    Ok(Predictive {
        means,
        sigmas,
        pooled_mean,
        pooled_sigma,
    })
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedMat {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    objective: Option<String>,
    dims: Dims,
    weights: Vec<NamedMat>,
}

/// Write a versioned JSON checkpoint: dims plus flat weight banks. The JSON
/// float encoding round-trips f64 exactly, so files are byte-stable under a
/// fixed seed.
pub fn save_checkpoint(params: &ModelParams, objective: Option<&str>, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        objective: objective.map(str::to_string),
        dims: params.dims.clone(),
        weights: params
            .mats()
            .into_iter()
            .map(|(name, m)| NamedMat {
                name,
                rows: m.rows,
                cols: m.cols,
                data: m.data.clone(),
            })
            .collect(),
    };
    let f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::to_writer(BufWriter::new(f), &file).map_err(|e| Error::Invalid {
        what: "checkpoint serialization",
        detail: e.to_string(),
    })
}

/// Load a checkpoint written by [`save_checkpoint`], returning the parameters
/// and the recorded objective kind, if any.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<String>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: CheckpointFile =
        serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Invalid {
            what: "checkpoint parse",
            detail: e.to_string(),
        })?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Invalid {
            what: "checkpoint version",
            detail: format!("expected {CHECKPOINT_VERSION}, got {}", file.version),
        });
    }
    // Rebuild a skeleton with the right shapes, then overwrite every bank.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::init(file.dims.clone(), &mut rng)?;
    let expected: Vec<String> = params.mats().into_iter().map(|(n, _)| n).collect();
    let got: Vec<String> = file.weights.iter().map(|w| w.name.clone()).collect();
    if expected != got {
        return Err(Error::Invalid {
            what: "checkpoint banks",
            detail: format!("expected banks {expected:?}, got {got:?}"),
        });
    }
    for (mat, src) in params.mats_mut().into_iter().zip(file.weights.iter()) {
        if mat.rows != src.rows || mat.cols != src.cols || src.data.len() != src.rows * src.cols {
            return Err(Error::Invalid {
                what: "checkpoint bank shape",
                detail: format!(
                    "bank {} has shape {}x{} with {} values, expected {}x{}",
                    src.name,
                    src.rows,
                    src.cols,
                    src.data.len(),
                    mat.rows,
                    mat.cols
                ),
            });
        }
        mat.data.copy_from_slice(&src.data);
    }
    Ok((params, file.objective))
}
