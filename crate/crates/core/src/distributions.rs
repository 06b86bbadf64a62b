//! Diagonal-covariance Gaussians over latent vectors: log-density,
//! reparameterized sampling, closed-form KL, and covariance trace.
//!
//! Positivity of sigma is structural: the distribution carries log_sigma and
//! exponentiates on use. log_sigma is clamped to [-10, 5] inside density
//! computations so 1/sigma^2 stays bounded; sampling clamps only the upper
//! bound, letting a collapsing sigma actually reach zero deviates.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tensor, LN_2PI};
use crate::error::{Error, Result};

/// Lower/upper clamp for log_sigma inside log-density computations.
pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 5.0;

/// A diagonal Gaussian with graph-attached parameters, each of shape 1 x d.
#[derive(Clone, Debug)]
pub struct DiagGaussian {
    mu: Tensor,
    log_sigma: Tensor,
}

impl DiagGaussian {
    pub fn new(mu: Tensor, log_sigma: Tensor) -> Result<DiagGaussian> {
        if mu.rows() != 1 || log_sigma.rows() != 1 || mu.cols() != log_sigma.cols() {
            return Err(Error::ShapeMismatch {
                op: "DiagGaussian::new",
                lhs_rows: mu.rows(),
                lhs_cols: mu.cols(),
                rhs_rows: log_sigma.rows(),
                rhs_cols: log_sigma.cols(),
            });
        }
        Ok(DiagGaussian { mu, log_sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn log_sigma(&self) -> &Tensor {
        &self.log_sigma
    }

    /// A graph-free copy of this distribution.
    pub fn detach(&self) -> DiagGaussian {
        DiagGaussian {
            mu: self.mu.detach(),
            log_sigma: self.log_sigma.detach(),
        }
    }

    fn check_dim(&self, x: &Tensor, what: &'static str) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::DimMismatch {
                what: what.to_string(),
                expected: self.dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Log-density of a single vector x (1 x d), as a scalar graph node.
    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != 1 {
            return Err(Error::DimMismatch {
                what: "log_prob input rows".to_string(),
                expected: 1,
                got: x.rows(),
            });
        }
        self.log_prob_rows(x)?.reshape(1, 1)
    }

    /// Row-wise log-density of a batch xs (B x d), returning B x 1. Every row
    /// is scored under the same (mu, sigma).
    pub fn log_prob_rows(&self, xs: &Tensor) -> Result<Tensor> {
        self.check_dim(xs, "log_prob input dim")?;
        let b = xs.rows();
        let log_sigma = self.log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        let sigma = log_sigma.exp();
        let mu_b = self.mu.tile_rows(b)?;
        let sigma_b = sigma.tile_rows(b)?;
        let log_sigma_b = log_sigma.tile_rows(b)?;
        let diff = xs.sub(&mu_b)?;
        let quad = diff.mul(&diff)?.div(&sigma_b.mul(&sigma_b)?.scale(2.0))?;
        let per_dim = quad
            .neg()
            .sub(&log_sigma_b)?
            .add_scalar(-0.5 * LN_2PI);
        per_dim.sum_axis(1)
    }

    /// One reparameterized draw z = mu + eps * sigma (1 x d, graph-attached);
    /// also returns the raw standard-normal deviates.
    pub fn sample_rt<R: Rng>(&self, rng: &mut R) -> Result<(Tensor, Vec<f64>)> {
        let (zs, eps) = self.sample_rt_rows(rng, 1)?;
        Ok((zs, eps))
    }

    /// B reparameterized draws stacked as B x d.
    pub fn sample_rt_rows<R: Rng>(&self, rng: &mut R, b: usize) -> Result<(Tensor, Vec<f64>)> {
        if b == 0 {
            return Err(Error::Domain {
                op: "sample_rt_rows",
                detail: "particle count must be positive".to_string(),
            });
        }
        let d = self.dim();
        let eps: Vec<f64> = (0..b * d).map(|_| rng.sample(StandardNormal)).collect();
        let eps_t = Tensor::constant(b, d, eps.clone())?;
        let sigma = self.log_sigma.clamp(f64::NEG_INFINITY, LOG_SIGMA_MAX).exp();
        let z = self.mu.tile_rows(b)?.add(&eps_t.mul(&sigma.tile_rows(b)?)?)?;
        Ok((z, eps))
    }

    /// Trace of the covariance matrix, sum of sigma_i^2 (plain scalar).
    pub fn trace_cov(&self) -> f64 {
        self.log_sigma
            .data()
            .iter()
            .map(|ls| (2.0 * ls.min(LOG_SIGMA_MAX)).exp())
            .sum()
    }
}

/// KL[q || p] between diagonal Gaussians, as a scalar graph node:
/// sum_i [ log(sigma_p/sigma_q) + (sigma_q^2 + (mu_q - mu_p)^2)/(2 sigma_p^2) - 1/2 ].
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<Tensor> {
    if q.dim() != p.dim() {
        return Err(Error::DimMismatch {
            what: "kl_diag dimensions".to_string(),
            expected: q.dim(),
            got: p.dim(),
        });
    }
    let lq = q.log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX);
    let lp = p.log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX);
    let var_q = lq.scale(2.0).exp();
    let var_p2 = lp.scale(2.0).exp().scale(2.0);
    let dmu = q.mu.sub(&p.mu)?;
    let per_dim = lp
        .sub(&lq)?
        .add(&var_q.add(&dmu.mul(&dmu)?)?.div(&var_p2)?)?
        .add_scalar(-0.5);
    Ok(per_dim.sum_all())
}
