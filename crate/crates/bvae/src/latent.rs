//! Binarized latent regularization.
//!
//! The regularizer replaces the usual KL pull of each posterior dimension
//! toward the prior mean with a pull toward the *nearer* of two prior modes
//! offset by ±r. Per dimension, with delta = mu_q - mu_p:
//!
//! ```text
//! kl_B = ln(sigma_p / sigma_q)
//!      + (sigma_q^2 + (|delta| - r)^2) / (2 sigma_p^2)
//!      - 1/2
//! ```
//!
//! This equals the exact Gaussian KL between the posterior and an "equivalent
//! prior" N(mu_p + sign(delta) * r, sigma_p^2) with ties at delta = 0 taking
//! the + branch, because (|delta| - r)^2 = (delta -+ r)^2 on each branch.
//! [`kl_to_selected_prior`] computes that second form independently and is
//! the equality oracle for [`binarized_kl`]. At r = 0 both collapse to the
//! standard KL against N(mu_p, sigma_p^2).
//!
//! Gradients flow through the |delta| kink with subgradient +1 at 0, the same
//! convention as the [`select_prior`] tie-break, so the closed form and the
//! case-split prior view never disagree.
//!
//! Sampling from the two-mode prior comes in two flavors. Reduced-bias
//! sampling draws each coordinate from the fair mixture
//! `1/2 N(mu_p + r, sigma_p^2) + 1/2 N(mu_p - r, sigma_p^2)`; biased sampling
//! weights the + mode by the fraction of training posteriors that actually
//! landed on the + side of that coordinate ([`LatentStats`], one fraction per
//! dimension, coordinates drawn independently).

use crate::graph::Var;
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("prior offset r must be non-negative, got {0}")]
    NegativeR(f64),
    #[error("sigma_p[{index}] = {value}, prior scales must be positive and finite")]
    BadSigma { index: usize, value: f64 },
    #[error("prior mu_p shape {mu:?} and sigma_p shape {sigma:?} must be equal rank-1")]
    ShapeMismatch { mu: Vec<usize>, sigma: Vec<usize> },
    #[error("pos_fraction[{index}] = {value} outside [0, 1]")]
    BadFraction { index: usize, value: f64 },
}

/// Center, scale and mode offset of the binarized prior pair, one entry per
/// latent dimension. Validated at construction so every consumer can assume
/// `r >= 0` and `sigma_p > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPriorConfig {
    mu_p: Tensor,
    sigma_p: Tensor,
    r: f64,
}

impl LatentPriorConfig {
    pub fn new(mu_p: Tensor, sigma_p: Tensor, r: f64) -> Result<LatentPriorConfig, LatentError> {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(LatentError::NegativeR(r));
        }
        if mu_p.shape().len() != 1 || mu_p.shape() != sigma_p.shape() {
            return Err(LatentError::ShapeMismatch {
                mu: mu_p.shape().to_vec(),
                sigma: sigma_p.shape().to_vec(),
            });
        }
        for (i, &s) in sigma_p.data().iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(LatentError::BadSigma { index: i, value: s });
            }
        }
        mu_p.assert_finite("LatentPriorConfig mu_p");
        Ok(LatentPriorConfig { mu_p, sigma_p, r })
    }

    /// N(0, 1) pair at ±r, the default prior.
    pub fn standard(dim: usize, r: f64) -> Result<LatentPriorConfig, LatentError> {
        LatentPriorConfig::new(Tensor::zeros(&[dim]), Tensor::ones(&[dim]), r)
    }

    pub fn dim(&self) -> usize {
        self.mu_p.shape()[0]
    }

    pub fn mu_p(&self) -> &Tensor {
        &self.mu_p
    }

    pub fn sigma_p(&self) -> &Tensor {
        &self.sigma_p
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    /// Copy with a different offset; shares center and scale.
    pub fn with_r(&self, r: f64) -> Result<LatentPriorConfig, LatentError> {
        LatentPriorConfig::new(self.mu_p.clone(), self.sigma_p.clone(), r)
    }

    // Per-column constants of the closed form, recomputed on demand (d is
    // tiny). `const_row` carries ln(sigma_p) - 1/2, `inv_two_var` 1/(2 sigma_p^2).
    fn const_row(&self) -> Tensor {
        self.sigma_p.map("kl const row", |s| s.ln() - 0.5)
    }

    fn inv_two_var(&self) -> Tensor {
        self.sigma_p.map("kl inv row", |s| 1.0 / (2.0 * s * s))
    }
}

/// Diagonal Gaussian posteriors for a batch: `mu_q` and `log_var_q`, both
/// `[n, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu_q: Tensor,
    pub log_var_q: Tensor,
}

impl GaussianPosterior {
    pub fn new(mu_q: Tensor, log_var_q: Tensor) -> GaussianPosterior {
        assert_eq!(
            mu_q.shape(),
            log_var_q.shape(),
            "GaussianPosterior: mu_q {:?} vs log_var_q {:?}",
            mu_q.shape(),
            log_var_q.shape()
        );
        assert_eq!(
            mu_q.shape().len(),
            2,
            "GaussianPosterior: rank-2 tensors required"
        );
        GaussianPosterior { mu_q, log_var_q }
    }

    pub fn n(&self) -> usize {
        self.mu_q.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.mu_q.shape()[1]
    }

    /// Posterior scales `sigma_q = exp(log_var_q / 2)`.
    pub fn sigma_q(&self) -> Tensor {
        self.log_var_q.map("sigma_q", |lv| (0.5 * lv).exp())
    }
}

fn check_dim(d_post: usize, prior: &LatentPriorConfig, op: &str) {
    assert_eq!(
        d_post,
        prior.dim(),
        "{}: posterior has {} dimensions, prior {}",
        op,
        d_post,
        prior.dim()
    );
}

/// `|delta| - r`: signed distance past the nearer prior mode.
pub fn binarize_delta(delta: &Tensor, r: f64) -> Tensor {
    assert!(r >= 0.0, "binarize_delta: negative r {}", r);
    delta.map("binarize_delta", |d| d.abs() - r)
}

/// Graph form of [`binarize_delta`], differentiable through the abs kink with
/// subgradient +1 at 0.
pub fn binarize_delta_var<'t>(delta: Var<'t>, r: f64) -> Var<'t> {
    assert!(r >= 0.0, "binarize_delta: negative r {}", r);
    delta.abs() + (-r)
}

/// Closed-form binarized KL, summed over dimensions: `[n]` per-sample values.
///
/// Mirrors [`binarized_kl_var`] operation for operation so evaluation and
/// training produce bit-identical numbers for the same posteriors.
pub fn binarized_kl(post: &GaussianPosterior, prior: &LatentPriorConfig) -> Tensor {
    check_dim(post.dim(), prior, "binarized_kl");
    let b = binarize_delta(&post.mu_q.sub_row(prior.mu_p()), prior.r());
    let quad = post
        .log_var_q
        .map("exp", f64::exp)
        .add(&b.mul(&b))
        .mul_row(&prior.inv_two_var());
    quad.add(&post.log_var_q.scale(-0.5))
        .add_row(&prior.const_row())
        .sum_rows()
}

/// Graph form of [`binarized_kl`]: per-sample KL `[n]` from posterior
/// parameter nodes. Gradients flow to `mu_q` and `log_var_q` only; the prior
/// enters as constants.
pub fn binarized_kl_var<'t>(
    mu_q: Var<'t>,
    log_var_q: Var<'t>,
    prior: &LatentPriorConfig,
) -> Var<'t> {
    check_dim(mu_q.shape()[1], prior, "binarized_kl");
    let b = binarize_delta_var(mu_q.sub_row_const(prior.mu_p()), prior.r());
    let quad = (log_var_q.exp() + b.square()).mul_row_const(&prior.inv_two_var());
    (quad + log_var_q * -0.5)
        .add_row_const(&prior.const_row())
        .sum_rows()
}

/// Mean of the equivalent prior selected per dimension: `mu_p + r` where
/// `mu_q - mu_p >= 0` (ties take the + branch), else `mu_p - r`. `[n, d]`.
pub fn select_prior(post: &GaussianPosterior, prior: &LatentPriorConfig) -> Tensor {
    check_dim(post.dim(), prior, "select_prior");
    let r = prior.r();
    post.mu_q
        .zip_row(prior.mu_p(), "select_prior", |mu_q, mu_p| {
            if mu_q - mu_p >= 0.0 {
                mu_p + r
            } else {
                mu_p - r
            }
        })
}

/// Exact Gaussian KL from the posterior to `N(select_prior, sigma_p^2)`,
/// summed over dimensions: `[n]`. Independent evaluation path used as the
/// equality oracle for [`binarized_kl`].
pub fn kl_to_selected_prior(post: &GaussianPosterior, prior: &LatentPriorConfig) -> Tensor {
    check_dim(post.dim(), prior, "kl_to_selected_prior");
    let selected = select_prior(post, prior);
    let n = post.n();
    let d = post.dim();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..d {
            let mu_q = post.mu_q.at(i, j);
            let sigma_q = (0.5 * post.log_var_q.at(i, j)).exp();
            let m = selected.at(i, j);
            let sigma_p = prior.sigma_p().data()[j];
            s += (sigma_p / sigma_q).ln()
                + (sigma_q * sigma_q + (mu_q - m) * (mu_q - m)) / (2.0 * sigma_p * sigma_p)
                - 0.5;
        }
        out.push(s);
    }
    Tensor::from_vec(&[n], out)
}

/// Per-dimension fraction of posteriors on the + side of the prior center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pos_fraction: Tensor,
    samples_seen: usize,
}

impl LatentStats {
    pub fn new(pos_fraction: Tensor, samples_seen: usize) -> Result<LatentStats, LatentError> {
        for (i, &p) in pos_fraction.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(LatentError::BadFraction { index: i, value: p });
            }
        }
        Ok(LatentStats {
            pos_fraction,
            samples_seen,
        })
    }

    pub fn pos_fraction(&self) -> &Tensor {
        &self.pos_fraction
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }
}

/// Streams posterior batches and tallies, per dimension, the fraction with
/// `mu_q > mu_p` (strictly; a posterior exactly on the center counts to the
/// - side). Panics on an empty stream: the fractions would be undefined.
pub fn collect_latent_stats<I>(posteriors: I, prior: &LatentPriorConfig) -> LatentStats
where
    I: IntoIterator<Item = GaussianPosterior>,
{
    let d = prior.dim();
    let mut counts = vec![0usize; d];
    let mut total = 0usize;
    for post in posteriors {
        check_dim(post.dim(), prior, "collect_latent_stats");
        let mu_p = prior.mu_p().data();
        for i in 0..post.n() {
            let row = post.mu_q.row(i);
            for j in 0..d {
                if row[j] > mu_p[j] {
                    counts[j] += 1;
                }
            }
        }
        total += post.n();
    }
    assert!(total > 0, "collect_latent_stats: empty posterior stream");
    let frac: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    LatentStats {
        pos_fraction: Tensor::from_vec(&[d], frac),
        samples_seen: total,
    }
}

// One coordinate draw shared by both samplers: mode coin first, then the
// Gaussian, so the stream layout is (coin, normal) per (sample, dimension)
// in row-major order.
fn sample_mixture(prior: &LatentPriorConfig, n: usize, rng: &mut Rng, p_plus: &[f64]) -> Tensor {
    let d = prior.dim();
    let mu_p = prior.mu_p().data();
    let sigma_p = prior.sigma_p().data();
    let r = prior.r();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for j in 0..d {
            let mode = if rng.coin(p_plus[j]) { r } else { -r };
            data.push(mu_p[j] + mode + sigma_p[j] * rng.normal());
        }
    }
    let out = Tensor::from_vec(&[n, d], data);
    out.assert_finite("sample_mixture");
    out
}

/// `n` draws from the fair two-mode mixture
/// `1/2 N(mu_p + r, sigma_p^2) + 1/2 N(mu_p - r, sigma_p^2)` per coordinate.
/// Moments: mean `mu_p`, variance `sigma_p^2 + r^2`.
pub fn sample_reduced_bias(prior: &LatentPriorConfig, n: usize, rng: &mut Rng) -> Tensor {
    let p = vec![0.5; prior.dim()];
    sample_mixture(prior, n, rng, &p)
}

/// `n` draws with the + mode of coordinate j weighted by
/// `stats.pos_fraction[j]`. Mean: `mu_p + (2 pf - 1) r` per coordinate.
pub fn sample_biased(
    prior: &LatentPriorConfig,
    stats: &LatentStats,
    n: usize,
    rng: &mut Rng,
) -> Tensor {
    assert_eq!(
        stats.pos_fraction.shape()[0],
        prior.dim(),
        "sample_biased: stats for {} dimensions, prior has {}",
        stats.pos_fraction.shape()[0],
        prior.dim()
    );
    sample_mixture(prior, n, rng, stats.pos_fraction.data())
}
