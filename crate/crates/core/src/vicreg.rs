//! Variance-invariance-covariance objective on paired latent batches.
//!
//! For latents `Za`, `Zb` of shape `N x d` (row-major):
//!
//! ```text
//! inv(Za, Zb) = 1/N * sum_i |za_i - zb_i|^2
//! v(Z)        = 1/d * sum_j max(0, gamma - sqrt(Var(z_j) + eps))
//! c(Z)        = 1/d * sum_{j != k} Cov(Z)_{jk}^2
//! loss        = lambda * inv + mu * (v(Za) + v(Zb)) + nu * (c(Za) + c(Zb))
//! ```
//!
//! Variances and covariances use the unbiased `N - 1` normaliser, so the
//! batch must hold at least two rows. The gradient with respect to both
//! latent batches is computed in closed form.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VicregSpec {
    /// Invariance weight (lambda).
    pub inv_weight: f64,
    /// Variance weight (mu).
    pub var_weight: f64,
    /// Covariance weight (nu).
    pub cov_weight: f64,
    /// Target standard deviation (gamma).
    pub gamma: f64,
    pub epsilon: f64,
    pub projector_hidden: usize,
    pub projector_dim: usize,
}

impl Default for VicregSpec {
    fn default() -> Self {
        Self {
            inv_weight: 25.0,
            var_weight: 25.0,
            cov_weight: 1.0,
            gamma: 1.0,
            epsilon: 1e-4,
            projector_hidden: 512,
            projector_dim: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VicregError {
    #[error("variance and covariance need a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("latent batches must both have shape {batch}x{dim}")]
    ShapeMismatch { batch: usize, dim: usize },
    #[error("loss weights, gamma and epsilon must be positive")]
    InvalidSpec,
}

/// Unweighted terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VicregTerms {
    pub invariance: f64,
    /// `v(Za) + v(Zb)`
    pub variance: f64,
    /// `c(Za) + c(Zb)`
    pub covariance: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VicregOutput {
    pub terms: VicregTerms,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

impl VicregSpec {
    pub fn validate(&self) -> Result<(), VicregError> {
        let ok = [
            self.inv_weight,
            self.var_weight,
            self.cov_weight,
            self.gamma,
            self.epsilon,
        ]
        .iter()
        .all(|&w| w > 0.0);
        if ok {
            Ok(())
        } else {
            Err(VicregError::InvalidSpec)
        }
    }
}

/// Per-branch statistics: centred rows, per-dimension std, covariance.
struct Branch {
    centered: Vec<f64>,
    std: Vec<f64>,
    cov: Vec<f64>,
}

fn branch_stats(z: &[f64], n: usize, d: usize, eps: f64) -> Branch {
    let mut mean = alloc::vec![0.0; d];
    for row in z.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = Vec::with_capacity(n * d);
    for row in z.chunks_exact(d) {
        centered.extend(row.iter().zip(&mean).map(|(v, m)| v - m));
    }
    let denom = (n - 1) as f64;
    let mut cov = alloc::vec![0.0; d * d];
    for row in centered.chunks_exact(d) {
        for (j, &xj) in row.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let out = &mut cov[j * d..(j + 1) * d];
            for (o, &xk) in out.iter_mut().zip(row) {
                *o += xj * xk;
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= denom);
    let std = (0..d).map(|j| libm::sqrt(cov[j * d + j] + eps)).collect();
    Branch { centered, std, cov }
}

fn variance_term(b: &Branch, gamma: f64) -> f64 {
    b.std.iter().map(|&s| (gamma - s).max(0.0)).sum::<f64>() / b.std.len() as f64
}

fn covariance_term(b: &Branch, d: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..d {
        for k in 0..d {
            if j != k {
                let c = b.cov[j * d + k];
                s += c * c;
            }
        }
    }
    s / d as f64
}

/// Adds `mu * dv/dZ + nu * dc/dZ` for one branch into `grad`.
fn branch_grad(b: &Branch, n: usize, d: usize, spec: &VicregSpec, grad: &mut [f64]) {
    let denom = (n - 1) as f64;
    let var_coef: Vec<f64> = b
        .std
        .iter()
        .map(|&s| {
            if spec.gamma - s > 0.0 {
                -spec.var_weight / (d as f64 * denom * s)
            } else {
                0.0
            }
        })
        .collect();
    let cov_scale = spec.cov_weight * 4.0 / (d as f64 * denom);
    for (i, row) in b.centered.chunks_exact(d).enumerate() {
        let g = &mut grad[i * d..(i + 1) * d];
        for k in 0..d {
            let c_row = &b.cov[k * d..(k + 1) * d];
            let mut acc = 0.0;
            for (l, (&c, &x)) in c_row.iter().zip(row).enumerate() {
                if l != k {
                    acc += c * x;
                }
            }
            g[k] += var_coef[k] * row[k] + cov_scale * acc;
        }
    }
}

fn check(z_a: &[f64], z_b: &[f64], n: usize, d: usize, spec: &VicregSpec) -> Result<(), VicregError> {
    spec.validate()?;
    if z_a.len() != n * d || z_b.len() != n * d || d == 0 {
        return Err(VicregError::ShapeMismatch { batch: n, dim: d });
    }
    if n < 2 {
        return Err(VicregError::BatchTooSmall(n));
    }
    Ok(())
}

fn terms_of(z_a: &[f64], z_b: &[f64], n: usize, d: usize, a: &Branch, b: &Branch, spec: &VicregSpec) -> VicregTerms {
    let invariance = z_a
        .iter()
        .zip(z_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64;
    let variance = variance_term(a, spec.gamma) + variance_term(b, spec.gamma);
    let covariance = covariance_term(a, d) + covariance_term(b, d);
    VicregTerms {
        invariance,
        variance,
        covariance,
        total: spec.inv_weight * invariance
            + spec.var_weight * variance
            + spec.cov_weight * covariance,
    }
}

/// Loss terms for latent batches of shape `batch x dim`.
pub fn vicreg_loss(
    z_a: &[f64],
    z_b: &[f64],
    batch: usize,
    dim: usize,
    spec: &VicregSpec,
) -> Result<VicregTerms, VicregError> {
    check(z_a, z_b, batch, dim, spec)?;
    let a = branch_stats(z_a, batch, dim, spec.epsilon);
    let b = branch_stats(z_b, batch, dim, spec.epsilon);
    Ok(terms_of(z_a, z_b, batch, dim, &a, &b, spec))
}

/// Loss terms plus the gradient of the weighted total with respect to both
/// batches.
pub fn vicreg_loss_and_grad(
    z_a: &[f64],
    z_b: &[f64],
    batch: usize,
    dim: usize,
    spec: &VicregSpec,
) -> Result<VicregOutput, VicregError> {
    check(z_a, z_b, batch, dim, spec)?;
    let a = branch_stats(z_a, batch, dim, spec.epsilon);
    let b = branch_stats(z_b, batch, dim, spec.epsilon);
    let terms = terms_of(z_a, z_b, batch, dim, &a, &b, spec);

    let inv_scale = spec.inv_weight * 2.0 / batch as f64;
    let mut grad_a: Vec<f64> = z_a.iter().zip(z_b).map(|(x, y)| inv_scale * (x - y)).collect();
    let mut grad_b: Vec<f64> = grad_a.iter().map(|g| -g).collect();
    branch_grad(&a, batch, dim, spec, &mut grad_a);
    branch_grad(&b, batch, dim, spec, &mut grad_b);
    Ok(VicregOutput {
        terms,
        grad_a,
        grad_b,
    })
}
