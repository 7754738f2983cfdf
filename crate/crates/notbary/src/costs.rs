//! Ground costs and the Monte-Carlo weak-cost estimators, differentiable
//! through mapped points.
//!
//! Three weak-cost families are supported, each with a sample estimator
//! suitable for stochastic optimization:
//!
//! * classical: the batch mean of the ground cost;
//! * KL-regularized: batch-mean ground cost plus an analytic KL term from a
//!   conditional Gaussian model to a diagonal Gaussian prior;
//! * energy-regularized: batch-mean ground cost plus an energy-distance
//!   penalty against a prior sampler, estimated without the map-independent
//!   prior self-distance term (so reported values are offset-comparable only
//!   within a run).

use crate::diffmath::{Graph, NodeId, Tensor};
use crate::distributions::{twist_batch, GaussianDist, Sampler};
use crate::{Error, Result};

/// Pointwise ground cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroundCost {
    /// `0.5 * ||x - y||^2`
    SqEuclidean,
    /// `0.5 * ||twist(x) - twist(y)||^2`, the twisted quadratic cost.
    Twisted { kappa: f64 },
}

impl GroundCost {
    /// Plain evaluation.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::ShapeMismatch {
                context: "GroundCost::eval",
                detail: format!("{} vs {}", x.len(), y.len()),
            });
        }
        match self {
            GroundCost::SqEuclidean => {
                Ok(0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            }
            GroundCost::Twisted { kappa } => {
                if x.len() != 2 {
                    return Err(Error::contract("twisted cost is defined on 2-D points"));
                }
                let tx = crate::distributions::twist([x[0], x[1]], *kappa);
                let ty = crate::distributions::twist([y[0], y[1]], *kappa);
                Ok(0.5 * ((tx[0] - ty[0]).powi(2) + (tx[1] - ty[1]).powi(2)))
            }
        }
    }

    /// Graph cost of each mapped row against the matching anchor row:
    /// `[n, d] -> [n]`, differentiable in `y`.
    pub fn cost_rows(&self, g: &mut Graph, y: NodeId, x_anchor: &Tensor) -> Result<NodeId> {
        match self {
            GroundCost::SqEuclidean => g.half_sq_dist_rows(y, x_anchor),
            GroundCost::Twisted { kappa } => {
                if x_anchor.cols() != 2 {
                    return Err(Error::contract("twisted cost is defined on 2-D points"));
                }
                let ty = g.twist(y, *kappa)?;
                let anchor = twist_batch(x_anchor, *kappa);
                g.half_sq_dist_rows(ty, &anchor)
            }
        }
    }
}

/// Scalar ground-cost node `c(x, y)`, differentiable in the `1 x d` node `y`.
pub fn ground_cost(g: &mut Graph, cost: GroundCost, x: &[f64], y: NodeId) -> Result<NodeId> {
    let d = g.value(y).cols();
    if x.len() != d || g.value(y).rows() != 1 {
        return Err(Error::ShapeMismatch {
            context: "ground_cost",
            detail: format!("x dim {} vs y {:?}", x.len(), g.value(y).shape()),
        });
    }
    let anchor = Tensor::matrix(1, d, x.to_vec())?;
    let rows = cost.cost_rows(g, y, &anchor)?;
    Ok(g.sum(rows))
}

/// A semimetric of negative type: `l(a, b) = ||a - b||^alpha`, `alpha` in
/// `[1, 2]`. The default is the Euclidean norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemiMetric {
    alpha: f64,
}

impl Default for SemiMetric {
    fn default() -> Self {
        SemiMetric { alpha: 1.0 }
    }
}

impl SemiMetric {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(1.0..=2.0).contains(&alpha) {
            return Err(Error::contract(format!("semimetric exponent {alpha} not in [1, 2]")));
        }
        Ok(SemiMetric { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let r = r2.sqrt();
        if self.alpha == 1.0 {
            r
        } else {
            r.powf(self.alpha)
        }
    }
}

/// Classical weak-cost estimator for one input: the mean ground cost over
/// the conditional batch, `(1/|S|) sum_s c(x, y_s)`.
pub fn estimate_classical(
    g: &mut Graph,
    cost: GroundCost,
    x: &[f64],
    ys: NodeId,
) -> Result<NodeId> {
    let m = g.value(ys).rows();
    classical_term(g, cost, &Tensor::matrix(1, x.len(), x.to_vec())?, ys, m)
}

/// Batched classical term shared by all estimators: inputs `x` as `[n, d]`,
/// mapped samples grouped `m` per input as `[n * m, d]`.
pub(crate) fn classical_term(
    g: &mut Graph,
    cost: GroundCost,
    x: &Tensor,
    y: NodeId,
    m: usize,
) -> Result<NodeId> {
    if g.value(y).rows() != x.rows() * m {
        return Err(Error::ShapeMismatch {
            context: "classical_term",
            detail: format!("{} mapped rows != {} inputs x {m}", g.value(y).rows(), x.rows()),
        });
    }
    let anchor = x.repeat_rows(m)?;
    let rows = cost.cost_rows(g, y, &anchor)?;
    Ok(g.mean(rows))
}

/// Analytic KL divergence from `N(mu, diag sigma^2)` to a diagonal Gaussian
/// prior: `sum_i [ ln(sqrt(d_i)/sigma_i) + (sigma_i^2 + (mu_i - m0_i)^2) /
/// (2 d_i) - 1/2 ]`.
pub fn kl_gaussian_to_prior(mu: &[f64], sigma: &[f64], prior: &GaussianDist) -> Result<f64> {
    let d = prior
        .diag_vars()
        .ok_or_else(|| Error::contract("KL prior must have diagonal covariance"))?;
    if mu.len() != d.len() || sigma.len() != d.len() {
        return Err(Error::ShapeMismatch {
            context: "kl_gaussian_to_prior",
            detail: format!("mu {}, sigma {}, prior {}", mu.len(), sigma.len(), d.len()),
        });
    }
    if sigma.iter().any(|&s| s <= 0.0) {
        return Err(Error::contract("sigma entries must be positive"));
    }
    let m0 = prior.mean();
    let mut total = 0.0;
    for i in 0..d.len() {
        total += 0.5 * d[i].ln() - sigma[i].ln()
            + (sigma[i] * sigma[i] + (mu[i] - m0[i]).powi(2)) / (2.0 * d[i])
            - 0.5;
    }
    Ok(total)
}

/// KL-regularized estimator for one input under the conditional Gaussian
/// model: mean ground cost of the reparameterized samples `mu + sigma * s`
/// plus `epsilon` times the analytic KL to the prior.
pub fn estimate_kl_cost(
    g: &mut Graph,
    cost: GroundCost,
    x: &[f64],
    mu: NodeId,
    sigma: NodeId,
    noise: &Tensor,
    epsilon: f64,
    prior: &GaussianDist,
) -> Result<NodeId> {
    let x = Tensor::matrix(1, x.len(), x.to_vec())?;
    kl_term(g, cost, &x, mu, sigma, noise, epsilon, prior)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn kl_term(
    g: &mut Graph,
    cost: GroundCost,
    x: &Tensor,
    mu: NodeId,
    sigma: NodeId,
    noise: &Tensor,
    epsilon: f64,
    prior: &GaussianDist,
) -> Result<NodeId> {
    let n = x.rows();
    let dim = g.value(mu).cols();
    if noise.rows() % n != 0 {
        return Err(Error::ShapeMismatch {
            context: "kl_term",
            detail: format!("{} noise rows not a multiple of {n} inputs", noise.rows()),
        });
    }
    let m = noise.rows() / n;
    let d_vars = prior
        .diag_vars()
        .ok_or_else(|| Error::contract("KL prior must have diagonal covariance"))?;
    if dim != d_vars.len() {
        return Err(Error::ShapeMismatch {
            context: "kl_term",
            detail: format!("model dim {dim} vs prior dim {}", d_vars.len()),
        });
    }
    let mu_rep = g.repeat_rows(mu, m)?;
    let sigma_rep = g.repeat_rows(sigma, m)?;
    let scaled = g.mul_const(sigma_rep, noise)?;
    let y = g.add(mu_rep, scaled)?;
    let cost_term = classical_term(g, cost, x, y, m)?;
    let prior_mean: Vec<f64> = prior.mean().iter().copied().collect();
    let kl = g.kl_diag_to_prior(mu, sigma, &prior_mean, &d_vars)?;
    g.weighted_sum(&[(1.0, cost_term), (epsilon, kl)])
}

/// Energy-regularized estimator for one input: mean ground cost over the
/// conditional batch plus the energy penalty against a prior batch. The
/// prior's self-distance term is map-independent and dropped.
#[allow(clippy::too_many_arguments)]
pub fn estimate_energy_cost(
    g: &mut Graph,
    cost: GroundCost,
    x: &[f64],
    ys: NodeId,
    prior_batch: &Tensor,
    gamma: f64,
    ell: SemiMetric,
) -> Result<NodeId> {
    let m = g.value(ys).rows();
    let x = Tensor::matrix(1, x.len(), x.to_vec())?;
    energy_term(g, cost, &x, ys, m, prior_batch, gamma, ell)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn energy_term(
    g: &mut Graph,
    cost: GroundCost,
    x: &Tensor,
    y: NodeId,
    m: usize,
    prior_batch: &Tensor,
    gamma: f64,
    ell: SemiMetric,
) -> Result<NodeId> {
    if m < 2 {
        return Err(Error::contract(
            "energy estimator needs at least 2 conditional samples per input",
        ));
    }
    let n = x.rows();
    if prior_batch.rows() % n != 0 {
        return Err(Error::ShapeMismatch {
            context: "energy_term",
            detail: format!("{} prior rows not a multiple of {n} inputs", prior_batch.rows()),
        });
    }
    let n0 = prior_batch.rows() / n;
    let cost_term = classical_term(g, cost, x, y, m)?;
    let penalty = g.energy_penalty(y, prior_batch, n, m, n0, gamma, ell.alpha())?;
    g.weighted_sum(&[(1.0, cost_term), (1.0, penalty)])
}

/// Unbiased two-sample squared energy distance
/// `2 E l(a, b) - E l(a, a') - E l(b, b')`.
///
/// Within-sample sums exclude `i == j`; the cross sum excludes the aligned
/// diagonal pairs so that two copies of the same sample give exactly zero
/// while remaining unbiased for independent samples.
pub fn energy_distance_sq(a: &Tensor, b: &Tensor, ell: SemiMetric) -> Result<f64> {
    let (n, m) = (a.rows(), b.rows());
    if n < 2 || m < 2 {
        return Err(Error::contract("energy distance needs at least 2 samples per side"));
    }
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            context: "energy_distance_sq",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            if i != j {
                cross += ell.eval(a.row(i), b.row(j));
            }
        }
    }
    let cross_pairs = (n * m - n.min(m)) as f64;
    let within = |t: &Tensor| -> f64 {
        let k = t.rows();
        let mut acc = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                acc += 2.0 * ell.eval(t.row(i), t.row(j));
            }
        }
        acc / (k * (k - 1)) as f64
    };
    Ok(2.0 * cross / cross_pairs - within(a) - within(b))
}

/// Tagged weak-cost family with its estimator contract; the solver's view
/// of one reference's transport cost.
#[derive(Debug, Clone)]
pub enum WeakCostSpec {
    Classical { ground: GroundCost },
    Kl { ground: GroundCost, epsilon: f64, prior: GaussianDist },
    Energy { ground: GroundCost, gamma: f64, ell: SemiMetric, prior: Sampler },
}

impl WeakCostSpec {
    pub fn classical(ground: GroundCost) -> Self {
        WeakCostSpec::Classical { ground }
    }

    pub fn kl(ground: GroundCost, epsilon: f64, prior: GaussianDist) -> Result<Self> {
        if epsilon <= 0.0 {
            return Err(Error::contract("KL cost requires epsilon > 0"));
        }
        if prior.diag_vars().is_none() {
            return Err(Error::contract("KL prior must have diagonal covariance"));
        }
        Ok(WeakCostSpec::Kl { ground, epsilon, prior })
    }

    pub fn energy(ground: GroundCost, gamma: f64, ell: SemiMetric, prior: Sampler) -> Result<Self> {
        if gamma <= 0.0 {
            return Err(Error::contract("energy cost requires gamma > 0"));
        }
        Ok(WeakCostSpec::Energy { ground, gamma, ell, prior })
    }

    pub fn ground(&self) -> GroundCost {
        match self {
            WeakCostSpec::Classical { ground }
            | WeakCostSpec::Kl { ground, .. }
            | WeakCostSpec::Energy { ground, .. } => *ground,
        }
    }

    /// Whether the estimator requires the conditional Gaussian model.
    pub fn needs_gaussian_model(&self) -> bool {
        matches!(self, WeakCostSpec::Kl { .. })
    }

    /// The prior sampler backing an energy cost, if any.
    pub fn prior_sampler_mut(&mut self) -> Option<&mut Sampler> {
        match self {
            WeakCostSpec::Energy { prior, .. } => Some(prior),
            _ => None,
        }
    }

    /// The prior sampler backing an energy cost, if any.
    pub fn prior_sampler(&self) -> Option<&Sampler> {
        match self {
            WeakCostSpec::Energy { prior, .. } => Some(prior),
            _ => None,
        }
    }

    /// A copy whose prior sampler (if any) runs on a fresh stream; see
    /// [`Sampler::fork`].
    pub fn fork(&self, stream: u64) -> Self {
        match self {
            WeakCostSpec::Energy { ground, gamma, ell, prior } => WeakCostSpec::Energy {
                ground: *ground,
                gamma: *gamma,
                ell: *ell,
                prior: prior.fork(stream),
            },
            other => other.clone(),
        }
    }
}
