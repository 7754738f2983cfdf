//! Closed-form Gaussian machinery: SPD matrix square roots, the
//! Bures–Wasserstein distance, the fixed-point barycenter iteration, and
//! exact Monge maps between Gaussians.
//!
//! These are the ground-truth oracles the solver is judged against. All
//! matrix functions go through a symmetric eigendecomposition with
//! eigenvalues clamped at `1e-12`; dimensions stay small enough that the
//! cubic cost is irrelevant.
//!
//! Convention note: [`bures_wasserstein_sq`] returns the standard squared
//! distance `||m1 - m2||^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})`.
//! Costs built on `0.5 * ||x - y||^2` correspond to half of it; use
//! [`half_convention`] when comparing against such values.

use nalgebra::{DMatrix, DVector};

use crate::diffmath::Tensor;
use crate::distributions::GaussianDist;
use crate::{Error, Result};

/// An affine map `x -> A x + b`. Gaussian Monge maps have symmetric
/// positive-definite `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        AffineMap { matrix: DMatrix::identity(dim, dim), offset: DVector::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for r in 0..d {
            let mut acc = self.offset[r];
            for c in 0..d {
                acc += self.matrix[(r, c)] * x[c];
            }
            out[r] = acc;
        }
        out
    }

    /// The map as row-vector weights `x @ W + b`, `W = A^T`; the same layout
    /// a single linear network layer uses, so wrapped models agree bitwise.
    pub fn as_row_weights(&self) -> (Tensor, Tensor) {
        let d = self.dim();
        let mut w = Tensor::zeros(&[d, d]);
        for r in 0..d {
            for c in 0..d {
                w.data_mut()[r * d + c] = self.matrix[(c, r)];
            }
        }
        let b = Tensor::from_vec(self.offset.iter().copied().collect());
        (w, b)
    }

    /// Applies the map to every row of an `n x d` matrix.
    pub fn apply_rows(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        if x.cols() != d {
            return Err(Error::ShapeMismatch {
                context: "AffineMap::apply_rows",
                detail: format!("input {:?} vs map dim {d}", x.shape()),
            });
        }
        let (w, b) = self.as_row_weights();
        x.matmul(&w)?.add_row(&b)
    }

    /// Exact pushforward of a Gaussian under this map.
    pub fn push_gaussian(&self, p: &GaussianDist) -> Result<GaussianDist> {
        let mean = &self.matrix * p.mean() + &self.offset;
        let cov = &self.matrix * p.cov() * self.matrix.transpose();
        GaussianDist::new(mean.iter().copied().collect(), symmetrize(&cov))
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

fn check_symmetry(a: &DMatrix<f64>, tol: f64) -> Result<()> {
    let mut asym: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if asym > tol {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

fn eig_fn(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    check_symmetry(a, 1e-8)?;
    let eig = symmetrize(a).symmetric_eigen();
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |x, &y| x.min(y));
    if min < -1e-10 {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
    }
    let d = a.nrows();
    let mut lam = DMatrix::zeros(d, d);
    for i in 0..d {
        lam[(i, i)] = f(eig.eigenvalues[i].max(1e-12));
    }
    let out = &eig.eigenvectors * lam * eig.eigenvectors.transpose();
    Ok(symmetrize(&out))
}

/// Symmetric square root of an SPD matrix: `R` with `R R = A`.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    eig_fn(a, f64::sqrt)
}

/// Inverse symmetric square root of an SPD matrix.
pub fn inv_sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    eig_fn(a, |x| 1.0 / x.sqrt())
}

/// Squared Bures–Wasserstein distance between Gaussians (standard
/// convention, no `1/2` on the ground cost).
pub fn bures_wasserstein_sq(g1: &GaussianDist, g2: &GaussianDist) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::ShapeMismatch {
            context: "bures_wasserstein_sq",
            detail: format!("{} vs {}", g1.dim(), g2.dim()),
        });
    }
    let s1_half = sqrtm_psd(g1.cov())?;
    let inner = sqrtm_psd(&symmetrize(&(&s1_half * g2.cov() * &s1_half)))?;
    let mean_sq = (g1.mean() - g2.mean()).norm_squared();
    let cov_part = g1.cov().trace() + g2.cov().trace() - 2.0 * inner.trace();
    Ok(mean_sq + cov_part.max(0.0))
}

/// Converts a standard-convention squared distance to the `0.5 * ||x - y||^2`
/// cost convention.
pub fn half_convention(standard_sq: f64) -> f64 {
    0.5 * standard_sq
}

fn validate_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::contract(format!(
            "{} weights for {n} distributions",
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::contract("weights must be positive"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::contract(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// Gaussian barycenter via the covariance fixed-point iteration.
///
/// The mean is the weighted mean of the input means. The covariance is the
/// fixed point of `S -> S^{-1/2} (sum_k w_k (S^{1/2} S_k S^{1/2})^{1/2})^2
/// S^{-1/2}`, iterated from `sum_k w_k S_k` until the Frobenius change drops
/// to `tol`.
pub fn fixed_point_barycenter(
    dists: &[GaussianDist],
    weights: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<GaussianDist> {
    if dists.is_empty() {
        return Err(Error::contract("need at least one distribution"));
    }
    validate_weights(weights, dists.len())?;
    let d = dists[0].dim();
    if dists.iter().any(|g| g.dim() != d) {
        return Err(Error::contract("dimension mismatch across distributions"));
    }

    let mut mean = DVector::zeros(d);
    for (g, &w) in dists.iter().zip(weights) {
        mean += w * g.mean();
    }

    let mut cov = DMatrix::zeros(d, d);
    for (g, &w) in dists.iter().zip(weights) {
        cov += w * g.cov();
    }

    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let half = sqrtm_psd(&cov)?;
        let inv_half = inv_sqrtm_psd(&cov)?;
        let mut mid = DMatrix::zeros(d, d);
        for (g, &w) in dists.iter().zip(weights) {
            mid += w * sqrtm_psd(&symmetrize(&(&half * g.cov() * &half)))?;
        }
        let next = symmetrize(&(&inv_half * (&mid * &mid) * &inv_half));
        residual = (&next - &cov).norm();
        cov = next;
        if residual <= tol {
            return GaussianDist::new(mean.iter().copied().collect(), cov);
        }
    }
    Err(Error::FixedPointDiverged { max_iter, residual })
}

/// The optimal-transport map between Gaussians under squared-Euclidean cost:
/// `T(x) = A x + b` with `A = Sp^{-1/2} (Sp^{1/2} Sq Sp^{1/2})^{1/2}
/// Sp^{-1/2}` and `b = m_q - A m_p`. Pushes `p` exactly onto `q`.
pub fn gaussian_monge_map(p: &GaussianDist, q: &GaussianDist) -> Result<AffineMap> {
    if p.dim() != q.dim() {
        return Err(Error::ShapeMismatch {
            context: "gaussian_monge_map",
            detail: format!("{} vs {}", p.dim(), q.dim()),
        });
    }
    let half = sqrtm_psd(p.cov())?;
    let inv_half = inv_sqrtm_psd(p.cov())?;
    let inner = sqrtm_psd(&symmetrize(&(&half * q.cov() * &half)))?;
    let a = symmetrize(&(&inv_half * inner * &inv_half));
    let b = q.mean() - &a * p.mean();
    Ok(AffineMap { matrix: a, offset: b })
}

/// Analytic transport cost `E[0.5 * ||x - T(x)||^2]` of an affine map over a
/// Gaussian, from first and second moments.
pub fn affine_transport_cost_half(map: &AffineMap, p: &GaussianDist) -> f64 {
    let d = p.dim();
    let i_minus_a = DMatrix::identity(d, d) - &map.matrix;
    let mean_shift = &i_minus_a * p.mean() - &map.offset;
    let cov_term = (&i_minus_a * p.cov() * i_minus_a.transpose()).trace();
    0.5 * (mean_shift.norm_squared() + cov_term)
}
