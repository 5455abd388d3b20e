//! Oracle estimators, Bayesian bounds and the error analysis of the tree
//! decoder and the path tests.

use num_complex::Complex64;

use crate::numerics::{chi2_inv, chi2_isf};
use crate::{CMatrix, Error, Result};

#[derive(Debug, Clone)]
pub struct OracleMmse {
    /// Full-size estimate with zero rows off the support.
    pub x: CMatrix,
    /// `M Tr(J^{-1})`.
    pub mse: f64,
    pub j_inv: CMatrix,
}

/// Bayesian information matrix `G_O^H G_O / s2 + diag(1/var_x)` and its
/// inverse.
fn fisher_inverse(g_o: &CMatrix, var_x: &[f64], noise_var: f64) -> Result<CMatrix> {
    if g_o.ncols() != var_x.len() {
        return Err(Error::Length {
            what: "prior variances",
            expected: g_o.ncols(),
            got: var_x.len(),
        });
    }
    if noise_var <= 0.0 && var_x.iter().any(|v| v.is_infinite()) {
        return Err(Error::IllConditioned("zero noise with vague prior".into()));
    }
    let mut j = g_o.adjoint() * g_o * Complex64::new(1.0 / noise_var, 0.0);
    for (i, &v) in var_x.iter().enumerate() {
        if v <= 0.0 {
            return Err(Error::IllConditioned(format!("prior variance {v} on support column {i}")));
        }
        j[(i, i)] += 1.0 / v;
    }
    // Hermitian positive definite: Cholesky, which also detects singularity
    let chol = nalgebra::linalg::Cholesky::new(j)
        .ok_or_else(|| Error::IllConditioned("Fisher information not positive definite".into()))?;
    Ok(chol.inverse())
}

/// Linear MMSE estimate on a known support with white noise of variance
/// `noise_var` and independent priors `var_x` on the support rows.
pub fn oracle_mmse(
    g: &CMatrix,
    y: &CMatrix,
    support: &[usize],
    var_x: &[f64],
    noise_var: f64,
) -> Result<OracleMmse> {
    let g_o = g.select_columns(support);
    let j_inv = fisher_inverse(&g_o, var_x, noise_var)?;
    let xo = &j_inv * g_o.adjoint() * y * Complex64::new(1.0 / noise_var, 0.0);
    let mut x = CMatrix::zeros(g.ncols(), y.ncols());
    for (r, &idx) in support.iter().enumerate() {
        x.set_row(idx, &xo.row(r));
    }
    let tr: f64 = (0..j_inv.nrows()).map(|i| j_inv[(i, i)].re).sum();
    Ok(OracleMmse {
        x,
        mse: y.ncols() as f64 * tr,
        j_inv,
    })
}

/// Bayesian Cramer-Rao bound `M Tr(J^{-1})`.
pub fn bcrb(g_o: &CMatrix, var_x: &[f64], noise_var: f64, m: usize) -> Result<f64> {
    let j_inv = fisher_inverse(g_o, var_x, noise_var)?;
    Ok(m as f64 * (0..j_inv.nrows()).map(|i| j_inv[(i, i)].re).sum::<f64>())
}

/// Plain LMMSE over every column of `G` with a common prior variance: the
/// estimator that ignores sparsity.
pub fn lmmse_dense(g: &CMatrix, y: &CMatrix, prior_var: f64, noise_var: f64) -> Result<CMatrix> {
    // X = v G^H (v G G^H + s2 I)^{-1} Y, an S x S solve
    let s = g.nrows();
    let mut c = g * g.adjoint() * Complex64::new(prior_var, 0.0);
    for i in 0..s {
        c[(i, i)] += noise_var;
    }
    let chol = nalgebra::linalg::Cholesky::new(c)
        .ok_or_else(|| Error::IllConditioned("observation covariance not positive definite".into()))?;
    Ok(g.adjoint() * chol.solve(y) * Complex64::new(prior_var, 0.0))
}

/// Expected erroneous paths per root at stage `j` (1-based) of the tree
/// decoder with `k` nodes per stage.
pub fn expected_erroneous_paths(k: usize, parity_alloc: &[usize], j: usize) -> f64 {
    let kf = k as f64;
    (2..=j)
        .map(|q| {
            let bits: usize = parity_alloc[q - 1..j].iter().sum();
            kf.powi((j - q) as i32) * (kf - 1.0) * 2f64.powi(-(bits as i32))
        })
        .sum()
}

/// Expected number of parity-checked nodes per root.
pub fn tree_complexity(k: usize, parity_alloc: &[usize]) -> f64 {
    let tp = parity_alloc.len();
    let kf = k as f64;
    (tp as f64 - 1.0) * kf
        + (2..tp)
            .map(|j| expected_erroneous_paths(k, parity_alloc, j) * kf)
            .sum::<f64>()
}

/// Markov bounds on the MD and FA probabilities of the path tests.
pub fn md_fa_bounds(k_a: usize, t_p: usize, delta: f64, delta_prime: f64, e_l_tp: f64) -> (f64, f64) {
    let pairs = (t_p * (t_p - 1) / 2) as i32;
    (delta.powi(pairs) * k_a as f64, delta_prime.powi(pairs) * e_l_tp)
}

/// Right-hand side of the valid-path condition,
/// `Q(delta/2) / Q(1 - delta/2)` with `Q` the chi-square quantile.
pub fn valid_ratio_bound(dof: usize, delta: f64) -> Result<f64> {
    Ok(chi2_inv(dof, delta / 2.0)? / chi2_isf(dof, delta / 2.0)?)
}

/// Right-hand side of the invalid-path condition,
/// `Q(delta'/2) / Q(1 - delta'/4)`.
pub fn invalid_ratio_bound(dof: usize, delta_prime: f64) -> Result<f64> {
    Ok(chi2_inv(dof, delta_prime / 2.0)? / chi2_isf(dof, delta_prime / 4.0)?)
}

/// Smallest probability `p` in `(lo, 1)` with `bound(p) > ratio`, by
/// bisection on `ln p`. `bound` must be increasing.
fn smallest_level(ratio: f64, mut bound: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    if ratio >= 1.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (-700.0_f64, -1e-12_f64);
    if bound(lo.exp())? > ratio {
        return Ok(lo.exp());
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bound(mid.exp())? > ratio {
            hi = mid;
        } else {
            lo = mid;
        }
        if (hi.exp() - lo.exp()) <= 1e-6 * hi.exp() {
            break;
        }
    }
    Ok(hi.exp())
}

/// Smallest `delta` for which a valid path with variance ratio
/// `sigma^2 / max(sigma_i^2, sigma_j^2) = ratio` is covered.
pub fn validity_delta(ratio: f64, s: usize, m: usize) -> Result<f64> {
    smallest_level(ratio, |d| valid_ratio_bound(2 * s * m, d))
}

/// Smallest `delta'` for invalid paths with
/// `max(sigma_i^2, sigma_j^2) / sigma^2 = ratio`.
pub fn invalid_pair_delta(ratio: f64, s: usize, m: usize) -> Result<f64> {
    smallest_level(ratio, |d| invalid_ratio_bound(2 * s * m, d))
}

/// One-sided NP threshold `sigma_e^2 Q(1 - zeta)` on `2 rows M` degrees of
/// freedom.
pub fn np_threshold(sigma_e2: f64, zeta: f64, rows: usize, m: usize) -> Result<f64> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::DegenerateLevel(zeta));
    }
    Ok(sigma_e2 * chi2_isf(2 * rows * m, zeta)?)
}
