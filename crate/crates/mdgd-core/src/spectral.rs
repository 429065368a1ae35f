//! Singular-value spectra and effective rank of representation matrices.
//!
//! Effective rank is the exponential of the Shannon entropy of the
//! normalized singular-value distribution: with `p_i = σ_i / Σ_j σ_j`,
//! `erank(Z) = exp(−Σ_i p_i ln p_i)`. It is 1 for any rank-1 matrix and
//! `n` for an `n×n` identity; higher values mean the representation spans
//! a larger subspace.
//!
//! Singular values are obtained from the smaller Gram matrix (`ZᵀZ` or
//! `ZZᵀ`) via cyclic Jacobi rotations. Only the values are needed, never
//! the vectors, so the Gram route keeps the solver small; its squared
//! conditioning is acceptable at desk scale (d ≤ 64).

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, Tensor};

const MAX_SWEEPS: usize = 100;
/// Convergence threshold factor: sweep until max |off-diagonal| ≤ this
/// times the Gram matrix's Frobenius norm.
const TOL_FACTOR: f64 = 1e-12;

/// Descending singular values of a matrix, with its source shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    sigma: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Spectrum {
    /// Singular values, sorted descending, all ≥ 0. Length `min(rows, cols)`.
    pub fn values(&self) -> &[f64] {
        &self.sigma
    }

    pub fn source_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Σσ_i²; equals the source's squared Frobenius norm up to rounding.
    pub fn energy(&self) -> f64 {
        self.sigma.iter().map(|s| s * s).sum()
    }
}

/// Singular values of a 2-D tensor via symmetric eigendecomposition of its
/// smaller Gram matrix.
pub fn singular_values(z: &Tensor) -> Result<Spectrum> {
    let (n, d) = z.dims2()?;
    if n == 0 || d == 0 {
        return Err(Error::Dim("singular_values: empty matrix".into()));
    }
    let gram = if d <= n {
        matmul_at_b(z, z)? // d×d
    } else {
        matmul_a_bt(z, z)? // n×n
    };
    let k = d.min(n);
    let mut g = gram.data().to_vec();
    let eig = jacobi_eigenvalues(&mut g, k)?;
    let mut sigma: Vec<f64> = eig.into_iter().map(|l| l.max(0.0).sqrt()).collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(Spectrum { sigma, rows: n, cols: d })
}

/// Effective rank per the entropy of the singular-value distribution.
///
/// Zero singular values stay in the distribution under the `0·ln 0 = 0`
/// convention, which keeps the result continuous as σ → 0. Natural log, so
/// `effective_rank(identity(n)) == n`.
pub fn effective_rank(z: &Tensor) -> Result<f64> {
    let spectrum = singular_values(z)?;
    effective_rank_of(&spectrum)
}

/// Effective rank of an already-computed spectrum.
pub fn effective_rank_of(spectrum: &Spectrum) -> Result<f64> {
    let total: f64 = spectrum.sigma.iter().sum();
    if total == 0.0 {
        return Err(Error::Domain(
            "effective_rank: all-zero matrix has no singular-value distribution".into(),
        ));
    }
    let mut entropy = 0.0;
    for &s in &spectrum.sigma {
        let p = s / total;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}

/// Eigenvalues of a symmetric `n×n` matrix (row-major in `g`, destroyed in
/// place) by cyclic Jacobi rotations.
fn jacobi_eigenvalues(g: &mut [f64], n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(g.len(), n * n);
    if n == 1 {
        return Ok(vec![g[0]]);
    }
    let fro: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = TOL_FACTOR * fro;

    for _ in 0..MAX_SWEEPS {
        if max_off_diagonal(g, n) <= tol {
            return Ok((0..n).map(|i| g[i * n + i]).collect());
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = g[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (g[q * n + q] - g[p * n + p]) / (2.0 * apq);
                // tan of the rotation angle; hypot avoids overflow in θ²
                let t = 1.0_f64.copysign(theta) / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                rotate(g, n, p, q, c, s, t);
            }
        }
    }
    let residual = max_off_diagonal(g, n);
    if residual <= tol {
        Ok((0..n).map(|i| g[i * n + i]).collect())
    } else {
        Err(Error::Numeric(format!(
            "jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps; \
             max off-diagonal residual {residual:e} > tolerance {tol:e}"
        )))
    }
}

fn max_off_diagonal(g: &[f64], n: usize) -> f64 {
    let mut max = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let v = g[i * n + j].abs();
            if v > max {
                max = v;
            }
        }
    }
    max
}

/// Applies the symmetric Jacobi rotation J(p,q;θ)ᵀ·G·J(p,q;θ) in place.
fn rotate(g: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64, t: f64) {
    let apq = g[p * n + q];
    let app = g[p * n + p];
    let aqq = g[q * n + q];
    g[p * n + p] = app - t * apq;
    g[q * n + q] = aqq + t * apq;
    g[p * n + q] = 0.0;
    g[q * n + p] = 0.0;
    for i in 0..n {
        if i == p || i == q {
            continue;
        }
        let aip = g[i * n + p];
        let aiq = g[i * n + q];
        let new_ip = c * aip - s * aiq;
        let new_iq = s * aip + c * aiq;
        g[i * n + p] = new_ip;
        g[p * n + i] = new_ip;
        g[i * n + q] = new_iq;
        g[q * n + i] = new_iq;
    }
}
