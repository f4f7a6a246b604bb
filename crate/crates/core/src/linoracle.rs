//! Exact funnel levels for linear closed loops `ẋ = A x` by propagating the
//! goal ellipsoid through the state transition matrix.
//!
//! Sets are expressed relative to the equilibrium shared by the shape and the
//! goal, so only deviations enter.

use crate::error::{Error, Result};
use crate::numkernel::{chol_lower, ensure_symmetric, gen_eig_max, log_det_spd, mat_exp, solve_spd_matrix, symmetrize, Matrix, Vector};

/// `{x : (x − c)ᵀ Q⁻¹ (x − c) ≤ 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidSet {
    pub center: Vector,
    pub matrix: Matrix,
}

impl EllipsoidSet {
    pub fn new(center: Vector, matrix: Matrix) -> Result<Self> {
        if center.len() != matrix.nrows() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                actual: center.len(),
            });
        }
        ensure_symmetric(&matrix)?;
        chol_lower(&matrix)?;
        Ok(Self { center, matrix })
    }

    /// The sublevel set `{(x − c)ᵀ S (x − c) ≤ ρ}`, i.e. `Q = ρ S⁻¹`.
    pub fn from_sublevel(s: &Matrix, rho: f64, center: Vector) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::InvalidParameter(format!("level must be positive, got {rho}")));
        }
        let n = s.nrows();
        let q = solve_spd_matrix(s, &Matrix::identity(n, n))? * rho;
        Self::new(center, symmetrize(&q))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, x: &Vector, slack: f64) -> Result<bool> {
        let d = x - &self.center;
        let l = chol_lower(&self.matrix)?;
        let y = crate::numkernel::forward_subst(&l, &d);
        Ok(y.norm_squared() <= 1.0 + slack)
    }
}

/// Image of `E` under `x ↦ e^{At} x`.
pub fn propagate_ellipsoid(a: &Matrix, e: &EllipsoidSet, t: f64) -> Result<EllipsoidSet> {
    if a.nrows() != e.dim() {
        return Err(Error::DimensionMismatch {
            expected: e.dim(),
            actual: a.nrows(),
        });
    }
    let phi = mat_exp(a, t)?;
    let q = symmetrize(&(&phi * &e.matrix * phi.transpose()));
    Ok(EllipsoidSet {
        center: &phi * &e.center,
        matrix: q,
    })
}

fn check_inputs(a: &Matrix, s: &Matrix, e_t: &EllipsoidSet, grid: &[f64]) -> Result<()> {
    let n = s.nrows();
    if a.nrows() != n || e_t.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: a.nrows(),
        });
    }
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("grid must be non-empty and strictly increasing".into()));
    }
    Ok(())
}

/// Largest `ρ` with `{xᵀ S x ≤ ρ}` inside `{xᵀ Φᵀ Q⁻¹ Φ x ≤ 1}`.
fn inscribed_level(phi: &Matrix, q_inv: &Matrix, s: &Matrix) -> Result<f64> {
    let m = symmetrize(&(phi.transpose() * q_inv * phi));
    Ok(1.0 / gen_eig_max(&m, s)?)
}

/// Optimal sampled funnel levels: `ρ_N` is the largest level inside `E_T`,
/// and each `{xᵀ S x ≤ ρᵢ}` is the largest sublevel set flowing into
/// `{xᵀ S x ≤ ρᵢ₊₁}` over `[tᵢ, tᵢ₊₁]`.
///
/// This is the best any knot-to-knot reach check can certify on the grid.
pub fn optimal_rho_sequence(a: &Matrix, s: &Matrix, e_t: &EllipsoidSet, grid: &[f64]) -> Result<Vec<f64>> {
    check_inputs(a, s, e_t, grid)?;
    let n = s.nrows();
    let eye = Matrix::identity(n, n);
    let mut rho = vec![0.0; grid.len()];
    let last = grid.len() - 1;
    rho[last] = inscribed_level(&eye, &solve_spd_matrix(&e_t.matrix, &eye)?, s)?;
    for i in (0..last).rev() {
        let phi = mat_exp(a, grid[i + 1] - grid[i])?;
        rho[i] = rho[i + 1] * inscribed_level(&phi, s, s)?;
    }
    Ok(rho)
}

/// Largest `ρᵢ` with `{xᵀ S x ≤ ρᵢ}` flowing into `E_T` by `T = grid.last()`,
/// ignoring intermediate cross-sections.
///
/// Uses `E(−τ) = {x : xᵀ Φᵀ Q_T⁻¹ Φ x ≤ 1}` with `Φ = e^{Aτ}`, which avoids
/// inverting the (possibly very flat) backward-propagated ellipsoid.
pub fn backward_reach_levels(a: &Matrix, s: &Matrix, e_t: &EllipsoidSet, grid: &[f64]) -> Result<Vec<f64>> {
    check_inputs(a, s, e_t, grid)?;
    let n = s.nrows();
    let t_final = *grid.last().expect("non-empty");
    let q_inv = solve_spd_matrix(&e_t.matrix, &Matrix::identity(n, n))?;
    grid.iter()
        .map(|&t| inscribed_level(&mat_exp(a, t_final - t)?, &q_inv, s))
        .collect()
}

/// Level `ρ` whose set `{xᵀ S x ≤ ρ}` has the volume of a ball of squared
/// radius `r2` in the state dimension `d`: `ρ = r2 · det(S)^{1/d}`.
pub fn volume_matched_level(s: &Matrix, r2: f64) -> Result<f64> {
    if !(r2 > 0.0) {
        return Err(Error::InvalidParameter(format!("squared radius must be positive, got {r2}")));
    }
    let d = s.nrows() as f64;
    Ok(r2 * (log_det_spd(s)? / d).exp())
}
