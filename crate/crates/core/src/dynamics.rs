//! Benchmark control systems, loop closure and Jacobian evaluation.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkernel::{solve_spd, Matrix, Vector};
use crate::tracking::Controller;

pub type OpenLoopFn = Arc<dyn Fn(&Vector, &Vector, f64) -> Vector + Send + Sync>;
pub type OpenLoopJacFn = Arc<dyn Fn(&Vector, &Vector, f64) -> Matrix + Send + Sync>;
pub type FieldFn = Arc<dyn Fn(&Vector, f64) -> Vector + Send + Sync>;
pub type FieldJacFn = Arc<dyn Fn(&Vector, f64) -> Matrix + Send + Sync>;

/// Open-loop system `ẋ = f(x, u, t)`.
#[derive(Clone)]
pub struct ControlSystem {
    state_dim: usize,
    control_dim: usize,
    rhs: OpenLoopFn,
    jac_x: Option<OpenLoopJacFn>,
    jac_u: Option<OpenLoopJacFn>,
}

impl fmt::Debug for ControlSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlSystem")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("analytic_jacobians", &(self.jac_x.is_some() && self.jac_u.is_some()))
            .finish()
    }
}

impl ControlSystem {
    pub fn new(state_dim: usize, control_dim: usize, rhs: OpenLoopFn) -> Self {
        Self {
            state_dim,
            control_dim,
            rhs,
            jac_x: None,
            jac_u: None,
        }
    }

    pub fn with_jacobians(mut self, jac_x: OpenLoopJacFn, jac_u: OpenLoopJacFn) -> Self {
        self.jac_x = Some(jac_x);
        self.jac_u = Some(jac_u);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.jac_x.is_some() && self.jac_u.is_some()
    }

    fn check_dims(&self, x: &Vector, u: &Vector) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim,
                actual: x.len(),
            });
        }
        if u.len() != self.control_dim {
            return Err(Error::DimensionMismatch {
                expected: self.control_dim,
                actual: u.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &Vector, u: &Vector, t: f64) -> Result<Vector> {
        self.check_dims(x, u)?;
        let dx = (self.rhs)(x, u, t);
        if dx.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim,
                actual: dx.len(),
            });
        }
        if !dx.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteEvaluation { t });
        }
        Ok(dx)
    }

    /// `∂f/∂x`, analytic when available, central differences otherwise.
    pub fn jacobian_x(&self, x: &Vector, u: &Vector, t: f64) -> Result<Matrix> {
        self.check_dims(x, u)?;
        if let Some(j) = &self.jac_x {
            return Ok(j(x, u, t));
        }
        central_difference(self.state_dim, x, |xp| self.eval(xp, u, t))
    }

    /// `∂f/∂u`, analytic when available, central differences otherwise.
    pub fn jacobian_u(&self, x: &Vector, u: &Vector, t: f64) -> Result<Matrix> {
        self.check_dims(x, u)?;
        if let Some(j) = &self.jac_u {
            return Ok(j(x, u, t));
        }
        central_difference(self.state_dim, u, |up| self.eval(x, up, t))
    }

    /// Finite-difference `∂f/∂x`, ignoring any analytic Jacobian.
    pub fn jacobian_x_fd(&self, x: &Vector, u: &Vector, t: f64) -> Result<Matrix> {
        central_difference(self.state_dim, x, |xp| self.eval(xp, u, t))
    }

    /// Finite-difference `∂f/∂u`, ignoring any analytic Jacobian.
    pub fn jacobian_u_fd(&self, x: &Vector, u: &Vector, t: f64) -> Result<Matrix> {
        central_difference(self.state_dim, u, |up| self.eval(x, up, t))
    }

    /// Linearization `(A, B)` at `(x, u, t)`.
    pub fn linearize(&self, x: &Vector, u: &Vector, t: f64) -> Result<(Matrix, Matrix)> {
        Ok((self.jacobian_x(x, u, t)?, self.jacobian_u(x, u, t)?))
    }
}

/// Closed-loop vector field `ẋ = F(x, t)`.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    rhs: FieldFn,
    jac: Option<FieldJacFn>,
    /// Times where `F` is only continuous in `t`; integrators restart there.
    breaks: Arc<[f64]>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("dim", &self.dim)
            .field("analytic_jacobian", &self.jac.is_some())
            .field("breakpoints", &self.breaks.len())
            .finish()
    }
}

impl VectorField {
    pub fn new(dim: usize, rhs: FieldFn) -> Self {
        Self {
            dim,
            rhs,
            jac: None,
            breaks: Arc::from([]),
        }
    }

    pub fn with_jacobian(mut self, jac: FieldJacFn) -> Self {
        self.jac = Some(jac);
        self
    }

    pub fn with_breakpoints(mut self, mut times: Vec<f64>) -> Self {
        times.retain(|t| t.is_finite());
        times.sort_by(f64::total_cmp);
        times.dedup();
        self.breaks = times.into();
        self
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }

    /// `ẋ = A x`.
    pub fn linear(a: Matrix) -> Self {
        Self::affine(a, None)
    }

    /// `ẋ = A (x - x_eq)`, or `A x` when no equilibrium is given.
    pub fn affine(a: Matrix, equilibrium: Option<Vector>) -> Self {
        let n = a.nrows();
        let a_rhs = a.clone();
        let rhs: FieldFn = match equilibrium {
            Some(eq) => Arc::new(move |x: &Vector, _t| &a_rhs * (x - &eq)),
            None => Arc::new(move |x: &Vector, _t| &a_rhs * x),
        };
        Self::new(n, rhs).with_jacobian(Arc::new(move |_x, _t| a.clone()))
    }

    pub fn zero(dim: usize) -> Self {
        Self::linear(Matrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jac.is_some()
    }

    pub fn eval(&self, x: &Vector, t: f64) -> Result<Vector> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let dx = (self.rhs)(x, t);
        if dx.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: dx.len(),
            });
        }
        if !dx.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteEvaluation { t });
        }
        Ok(dx)
    }

    pub fn jacobian_fd(&self, x: &Vector, t: f64) -> Result<Matrix> {
        central_difference(self.dim, x, |xp| self.eval(xp, t))
    }
}

/// Central differences with step `1e-6·max(1, |xᵢ|)`.
fn central_difference<F>(rows: usize, at: &Vector, mut f: F) -> Result<Matrix>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    let cols = at.len();
    let mut jac = Matrix::zeros(rows, cols);
    let mut probe = at.clone();
    for j in 0..cols {
        let step = 1e-6 * at[j].abs().max(1.0);
        probe[j] = at[j] + step;
        let fp = f(&probe)?;
        probe[j] = at[j] - step;
        let fm = f(&probe)?;
        probe[j] = at[j];
        jac.set_column(j, &((fp - fm) / (2.0 * step)));
    }
    Ok(jac)
}

/// `∂F/∂x`; analytic when available, else central differences.
pub fn jacobian(field: &VectorField, x: &Vector, t: f64) -> Result<Matrix> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    match &field.jac {
        Some(j) => {
            let m = j(x, t);
            if m.iter().all(|v| v.is_finite()) {
                Ok(m)
            } else {
                Err(Error::NonFiniteEvaluation { t })
            }
        }
        None => field.jacobian_fd(x, t),
    }
}

/// Composes `F(x, t) = f(x, u(x, t), t)`.
pub fn close_loop(sys: &ControlSystem, controller: &Controller) -> Result<VectorField> {
    if controller.control_dim() != sys.control_dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.control_dim(),
            actual: controller.control_dim(),
        });
    }
    let n = sys.state_dim();
    let sys_rhs = sys.clone();
    let ctrl = controller.clone();
    let rhs: FieldFn = Arc::new(move |x: &Vector, t| {
        let u = ctrl.eval(x, t);
        (sys_rhs.rhs)(x, &u, t)
    });
    let mut field = VectorField::new(n, rhs).with_breakpoints(controller.breakpoints().to_vec());
    if let (Some(jx), Some(ju), true) = (&sys.jac_x, &sys.jac_u, controller.has_jacobian()) {
        let jx = jx.clone();
        let ju = ju.clone();
        let ctrl = controller.clone();
        field = field.with_jacobian(Arc::new(move |x: &Vector, t| {
            let u = ctrl.eval(x, t);
            let du = ctrl.jacobian(x, t).expect("controller jacobian present");
            jx(x, &u, t) + ju(x, &u, t) * du
        }));
    }
    Ok(field)
}

/// Physical parameters of the single pendulum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub damping: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 0.5,
            gravity: 9.81,
            damping: 0.1,
        }
    }
}

/// `θ̈ = (g/l) sin θ − b θ̇/(m l²) + u/(m l²)`; `θ = 0` is the upright (unstable) rest.
pub fn make_pendulum(p: PendulumParams) -> Result<ControlSystem> {
    if !(p.mass > 0.0) || !(p.length > 0.0) {
        return Err(Error::InvalidParameter(
            "pendulum mass and length must be positive".into(),
        ));
    }
    let inertia = p.mass * p.length * p.length;
    let gl = p.gravity / p.length;
    let b = p.damping;
    let rhs: OpenLoopFn = Arc::new(move |x: &Vector, u: &Vector, _t| {
        Vector::from_vec(vec![
            x[1],
            gl * x[0].sin() - b * x[1] / inertia + u[0] / inertia,
        ])
    });
    let jac_x: OpenLoopJacFn = Arc::new(move |x: &Vector, _u, _t| {
        Matrix::from_row_slice(2, 2, &[0.0, 1.0, gl * x[0].cos(), -b / inertia])
    });
    let jac_u: OpenLoopJacFn =
        Arc::new(move |_x, _u, _t| Matrix::from_row_slice(2, 1, &[0.0, 1.0 / inertia]));
    Ok(ControlSystem::new(2, 1, rhs).with_jacobians(jac_x, jac_u))
}

/// Quadcopter with state `(x, y, z, ψ, θ, φ)` followed by the six rates and
/// controls `(thrust, τ_ψ, τ_θ, τ_φ)`.
pub fn make_quadcopter(mass: f64, gravity: f64) -> Result<ControlSystem> {
    if !(mass > 0.0) {
        return Err(Error::InvalidParameter("quadcopter mass must be positive".into()));
    }
    let m = mass;
    let g = gravity;
    let rhs: OpenLoopFn = Arc::new(move |s: &Vector, u: &Vector, _t| {
        let (psi, theta, phi) = (s[3], s[4], s[5]);
        let (sps, cps) = psi.sin_cos();
        let (sth, cth) = theta.sin_cos();
        let (sph, cph) = phi.sin_cos();
        let mut d = Vector::zeros(12);
        for i in 0..6 {
            d[i] = s[6 + i];
        }
        d[6] = u[0] * (sph * sps + cph * cps * sth) / m;
        d[7] = u[0] * (cph * sth * sps - cps * sph) / m;
        // altitude channel: m z̈ = u₁ cos θ cos φ − m g
        d[8] = u[0] * cth * cph / m - g;
        d[9] = u[1] / m;
        d[10] = u[2] / m;
        d[11] = u[3] / m;
        d
    });
    let jac_x: OpenLoopJacFn = Arc::new(move |s: &Vector, u: &Vector, _t| {
        let (psi, theta, phi) = (s[3], s[4], s[5]);
        let (sps, cps) = psi.sin_cos();
        let (sth, cth) = theta.sin_cos();
        let (sph, cph) = phi.sin_cos();
        let k = u[0] / m;
        let mut j = Matrix::zeros(12, 12);
        for i in 0..6 {
            j[(i, 6 + i)] = 1.0;
        }
        j[(6, 3)] = k * (sph * cps - cph * sps * sth);
        j[(6, 4)] = k * cph * cps * cth;
        j[(6, 5)] = k * (cph * sps - sph * cps * sth);
        j[(7, 3)] = k * (cph * sth * cps + sps * sph);
        j[(7, 4)] = k * cph * cth * sps;
        j[(7, 5)] = k * (-sph * sth * sps - cps * cph);
        j[(8, 4)] = -k * sth * cph;
        j[(8, 5)] = -k * cth * sph;
        j
    });
    let jac_u: OpenLoopJacFn = Arc::new(move |s: &Vector, _u, _t| {
        let (psi, theta, phi) = (s[3], s[4], s[5]);
        let (sps, cps) = psi.sin_cos();
        let (sth, cth) = theta.sin_cos();
        let (sph, cph) = phi.sin_cos();
        let mut j = Matrix::zeros(12, 4);
        j[(6, 0)] = (sph * sps + cph * cps * sth) / m;
        j[(7, 0)] = (cph * sth * sps - cps * sph) / m;
        j[(8, 0)] = cth * cph / m;
        j[(9, 1)] = 1.0 / m;
        j[(10, 2)] = 1.0 / m;
        j[(11, 3)] = 1.0 / m;
        j
    });
    Ok(ControlSystem::new(12, 4, rhs).with_jacobians(jac_x, jac_u))
}

/// Planar n-link pendulum with unit point masses at the link ends and unit
/// link lengths. Joint angles are relative: `θ₁` is measured from the positive
/// horizontal axis and `θᵢ` (i > 1) from link i − 1, so the upright
/// configuration is `(π/2, 0, …, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NLink {
    pub links: usize,
    pub gravity: f64,
}

fn cumsum(v: &[f64]) -> Vec<f64> {
    v.iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

impl NLink {
    pub fn new(links: usize, gravity: f64) -> Result<Self> {
        if links < 1 {
            return Err(Error::InvalidParameter("n-link pendulum needs at least one link".into()));
        }
        Ok(Self { links, gravity })
    }

    pub fn state_dim(&self) -> usize {
        2 * self.links
    }

    /// Mass carried beyond link `max(j, k)`: `n − max(j, k)` for 0-based indices.
    fn coupling(&self, j: usize, k: usize) -> f64 {
        (self.links - j.max(k)) as f64
    }

    pub fn upright(&self) -> Vector {
        let n = self.links;
        Vector::from_fn(2 * n, |i, _| if i == 0 { FRAC_PI_2 } else { 0.0 })
    }

    /// Mass matrix in absolute link angles `φ = T θ`, `T` lower-triangular ones.
    fn mass_matrix_abs(&self, phi: &[f64]) -> Matrix {
        let n = self.links;
        Matrix::from_fn(n, n, |j, k| self.coupling(j, k) * (phi[j] - phi[k]).cos())
    }

    fn bias_abs(&self, phi: &[f64], rates: &[f64]) -> Vector {
        let n = self.links;
        Vector::from_fn(n, |j, _| {
            let coriolis: f64 = (0..n)
                .map(|k| self.coupling(j, k) * (phi[j] - phi[k]).sin() * rates[k] * rates[k])
                .sum();
            coriolis + self.gravity * (n - j) as f64 * phi[j].cos()
        })
    }

    /// `Tᵀ M T`: entry (i, k) sums the absolute-angle block `j ≥ i, l ≥ k`.
    fn pull_back(&self, m: &Matrix) -> Matrix {
        let n = self.links;
        let mut out = Matrix::zeros(n, n);
        for i in (0..n).rev() {
            for k in (0..n).rev() {
                let mut v = m[(i, k)];
                if i + 1 < n {
                    v += out[(i + 1, k)];
                }
                if k + 1 < n {
                    v += out[(i, k + 1)];
                }
                if i + 1 < n && k + 1 < n {
                    v -= out[(i + 1, k + 1)];
                }
                out[(i, k)] = v;
            }
        }
        out
    }

    /// `Tᵀ v`, the suffix sums of `v`.
    fn suffix_sums(v: &Vector) -> Vector {
        let mut out = v.clone();
        for i in (0..v.len().saturating_sub(1)).rev() {
            out[i] += out[i + 1];
        }
        out
    }

    pub fn mass_matrix(&self, theta: &[f64]) -> Matrix {
        self.pull_back(&self.mass_matrix_abs(&cumsum(theta)))
    }

    /// Velocity-product and gravity terms `h(θ, θ̇)` of `M θ̈ + h = u`.
    pub fn bias(&self, theta: &[f64], rates: &[f64]) -> Vector {
        Self::suffix_sums(&self.bias_abs(&cumsum(theta), &cumsum(rates)))
    }

    /// Total mechanical energy, kinetic plus potential.
    pub fn energy(&self, x: &Vector) -> f64 {
        let n = self.links;
        let (theta, rates) = x.as_slice().split_at(n);
        let m = self.mass_matrix(theta);
        let w = Vector::from_column_slice(rates);
        let kinetic = 0.5 * w.dot(&(&m * &w));
        let potential: f64 = cumsum(theta)
            .iter()
            .enumerate()
            .map(|(j, p)| self.gravity * (n - j) as f64 * p.sin())
            .sum();
        kinetic + potential
    }

    /// Joint accelerations `M⁻¹(u − h)` of the full model.
    pub fn accelerations(&self, x: &Vector, u: &Vector) -> Vector {
        let n = self.links;
        let (theta, rates) = x.as_slice().split_at(n);
        let m = self.mass_matrix(theta);
        let rhs = u - self.bias(theta, rates);
        solve_spd(&m, &rhs).unwrap_or_else(|_| Vector::from_element(n, f64::NAN))
    }

    /// Upright linearization of the simplified model `θ̈ = −M⁻¹h − u`:
    /// `A = [[0, I], [−M̄⁻¹ ∂h/∂θ, 0]]`, `B = [0; −I]`.
    pub fn simplified_linearization(&self) -> (Matrix, Matrix) {
        let n = self.links;
        let upright = self.upright();
        let m_bar = self.mass_matrix(&upright.as_slice()[..n]);
        // only gravity survives at rest: −g (n−j) on the absolute diagonal, then Tᵀ · T
        let dh_abs = Matrix::from_fn(n, n, |j, k| {
            if j == k {
                -self.gravity * (n - j) as f64
            } else {
                0.0
            }
        });
        let dh = self.pull_back(&dh_abs);
        let lower = -crate::numkernel::solve_spd_matrix(&m_bar, &dh).expect("upright mass matrix is SPD");
        let mut a = Matrix::zeros(2 * n, 2 * n);
        let mut b = Matrix::zeros(2 * n, n);
        for i in 0..n {
            a[(i, n + i)] = 1.0;
            b[(n + i, i)] = -1.0;
        }
        a.view_mut((n, 0), (n, n)).copy_from(&lower);
        (a, b)
    }
}

/// Full n-link model `M(θ) θ̈ + h(θ, θ̇) = u`.
pub fn make_nlink(n: usize, gravity: f64) -> Result<ControlSystem> {
    let model = NLink::new(n, gravity)?;
    let rhs: OpenLoopFn = Arc::new(move |x: &Vector, u: &Vector, _t| {
        let acc = model.accelerations(x, u);
        let mut d = Vector::zeros(2 * n);
        for i in 0..n {
            d[i] = x[n + i];
            d[n + i] = acc[i];
        }
        d
    });
    Ok(ControlSystem::new(2 * n, n, rhs))
}

/// Simplified n-link model `θ̈ = −M(θ)⁻¹ h(θ, θ̇) − u`.
pub fn make_nlink_simplified(n: usize, gravity: f64) -> Result<ControlSystem> {
    let model = NLink::new(n, gravity)?;
    let rhs: OpenLoopFn = Arc::new(move |x: &Vector, u: &Vector, _t| {
        let drift = model.accelerations(x, &Vector::zeros(n));
        let mut d = Vector::zeros(2 * n);
        for i in 0..n {
            d[i] = x[n + i];
            d[n + i] = drift[i] - u[i];
        }
        d
    });
    Ok(ControlSystem::new(2 * n, n, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn pendulum_values() {
        let sys = make_pendulum(PendulumParams::default()).unwrap();
        let zero = v(&[0.0]);
        assert_eq!(sys.eval(&v(&[0.0, 0.0]), &zero, 0.0).unwrap(), v(&[0.0, 0.0]));
        let d = sys.eval(&v(&[FRAC_PI_2, 0.0]), &zero, 0.0).unwrap();
        assert_relative_eq!(d, v(&[0.0, 19.62]), epsilon = 1e-12);
        let d = sys.eval(&v(&[0.0, 1.0]), &zero, 0.0).unwrap();
        assert_relative_eq!(d, v(&[1.0, -0.4]), epsilon = 1e-12);
    }

    #[test]
    fn pendulum_rejects_bad_params() {
        let p = PendulumParams {
            mass: 0.0,
            ..Default::default()
        };
        assert!(make_pendulum(p).is_err());
    }

    #[test]
    fn pendulum_linearization_at_origin() {
        let sys = make_pendulum(PendulumParams::default()).unwrap();
        let (a, _) = sys.linearize(&v(&[0.0, 0.0]), &v(&[0.0]), 0.0).unwrap();
        assert_relative_eq!(a, Matrix::from_row_slice(2, 2, &[0.0, 1.0, 19.62, -0.4]), epsilon = 1e-12);
    }

    #[test]
    fn quadcopter_hover_and_free_fall() {
        let sys = make_quadcopter(1.0, 9.81).unwrap();
        let x = Vector::zeros(12);
        let hover = sys.eval(&x, &v(&[9.81, 0.0, 0.0, 0.0]), 0.0).unwrap();
        assert!(hover.norm() <= 1e-12);
        let fall = sys.eval(&x, &Vector::zeros(4), 0.0).unwrap();
        for (i, d) in fall.iter().enumerate() {
            if i == 8 {
                assert_eq!(*d, -9.81);
            } else {
                assert_eq!(*d, 0.0);
            }
        }
        let mut pitched = Vector::zeros(12);
        pitched[4] = FRAC_PI_2;
        let d = sys.eval(&pitched, &v(&[9.81, 0.0, 0.0, 0.0]), 0.0).unwrap();
        assert_relative_eq!(d[6], 9.81, epsilon = 1e-12);
        assert_relative_eq!(d[8], -9.81, epsilon = 1e-12);
    }

    #[test]
    fn quadcopter_rejects_nonpositive_mass() {
        assert!(make_quadcopter(-1.0, 9.81).is_err());
    }

    #[test]
    fn nlink_upright_is_equilibrium() {
        for n in 1..=6 {
            let model = NLink::new(n, 9.81).unwrap();
            let sys = make_nlink(n, 9.81).unwrap();
            let d = sys.eval(&model.upright(), &Vector::zeros(n), 0.0).unwrap();
            assert!(d.norm() < 1e-12, "n = {n}: {d}");
        }
        assert!(make_nlink(0, 9.81).is_err());
        assert!(make_nlink_simplified(0, 9.81).is_err());
    }

    #[test]
    fn single_link_matches_pendulum() {
        let pend = make_pendulum(PendulumParams {
            mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            damping: 0.0,
        })
        .unwrap();
        let link = make_nlink(1, 9.81).unwrap();
        for &(phi, w, u) in &[(0.3, -0.2, 0.5), (-1.1, 2.0, 0.0), (2.5, 0.1, -1.0)] {
            let dp = pend.eval(&v(&[phi, w]), &v(&[u]), 0.0).unwrap();
            let dl = link.eval(&v(&[phi + FRAC_PI_2, w]), &v(&[u]), 0.0).unwrap();
            assert_relative_eq!(dp, dl, epsilon = 1e-12);
        }
    }

    #[test]
    fn simplified_matches_full_when_unforced() {
        let full = make_nlink(3, 9.81).unwrap();
        let simple = make_nlink_simplified(3, 9.81).unwrap();
        let x = v(&[1.2, 1.7, 0.9, 0.3, -0.5, 1.1]);
        let u = Vector::zeros(3);
        assert_eq!(full.eval(&x, &u, 0.0).unwrap(), simple.eval(&x, &u, 0.0).unwrap());
        let one = make_nlink_simplified(1, 9.81).unwrap();
        let d = one.eval(&v(&[FRAC_PI_2, 0.0]), &v(&[1.0]), 0.0).unwrap();
        assert_relative_eq!(d[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn double_link_mass_matrix_in_joint_angles() {
        let model = NLink::new(2, 9.81).unwrap();
        let m = model.mass_matrix(&[0.4, 0.0]);
        assert_relative_eq!(m, Matrix::from_row_slice(2, 2, &[5.0, 2.0, 2.0, 1.0]), epsilon = 1e-14);
        let q2 = 0.7;
        let m = model.mass_matrix(&[-0.2, q2]);
        assert_relative_eq!(m[(0, 0)], 3.0 + 2.0 * q2.cos(), epsilon = 1e-14);
        assert_relative_eq!(m[(0, 1)], 1.0 + q2.cos(), epsilon = 1e-14);
        assert_relative_eq!(m[(1, 1)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn nlink_linearization_block_structure() {
        let n = 3;
        let model = NLink::new(n, 9.81).unwrap();
        let sys = make_nlink_simplified(n, 9.81).unwrap();
        let (a_fd, b_fd) = sys.linearize(&model.upright(), &Vector::zeros(n), 0.0).unwrap();
        let (a, b) = model.simplified_linearization();
        assert!((&a_fd - &a).norm() < 1e-6 * a.norm());
        assert!((&b_fd - &b).norm() < 1e-8);
        // upper blocks [0, I]; velocity block vanishes at rest
        for i in 0..n {
            for j in 0..n {
                assert_eq!(a[(i, j)], 0.0);
                assert_eq!(a[(i, n + j)], if i == j { 1.0 } else { 0.0 });
                assert!(a_fd[(n + i, n + j)].abs() < 1e-6);
            }
        }
    }

    #[test]
    fn close_loop_zero_controller() {
        let sys = make_pendulum(PendulumParams::default()).unwrap();
        let ctrl = Controller::zero(1);
        let field = close_loop(&sys, &ctrl).unwrap();
        let x = v(&[0.4, -0.3]);
        assert_eq!(field.eval(&x, 0.0).unwrap(), sys.eval(&x, &v(&[0.0]), 0.0).unwrap());
        assert!(close_loop(&sys, &Controller::zero(2)).is_err());
    }

    #[test]
    fn close_loop_gravity_cancellation_is_linear() {
        let p = PendulumParams::default();
        let sys = make_pendulum(p).unwrap();
        let k = p.gravity / p.length * p.mass * p.length * p.length;
        let ctrl = Controller::new(1, Arc::new(move |x: &Vector, _t| v(&[-k * x[0].sin()])));
        let field = close_loop(&sys, &ctrl).unwrap();
        for &th in &[0.0, 0.7, -2.0, 3.0] {
            let d = field.eval(&v(&[th, 2.0]), 0.0).unwrap();
            assert_relative_eq!(d[1], -0.4 * 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_field_jacobian_exact_and_fd() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let f = VectorField::linear(a.clone());
        let x = v(&[0.3, 0.9]);
        assert_eq!(jacobian(&f, &x, 0.0).unwrap(), a);
        assert!((f.jacobian_fd(&x, 0.0).unwrap() - &a).amax() < 1e-6);
    }
}
