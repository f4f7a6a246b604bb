//! LQR tracking controllers, Riccati solvers and the quadratic funnel shape
//! `P(x, t) = (x − x̃(t))ᵀ S(t) (x − x̃(t))`.

use std::fmt;
use std::sync::Arc;

use crate::dynamics::{jacobian, ControlSystem, NLink, VectorField};
use crate::error::{Error, Result};
use crate::numkernel::{chol_lower, ensure_symmetric, solve_spd_matrix, sym_eig_max, symmetrize, Matrix, Vector};
use crate::odeint::{integrate, IntegrationConfig, Interpolant};
use crate::trajgen::Trajectory;

pub type LawFn = Arc<dyn Fn(&Vector, f64) -> Vector + Send + Sync>;
pub type LawJacFn = Arc<dyn Fn(&Vector, f64) -> Matrix + Send + Sync>;

/// State feedback `u(x, t)` with an optional state Jacobian.
#[derive(Clone)]
pub struct Controller {
    control_dim: usize,
    law: LawFn,
    jac: Option<LawJacFn>,
    breaks: Vec<f64>,
}

impl fmt::Debug for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Controller")
            .field("control_dim", &self.control_dim)
            .field("jacobian", &self.jac.is_some())
            .finish()
    }
}

impl Controller {
    pub fn new(control_dim: usize, law: LawFn) -> Self {
        Self {
            control_dim,
            law,
            jac: None,
            breaks: Vec::new(),
        }
    }

    pub fn with_jacobian(mut self, jac: LawJacFn) -> Self {
        self.jac = Some(jac);
        self
    }

    /// Times where the law has a kink in `t`.
    pub fn with_breakpoints(mut self, times: Vec<f64>) -> Self {
        self.breaks = times;
        self
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }

    pub fn zero(control_dim: usize) -> Self {
        Self::new(control_dim, Arc::new(move |_x, _t| Vector::zeros(control_dim)))
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn has_jacobian(&self) -> bool {
        self.jac.is_some()
    }

    pub fn eval(&self, x: &Vector, t: f64) -> Vector {
        (self.law)(x, t)
    }

    pub fn jacobian(&self, x: &Vector, t: f64) -> Option<Matrix> {
        self.jac.as_ref().map(|j| j(x, t))
    }
}

/// Solves `Aᵀ X + X A + C = 0` by a dense Kronecker solve.
pub fn lyapunov(a: &Matrix, c: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n || c.nrows() != n || c.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: c.nrows(),
        });
    }
    let nn = n * n;
    // column-major vec: vec(Aᵀ X) = (I ⊗ Aᵀ) vec X, vec(X A) = (Aᵀ ⊗ I) vec X
    let mut k = Matrix::zeros(nn, nn);
    for col in 0..n {
        for i in 0..n {
            for j in 0..n {
                k[(col * n + i, col * n + j)] += a[(j, i)];
                k[(col * n + i, j * n + i)] += a[(j, col)];
            }
        }
    }
    let lu = k.lu();
    let failed = Error::NotConverged {
        what: "Lyapunov solve",
        iterations: 0,
    };
    let rhs = Vector::from_iterator(nn, c.iter().map(|v| -v));
    let mut x = symmetrize(&Matrix::from_column_slice(n, n, lu.solve(&rhs).ok_or(failed.clone())?.as_slice()));
    // iterative refinement against the matrix-form residual
    for _ in 0..2 {
        let res = a.transpose() * &x + &x * a + c;
        let d = lu.solve(&Vector::from_iterator(nn, res.iter().map(|v| -v))).ok_or(failed.clone())?;
        x += symmetrize(&Matrix::from_column_slice(n, n, d.as_slice()));
    }
    Ok(x)
}

fn check_weights(q: &Matrix, r: &Matrix) -> Result<()> {
    ensure_symmetric(q)?;
    ensure_symmetric(r)?;
    chol_lower(q)?;
    chol_lower(r)?;
    Ok(())
}

/// `R⁻¹ Bᵀ S`.
pub fn lqr_gain(b: &Matrix, r: &Matrix, s: &Matrix) -> Result<Matrix> {
    solve_spd_matrix(r, &(b.transpose() * s))
}

/// Residual `Aᵀ S + S A − S B R⁻¹ Bᵀ S + Q`.
pub fn care_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, s: &Matrix) -> Result<Matrix> {
    let k = lqr_gain(b, r, s)?;
    Ok(a.transpose() * s + s * a - s * b * k + q)
}

fn is_hurwitz(a: &Matrix) -> bool {
    let n = a.nrows();
    lyapunov(a, &Matrix::identity(n, n))
        .and_then(|x| chol_lower(&x))
        .is_ok()
}

/// Initial stabilizing gain: zero for stable `A`, otherwise the Bass gain
/// `K₀ = R⁻¹ Bᵀ Z⁻¹` with `(A + αI) Z + Z (A + αI)ᵀ = 2 B R⁻¹ Bᵀ`, where `α`
/// bounds `−Re λ(A)` through the numerical range so that `−(A + αI)` is Hurwitz.
fn initial_gain(a: &Matrix, b: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let m = b.ncols();
    if is_hurwitz(a) {
        return Ok(Matrix::zeros(m, n));
    }
    let (neg_min, _) = sym_eig_max(&-symmetrize(a))?;
    let alpha = neg_min.max(0.0) + 1.0;
    let shifted = a + Matrix::identity(n, n) * alpha;
    let rinv_bt = solve_spd_matrix(r, &b.transpose())?;
    let c = -(b * &rinv_bt) * 2.0;
    let z = lyapunov(&shifted.transpose(), &c)?;
    let z_inv = solve_spd_matrix(&z, &Matrix::identity(n, n)).map_err(|_| Error::NoStabilizingGain)?;
    let k0 = rinv_bt * z_inv;
    if !is_hurwitz(&(a - b * &k0)) {
        return Err(Error::NoStabilizingGain);
    }
    Ok(k0)
}

#[derive(Debug, Clone)]
pub struct CareSolution {
    pub s: Matrix,
    pub gain: Matrix,
    pub iterations: usize,
    /// Trace of each Kleinman iterate.
    pub trace_history: Vec<f64>,
}

/// Stabilizing solution of the continuous algebraic Riccati equation via
/// Kleinman's Newton iteration.
pub fn care_kleinman(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    care_kleinman_detailed(a, b, q, r).map(|sol| sol.s)
}

pub fn care_kleinman_detailed(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<CareSolution> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || r.nrows() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: b.nrows(),
        });
    }
    check_weights(q, r)?;
    let bass = initial_gain(a, b, r).and_then(|k| kleinman(a, b, q, r, k));
    match bass {
        Ok(sol) => Ok(sol),
        Err(first @ (Error::NoStabilizingGain | Error::NotConverged { .. })) => match sign_gain(a, b, q, r) {
            Some(k) => kleinman(a, b, q, r, k),
            None => Err(first),
        },
        Err(e) => Err(e),
    }
}

fn kleinman(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, mut k: Matrix) -> Result<CareSolution> {
    const MAX_ITER: usize = 200;
    const PATIENCE: usize = 5;
    let target = 1e-8 * q.norm();
    let mut s_prev: Option<Matrix> = None;
    let mut best: Option<(f64, Matrix, Matrix, usize)> = None;
    let mut stalled = 0;
    let mut traces = Vec::new();
    for it in 1..=MAX_ITER {
        let closed = a - b * &k;
        // Newton step on the defect, same iterate as re-solving with Q + KᵀRK
        let s = match &s_prev {
            None => lyapunov(&closed, &(q + k.transpose() * r * &k))?,
            Some(p) => symmetrize(&(p + lyapunov(&closed, &care_residual(a, b, q, r, p)?)?)),
        };
        traces.push(s.trace());
        k = lqr_gain(b, r, &s)?;
        let change = s_prev.as_ref().map_or(f64::INFINITY, |p| (&s - p).norm() / s.norm().max(1e-300));
        let residual = care_residual(a, b, q, r, &s)?.norm();
        if best.as_ref().is_none_or(|(r0, ..)| residual < *r0) {
            best = Some((residual, s.clone(), k.clone(), it));
            stalled = 0;
        } else {
            stalled += 1;
        }
        s_prev = Some(s);
        // past the rounding floor the iterates only wander
        if change <= 1e-13 || (stalled >= PATIENCE && change <= 1e-6) {
            break;
        }
    }
    let (residual, s, gain, iterations) = best.expect("at least one iterate");
    if residual > target {
        return Err(Error::NotConverged {
            what: "Kleinman iteration",
            iterations,
        });
    }
    Ok(CareSolution {
        s,
        gain,
        iterations,
        trace_history: traces,
    })
}

/// Gain from the stable invariant subspace of the Hamiltonian
/// `H = [A, −BR⁻¹Bᵀ; −Q, −Aᵀ]`, found with the scaled matrix sign iteration.
/// `None` if the iteration breaks down or the gain does not stabilize.
fn sign_gain(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Option<Matrix> {
    let n = a.nrows();
    let g = b * solve_spd_matrix(r, &b.transpose()).ok()?;
    let mut z = Matrix::zeros(2 * n, 2 * n);
    z.view_mut((0, 0), (n, n)).copy_from(a);
    z.view_mut((0, n), (n, n)).copy_from(&-&g);
    z.view_mut((n, 0), (n, n)).copy_from(&-q);
    z.view_mut((n, n), (n, n)).copy_from(&-a.transpose());
    for _ in 0..100 {
        let lu = z.clone().lu();
        let det = lu.determinant().abs();
        let inv = lu.try_inverse()?;
        let c = if det.is_finite() && det > 0.0 { det.powf(-1.0 / (2 * n) as f64) } else { 1.0 };
        let next = (&z * c + inv / c) * 0.5;
        let change = (&next - &z).norm() / next.norm();
        z = next;
        if !change.is_finite() {
            return None;
        }
        if change <= 1e-13 {
            break;
        }
    }
    // (W + I) [I; S] = 0 on the stable subspace
    let w11 = z.view((0, 0), (n, n)) + Matrix::identity(n, n);
    let w21 = z.view((n, 0), (n, n)).into_owned();
    let w12 = z.view((0, n), (n, n)).into_owned();
    let w22 = z.view((n, n), (n, n)) + Matrix::identity(n, n);
    let mut lhs = Matrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w12);
    lhs.view_mut((n, 0), (n, n)).copy_from(&w22);
    let mut rhs = Matrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&-w11);
    rhs.view_mut((n, 0), (n, n)).copy_from(&-w21);
    let s = symmetrize(&lhs.svd(true, true).solve(&rhs, 1e-14).ok()?);
    let k = lqr_gain(b, r, &s).ok()?;
    is_hurwitz(&(a - b * &k)).then_some(k)
}

/// A time-varying symmetric matrix: fixed, or a cubic Hermite path of entries.
#[derive(Debug, Clone)]
pub enum MatrixPath {
    Constant(Matrix),
    Interpolated { dim: usize, path: Interpolant },
}

impl MatrixPath {
    pub fn dim(&self) -> usize {
        match self {
            MatrixPath::Constant(m) => m.nrows(),
            MatrixPath::Interpolated { dim, .. } => *dim,
        }
    }

    /// `None` for constant paths (valid at every time).
    pub fn domain(&self) -> Option<(f64, f64)> {
        match self {
            MatrixPath::Constant(_) => None,
            MatrixPath::Interpolated { path, .. } => Some((path.start(), path.end())),
        }
    }

    pub fn at(&self, t: f64) -> Result<Matrix> {
        match self {
            MatrixPath::Constant(m) => Ok(m.clone()),
            MatrixPath::Interpolated { dim, path } => {
                Ok(Matrix::from_column_slice(*dim, *dim, path.eval(t)?.as_slice()))
            }
        }
    }

    pub fn rate(&self, t: f64) -> Result<Matrix> {
        match self {
            MatrixPath::Constant(m) => Ok(Matrix::zeros(m.nrows(), m.ncols())),
            MatrixPath::Interpolated { dim, path } => Ok(Matrix::from_column_slice(
                *dim,
                *dim,
                path.eval_derivative(t)?.as_slice(),
            )),
        }
    }

    pub fn knot_times(&self) -> Option<&[f64]> {
        match self {
            MatrixPath::Constant(_) => None,
            MatrixPath::Interpolated { path, .. } => Some(path.times()),
        }
    }
}

/// Integrates `Ṡ = −(Aᵀ S + S A − S B R⁻¹ Bᵀ S + Q)` backward from `S(t_final) = S_T`
/// down to `t_start`, symmetrizing after every accepted step.
#[allow(clippy::too_many_arguments)]
pub fn riccati_backward<FA, FB>(
    a: FA,
    b: FB,
    q: &Matrix,
    r: &Matrix,
    s_final: &Matrix,
    t_start: f64,
    t_final: f64,
    cfg: &IntegrationConfig,
) -> Result<MatrixPath>
where
    FA: Fn(f64) -> Result<Matrix>,
    FB: Fn(f64) -> Result<Matrix>,
{
    check_weights(q, r)?;
    ensure_symmetric(s_final)?;
    chol_lower(s_final)?;
    if !(t_final > t_start) {
        return Err(Error::InvalidParameter("Riccati horizon must be positive".into()));
    }
    let n = q.nrows();
    let mut s_buf = Matrix::zeros(n, n);
    let mut rhs = (n * n, |tau: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let t = t_final - tau;
        s_buf.copy_from_slice(y);
        let at = a(t)?;
        let bt = b(t)?;
        let k = solve_spd_matrix(r, &(bt.transpose() * &s_buf))?;
        let d = at.transpose() * &s_buf + &s_buf * &at - &s_buf * &bt * k + q;
        if !d.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteEvaluation { t });
        }
        dy.copy_from_slice(d.as_slice());
        Ok(())
    });
    let mut taus = Vec::new();
    let mut values = Vec::new();
    let mut rates = Vec::new();
    let horizon = t_final - t_start;
    integrate(
        &mut rhs,
        s_final.as_slice(),
        0.0,
        horizon,
        cfg,
        |y| {
            for i in 0..n {
                for j in (i + 1)..n {
                    let avg = 0.5 * (y[i + j * n] + y[j + i * n]);
                    y[i + j * n] = avg;
                    y[j + i * n] = avg;
                }
            }
        },
        |knot| {
            taus.push(knot.t);
            values.push(knot.y.to_vec());
            // d/dt = −d/dτ
            rates.push(knot.dy.iter().map(|v| -v).collect::<Vec<_>>());
        },
    )?;
    let count = taus.len();
    let mut times: Vec<f64> = taus.iter().rev().map(|tau| t_final - tau).collect();
    times[0] = t_start;
    times[count - 1] = t_final;
    values.reverse();
    rates.reverse();
    let path = Interpolant::new(times, values, rates)?;
    Ok(MatrixPath::Interpolated { dim: n, path })
}

/// Reference `x̃(t)` of a shape: a fixed point or a trajectory.
#[derive(Debug, Clone)]
pub enum Reference {
    Fixed(Vector),
    Path(Arc<Trajectory>),
}

impl Reference {
    pub fn state(&self, t: f64) -> Result<Vector> {
        match self {
            Reference::Fixed(x) => Ok(x.clone()),
            Reference::Path(tr) => tr.state(t),
        }
    }

    pub fn rate(&self, t: f64) -> Result<Vector> {
        match self {
            Reference::Fixed(x) => Ok(Vector::zeros(x.len())),
            Reference::Path(tr) => tr.state_rate(t),
        }
    }

    pub fn domain(&self) -> Option<(f64, f64)> {
        match self {
            Reference::Fixed(_) => None,
            Reference::Path(tr) => Some((tr.start(), tr.end())),
        }
    }
}

/// `P(x, t) = (x − x̃(t))ᵀ S(t) (x − x̃(t))`.
#[derive(Debug, Clone)]
pub struct QuadraticShape {
    matrix: MatrixPath,
    reference: Reference,
}

impl QuadraticShape {
    pub fn new(matrix: MatrixPath, reference: Reference) -> Result<Self> {
        let n = matrix.dim();
        let rn = match &reference {
            Reference::Fixed(x) => x.len(),
            Reference::Path(tr) => tr.state_dim(),
        };
        if rn != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: rn,
            });
        }
        if let MatrixPath::Constant(s) = &matrix {
            ensure_symmetric(s)?;
            chol_lower(s)?;
        }
        Ok(Self { matrix, reference })
    }

    /// Constant shape matrix around a fixed point.
    pub fn constant(s: Matrix, center: Vector) -> Result<Self> {
        Self::new(MatrixPath::Constant(s), Reference::Fixed(center))
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix_path(&self) -> &MatrixPath {
        &self.matrix
    }

    pub fn reference(&self) -> &Reference {
        &self.reference
    }

    /// Intersection of the matrix and reference domains; `None` when unbounded.
    pub fn domain(&self) -> Option<(f64, f64)> {
        match (self.matrix.domain(), self.reference.domain()) {
            (None, None) => None,
            (Some(d), None) | (None, Some(d)) => Some(d),
            (Some(a), Some(b)) => Some((a.0.max(b.0), a.1.min(b.1))),
        }
    }

    fn domain_check(&self, t: f64) -> Result<()> {
        if let Some((a, b)) = self.domain() {
            let slack = 1e-12 * (b - a).abs().max(1.0);
            if !(t >= a - slack && t <= b + slack) {
                return Err(Error::OutOfDomain { t, start: a, end: b });
            }
        }
        Ok(())
    }

    pub fn s(&self, t: f64) -> Result<Matrix> {
        self.domain_check(t)?;
        self.matrix.at(t)
    }

    pub fn s_rate(&self, t: f64) -> Result<Matrix> {
        self.domain_check(t)?;
        self.matrix.rate(t)
    }

    pub fn center(&self, t: f64) -> Result<Vector> {
        self.domain_check(t)?;
        self.reference.state(t)
    }

    pub fn center_rate(&self, t: f64) -> Result<Vector> {
        self.domain_check(t)?;
        self.reference.rate(t)
    }

    pub fn value(&self, x: &Vector, t: f64) -> Result<f64> {
        let d = x - self.center(t)?;
        Ok(d.dot(&(self.s(t)? * &d)))
    }

    /// `(P, ∇ₓP)`.
    pub fn value_with_gradient(&self, x: &Vector, t: f64) -> Result<(f64, Vector)> {
        let d = x - self.center(t)?;
        let sd = self.s(t)? * &d;
        Ok((d.dot(&sd), sd * 2.0))
    }

    /// `Ṗ = 2 (x − x̃)ᵀ S (F(x, t) − x̃̇) + (x − x̃)ᵀ Ṡ (x − x̃)`.
    pub fn rate(&self, field: &VectorField, x: &Vector, t: f64) -> Result<f64> {
        let d = x - self.center(t)?;
        let s = self.s(t)?;
        let sdot = self.s_rate(t)?;
        let drift = field.eval(x, t)? - self.center_rate(t)?;
        Ok(2.0 * d.dot(&(&s * drift)) + d.dot(&(sdot * &d)))
    }

    /// `(Ṗ, ∇ₓṖ)` with `∇ₓṖ = 2 S (F − x̃̇) + 2 Jᵀ S d + 2 Ṡ d`.
    pub fn rate_with_gradient(&self, field: &VectorField, x: &Vector, t: f64) -> Result<(f64, Vector)> {
        let d = x - self.center(t)?;
        let s = self.s(t)?;
        let sdot = self.s_rate(t)?;
        let drift = field.eval(x, t)? - self.center_rate(t)?;
        let jac = jacobian(field, x, t)?;
        let sd = &s * &d;
        let sdot_d = &sdot * &d;
        let value = 2.0 * sd.dot(&drift) + d.dot(&sdot_d);
        let grad = (&s * drift) * 2.0 + jac.transpose() * &sd * 2.0 + sdot_d * 2.0;
        Ok((value, grad))
    }
}

pub fn shape_value(shape: &QuadraticShape, x: &Vector, t: f64) -> Result<f64> {
    shape.value(x, t)
}

pub fn shape_rate(shape: &QuadraticShape, field: &VectorField, x: &Vector, t: f64) -> Result<f64> {
    shape.rate(field, x, t)
}

/// Time-varying LQR along a reference: linearizes `sys` on `(x̃(t), ũ(t))`,
/// solves the Riccati equation backward and returns the tracking law
/// `u = ũ(t) − R⁻¹ B(t)ᵀ S(t) (x − x̃(t))` with its shape.
pub fn tvlqr(
    sys: &ControlSystem,
    traj: Arc<Trajectory>,
    q: &Matrix,
    r: &Matrix,
    s_final: &Matrix,
    cfg: &IntegrationConfig,
) -> Result<(Controller, QuadraticShape)> {
    let n = sys.state_dim();
    let m = sys.control_dim();
    if traj.state_dim() != n || traj.control_dim() != m {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: traj.state_dim(),
        });
    }
    if q.nrows() != n || r.nrows() != m || s_final.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: q.nrows(),
        });
    }
    let lin = {
        let sys = sys.clone();
        let traj = traj.clone();
        move |t: f64| -> Result<(Matrix, Matrix)> {
            let x = traj.state(t)?;
            let u = traj.control(t)?;
            sys.linearize(&x, &u, t)
        }
    };
    let path = riccati_backward(
        |t| lin(t).map(|(a, _)| a),
        |t| lin(t).map(|(_, b)| b),
        q,
        r,
        s_final,
        traj.start(),
        traj.end(),
        cfg,
    )?;
    let shape = QuadraticShape::new(path.clone(), Reference::Path(traj.clone()))?;

    let gain_at = {
        let path = path.clone();
        let r = r.clone();
        let lin = lin.clone();
        Arc::new(move |t: f64| -> Matrix {
            let (_, b) = lin(t).expect("reference within domain");
            let s = path.at(t).expect("reference within domain");
            lqr_gain(&b, &r, &s).expect("R is SPD")
        })
    };
    let law_gain = gain_at.clone();
    let law_traj = traj.clone();
    let law: LawFn = Arc::new(move |x: &Vector, t| {
        let t = t.clamp(law_traj.start(), law_traj.end());
        let k = law_gain(t);
        let xr = law_traj.state(t).expect("clamped");
        let ur = law_traj.control(t).expect("clamped");
        ur - k * (x - xr)
    });
    let knots = traj.times().to_vec();
    let jac_traj = traj;
    let jac: LawJacFn = Arc::new(move |_x, t| -gain_at(t.clamp(jac_traj.start(), jac_traj.end())));
    Ok((Controller::new(m, law).with_jacobian(jac).with_breakpoints(knots), shape))
}

/// LQR design for the n-link pendulum built on the simplified model's upright
/// linearization and transferred onto the full model.
#[derive(Debug, Clone)]
pub struct NLinkDesign {
    pub model: NLink,
    /// Linearization `(A, B)` of the simplified model at upright.
    pub a: Matrix,
    pub b: Matrix,
    /// LQR gain `K = R⁻¹ Bᵀ S_n` of the simplified model.
    pub gain: Matrix,
    /// Cost-to-go matrix `S_n`.
    pub cost_to_go: Matrix,
    /// `A − B K`, the upright linearization of either closed loop.
    pub closed_loop: Matrix,
    pub controller: Controller,
    pub shape: QuadraticShape,
}

/// Full-model law `u = M(θ) K Δ`, `Δ = x − upright`. With `B = [0; −I]` the
/// simplified controller is `−K Δ`, so the full closed loop
/// `θ̈ = M⁻¹(u − h) = −M⁻¹h + K Δ` coincides with the simplified one.
pub fn nlink_controller(n: usize, gravity: f64, q: &Matrix, r: &Matrix) -> Result<NLinkDesign> {
    let model = NLink::new(n, gravity)?;
    let (a, b) = model.simplified_linearization();
    let sol = care_kleinman_detailed(&a, &b, q, r)?;
    let gain = sol.gain.clone();
    let closed_loop = &a - &b * &gain;
    let upright = model.upright();

    let law_gain = gain.clone();
    let law_up = upright.clone();
    let law: LawFn = Arc::new(move |x: &Vector, _t| {
        let kd = &law_gain * (x - &law_up);
        model.mass_matrix(&x.as_slice()[..n]) * kd
    });
    let controller = Controller::new(n, law);
    let shape = QuadraticShape::constant(sol.s.clone(), upright)?;
    Ok(NLinkDesign {
        model,
        a,
        b,
        gain,
        cost_to_go: sol.s,
        closed_loop,
        controller,
        shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m1(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn lyapunov_scalar() {
        // 2 a x + c = 0
        let x = lyapunov(&m1(-2.0), &m1(8.0)).unwrap();
        assert_relative_eq!(x[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn care_scalar_fixed_point() {
        let s = care_kleinman(&m1(0.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
        assert_relative_eq!(s[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn care_double_integrator() {
        let a = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let s = care_kleinman(&a, &b, &Matrix::identity(2, 2), &m1(1.0)).unwrap();
        let r3 = 3f64.sqrt();
        assert_relative_eq!(s, Matrix::from_row_slice(2, 2, &[r3, 1.0, 1.0, r3]), epsilon = 1e-10);
    }

    #[test]
    fn care_rejects_uncontrollable_unstable() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let err = care_kleinman(&a, &b, &Matrix::identity(2, 2), &m1(1.0)).unwrap_err();
        assert_eq!(err, Error::NoStabilizingGain);
    }

    #[test]
    fn riccati_fixed_point_and_linear_growth() {
        let cfg = IntegrationConfig::default();
        let path = riccati_backward(|_| Ok(m1(0.0)), |_| Ok(m1(1.0)), &m1(1.0), &m1(1.0), &m1(1.0), 0.0, 1.0, &cfg)
            .unwrap();
        for t in [0.0, 0.3, 1.0] {
            assert_relative_eq!(path.at(t).unwrap()[(0, 0)], 1.0, epsilon = 1e-12);
        }
        let path = riccati_backward(|_| Ok(m1(0.0)), |_| Ok(m1(0.0)), &m1(1.0), &m1(1.0), &m1(1.0), 0.0, 1.0, &cfg)
            .unwrap();
        assert_relative_eq!(path.at(0.0).unwrap()[(0, 0)], 2.0, epsilon = 1e-10);
        assert_relative_eq!(path.rate(0.5).unwrap()[(0, 0)], -1.0, epsilon = 1e-8);
    }

    #[test]
    fn riccati_rejects_indefinite_weights() {
        let cfg = IntegrationConfig::default();
        let res = riccati_backward(|_| Ok(m1(0.0)), |_| Ok(m1(1.0)), &m1(-1.0), &m1(1.0), &m1(1.0), 0.0, 1.0, &cfg);
        assert!(matches!(res, Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn shape_value_and_rate_scalar_identity() {
        let shape = QuadraticShape::constant(m1(1.0), Vector::zeros(1)).unwrap();
        let field = VectorField::linear(m1(-1.0));
        for x in [-2.0, 0.5, 3.0] {
            let xv = Vector::from_element(1, x);
            let p = shape.value(&xv, 0.0).unwrap();
            let pd = shape.rate(&field, &xv, 0.0).unwrap();
            assert_relative_eq!(pd, -2.0 * p, epsilon = 1e-14);
        }
        let c = Vector::zeros(1);
        assert_eq!(shape.value(&c, 1.0).unwrap(), 0.0);
        assert_eq!(shape.rate(&field, &c, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn nlink_controller_zero_at_upright() {
        let n = 2;
        let design = nlink_controller(n, 9.81, &(Matrix::identity(4, 4) * 20.0), &Matrix::identity(2, 2)).unwrap();
        let u = design.controller.eval(&design.model.upright(), 0.0);
        assert_eq!(u, Vector::zeros(n));
    }
}
