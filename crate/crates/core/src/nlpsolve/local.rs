use super::{ConstraintKind, NlpProblem, NlpResult, NlpStatus, Sense};
use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Bound on KKT residual and constraint violation for convergence.
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_outer: 50,
            max_inner: 500,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e12,
        }
    }
}

/// Objective (minimization form) and stacked constraints at a point.
pub(super) struct Point {
    pub(super) f: f64,
    pub(super) grad: Vector,
    pub(super) c: Vector,
    pub(super) jac: Matrix,
}

pub(super) struct Evaluator<'p, 'a> {
    problem: &'p NlpProblem<'a>,
    pub(super) kinds: Vec<ConstraintKind>,
    pub(super) count: usize,
}

impl<'p, 'a> Evaluator<'p, 'a> {
    pub(super) fn new(problem: &'p NlpProblem<'a>) -> Self {
        let kinds = problem
            .constraints
            .iter()
            .flat_map(|c| std::iter::repeat_n(c.kind, c.count))
            .collect();
        Self {
            problem,
            kinds,
            count: 0,
        }
    }

    pub(super) fn eval(&mut self, x: &Vector) -> Option<Point> {
        self.count += 1;
        let n = self.problem.dim;
        let (f, g) = (self.problem.objective)(x);
        let (f, grad) = match self.problem.sense {
            Sense::Minimize => (f, g),
            Sense::Maximize => (-f, -g),
        };
        if !f.is_finite() || grad.len() != n || !grad.iter().all(|v| v.is_finite()) {
            return None;
        }
        let m = self.kinds.len();
        let mut c = Vector::zeros(m);
        let mut jac = Matrix::zeros(m, n);
        let mut row = 0;
        for block in &self.problem.constraints {
            let (vals, jb) = (block.func)(x);
            if vals.len() != block.count || jb.nrows() != block.count || jb.ncols() != n {
                return None;
            }
            if !vals.iter().chain(jb.iter()).all(|v| v.is_finite()) {
                return None;
            }
            c.rows_mut(row, block.count).copy_from(&vals);
            jac.view_mut((row, 0), (block.count, n)).copy_from(&jb);
            row += block.count;
        }
        Some(Point { f, grad, c, jac })
    }
}

/// Augmented Lagrangian value and gradient for multipliers `lam` and penalty `mu`.
fn augmented(p: &Point, kinds: &[ConstraintKind], lam: &[f64], mu: f64) -> (f64, Vector) {
    let mut value = p.f;
    let mut coef = Vector::zeros(kinds.len());
    for (i, kind) in kinds.iter().enumerate() {
        let ci = p.c[i];
        match kind {
            ConstraintKind::Equality => {
                value += lam[i] * ci + 0.5 * mu * ci * ci;
                coef[i] = lam[i] + mu * ci;
            }
            ConstraintKind::Inequality => {
                let s = lam[i] + mu * ci;
                if s > 0.0 {
                    value += (s * s - lam[i] * lam[i]) / (2.0 * mu);
                    coef[i] = s;
                } else {
                    value -= lam[i] * lam[i] / (2.0 * mu);
                }
            }
        }
    }
    let grad = &p.grad + p.jac.transpose() * coef;
    (value, grad)
}

fn violation(c: &Vector, kinds: &[ConstraintKind]) -> f64 {
    kinds.iter().enumerate().fold(0.0, |v, (i, k)| match k {
        ConstraintKind::Equality => v.max(c[i].abs()),
        ConstraintKind::Inequality => v.max(c[i].max(0.0)),
    })
}

struct Trial {
    alpha: f64,
    x: Vector,
    point: Point,
    phi: f64,
    grad: Vector,
}

/// Approximate Wolfe test for steps whose decrease is below the rounding
/// level of `φ`: `φ(α) ≤ φ(0) + ε|φ(0)|` and `σφ'(0) ≤ φ'(α) ≤ (2δ − 1)φ'(0)`.
fn approx_wolfe(tr: &Trial, dphi: f64, phi0: f64, dphi0: f64) -> bool {
    const DELTA: f64 = 0.1;
    const SIGMA: f64 = 0.9;
    let eps = 1e-12 * phi0.abs().max(1e-300);
    tr.phi <= phi0 + eps && dphi >= SIGMA * dphi0 && dphi <= (2.0 * DELTA - 1.0) * dphi0
}

/// Strong-Wolfe line search on the augmented Lagrangian along `dir`.
#[allow(clippy::too_many_arguments)]
fn line_search(
    ev: &mut Evaluator<'_, '_>,
    x: &Vector,
    dir: &Vector,
    phi0: f64,
    dphi0: f64,
    lam: &[f64],
    mu: f64,
    alpha_init: f64,
) -> Option<Trial> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    const MAX_EVAL: usize = 40;
    let kinds = ev.kinds.clone();
    let probe = |ev: &mut Evaluator<'_, '_>, alpha: f64| -> Option<Trial> {
        let xa = x + dir * alpha;
        let point = ev.eval(&xa)?;
        let (phi, grad) = augmented(&point, &kinds, lam, mu);
        if !phi.is_finite() {
            return None;
        }
        Some(Trial {
            alpha,
            x: xa,
            point,
            phi,
            grad,
        })
    };

    let mut lo_alpha = 0.0;
    let mut lo_phi = phi0;
    let mut lo_dphi = dphi0;
    let mut lo_trial: Option<Trial> = None;
    let mut hi_alpha;
    let mut hi_phi;
    let mut alpha = alpha_init;
    let mut evals = 0;
    loop {
        evals += 1;
        if evals > MAX_EVAL {
            return lo_trial;
        }
        match probe(ev, alpha) {
            None => {
                hi_alpha = alpha;
                hi_phi = f64::INFINITY;
                break;
            }
            Some(tr) => {
                let dphi = tr.grad.dot(dir);
                if approx_wolfe(&tr, dphi, phi0, dphi0) {
                    return Some(tr);
                }
                if tr.phi > phi0 + C1 * alpha * dphi0 || tr.phi >= lo_phi && lo_trial.is_some() {
                    hi_alpha = alpha;
                    hi_phi = tr.phi;
                    break;
                }
                if dphi.abs() <= -C2 * dphi0 {
                    return Some(tr);
                }
                if dphi >= 0.0 {
                    hi_alpha = lo_alpha;
                    hi_phi = lo_phi;
                    lo_alpha = alpha;
                    lo_phi = tr.phi;
                    lo_dphi = dphi;
                    lo_trial = Some(tr);
                    break;
                }
                lo_alpha = alpha;
                lo_phi = tr.phi;
                lo_dphi = dphi;
                lo_trial = Some(tr);
                alpha *= 2.0;
            }
        }
    }
    // zoom between lo (sufficient decrease holds) and hi
    loop {
        evals += 1;
        if evals > MAX_EVAL {
            return lo_trial;
        }
        let width = hi_alpha - lo_alpha;
        if width.abs() < 1e-16 * lo_alpha.abs().max(1.0) {
            return lo_trial;
        }
        let mut cand = if hi_phi.is_finite() {
            // quadratic through (lo, φ_lo, φ'_lo) and (hi, φ_hi)
            let denom = 2.0 * (hi_phi - lo_phi - lo_dphi * width);
            if denom > 0.0 {
                lo_alpha - lo_dphi * width * width / denom
            } else {
                lo_alpha + 0.5 * width
            }
        } else {
            lo_alpha + 0.5 * width
        };
        let (a, b) = if lo_alpha < hi_alpha {
            (lo_alpha, hi_alpha)
        } else {
            (hi_alpha, lo_alpha)
        };
        let margin = 0.1 * (b - a);
        if !(cand > a + margin && cand < b - margin) {
            cand = 0.5 * (a + b);
        }
        match probe(ev, cand) {
            None => {
                hi_alpha = cand;
                hi_phi = f64::INFINITY;
            }
            Some(tr) => {
                let dphi = tr.grad.dot(dir);
                if approx_wolfe(&tr, dphi, phi0, dphi0) {
                    return Some(tr);
                }
                if tr.phi > phi0 + C1 * cand * dphi0 || tr.phi >= lo_phi {
                    hi_alpha = cand;
                    hi_phi = tr.phi;
                } else {
                    if dphi.abs() <= -C2 * dphi0 {
                        return Some(tr);
                    }
                    if dphi * (hi_alpha - lo_alpha) >= 0.0 {
                        hi_alpha = lo_alpha;
                        hi_phi = lo_phi;
                    }
                    lo_alpha = cand;
                    lo_phi = tr.phi;
                    lo_dphi = dphi;
                    lo_trial = Some(tr);
                }
            }
        }
    }
}

/// BFGS minimization of the augmented Lagrangian from `start`.
fn minimize_inner(
    ev: &mut Evaluator<'_, '_>,
    start: (Vector, Point),
    lam: &[f64],
    mu: f64,
    grad_tol: f64,
    max_iter: usize,
) -> (Vector, Point) {
    let kinds = ev.kinds.clone();
    let (mut x, mut point) = start;
    let (mut phi, mut grad) = augmented(&point, &kinds, lam, mu);
    let n = x.len();
    let mut h = Matrix::identity(n, n);
    let mut first = true;
    for _ in 0..max_iter {
        if grad.amax() <= grad_tol {
            break;
        }
        let mut dir = -(&h * &grad);
        let mut dphi0 = grad.dot(&dir);
        if !(dphi0 < 0.0) {
            h = Matrix::identity(n, n);
            first = true;
            dir = -grad.clone();
            dphi0 = grad.dot(&dir);
        }
        let alpha0 = if first {
            (1.0 / grad.amax()).min(1.0)
        } else {
            1.0
        };
        let Some(trial) = line_search(ev, &x, &dir, phi, dphi0, lam, mu, alpha0) else {
            if first {
                break;
            }
            // restart from steepest descent once before giving up
            h = Matrix::identity(n, n);
            first = true;
            continue;
        };
        let s = &trial.x - &x;
        let y = &trial.grad - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                h = Matrix::identity(n, n) * (sy / y.dot(&y));
            }
            let hy = &h * &y;
            let rho = 1.0 / sy;
            let yhy = y.dot(&hy);
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            first = false;
        }
        let _ = trial.alpha;
        let stalled = (phi - trial.phi).abs() <= 1e-16 * phi.abs().max(1.0) && s.amax() <= 1e-16 * x.amax().max(1.0);
        x = trial.x;
        point = trial.point;
        phi = trial.phi;
        grad = trial.grad;
        if stalled {
            break;
        }
    }
    (x, point)
}

/// Local solve by a PHR augmented-Lagrangian outer loop around BFGS.
pub fn solve_local(problem: &NlpProblem<'_>, x0: &Vector, opts: &SolverOptions) -> Result<NlpResult> {
    if x0.len() != problem.dim {
        return Err(Error::DimensionMismatch {
            expected: problem.dim,
            actual: x0.len(),
        });
    }
    let mut ev = Evaluator::new(problem);
    let kinds = ev.kinds.clone();
    let m = kinds.len();
    let start = ev.eval(x0).ok_or(Error::NonFiniteProblem)?;
    let mut lam = vec![0.0; m];
    let mut mu = opts.initial_penalty;
    let mut x = x0.clone();
    let mut point = start;
    let mut prev_violation = f64::INFINITY;
    let sign = match problem.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };

    let mut kkt = f64::INFINITY;
    let mut viol = violation(&point.c, &kinds);
    let mut frozen = 0;
    for outer in 0..opts.max_outer.max(1) {
        let grad_tol = if m == 0 {
            opts.tol
        } else {
            (10f64.powi(-(outer as i32) - 2)).max(0.5 * opts.tol)
        };
        let entry = x.clone();
        let (xn, pn) = minimize_inner(&mut ev, (x, point), &lam, mu, grad_tol, opts.max_inner);
        x = xn;
        point = pn;

        let (_, lgrad) = augmented(&point, &kinds, &lam, mu);
        let mut complementarity: f64 = 0.0;
        for (i, kind) in kinds.iter().enumerate() {
            match kind {
                ConstraintKind::Equality => lam[i] += mu * point.c[i],
                ConstraintKind::Inequality => {
                    lam[i] = (lam[i] + mu * point.c[i]).max(0.0);
                    complementarity = complementarity.max((lam[i] * point.c[i]).abs());
                }
            }
        }
        viol = violation(&point.c, &kinds);
        kkt = lgrad.amax().max(complementarity);
        if viol <= opts.tol && kkt <= opts.tol {
            return Ok(NlpResult {
                objective: sign * point.f,
                x,
                status: NlpStatus::Converged,
                kkt_residual: kkt,
                violation: viol,
                multipliers: lam,
                evaluations: ev.count,
            });
        }
        if m == 0 {
            break;
        }
        if viol > opts.tol && (viol > 0.25 * prev_violation || outer > 0 && viol >= prev_violation) {
            mu = (mu * opts.penalty_growth).min(opts.max_penalty);
        }
        prev_violation = viol;
        // the inner solve can no longer move x: further outer steps only drift λ
        if viol <= opts.tol && x == entry {
            frozen += 1;
            if frozen >= 3 {
                break;
            }
        } else {
            frozen = 0;
        }
    }
    let status = if viol <= opts.tol.sqrt() {
        NlpStatus::IterationLimit
    } else {
        NlpStatus::Infeasible
    };
    Ok(NlpResult {
        objective: sign * point.f,
        x,
        status,
        kkt_residual: kkt,
        violation: viol,
        multipliers: lam,
        evaluations: ev.count,
    })
}
