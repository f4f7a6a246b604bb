use super::local::{Evaluator, Point, SolverOptions};
use super::{ConstraintKind, NlpProblem, NlpResult, NlpStatus, Sense};
use crate::error::{Error, Result};
use crate::numkernel::{solve_sparse, Matrix, Vector};

fn merit(p: &Point, nu: f64) -> f64 {
    p.f + nu * p.c.iter().map(|v| v.abs()).sum::<f64>()
}

fn kkt_matrix(h: &Matrix, delta: f64, jac: &Matrix) -> Matrix {
    let n = h.nrows();
    let m = jac.nrows();
    let mut k = Matrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for i in 0..n {
        k[(i, i)] += delta;
    }
    k.view_mut((n, 0), (m, n)).copy_from(jac);
    k.view_mut((0, n), (n, m)).copy_from(&jac.transpose());
    k
}

/// Newton SQP for purely equality-constrained problems.
///
/// Uses the problem's Lagrangian Hessian when present (identity otherwise),
/// an ℓ1 merit line search with second-order correction, and a sparse KKT
/// solve so that banded problems such as collocation stay cheap.
pub fn solve_sqp(problem: &NlpProblem<'_>, x0: &Vector, opts: &SolverOptions) -> Result<NlpResult> {
    if x0.len() != problem.dim {
        return Err(Error::DimensionMismatch {
            expected: problem.dim,
            actual: x0.len(),
        });
    }
    if problem.constraints.iter().any(|c| c.kind != ConstraintKind::Equality) {
        return Err(Error::InvalidParameter("SQP handles equality constraints only".into()));
    }
    let n = problem.dim;
    let mut ev = Evaluator::new(problem);
    let m = ev.kinds.len();
    let mut point = ev.eval(x0).ok_or(Error::NonFiniteProblem)?;
    let mut x = x0.clone();
    let mut lam = Vector::zeros(m);
    let mut nu: f64 = 1.0;
    let sign = match problem.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let mut status = None;
    let mut kkt = f64::INFINITY;
    let mut viol = point.c.amax();

    for _ in 0..opts.max_inner {
        let resid = &point.grad + point.jac.transpose() * &lam;
        kkt = resid.amax();
        viol = if m == 0 { 0.0 } else { point.c.amax() };
        if viol <= opts.tol && kkt <= opts.tol {
            status = Some(NlpStatus::Converged);
            break;
        }
        let h = match &problem.hessian {
            Some(hf) => hf(&x, lam.as_slice()),
            None => Matrix::identity(n, n),
        };
        let rhs = Vector::from_iterator(n + m, point.grad.iter().map(|v| -v).chain(point.c.iter().map(|v| -v)));
        let hscale = h.amax().max(1.0);
        let mut delta = 0.0;
        let mut step = None;
        for _ in 0..16 {
            let k = kkt_matrix(&h, delta, &point.jac);
            if let Ok(sol) = solve_sparse(&k, &rhs) {
                let d = sol.rows(0, n).into_owned();
                let curvature = d.dot(&(&h * &d)) + delta * d.norm_squared();
                if curvature >= 0.0 && sol.iter().all(|v| v.is_finite()) {
                    step = Some((k, d, sol.rows(n, m).into_owned()));
                    break;
                }
            }
            delta = if delta == 0.0 { 1e-8 * hscale } else { delta * 10.0 };
        }
        let Some((k, d, lam_new)) = step else {
            break;
        };
        nu = nu.max(1.1 * lam_new.amax());
        let phi0 = merit(&point, nu);
        let slope = point.grad.dot(&d) - nu * point.c.iter().map(|v| v.abs()).sum::<f64>();

        let mut accepted = None;
        let full = &x + &d;
        if let Some(pf) = ev.eval(&full) {
            if merit(&pf, nu) <= phi0 + 1e-4 * slope.min(0.0) {
                accepted = Some((1.0, full, pf));
            } else {
                // second-order correction against the Maratos effect
                let soc_rhs = Vector::from_iterator(n + m, std::iter::repeat_n(0.0, n).chain(pf.c.iter().map(|v| -v)));
                if let Ok(corr) = solve_sparse(&k, &soc_rhs) {
                    let xs = &full + corr.rows(0, n);
                    if let Some(ps) = ev.eval(&xs) {
                        if merit(&ps, nu) <= phi0 + 1e-4 * slope.min(0.0) {
                            accepted = Some((1.0, xs, ps));
                        }
                    }
                }
            }
        }
        if accepted.is_none() {
            let mut alpha = 0.5;
            for _ in 0..40 {
                let xt = &x + &d * alpha;
                if let Some(pt) = ev.eval(&xt) {
                    if merit(&pt, nu) <= phi0 + 1e-4 * alpha * slope {
                        accepted = Some((alpha, xt, pt));
                        break;
                    }
                }
                alpha *= 0.5;
            }
        }
        let Some((alpha, xn, pn)) = accepted else {
            break;
        };
        lam += (lam_new - &lam) * alpha;
        x = xn;
        point = pn;
    }
    let status = status.unwrap_or(if viol <= opts.tol.sqrt() {
        NlpStatus::IterationLimit
    } else {
        NlpStatus::Infeasible
    });
    Ok(NlpResult {
        objective: sign * point.f,
        x,
        status,
        kkt_residual: kkt,
        violation: viol,
        multipliers: lam.as_slice().to_vec(),
        evaluations: ev.count,
    })
}
