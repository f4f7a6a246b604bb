//! Reference trajectories: equilibria and trapezoidal direct collocation.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::ControlSystem;
use crate::error::{Error, Result};
use crate::nlpsolve::{multistart_with, solve_sqp, Constraint, ConstraintKind, MultistartOptions, NlpProblem, NlpResult, Sense};
use crate::numkernel::{Matrix, Vector};
use crate::odeint::Interpolant;

/// Knot samples with a cubic Hermite state interpolant and piecewise linear
/// controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<Vector>,
    controls: Vec<Vector>,
    interp: Interpolant,
    constant: bool,
    max_defect: Option<f64>,
}

impl Trajectory {
    /// Builds a trajectory whose state knot derivatives are `f(xᵢ, uᵢ, tᵢ)`.
    pub fn from_knots(sys: &ControlSystem, times: Vec<f64>, states: Vec<Vector>, controls: Vec<Vector>) -> Result<Self> {
        if states.len() != times.len() || controls.len() != times.len() {
            return Err(Error::InvalidParameter("knot arrays differ in length".into()));
        }
        let derivs = times
            .iter()
            .zip(states.iter().zip(&controls))
            .map(|(&t, (x, u))| sys.eval(x, u, t).map(|d| d.as_slice().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::with_derivatives(times, states, controls, derivs)
    }

    fn with_derivatives(times: Vec<f64>, states: Vec<Vector>, controls: Vec<Vector>, derivs: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(u0) = controls.first() {
            if controls.iter().any(|u| u.len() != u0.len()) {
                return Err(Error::InvalidParameter("control knots differ in length".into()));
            }
        }
        let interp = Interpolant::new(
            times.clone(),
            states.iter().map(|x| x.as_slice().to_vec()).collect(),
            derivs,
        )?;
        Ok(Self {
            times,
            states,
            controls,
            interp,
            constant: false,
            max_defect: None,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn control_dim(&self) -> usize {
        self.controls[0].len()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    pub fn controls(&self) -> &[Vector] {
        &self.controls
    }

    /// Largest trapezoidal defect, for trajectories produced by collocation.
    pub fn max_defect(&self) -> Option<f64> {
        self.max_defect
    }

    pub fn state(&self, t: f64) -> Result<Vector> {
        let x = self.interp.eval(t)?;
        Ok(if self.constant { self.states[0].clone() } else { x })
    }

    pub fn state_rate(&self, t: f64) -> Result<Vector> {
        self.interp.eval_derivative(t)
    }

    pub fn control(&self, t: f64) -> Result<Vector> {
        let (a, b) = (self.start(), self.end());
        let slack = 1e-12 * (b - a).abs().max(1.0);
        if !(t >= a - slack && t <= b + slack) {
            return Err(Error::OutOfDomain { t, start: a, end: b });
        }
        let t = t.clamp(a, b);
        match self.times.binary_search_by(|p| p.total_cmp(&t)) {
            Ok(i) => Ok(self.controls[i].clone()),
            Err(i) => {
                let i = i.saturating_sub(1).min(self.times.len() - 2);
                let s = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
                Ok(&self.controls[i] * (1.0 - s) + &self.controls[i + 1] * s)
            }
        }
    }

    /// `max ‖f(xᵢ, uᵢ, tᵢ)‖` over knots; zero along a true equilibrium.
    pub fn equilibrium_residual(&self, sys: &ControlSystem) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for ((&t, x), u) in self.times.iter().zip(&self.states).zip(&self.controls) {
            worst = worst.max(sys.eval(x, u, t)?.norm());
        }
        Ok(worst)
    }

    /// CSV with header `t,x1..xn,u1..um` and 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.state_dim();
        let m = self.control_dim();
        let mut out = String::from("t");
        for i in 1..=n {
            let _ = write!(out, ",x{i}");
        }
        for j in 1..=m {
            let _ = write!(out, ",u{j}");
        }
        out.push('\n');
        for ((t, x), u) in self.times.iter().zip(&self.states).zip(&self.controls) {
            let _ = write!(out, "{t:.16e}");
            for v in x.iter().chain(u.iter()) {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`Trajectory::to_csv`] output; knot derivatives are recomputed from `sys`.
    pub fn from_csv(text: &str, sys: &ControlSystem) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty trajectory file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let n = sys.state_dim();
        let m = sys.control_dim();
        let expected: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=n).map(|i| format!("x{i}")))
            .chain((1..=m).map(|j| format!("u{j}")))
            .collect();
        if cols != expected {
            return Err(Error::Parse(format!("unexpected trajectory header `{header}`")));
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut controls = Vec::new();
        for (row, line) in lines.enumerate() {
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", row + 1)))?;
            if vals.len() != 1 + n + m {
                return Err(Error::Parse(format!("row {} has {} fields, expected {}", row + 1, vals.len(), 1 + n + m)));
            }
            times.push(vals[0]);
            states.push(Vector::from_column_slice(&vals[1..1 + n]));
            controls.push(Vector::from_column_slice(&vals[1 + n..]));
        }
        if times.is_empty() {
            return Err(Error::Parse("trajectory file has no rows".into()));
        }
        Self::from_knots(sys, times, states, controls)
    }
}

/// `x̃ ≡ x_eq`, `ũ ≡ u_eq` on `[0, T]`.
pub fn constant_trajectory(x_eq: &Vector, u_eq: &Vector, t_final: f64) -> Result<Trajectory> {
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(Error::InvalidParameter(format!("horizon must be positive, got {t_final}")));
    }
    let zero = vec![0.0; x_eq.len()];
    let mut traj = Trajectory::with_derivatives(
        vec![0.0, t_final],
        vec![x_eq.clone(), x_eq.clone()],
        vec![u_eq.clone(), u_eq.clone()],
        vec![zero.clone(), zero],
    )?;
    traj.constant = true;
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollocationOptions {
    pub segments: usize,
    pub effort_weight: f64,
    /// Largest admissible defect of an accepted solution.
    pub defect_tol: f64,
    /// Scale of the random perturbation applied to restarts after the first.
    pub perturbation: f64,
    pub multistart: MultistartOptions,
}

impl Default for CollocationOptions {
    fn default() -> Self {
        let mut ms = MultistartOptions {
            restarts: 3,
            ..Default::default()
        };
        ms.solver.max_inner = 200;
        Self {
            segments: 300,
            effort_weight: 1.0,
            defect_tol: 1e-6,
            perturbation: 0.1,
            multistart: ms,
        }
    }
}

struct Layout<'a> {
    n: usize,
    m: usize,
    segments: usize,
    x0: &'a Vector,
    xt: &'a Vector,
}

impl Layout<'_> {
    fn dim(&self) -> usize {
        (self.segments - 1) * self.n + (self.segments + 1) * self.m
    }

    fn state(&self, z: &Vector, i: usize) -> Vector {
        match i {
            0 => self.x0.clone(),
            i if i == self.segments => self.xt.clone(),
            i => z.rows((i - 1) * self.n, self.n).into_owned(),
        }
    }

    /// Column offset of the free state `i`, if it is a decision variable.
    fn state_col(&self, i: usize) -> Option<usize> {
        (i > 0 && i < self.segments).then(|| (i - 1) * self.n)
    }

    fn control_col(&self, i: usize) -> usize {
        (self.segments - 1) * self.n + i * self.m
    }

    fn control(&self, z: &Vector, i: usize) -> Vector {
        z.rows(self.control_col(i), self.m).into_owned()
    }
}

/// Minimum-effort trajectory from `x0` to `xT` on `[0, T]` by trapezoidal
/// collocation on `segments` uniform intervals.
pub fn collocation_trajectory(
    sys: &ControlSystem,
    x0: &Vector,
    xt: &Vector,
    t_final: f64,
    opts: &CollocationOptions,
) -> Result<Trajectory> {
    let n = sys.state_dim();
    let m = sys.control_dim();
    let nseg = opts.segments;
    if nseg < 2 {
        return Err(Error::InvalidParameter(format!("collocation needs at least 2 segments, got {nseg}")));
    }
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(Error::InvalidParameter(format!("horizon must be positive, got {t_final}")));
    }
    for v in [x0, xt] {
        if v.len() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: v.len() });
        }
    }
    let dt = t_final / nseg as f64;
    let times: Vec<f64> = (0..=nseg).map(|i| t_final * i as f64 / nseg as f64).collect();
    let lay = Layout {
        n,
        m,
        segments: nseg,
        x0,
        xt,
    };
    let dim = lay.dim();
    let weight = opts.effort_weight;

    let layout = &lay;
    let times_ref = &times;
    let objective = move |z: &Vector| {
        let mut f = 0.0;
        let mut g = Vector::zeros(dim);
        for i in 0..=nseg {
            let w = if i == 0 || i == nseg { 0.5 * dt } else { dt } * weight;
            let c = layout.control_col(i);
            for j in 0..m {
                let u = z[c + j];
                f += w * u * u;
                g[c + j] = 2.0 * w * u;
            }
        }
        (f, g)
    };
    // defects divided by Δt: (xᵢ₊₁ − xᵢ)/Δt − (fᵢ + fᵢ₊₁)/2
    let defects = move |z: &Vector| {
        let rows = nseg * n;
        let mut d = Vector::zeros(rows);
        let mut jac = Matrix::zeros(rows, dim);
        let mut knot = Vec::with_capacity(nseg + 1);
        for (i, &t) in times_ref.iter().enumerate() {
            let x = layout.state(z, i);
            let u = layout.control(z, i);
            let eval = sys
                .eval(&x, &u, t)
                .and_then(|f| Ok((f, sys.jacobian_x(&x, &u, t)?, sys.jacobian_u(&x, &u, t)?)));
            match eval {
                Ok(v) => knot.push((x, v)),
                Err(_) => return (Vector::from_element(rows, f64::NAN), jac),
            }
        }
        for i in 0..nseg {
            let (xa, (fa, aa, ba)) = &knot[i];
            let (xb, (fb, ab, bb)) = &knot[i + 1];
            let r = i * n;
            d.rows_mut(r, n).copy_from(&((xb - xa) / dt - (fa + fb) * 0.5));
            if let Some(c) = layout.state_col(i) {
                let blk = -Matrix::identity(n, n) / dt - aa * 0.5;
                jac.view_mut((r, c), (n, n)).copy_from(&blk);
            }
            if let Some(c) = layout.state_col(i + 1) {
                let blk = Matrix::identity(n, n) / dt - ab * 0.5;
                jac.view_mut((r, c), (n, n)).copy_from(&blk);
            }
            jac.view_mut((r, layout.control_col(i)), (n, m)).copy_from(&(ba * -0.5));
            jac.view_mut((r, layout.control_col(i + 1)), (n, m)).copy_from(&(bb * -0.5));
        }
        (d, jac)
    };
    // Lagrangian Hessian: effort diagonal plus −½(λᵢ₋₁ + λᵢ)ᵀ∇²f at each knot,
    // with second derivatives of f from central differences of its Jacobians
    let hessian = move |z: &Vector, lam: &[f64]| {
        let mut h = Matrix::zeros(dim, dim);
        for i in 0..=nseg {
            let w = if i == 0 || i == nseg { 0.5 * dt } else { dt } * weight;
            let c = layout.control_col(i);
            for j in 0..m {
                h[(c + j, c + j)] = 2.0 * w;
            }
        }
        let nv = n + m;
        for (i, &t) in times_ref.iter().enumerate() {
            let mut mu = Vector::zeros(n);
            if i > 0 {
                mu -= Vector::from_column_slice(&lam[(i - 1) * n..i * n]) * 0.5;
            }
            if i < nseg {
                mu -= Vector::from_column_slice(&lam[i * n..(i + 1) * n]) * 0.5;
            }
            if mu.amax() == 0.0 {
                continue;
            }
            let base = layout.state(z, i).iter().chain(layout.control(z, i).iter()).copied().collect::<Vec<_>>();
            let jac_at = |v: &[f64]| -> Option<Matrix> {
                let x = Vector::from_column_slice(&v[..n]);
                let u = Vector::from_column_slice(&v[n..]);
                let a = sys.jacobian_x(&x, &u, t).ok()?;
                let b = sys.jacobian_u(&x, &u, t).ok()?;
                let mut j = Matrix::zeros(n, nv);
                j.view_mut((0, 0), (n, n)).copy_from(&a);
                j.view_mut((0, n), (n, m)).copy_from(&b);
                Some(j)
            };
            let mut local = Matrix::zeros(nv, nv);
            for l in 0..nv {
                let eps = 1e-5 * base[l].abs().max(1.0);
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[l] += eps;
                minus[l] -= eps;
                let (Some(jp), Some(jm)) = (jac_at(&plus), jac_at(&minus)) else {
                    return Matrix::from_element(dim, dim, f64::NAN);
                };
                let row = mu.transpose() * (jp - jm) / (2.0 * eps);
                local.set_row(l, &row);
            }
            let local = (&local + local.transpose()) * 0.5;
            let cols: Vec<Option<usize>> = (0..nv)
                .map(|l| {
                    if l < n {
                        layout.state_col(i).map(|c| c + l)
                    } else {
                        Some(layout.control_col(i) + l - n)
                    }
                })
                .collect();
            for (a, ca) in cols.iter().enumerate() {
                for (b, cb) in cols.iter().enumerate() {
                    if let (Some(ca), Some(cb)) = (ca, cb) {
                        h[(*ca, *cb)] += local[(a, b)];
                    }
                }
            }
        }
        h
    };
    let problem = NlpProblem::new(dim, Sense::Minimize, objective)
        .subject_to(Constraint::block(ConstraintKind::Equality, nseg * n, defects))
        .with_lagrangian_hessian(hessian);

    // straight line in state space, zero control; later restarts are perturbed
    let mut guess = Vector::zeros(dim);
    for i in 1..nseg {
        let s = i as f64 / nseg as f64;
        guess.rows_mut((i - 1) * n, n).copy_from(&(x0 * (1.0 - s) + xt * s));
    }
    let scale = opts.perturbation;
    let trial = |i: usize, rng: &mut crate::nlpsolve::StreamRng| -> Option<(NlpResult, f64)> {
        let mut start = guess.clone();
        if i > 0 {
            for v in start.iter_mut() {
                *v += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let r = solve_sqp(&problem, &start, &opts.multistart.solver).ok()?;
        let (d, _) = (problem.constraints[0].func)(&r.x);
        let worst = d.amax() * dt;
        worst.is_finite().then_some((r, worst))
    };
    let tol = opts.defect_tol;
    let feasible = |c: &Option<(NlpResult, f64)>| c.as_ref().is_some_and(|(_, d)| *d <= tol);
    let outcome = multistart_with(
        &opts.multistart,
        trial,
        |new, old| match (feasible(new), feasible(old)) {
            (true, false) => true,
            (false, _) => false,
            (true, true) => new.as_ref().unwrap().0.objective < old.as_ref().unwrap().0.objective,
        },
        |_| false,
    );
    let Some(Some((best, worst))) = outcome.incumbent.filter(feasible) else {
        return Err(Error::NotConverged {
            what: "collocation",
            iterations: outcome.solves,
        });
    };
    let states = (0..=nseg).map(|i| lay.state(&best.x, i)).collect();
    let controls = (0..=nseg).map(|i| lay.control(&best.x, i)).collect();
    let mut traj = Trajectory::from_knots(sys, times.clone(), states, controls)?;
    traj.max_defect = Some(worst);
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{make_nlink, NLink};
    use std::sync::Arc;

    fn double_integrator() -> ControlSystem {
        ControlSystem::new(
            2,
            1,
            Arc::new(|x: &Vector, u: &Vector, _t| Vector::from_column_slice(&[x[1], u[0]])),
        )
    }

    #[test]
    fn constant_is_exact() {
        let x = Vector::from_column_slice(&[0.3, -1.0]);
        let u = Vector::from_column_slice(&[2.0]);
        let tr = constant_trajectory(&x, &u, 1.5).unwrap();
        for t in [0.0, 0.123, 0.75, 1.5] {
            assert_eq!(tr.state(t).unwrap(), x);
            assert_eq!(tr.control(t).unwrap(), u);
            assert_eq!(tr.state_rate(t).unwrap(), Vector::zeros(2));
        }
    }

    #[test]
    fn upright_nlink_residual_vanishes() {
        let model = NLink::new(3, 9.81).unwrap();
        let sys = make_nlink(3, 9.81).unwrap();
        let tr = constant_trajectory(&model.upright(), &Vector::zeros(3), 1.0).unwrap();
        assert!(tr.equilibrium_residual(&sys).unwrap() < 1e-12);
    }

    #[test]
    fn rest_to_rest_equilibrium_gives_zero_control() {
        let sys = double_integrator();
        let x = Vector::zeros(2);
        let opts = CollocationOptions {
            segments: 10,
            ..Default::default()
        };
        let tr = collocation_trajectory(&sys, &x, &x, 1.0, &opts).unwrap();
        assert!(tr.controls().iter().all(|u| u.amax() < 1e-8));
        assert!(tr.states().iter().all(|s| s.amax() < 1e-8));
    }

    #[test]
    fn double_integrator_matches_closed_form() {
        let sys = double_integrator();
        let x0 = Vector::zeros(2);
        let xt = Vector::from_column_slice(&[1.0, 0.0]);
        let opts = CollocationOptions {
            segments: 50,
            ..Default::default()
        };
        let tr = collocation_trajectory(&sys, &x0, &xt, 1.0, &opts).unwrap();
        assert!(tr.max_defect().unwrap() <= 1e-6);
        for (&t, u) in tr.times().iter().zip(tr.controls()) {
            let exact = 6.0 - 12.0 * t;
            assert!((u[0] - exact).abs() <= 0.02 * exact.abs().max(1.0), "t={t} u={} exact={exact}", u[0]);
        }
    }

    #[test]
    fn knot_derivatives_are_dynamics() {
        let sys = double_integrator();
        let times = vec![0.0, 0.5, 1.0];
        let states = vec![
            Vector::from_column_slice(&[0.0, 1.0]),
            Vector::from_column_slice(&[0.4, 0.2]),
            Vector::from_column_slice(&[0.5, 0.0]),
        ];
        let controls = vec![Vector::from_element(1, -1.0), Vector::from_element(1, -0.5), Vector::from_element(1, 0.3)];
        let tr = Trajectory::from_knots(&sys, times.clone(), states.clone(), controls.clone()).unwrap();
        for i in 0..3 {
            let f = sys.eval(&states[i], &controls[i], times[i]).unwrap();
            assert_eq!(tr.state_rate(times[i]).unwrap(), f);
            assert_eq!(tr.state(times[i]).unwrap(), states[i]);
        }
        assert!((tr.control(0.25).unwrap()[0] + 0.75).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let sys = double_integrator();
        let times = vec![0.0, 0.1, 0.30000000000000004];
        let states = vec![
            Vector::from_column_slice(&[1.0 / 3.0, std::f64::consts::PI]),
            Vector::from_column_slice(&[-1e-300, 6.02214076e23]),
            Vector::from_column_slice(&[0.1 + 0.2, -0.0]),
        ];
        let controls = vec![Vector::from_element(1, 2f64.sqrt()), Vector::from_element(1, f64::MIN_POSITIVE), Vector::from_element(1, -7.5)];
        let tr = Trajectory::from_knots(&sys, times, states, controls).unwrap();
        let text = tr.to_csv();
        assert!(text.starts_with("t,x1,x2,u1\n"));
        let back = Trajectory::from_csv(&text, &sys).unwrap();
        assert_eq!(back.times(), tr.times());
        assert_eq!(back.states(), tr.states());
        assert_eq!(back.controls(), tr.controls());
    }

    #[test]
    fn csv_rejects_wrong_header() {
        let sys = double_integrator();
        assert!(matches!(Trajectory::from_csv("t,x1,u1\n0,0,0\n", &sys), Err(Error::Parse(_))));
    }
}
