//! Backward funnel synthesis with NLP falsifiers.
//!
//! All three NLPs are posed in whitened coordinates of the ellipsoid at the
//! constraint time, `x = x̃ + √ρ · L⁻ᵀ z` with `L Lᵀ = S`, so the level
//! constraint becomes `‖z‖² ≤ 1` (or `= 1`) and objectives are O(1).

use std::cell::Cell;
use std::fmt::Write as _;

use crate::dynamics::VectorField;
use crate::error::{Error, Result};
use crate::nlpsolve::{
    multistart_with, sample_unit_ball, solve_local, stream_seed, Constraint, ConstraintKind, MultistartOptions,
    NlpProblem, Placement, Sense, SolverOptions, StreamRng,
};
use crate::numkernel::{backward_subst_transposed, chol_lower, forward_subst, gen_eig_max, log_det_spd, sym_eigen, whiten, Matrix, Vector};
use crate::odeint::{flow, flow_sensitivity, IntegrationConfig};
use crate::tracking::QuadraticShape;

/// Levels below this signal a shape/controller mismatch.
pub const RHO_FLOOR: f64 = 1e-12;

/// `𝒢 = {x : (x − x_G)ᵀ Q_G (x − x_G) ≤ c_G}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Goal {
    pub center: Vector,
    pub matrix: Matrix,
    pub level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunnelParams {
    /// Initial guess factor `ρ_k = c · ρ_{k+1}`.
    pub c: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub tau1: usize,
    pub tau2: usize,
    /// Derivative-check samples per interval; 1 means `t_{k+1}` only.
    pub derivative_samples: usize,
    pub derivative_check: bool,
    /// Tightens the derivative condition to `Ṗ ≤ ρ̇ᴵ − ε`.
    pub strictness: f64,
}

impl Default for FunnelParams {
    fn default() -> Self {
        Self {
            c: 1.5,
            gamma1: 0.9999,
            gamma2: 0.999,
            tau1: 10,
            tau2: 30,
            derivative_samples: 1,
            derivative_check: true,
            strictness: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FunnelSpec {
    /// Closed-loop dynamics `ẋ = F(x, t)`.
    pub field: VectorField,
    pub shape: QuadraticShape,
    pub grid: Vec<f64>,
    pub goal: Goal,
    pub params: FunnelParams,
    pub seed: u64,
    pub threads: usize,
    pub integration: IntegrationConfig,
    pub solver: SolverOptions,
}

impl FunnelSpec {
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.grid.len() < 2 {
            return bad(format!("time grid needs at least 2 points, got {}", self.grid.len()));
        }
        if self.grid.windows(2).any(|w| !(w[1] > w[0])) || self.grid.iter().any(|t| !t.is_finite()) {
            return bad("time grid must be finite and strictly increasing".into());
        }
        if !(p.c > 1.0 && p.c.is_finite()) {
            return bad(format!("c must exceed 1, got {}", p.c));
        }
        for (name, g) in [("gamma1", p.gamma1), ("gamma2", p.gamma2)] {
            if !(g > 0.0 && g < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {g}"));
            }
        }
        if p.tau1 == 0 || p.tau2 == 0 || p.derivative_samples == 0 {
            return bad("tau1, tau2 and derivative_samples must be positive".into());
        }
        if !(p.strictness >= 0.0 && p.strictness.is_finite()) {
            return bad(format!("strictness must be non-negative, got {}", p.strictness));
        }
        if self.field.dim() != self.shape.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.shape.dim(),
                actual: self.field.dim(),
            });
        }
        if self.goal.center.len() != self.shape.dim() || self.goal.matrix.nrows() != self.shape.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.shape.dim(),
                actual: self.goal.center.len(),
            });
        }
        if !(self.goal.level > 0.0) {
            return bad(format!("goal level must be positive, got {}", self.goal.level));
        }
        self.integration.validate()
    }

    fn multistart(&self, stream: u64, restarts: usize) -> MultistartOptions {
        MultistartOptions {
            restarts,
            stall_limit: None,
            threads: self.threads.max(1),
            master_seed: self.seed,
            stream,
            solver: self.solver,
        }
    }

    /// Derivative-check sample times in `(t_k, t_{k+1}]`.
    pub fn sample_times(&self, k: usize) -> Vec<f64> {
        let (a, b) = (self.grid[k], self.grid[k + 1]);
        let m = self.params.derivative_samples;
        (1..=m).map(|j| if j == m { b } else { a + (b - a) * j as f64 / m as f64 }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Reach = 1,
    Derivative = 2,
    AuditReach = 3,
    AuditDerivative = 4,
}

fn stream_id(k: usize, phase: Phase, sample: usize, round: usize) -> u64 {
    stream_seed(k as u64, ((phase as u64) << 32) | sample as u64, round as u64)
}

/// Ellipsoid frame at one time: `x = c + √ρ · L⁻ᵀ z`.
struct Frame {
    t: f64,
    s: Matrix,
    l: Matrix,
    center: Vector,
}

impl Frame {
    fn new(shape: &QuadraticShape, t: f64) -> Result<Self> {
        let s = shape.s(t)?;
        let l = chol_lower(&s)?;
        Ok(Self {
            t,
            s,
            l,
            center: shape.center(t)?,
        })
    }

    fn to_state(&self, z: &Vector, rho: f64) -> Vector {
        &self.center + backward_subst_transposed(&self.l, z) * rho.sqrt()
    }

    fn to_frame(&self, x: &Vector, rho: f64) -> Vector {
        // z = Lᵀ (x − c) / √ρ
        self.l.transpose() * (x - &self.center) / rho.sqrt()
    }

    /// `∂/∂z` of a function with x-gradient `g`.
    fn pull_back(&self, g: &Vector, rho: f64) -> Vector {
        forward_subst(&self.l, g) * rho.sqrt()
    }

    fn level(&self, x: &Vector) -> f64 {
        let d = x - &self.center;
        d.dot(&(&self.s * &d))
    }
}

/// `P(Σ(x), t_{k+1})` and its x-gradient; `None` when the flow escapes.
fn reach_value(spec: &FunnelSpec, from: &Frame, to: &Frame, x: &Vector, gradient: bool) -> Option<(f64, Vector)> {
    if gradient {
        let (end, phi) = flow_sensitivity(&spec.field, x, from.t, to.t, &spec.integration).ok()?;
        let d = &end - &to.center;
        let sd = &to.s * &d;
        let v = d.dot(&sd);
        v.is_finite().then(|| (v, phi.transpose() * sd * 2.0))
    } else {
        let end = flow(&spec.field, x, from.t, to.t, &spec.integration).ok()?;
        let v = to.level(&end);
        v.is_finite().then(|| (v, Vector::zeros(0)))
    }
}

fn nan_pair(n: usize) -> (f64, Vector) {
    (f64::NAN, Vector::from_element(n, f64::NAN))
}

/// One solve of the reach NLP: `max P(Σ(x), t_{k+1})` s.t. `P(x, t_k) ≤ ρ_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachProbe {
    pub x: Vector,
    /// `P(Σ(x), t_{k+1})`; `+∞` when the flow escapes.
    pub value: f64,
    pub counterexample: bool,
}

struct Interval {
    from: Frame,
    to: Frame,
}

impl Interval {
    fn new(spec: &FunnelSpec, k: usize) -> Result<Self> {
        Ok(Self {
            from: Frame::new(&spec.shape, spec.grid[k])?,
            to: Frame::new(&spec.shape, spec.grid[k + 1])?,
        })
    }
}

fn reach_problem<'a>(spec: &'a FunnelSpec, iv: &'a Interval, rho_k: f64, rho_next: f64) -> NlpProblem<'a> {
    let n = spec.shape.dim();
    NlpProblem::new(n, Sense::Maximize, move |z: &Vector| {
        let x = iv.from.to_state(z, rho_k);
        match reach_value(spec, &iv.from, &iv.to, &x, true) {
            Some((v, g)) => (v / rho_next, iv.from.pull_back(&g, rho_k) / rho_next),
            None => nan_pair(n),
        }
    })
    .subject_to(Constraint::scalar(ConstraintKind::Inequality, |z: &Vector| (z.norm_squared() - 1.0, z * 2.0)))
}

fn probe_reach(spec: &FunnelSpec, iv: &Interval, rho_k: f64, rho_next: f64, rng: &mut StreamRng) -> ReachProbe {
    let n = spec.shape.dim();
    let z0 = sample_unit_ball(n, Placement::Interior, rng);
    let problem = reach_problem(spec, iv, rho_k, rho_next);
    let mut z = match solve_local(&problem, &z0, &spec.solver) {
        Ok(r) => r.x,
        Err(_) => z0.clone(),
    };
    let norm = z.norm();
    if norm > 1.0 {
        z /= norm;
    }
    let x = iv.from.to_state(&z, rho_k);
    let value = reach_value(spec, &iv.from, &iv.to, &x, false).map_or(f64::INFINITY, |(v, _)| v);
    ReachProbe {
        counterexample: value > rho_next,
        x,
        value,
    }
}

/// Largest `ρ` with `{P(x, T) ≤ ρ} ⊆ 𝒢`.
pub fn goal_level(shape: &QuadraticShape, t_final: f64, goal: &Goal) -> Result<f64> {
    let s = shape.s(t_final)?;
    let center = shape.center(t_final)?;
    let d = &center - &goal.center;
    let inside = d.dot(&(&goal.matrix * &d));
    if !(inside < goal.level) {
        return Err(Error::GoalExcludesTrajectoryEnd {
            value: inside,
            level: goal.level,
        });
    }
    let concentric = goal.level / gen_eig_max(&goal.matrix, &s)?;
    if d.amax() == 0.0 {
        return Ok(concentric);
    }
    let l = chol_lower(&s)?;
    let contained = |rho: f64| -> Result<bool> { Ok(max_goal_value(&goal.matrix, &l, &d, rho)? <= goal.level) };
    // offset centers only shrink the admissible level
    let (mut lo, mut hi) = (0.0, concentric);
    if contained(hi)? {
        return Ok(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if contained(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(lo)
}

/// `max (d + Δ)ᵀ Q (d + Δ)` over `Δᵀ S Δ ≤ ρ`, with `L Lᵀ = S`.
fn max_goal_value(q: &Matrix, l: &Matrix, d: &Vector, rho: f64) -> Result<f64> {
    // Δ = √ρ L⁻ᵀ z, ‖z‖ ≤ 1: maximize zᵀAz + 2bᵀz + dᵀQd; convex, so the max is on ‖z‖ = 1
    let n = q.nrows();
    let a = whiten(q, l) * rho;
    let b = forward_subst(l, &(q * d)) * rho.sqrt();
    let eig = sym_eigen(&a)?;
    let lam = &eig.values;
    let beta = eig.vectors.transpose() * &b;
    let top = lam[n - 1];
    let scale = top.abs().max(1e-300);
    let tie = |i: usize| top - lam[i] <= 1e-13 * scale;
    let norm_at = |mu: f64| -> f64 {
        (0..n).map(|i| (beta[i] / (mu - lam[i])).powi(2)).sum::<f64>()
    };
    let const_part = d.dot(&(q * d));
    let value = |zc: &Vector| zc.dot(&(lam.component_mul(zc))) + 2.0 * beta.dot(zc) + const_part;

    let top_weight: f64 = (0..n).filter(|&i| tie(i)).map(|i| beta[i] * beta[i]).sum();
    let rest: f64 = (0..n).filter(|&i| !tie(i)).map(|i| (beta[i] / (top - lam[i])).powi(2)).sum();
    if top_weight <= 1e-28 * b.norm_squared().max(1e-300) && rest <= 1.0 {
        // hard case: fill the remainder along the top eigenvector
        let mut zc = Vector::from_fn(n, |i, _| if tie(i) { 0.0 } else { beta[i] / (top - lam[i]) });
        let first = (0..n).find(|&i| tie(i)).expect("top eigenvalue present");
        zc[first] = (1.0 - rest).max(0.0).sqrt();
        return Ok(value(&zc));
    }
    // secular equation ‖(μ − Λ)⁻¹ β‖ = 1 for μ > λ_max, decreasing in μ
    let mut lo = top;
    let mut hi = top + b.norm() + 1e-300;
    while norm_at(hi) > 1.0 {
        hi = top + 2.0 * (hi - top);
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if norm_at(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let zc = Vector::from_fn(n, |i, _| beta[i] / (hi - lam[i]));
    Ok(value(&zc))
}

/// One multistart iterate of the reach NLP from an interior sample.
pub fn falsify_reach(spec: &FunnelSpec, k: usize, rho_k: f64, rho_next: f64, rng: &mut StreamRng) -> Result<ReachProbe> {
    check_interval(spec, k)?;
    let iv = Interval::new(spec, k)?;
    Ok(probe_reach(spec, &iv, rho_k, rho_next, rng))
}

fn check_interval(spec: &FunnelSpec, k: usize) -> Result<()> {
    if k + 1 >= spec.grid.len() {
        return Err(Error::InvalidParameter(format!(
            "interval {k} outside grid of {} points",
            spec.grid.len()
        )));
    }
    Ok(())
}

/// `min P(x, t_k)` s.t. `P(Σ(x), t_{k+1}) ≥ ρ_{k+1}` from the counterexample
/// `start`; returns `γ₁ · P(x′, t_k)`.
pub fn shrink_reach(spec: &FunnelSpec, k: usize, rho_k: f64, rho_next: f64, start: &Vector) -> Result<f64> {
    check_interval(spec, k)?;
    let iv = Interval::new(spec, k)?;
    shrink_in(spec, &iv, rho_k, rho_next, start)
}

fn shrink_in(spec: &FunnelSpec, iv: &Interval, rho_k: f64, rho_next: f64, start: &Vector) -> Result<f64> {
    let n = spec.shape.dim();
    let gamma1 = spec.params.gamma1;
    let exits = |x: &Vector| reach_value(spec, &iv.from, &iv.to, x, false).map(|(v, _)| v);
    let mut z_start = iv.from.to_frame(start, rho_k);
    match exits(start) {
        Some(v) => {
            let violation = 1.0 - v / rho_next;
            if violation > spec.solver.tol {
                return Err(Error::InfeasibleStart { violation });
            }
        }
        None => {
            // escaped flow: pull back along the ray to a finite exiting point
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let x = iv.from.to_state(&(&z_start * mid), rho_k);
                match exits(&x) {
                    Some(v) if v < rho_next => lo = mid,
                    _ => hi = mid,
                }
            }
            let zh = &z_start * hi;
            if exits(&iv.from.to_state(&zh, rho_k)).is_none() {
                return Ok(gamma1 * rho_k * zh.norm_squared().min(1.0));
            }
            z_start = zh;
        }
    }
    let best_start = rho_k * z_start.norm_squared();
    let problem = NlpProblem::new(n, Sense::Minimize, |z: &Vector| (z.norm_squared(), z * 2.0)).subject_to(
        Constraint::scalar(ConstraintKind::Inequality, |z: &Vector| {
            let x = iv.from.to_state(z, rho_k);
            match reach_value(spec, &iv.from, &iv.to, &x, true) {
                Some((v, g)) => (1.0 - v / rho_next, -iv.from.pull_back(&g, rho_k) / rho_next),
                None => nan_pair(n),
            }
        }),
    );
    let mut level = best_start;
    if let Ok(r) = solve_local(&problem, &z_start, &spec.solver) {
        let x = iv.from.to_state(&r.x, rho_k);
        if let Some(v) = exits(&x) {
            let candidate = rho_k * r.x.norm_squared();
            if v >= rho_next * (1.0 - 1e-9) && candidate < level {
                level = candidate;
            }
        }
    }
    Ok((gamma1 * level).min(gamma1 * rho_k))
}

fn dc_problem<'a>(spec: &'a FunnelSpec, frame: &'a Frame, level: f64) -> NlpProblem<'a> {
    let n = spec.shape.dim();
    NlpProblem::new(n, Sense::Maximize, move |z: &Vector| {
        let x = frame.to_state(z, level);
        match spec.shape.rate_with_gradient(&spec.field, &x, frame.t) {
            Ok((v, g)) if v.is_finite() => (v / level, frame.pull_back(&g, level) / level),
            _ => nan_pair(n),
        }
    })
    .subject_to(Constraint::scalar(ConstraintKind::Equality, |z: &Vector| (z.norm_squared() - 1.0, z * 2.0)))
}

/// `max Ṗ` on `{P = level}` at the frame time from one boundary sample.
fn probe_rate(spec: &FunnelSpec, frame: &Frame, level: f64, rng: &mut StreamRng) -> f64 {
    let n = spec.shape.dim();
    let z0 = sample_unit_ball(n, Placement::Boundary, rng);
    let problem = dc_problem(spec, frame, level);
    let mut z = match solve_local(&problem, &z0, &spec.solver) {
        Ok(r) => r.x,
        Err(_) => z0,
    };
    let norm = z.norm();
    if norm > 0.0 {
        z /= norm;
    }
    let x = frame.to_state(&z, level);
    spec.shape.rate(&spec.field, &x, frame.t).unwrap_or(f64::INFINITY)
}

fn rho_interp(t: f64, t0: f64, t1: f64, r0: f64, r1: f64) -> f64 {
    if t == t1 {
        r1
    } else {
        r0 + (r1 - r0) * (t - t0) / (t1 - t0)
    }
}

/// Per-interval bookkeeping of a synthesis run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntervalStats {
    pub reach_solves: usize,
    pub reach_counterexamples: usize,
    pub derivative_solves: usize,
    pub derivative_counterexamples: usize,
}

/// Applies the derivative check to `ρ_k`; returns the accepted level.
pub fn derivative_check(spec: &FunnelSpec, k: usize, rho_k: f64, rho_next: f64) -> Result<(f64, IntervalStats)> {
    check_interval(spec, k)?;
    let mut stats = IntervalStats::default();
    let rho = dc_loop(spec, k, rho_k, rho_next, &mut stats)?;
    Ok((rho, stats))
}

fn dc_loop(spec: &FunnelSpec, k: usize, mut rho_k: f64, rho_next: f64, stats: &mut IntervalStats) -> Result<f64> {
    let (t0, t1) = (spec.grid[k], spec.grid[k + 1]);
    let samples = spec.sample_times(k);
    let frames = samples.iter().map(|&t| Frame::new(&spec.shape, t)).collect::<Result<Vec<_>>>()?;
    let mut round = 0;
    'restart: loop {
        let slope = (rho_next - rho_k) / (t1 - t0);
        let threshold = slope - spec.params.strictness;
        for (j, frame) in frames.iter().enumerate() {
            let level = rho_interp(frame.t, t0, t1, rho_k, rho_next);
            let opts = spec.multistart(stream_id(k, Phase::Derivative, j, round), spec.params.tau2);
            let out = multistart_with(
                &opts,
                |_, rng| probe_rate(spec, frame, level, rng),
                |a: &f64, b: &f64| a > b,
                |v: &f64| *v > threshold,
            );
            stats.derivative_solves += out.solves;
            if out.incumbent.is_some_and(|v| v > threshold) {
                stats.derivative_counterexamples += 1;
                rho_k *= spec.params.gamma2;
                if rho_k < RHO_FLOOR {
                    return Err(Error::RhoUnderflow { k, rho: rho_k });
                }
                round += 1;
                continue 'restart;
            }
        }
        return Ok(rho_k);
    }
}

fn reach_loop(spec: &FunnelSpec, k: usize, mut rho_k: f64, rho_next: f64, stats: &mut IntervalStats) -> Result<f64> {
    let iv = Interval::new(spec, k)?;
    let mut round = 0;
    loop {
        let opts = spec.multistart(stream_id(k, Phase::Reach, 0, round), spec.params.tau1);
        let out = multistart_with(
            &opts,
            |_, rng| probe_reach(spec, &iv, rho_k, rho_next, rng),
            |a: &ReachProbe, b: &ReachProbe| a.value > b.value,
            |p: &ReachProbe| p.counterexample,
        );
        stats.reach_solves += out.solves;
        let Some(ce) = out.incumbent.filter(|p| p.counterexample) else {
            return Ok(rho_k);
        };
        stats.reach_counterexamples += 1;
        let next = shrink_in(spec, &iv, rho_k, rho_next, &ce.x).map_err(|e| Error::Synthesis {
            k,
            nlp: "shrink (NLP2)",
            source: Box::new(e),
        })?;
        rho_k = next.min(rho_k * spec.params.gamma1);
        if rho_k < RHO_FLOOR {
            return Err(Error::RhoUnderflow { k, rho: rho_k });
        }
        round += 1;
    }
}

/// Synthesized funnel `{P(x, t) ≤ ρᴵ(t)}`.
#[derive(Debug, Clone)]
pub struct Funnel {
    pub times: Vec<f64>,
    pub rho: Vec<f64>,
    pub shape: QuadraticShape,
    /// Indexed by interval k (between `times[k]` and `times[k + 1]`).
    pub stats: Vec<IntervalStats>,
}

impl Funnel {
    pub fn from_levels(times: Vec<f64>, rho: Vec<f64>, shape: QuadraticShape) -> Result<Self> {
        if times.len() != rho.len() || times.is_empty() {
            return Err(Error::InvalidParameter("funnel needs one level per time".into()));
        }
        if rho.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidParameter("funnel levels must be positive".into()));
        }
        let stats = vec![IntervalStats::default(); times.len().saturating_sub(1)];
        Ok(Self { times, rho, shape, stats })
    }

    /// Piecewise linear `ρᴵ(t)`; exact at the samples.
    pub fn rho_at(&self, t: f64) -> Result<f64> {
        let (a, b) = (self.times[0], *self.times.last().expect("non-empty"));
        if !(t >= a && t <= b) {
            return Err(Error::OutOfDomain { t, start: a, end: b });
        }
        match self.times.binary_search_by(|p| p.total_cmp(&t)) {
            Ok(i) => Ok(self.rho[i]),
            Err(i) => {
                let i = i - 1;
                Ok(rho_interp(t, self.times[i], self.times[i + 1], self.rho[i], self.rho[i + 1]))
            }
        }
    }

    pub fn contains(&self, x: &Vector, t: f64) -> Result<bool> {
        Ok(self.shape.value(x, t)? <= self.rho_at(t)?)
    }

    /// `V_n ρᵢ^{n/2} / √det S(tᵢ)` at each sample.
    pub fn cross_section_volumes(&self) -> Result<Vec<f64>> {
        let n = self.shape.dim();
        let vn = unit_ball_volume(n);
        self.times
            .iter()
            .zip(&self.rho)
            .map(|(&t, &r)| {
                let ld = log_det_spd(&self.shape.s(t)?)?;
                Ok(vn * (0.5 * n as f64 * r.ln() - 0.5 * ld).exp())
            })
            .collect()
    }

    /// CSV with header `t,rho,cross_section_volume`.
    pub fn to_csv(&self) -> Result<String> {
        let vols = self.cross_section_volumes()?;
        let mut out = String::from("t,rho,cross_section_volume\n");
        for ((t, r), v) in self.times.iter().zip(&self.rho).zip(vols) {
            let _ = writeln!(out, "{t:.16e},{r:.16e},{v:.16e}");
        }
        Ok(out)
    }

    pub fn counterexample_counts(&self) -> Vec<usize> {
        self.stats
            .iter()
            .map(|s| s.reach_counterexamples + s.derivative_counterexamples)
            .collect()
    }
}

/// Volume of the unit ball in ℝⁿ.
pub fn unit_ball_volume(n: usize) -> f64 {
    let (mut v, start) = if n % 2 == 0 { (1.0, 2) } else { (2.0, 3) };
    let mut k = start;
    while k <= n {
        v *= 2.0 * std::f64::consts::PI / k as f64;
        k += 2;
    }
    v
}

/// `(Σρᵢ, ∫ vol(F(t)) dt)` with the time integral by the trapezoid rule.
pub fn funnel_volume(f: &Funnel) -> Result<(f64, f64)> {
    let vols = f.cross_section_volumes()?;
    let sum = f.rho.iter().sum();
    let integral = f
        .times
        .windows(2)
        .zip(vols.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum();
    Ok((sum, integral))
}

/// Backward sweep computing `ρ_N, …, ρ_1`.
pub fn synthesize(spec: &FunnelSpec) -> Result<Funnel> {
    spec.validate()?;
    let n_pts = spec.grid.len();
    let t_final = spec.grid[n_pts - 1];
    let mut rho = vec![0.0; n_pts];
    rho[n_pts - 1] = goal_level(&spec.shape, t_final, &spec.goal)?;
    let mut stats = vec![IntervalStats::default(); n_pts - 1];
    for k in (0..n_pts - 1).rev() {
        let st = &mut stats[k];
        let initial = spec.params.c * rho[k + 1];
        let mut rk = reach_loop(spec, k, initial, rho[k + 1], st).map_err(|e| wrap(k, "reach (NLP1)", e))?;
        if spec.params.derivative_check {
            rk = dc_loop(spec, k, rk, rho[k + 1], st).map_err(|e| wrap(k, "derivative check (NLP3)", e))?;
        }
        rho[k] = rk;
    }
    Ok(Funnel {
        times: spec.grid.clone(),
        rho,
        shape: spec.shape.clone(),
        stats,
    })
}

fn wrap(k: usize, nlp: &'static str, e: Error) -> Error {
    match e {
        Error::Synthesis { .. } | Error::RhoUnderflow { .. } => e,
        other => Error::Synthesis {
            k,
            nlp,
            source: Box::new(other),
        },
    }
}

/// Counterexamples found by the a-posteriori audit on one interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditRecord {
    pub k: usize,
    pub reach_solves: usize,
    pub reach_counterexamples: usize,
    pub derivative_solves: usize,
    pub derivative_counterexamples: usize,
}

impl AuditRecord {
    pub fn clean(&self) -> bool {
        self.reach_counterexamples == 0 && self.derivative_counterexamples == 0
    }
}

/// Re-runs `solves` falsification solves per interval on an accepted funnel,
/// with streams disjoint from synthesis. The derivative condition is audited
/// only when the spec enables the derivative check.
pub fn audit(spec: &FunnelSpec, funnel: &Funnel, solves: usize) -> Result<Vec<AuditRecord>> {
    spec.validate()?;
    let mut records = Vec::new();
    for k in 0..funnel.times.len() - 1 {
        let (r0, r1) = (funnel.rho[k], funnel.rho[k + 1]);
        let iv = Interval::new(spec, k)?;
        let hits = Cell::new(0usize);
        let opts = spec.multistart(stream_id(k, Phase::AuditReach, 0, 0), solves);
        let out = multistart_with(
            &opts,
            |_, rng| probe_reach(spec, &iv, r0, r1, rng),
            |_, _| false,
            |p: &ReachProbe| {
                hits.set(hits.get() + p.counterexample as usize);
                false
            },
        );
        let mut rec = AuditRecord {
            k,
            reach_solves: out.solves,
            reach_counterexamples: hits.get(),
            derivative_solves: 0,
            derivative_counterexamples: 0,
        };
        if spec.params.derivative_check {
            let (t0, t1) = (spec.grid[k], spec.grid[k + 1]);
            let threshold = (r1 - r0) / (t1 - t0) - spec.params.strictness;
            for (j, t) in spec.sample_times(k).into_iter().enumerate() {
                let frame = Frame::new(&spec.shape, t)?;
                let level = rho_interp(t, t0, t1, r0, r1);
                let hits = Cell::new(0usize);
                let opts = spec.multistart(stream_id(k, Phase::AuditDerivative, j, 0), solves);
                let out = multistart_with(
                    &opts,
                    |_, rng| probe_rate(spec, &frame, level, rng),
                    |_, _| false,
                    |v: &f64| {
                        hits.set(hits.get() + (*v > threshold) as usize);
                        false
                    },
                );
                rec.derivative_solves += out.solves;
                rec.derivative_counterexamples += hits.get();
            }
        }
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlpsolve::stream_rng;

    fn scalar_spec(a: f64, grid: Vec<f64>) -> FunnelSpec {
        FunnelSpec {
            field: VectorField::linear(Matrix::from_element(1, 1, a)),
            shape: QuadraticShape::constant(Matrix::identity(1, 1), Vector::zeros(1)).unwrap(),
            grid,
            goal: Goal {
                center: Vector::zeros(1),
                matrix: Matrix::identity(1, 1),
                level: 1.0,
            },
            params: FunnelParams::default(),
            seed: 11,
            threads: 1,
            integration: IntegrationConfig::default(),
            solver: SolverOptions::default(),
        }
    }

    #[test]
    fn goal_level_scaling() {
        let shape = QuadraticShape::constant(Matrix::identity(2, 2) * 2.0, Vector::zeros(2)).unwrap();
        let goal = Goal {
            center: Vector::zeros(2),
            matrix: Matrix::identity(2, 2),
            level: 1.0,
        };
        assert!((goal_level(&shape, 1.0, &goal).unwrap() - 2.0).abs() < 1e-12);
        let shape = QuadraticShape::constant(Matrix::identity(2, 2), Vector::zeros(2)).unwrap();
        let goal = Goal { level: 0.0025, ..goal };
        assert!((goal_level(&shape, 1.0, &goal).unwrap() - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn goal_level_offset_circle() {
        // unit-disk goal, shape disk of radius r centered at 0.5: r = 0.5 fits
        let shape = QuadraticShape::constant(Matrix::identity(2, 2), Vector::from_column_slice(&[0.5, 0.0])).unwrap();
        let goal = Goal {
            center: Vector::zeros(2),
            matrix: Matrix::identity(2, 2),
            level: 1.0,
        };
        let rho = goal_level(&shape, 0.0, &goal).unwrap();
        assert!((rho - 0.25).abs() < 1e-12, "{rho}");
    }

    #[test]
    fn goal_excluding_end_is_an_error() {
        let shape = QuadraticShape::constant(Matrix::identity(1, 1), Vector::from_element(1, 2.0)).unwrap();
        let goal = Goal {
            center: Vector::zeros(1),
            matrix: Matrix::identity(1, 1),
            level: 1.0,
        };
        assert!(matches!(goal_level(&shape, 0.0, &goal), Err(Error::GoalExcludesTrajectoryEnd { .. })));
    }

    #[test]
    fn identity_flow_has_no_counterexample() {
        let spec = scalar_spec(0.0, vec![0.0, 0.1]);
        let mut rng = stream_rng(1, 0, 0);
        for _ in 0..5 {
            let p = falsify_reach(&spec, 0, 0.9, 1.0, &mut rng).unwrap();
            assert!(!p.counterexample);
            assert!(p.value <= 0.9 + 1e-9);
        }
        let r = shrink_reach(&spec, 0, 1.5, 1.0, &Vector::from_element(1, 1.2)).unwrap();
        assert!((r - 0.9999).abs() < 1e-7, "{r}");
    }

    #[test]
    fn decay_reach_threshold() {
        // ẋ = −x: counterexample iff ρ_k > e^{2h} ρ_{k+1}
        let h: f64 = 0.1;
        let spec = scalar_spec(-1.0, vec![0.0, h]);
        let cap = (2.0 * h).exp();
        let mut rng = stream_rng(2, 0, 0);
        assert!(falsify_reach(&spec, 0, cap * 1.001, 1.0, &mut rng).unwrap().counterexample);
        assert!(!falsify_reach(&spec, 0, cap * 0.999, 1.0, &mut rng).unwrap().counterexample);
        let r = shrink_reach(&spec, 0, 1.5, 1.0, &Vector::from_element(1, 1.2)).unwrap();
        assert!((r - 0.9999 * cap).abs() < 1e-7 * cap, "{r}");
    }

    #[test]
    fn decay_derivative_cap() {
        let spec = scalar_spec(-1.0, vec![0.0, 0.1]);
        let (r, stats) = derivative_check(&spec, 0, 1.2214, 1.0).unwrap();
        assert!(r <= 1.2 && r > 1.2 * 0.999, "{r}");
        let bound = ((1.2f64 / 1.2214).ln() / 0.999f64.ln()).ceil() as usize;
        assert!(stats.derivative_counterexamples <= bound);
    }

    #[test]
    fn zero_field_derivative_check_is_inert() {
        let spec = scalar_spec(0.0, vec![0.0, 0.1]);
        let (r, stats) = derivative_check(&spec, 0, 0.95, 1.0).unwrap();
        assert_eq!(r, 0.95);
        assert_eq!(stats.derivative_counterexamples, 0);
    }

    #[test]
    fn ball_volumes() {
        assert_eq!(unit_ball_volume(0), 1.0);
        assert_eq!(unit_ball_volume(1), 2.0);
        assert!((unit_ball_volume(2) - std::f64::consts::PI).abs() < 1e-15);
        assert!((unit_ball_volume(3) - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-14);
    }

    #[test]
    fn volume_homogeneity() {
        let shape = QuadraticShape::constant(Matrix::identity(2, 2), Vector::zeros(2)).unwrap();
        let f = Funnel::from_levels(vec![0.0, 0.5, 1.0], vec![1.0; 3], shape.clone()).unwrap();
        let (sum, vol) = funnel_volume(&f).unwrap();
        assert_eq!(sum, 3.0);
        assert!((vol - std::f64::consts::PI).abs() < 1e-12);
        let f4 = Funnel::from_levels(vec![0.0, 0.5, 1.0], vec![4.0; 3], shape).unwrap();
        assert!((funnel_volume(&f4).unwrap().1 - 4.0 * vol).abs() < 1e-12);
        let s4 = QuadraticShape::constant(Matrix::identity(2, 2) * 4.0, Vector::zeros(2)).unwrap();
        let g = Funnel::from_levels(vec![0.0, 0.5, 1.0], vec![1.0; 3], s4).unwrap();
        assert!((funnel_volume(&g).unwrap().1 - vol / 4.0).abs() < 1e-12);
    }

    #[test]
    fn rho_interpolation_exact_at_knots() {
        let shape = QuadraticShape::constant(Matrix::identity(1, 1), Vector::zeros(1)).unwrap();
        let f = Funnel::from_levels(vec![0.0, 0.1, 0.3], vec![0.7, 0.3, 0.1], shape).unwrap();
        for (t, r) in f.times.clone().iter().zip(f.rho.clone()) {
            assert_eq!(f.rho_at(*t).unwrap(), r);
        }
        assert!((f.rho_at(0.2).unwrap() - 0.2).abs() < 1e-15);
    }
}
