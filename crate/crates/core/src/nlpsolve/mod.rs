//! Smooth constrained NLPs: local augmented-Lagrangian solver, ellipsoid
//! sampling and seeded multi-start orchestration.

mod local;
mod multistart;
mod sampling;
mod sqp;

pub use local::{solve_local, SolverOptions};
pub use multistart::{multistart, multistart_with, relative_improvement, MultistartOptions, MultistartOutcome};
pub use sqp::solve_sqp;
pub use sampling::{sample_ellipsoid, sample_unit_ball, stream_rng, stream_seed, Placement, StreamRng};

use std::fmt;

use crate::numkernel::{Matrix, Vector};

/// Scalar callback returning value and gradient.
pub type ScalarFn<'a> = Box<dyn Fn(&Vector) -> (f64, Vector) + Send + Sync + 'a>;
/// Vector callback returning values and the Jacobian (one row per value).
pub type BlockFn<'a> = Box<dyn Fn(&Vector) -> (Vector, Matrix) + Send + Sync + 'a>;
/// Hessian of `f + Σ λᵢ cᵢ` (objective in minimization form) at `(x, λ)`.
pub type HessianFn<'a> = Box<dyn Fn(&Vector, &[f64]) -> Matrix + Send + Sync + 'a>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// `g(x) ≤ 0`
    Inequality,
    /// `h(x) = 0`
    Equality,
}

/// A block of constraints of one kind.
pub struct Constraint<'a> {
    pub kind: ConstraintKind,
    pub count: usize,
    pub func: BlockFn<'a>,
}

impl<'a> Constraint<'a> {
    pub fn scalar<F>(kind: ConstraintKind, f: F) -> Self
    where
        F: Fn(&Vector) -> (f64, Vector) + Send + Sync + 'a,
    {
        Self {
            kind,
            count: 1,
            func: Box::new(move |x| {
                let (v, g) = f(x);
                (Vector::from_element(1, v), Matrix::from_row_slice(1, g.len(), g.as_slice()))
            }),
        }
    }

    pub fn block<F>(kind: ConstraintKind, count: usize, f: F) -> Self
    where
        F: Fn(&Vector) -> (Vector, Matrix) + Send + Sync + 'a,
    {
        Self {
            kind,
            count,
            func: Box::new(f),
        }
    }
}

pub struct NlpProblem<'a> {
    pub dim: usize,
    pub objective: ScalarFn<'a>,
    pub sense: Sense,
    pub constraints: Vec<Constraint<'a>>,
    pub hessian: Option<HessianFn<'a>>,
}

impl fmt::Debug for NlpProblem<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NlpProblem")
            .field("dim", &self.dim)
            .field("sense", &self.sense)
            .field("constraints", &self.constraints.iter().map(|c| (c.kind, c.count)).collect::<Vec<_>>())
            .finish()
    }
}

impl<'a> NlpProblem<'a> {
    pub fn new<F>(dim: usize, sense: Sense, objective: F) -> Self
    where
        F: Fn(&Vector) -> (f64, Vector) + Send + Sync + 'a,
    {
        Self {
            dim,
            objective: Box::new(objective),
            sense,
            constraints: Vec::new(),
            hessian: None,
        }
    }

    pub fn subject_to(mut self, c: Constraint<'a>) -> Self {
        self.constraints.push(c);
        self
    }

    pub fn with_lagrangian_hessian<H>(mut self, h: H) -> Self
    where
        H: Fn(&Vector, &[f64]) -> Matrix + Send + Sync + 'a,
    {
        self.hessian = Some(Box::new(h));
        self
    }

    pub fn constraint_count(&self) -> usize {
        self.constraints.iter().map(|c| c.count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlpStatus {
    Converged,
    IterationLimit,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpResult {
    pub x: Vector,
    /// Objective in the problem's own sense (not negated for maximization).
    pub objective: f64,
    pub status: NlpStatus,
    pub kkt_residual: f64,
    pub violation: f64,
    /// Multipliers, one per constraint row, in declaration order.
    pub multipliers: Vec<f64>,
    pub evaluations: usize,
}

impl NlpResult {
    pub fn converged(&self) -> bool {
        self.status == NlpStatus::Converged
    }
}
