use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;

use super::local::{solve_local, SolverOptions};
use super::sampling::{stream_rng, StreamRng};
use super::{NlpProblem, NlpResult, NlpStatus, Sense};
use crate::numkernel::Vector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultistartOptions {
    /// Upper bound on the number of restarts.
    pub restarts: usize,
    /// Stop after this many consecutive restarts that leave the incumbent unchanged.
    pub stall_limit: Option<usize>,
    pub threads: usize,
    pub master_seed: u64,
    /// Distinguishes independent uses of the same master seed.
    pub stream: u64,
    pub solver: SolverOptions,
}

impl Default for MultistartOptions {
    fn default() -> Self {
        Self {
            restarts: 20,
            stall_limit: None,
            threads: 1,
            master_seed: 0,
            stream: 0,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultistartOutcome<T> {
    pub incumbent: Option<T>,
    /// Restarts whose result was examined, in index order.
    pub solves: usize,
    /// Restart indices at which the incumbent was replaced.
    pub improved_at: Vec<usize>,
    pub stopped_early: bool,
}

impl<T> MultistartOutcome<T> {
    pub fn improvements(&self) -> usize {
        self.improved_at.len()
    }
}

/// True when `new` beats `old` by more than a relative 1e-10 in the given sense.
pub fn relative_improvement(new: f64, old: f64, sense: Sense) -> bool {
    let margin = 1e-10 * old.abs().max(1e-300);
    match sense {
        Sense::Minimize => new < old - margin,
        Sense::Maximize => new > old + margin,
    }
}

/// Runs `trial(i, rng_i)` for i in 0..restarts and folds results in index order.
///
/// Restarts are evaluated in batches of `threads`, but the fold (and the early
/// stop) only ever looks at results in index order, so the outcome does not
/// depend on the thread count.
pub fn multistart_with<T, F, B, S>(opts: &MultistartOptions, trial: F, is_better: B, stop: S) -> MultistartOutcome<T>
where
    T: Send,
    F: Fn(usize, &mut StreamRng) -> T + Sync,
    B: Fn(&T, &T) -> bool,
    S: Fn(&T) -> bool,
{
    let threads = opts.threads.max(1);
    let mut out = MultistartOutcome {
        incumbent: None,
        solves: 0,
        improved_at: Vec::new(),
        stopped_early: false,
    };
    let run = |i: usize| {
        let mut rng = stream_rng(opts.master_seed, opts.stream, i as u64);
        trial(i, &mut rng)
    };
    let mut stalls = 0;
    let mut start = 0;
    while start < opts.restarts {
        let end = (start + threads).min(opts.restarts);
        let batch: Vec<T> = if threads == 1 || end - start == 1 {
            (start..end).map(&run).collect()
        } else {
            thread::scope(|scope| {
                let handles: Vec<_> = (start..end).map(|i| scope.spawn(move || run(i))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                    .collect()
            })
        };
        for (offset, result) in batch.into_iter().enumerate() {
            let index = start + offset;
            out.solves += 1;
            let halt = stop(&result);
            let replace = match &out.incumbent {
                None => true,
                Some(inc) => is_better(&result, inc),
            };
            if replace {
                out.improved_at.push(index);
                out.incumbent = Some(result);
                stalls = 0;
            } else {
                stalls += 1;
            }
            if halt || opts.stall_limit.is_some_and(|limit| stalls >= limit) {
                out.stopped_early = index + 1 < opts.restarts;
                return out;
            }
        }
        start = end;
    }
    out
}

fn status_rank(s: NlpStatus) -> u8 {
    match s {
        NlpStatus::Converged => 2,
        NlpStatus::IterationLimit => 1,
        NlpStatus::Infeasible => 0,
    }
}

/// Multi-start local solves from sampled initial points.
///
/// Results that failed outright (non-finite start) are skipped. Feasible
/// results are preferred over infeasible ones, then the objective decides.
pub fn multistart<G, S>(problem: &NlpProblem<'_>, sampler: G, opts: &MultistartOptions, stop: S) -> MultistartOutcome<NlpResult>
where
    G: Fn(usize, &mut StreamRng) -> Vector + Sync,
    S: Fn(&NlpResult) -> bool,
{
    let sense = problem.sense;
    let first_failed = AtomicBool::new(false);
    let inner = multistart_with(
        opts,
        |i, rng| {
            let x0 = sampler(i, rng);
            let r = solve_local(problem, &x0, &opts.solver).ok();
            if i == 0 && r.is_none() {
                first_failed.store(true, Ordering::Relaxed);
            }
            r
        },
        |new: &Option<NlpResult>, old: &Option<NlpResult>| match (new, old) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(a), Some(b)) => {
                let (ra, rb) = (status_rank(a.status).min(1), status_rank(b.status).min(1));
                ra > rb || ra == rb && relative_improvement(a.objective, b.objective, sense)
            }
        },
        |r: &Option<NlpResult>| r.as_ref().is_some_and(&stop),
    );
    let mut improved_at = inner.improved_at;
    if first_failed.load(Ordering::Relaxed) {
        // a failed first start is a placeholder, not an incumbent
        improved_at.remove(0);
    }
    MultistartOutcome {
        incumbent: inner.incumbent.flatten(),
        solves: inner.solves,
        improved_at,
        stopped_early: inner.stopped_early,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlpsolve::{sample_unit_ball, Placement};
    use rand::Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    // two wells: f = (x² − 1)² + 0.2x, global minimum near x = −1
    fn wells() -> NlpProblem<'static> {
        NlpProblem::new(1, Sense::Minimize, |x: &Vector| {
            let y = x[0];
            ((y * y - 1.0).powi(2) + 0.2 * y, v(&[4.0 * y * (y * y - 1.0) + 0.2]))
        })
    }

    #[test]
    fn finds_global_well() {
        let p = wells();
        let opts = MultistartOptions {
            restarts: 16,
            ..Default::default()
        };
        let out = multistart(&p, |_, rng| v(&[rng.random_range(-2.0..2.0)]), &opts, |_| false);
        let best = out.incumbent.unwrap();
        assert!(best.x[0] < -0.9);
        assert_eq!(out.solves, 16);
        assert!(!out.stopped_early);
    }

    #[test]
    fn thread_count_does_not_change_outcome() {
        let p = NlpProblem::new(3, Sense::Maximize, |x: &Vector| {
            let f = (3.0 * x[0]).sin() * (2.0 * x[1]).cos() + 0.3 * x[2] - x.norm_squared() * 0.1;
            let g = v(&[
                3.0 * (3.0 * x[0]).cos() * (2.0 * x[1]).cos() - 0.2 * x[0],
                -2.0 * (3.0 * x[0]).sin() * (2.0 * x[1]).sin() - 0.2 * x[1],
                0.3 - 0.2 * x[2],
            ]);
            (f, g)
        });
        let run = |threads| {
            let opts = MultistartOptions {
                restarts: 23,
                threads,
                master_seed: 99,
                ..Default::default()
            };
            multistart(&p, |_, rng| sample_unit_ball(3, Placement::Interior, rng) * 2.0, &opts, |r| r.objective > 1.2)
        };
        let a = run(1);
        for t in [2, 3, 8] {
            let b = run(t);
            assert_eq!(a.solves, b.solves);
            assert_eq!(a.improved_at, b.improved_at);
            assert_eq!(a.incumbent.as_ref().unwrap().x, b.incumbent.as_ref().unwrap().x);
        }
    }

    #[test]
    fn stops_at_first_qualifying_index() {
        let opts = MultistartOptions {
            restarts: 50,
            threads: 4,
            ..Default::default()
        };
        let out = multistart_with(&opts, |i, _| i, |a, b| a > b, |&i| i == 6);
        assert_eq!(out.solves, 7);
        assert!(out.stopped_early);
        assert_eq!(out.incumbent, Some(6));
    }

    #[test]
    fn stall_budget_on_convex_problem() {
        let p = NlpProblem::new(2, Sense::Minimize, |x: &Vector| (x.norm_squared(), x * 2.0));
        let opts = MultistartOptions {
            restarts: 100,
            stall_limit: Some(3),
            threads: 3,
            ..Default::default()
        };
        let out = multistart(&p, |_, rng| sample_unit_ball(2, Placement::Interior, rng) * 5.0, &opts, |_| false);
        assert!(out.solves <= 4, "{}", out.solves);
        assert!(out.incumbent.unwrap().objective < 1e-14);
    }

    #[test]
    fn incumbent_never_worsens() {
        let p = wells();
        let mut last = f64::INFINITY;
        for restarts in 1..12 {
            let opts = MultistartOptions {
                restarts,
                master_seed: 5,
                ..Default::default()
            };
            let out = multistart(&p, |_, rng| v(&[rng.random_range(-2.0..2.0)]), &opts, |_| false);
            let f = out.incumbent.unwrap().objective;
            assert!(f <= last);
            last = f;
        }
    }

    #[test]
    fn improvement_margin() {
        assert!(relative_improvement(1.0 + 1e-6, 1.0, Sense::Maximize));
        assert!(!relative_improvement(1.0 + 1e-12, 1.0, Sense::Maximize));
        assert!(relative_improvement(0.5, 1.0, Sense::Minimize));
    }
}
