//! Turns a resolved config into a funnel problem.

use std::sync::Arc;

use funnel_core::dynamics::{close_loop, make_nlink, make_pendulum, make_quadcopter, ControlSystem, PendulumParams, VectorField};
use funnel_core::funnel::{FunnelSpec, Goal};
use funnel_core::linoracle::volume_matched_level;
use funnel_core::nlpsolve::{MultistartOptions, SolverOptions};
use funnel_core::tracking::{nlink_controller, tvlqr, QuadraticShape};
use funnel_core::trajgen::{collocation_trajectory, constant_trajectory, CollocationOptions, Trajectory};
use funnel_core::{Matrix, Vector};

use crate::config::{ExperimentConfig, GoalConfig, SystemConfig, TrajectoryConfig};
use crate::CliError;

pub struct Experiment {
    pub spec: FunnelSpec,
    /// `A` of `ẋ = A (x − x_eq)` for linear closed loops.
    pub linear: Option<Matrix>,
    pub trajectory: Option<Arc<Trajectory>>,
}

fn compute(e: funnel_core::Error) -> CliError {
    CliError::Synthesis(e.to_string())
}

fn open_loop(system: &SystemConfig) -> Result<Option<ControlSystem>, CliError> {
    let sys = match *system {
        SystemConfig::Pendulum { mass, length, gravity, damping } => make_pendulum(PendulumParams {
            mass,
            length,
            gravity,
            damping,
        }),
        SystemConfig::Quadcopter { mass, gravity } => make_quadcopter(mass, gravity),
        SystemConfig::Nlink { n, gravity } | SystemConfig::NlinkLinearized { n, gravity } => make_nlink(n, gravity),
        SystemConfig::ScalarDecay { .. } => return Ok(None),
    };
    sys.map(Some).map_err(|e| CliError::Config(e.to_string()))
}

fn equilibrium(system: &SystemConfig) -> (Vector, Vector) {
    match *system {
        SystemConfig::Pendulum { .. } => (Vector::zeros(2), Vector::zeros(1)),
        SystemConfig::Quadcopter { mass, gravity } => {
            let mut u = Vector::zeros(4);
            u[0] = mass * gravity;
            (Vector::zeros(12), u)
        }
        SystemConfig::Nlink { n, gravity } | SystemConfig::NlinkLinearized { n, gravity } => {
            let model = funnel_core::dynamics::NLink { links: n, gravity };
            (model.upright(), Vector::zeros(n))
        }
        SystemConfig::ScalarDecay { .. } => (Vector::zeros(1), Vector::zeros(0)),
    }
}

/// Reference trajectory of a system with inputs, over `[0, T]`.
pub fn build_trajectory(cfg: &ExperimentConfig) -> Result<Trajectory, CliError> {
    let sys = open_loop(&cfg.system)?.ok_or_else(|| CliError::Config("scalar_decay has no inputs".into()))?;
    let t_final = cfg.grid.t_final;
    let (x_eq, u_eq) = equilibrium(&cfg.system);
    match &cfg.trajectory {
        TrajectoryConfig::Constant { state, control } => {
            let x = state.as_ref().map_or(x_eq, |s| Vector::from_column_slice(s));
            let u = control.as_ref().map_or(u_eq, |c| Vector::from_column_slice(c));
            constant_trajectory(&x, &u, t_final).map_err(compute)
        }
        TrajectoryConfig::Generate {
            x0,
            xt,
            segments,
            effort_weight,
            restarts,
        } => {
            let x0 = Vector::from_column_slice(x0.as_deref().unwrap_or_default());
            let xt = Vector::from_column_slice(xt.as_deref().unwrap_or_default());
            let opts = CollocationOptions {
                segments: *segments,
                effort_weight: *effort_weight,
                multistart: MultistartOptions {
                    restarts: *restarts,
                    threads: cfg.threads,
                    master_seed: cfg.seed,
                    ..CollocationOptions::default().multistart
                },
                ..CollocationOptions::default()
            };
            collocation_trajectory(&sys, &x0, &xt, t_final, &opts).map_err(compute)
        }
        TrajectoryConfig::File { path } => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read trajectory {}: {e}", path.display())))?;
            let tr = Trajectory::from_csv(&text, &sys).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if (tr.start() - 0.0).abs() > 1e-12 || (tr.end() - t_final).abs() > 1e-9 * t_final.max(1.0) {
                return Err(CliError::Config(format!(
                    "trajectory spans [{}, {}] but the grid spans [0, {t_final}]",
                    tr.start(),
                    tr.end()
                )));
            }
            Ok(tr)
        }
    }
}

pub fn build(cfg: &ExperimentConfig) -> Result<Experiment, CliError> {
    let n = cfg.system.state_dim();
    let integration = cfg.integration.config();
    let weight = |w: &Option<crate::config::Weight>, dim, name| {
        w.as_ref().expect("resolved config").to_matrix(dim, name)
    };
    let q = weight(&cfg.lqr.q, n, "lqr.q")?;
    let s_t = weight(&cfg.lqr.s_t, n, "lqr.s_t")?;

    let (field, shape, linear, trajectory) = match cfg.system {
        SystemConfig::ScalarDecay { rate } => {
            let a = Matrix::from_element(1, 1, -rate);
            let shape = QuadraticShape::constant(s_t, Vector::zeros(1)).map_err(compute)?;
            (VectorField::linear(a.clone()), shape, Some(a), None)
        }
        SystemConfig::NlinkLinearized { n: links, gravity } | SystemConfig::Nlink { n: links, gravity } => {
            let r = weight(&cfg.lqr.r, links, "lqr.r")?;
            let design = nlink_controller(links, gravity, &q, &r).map_err(compute)?;
            let upright = design.model.upright();
            if cfg.system.is_linear() {
                let a = design.closed_loop.clone();
                (VectorField::affine(a.clone(), Some(upright)), design.shape, Some(a), None)
            } else {
                let sys = make_nlink(links, gravity).map_err(compute)?;
                let field = close_loop(&sys, &design.controller).map_err(compute)?;
                (field, design.shape, None, None)
            }
        }
        SystemConfig::Pendulum { .. } | SystemConfig::Quadcopter { .. } => {
            let sys = open_loop(&cfg.system)?.expect("system with inputs");
            let r = weight(&cfg.lqr.r, sys.control_dim(), "lqr.r")?;
            let traj = Arc::new(build_trajectory(cfg)?);
            let (controller, shape) = tvlqr(&sys, traj.clone(), &q, &r, &s_t, &integration).map_err(compute)?;
            let field = close_loop(&sys, &controller).map_err(compute)?;
            (field, shape, None, Some(traj))
        }
    };

    let t_final = cfg.grid.t_final;
    let goal = match &cfg.goal {
        GoalConfig::VolumeMatched { r2 } => {
            let s = shape.s(t_final).map_err(compute)?;
            Goal {
                center: shape.center(t_final).map_err(compute)?,
                level: volume_matched_level(&s, *r2).map_err(compute)?,
                matrix: s,
            }
        }
        GoalConfig::Quadratic { q_g, c_g, center } => Goal {
            center: match center {
                Some(c) => Vector::from_column_slice(c),
                None => shape.center(t_final).map_err(compute)?,
            },
            matrix: weight(q_g, n, "goal.q_g")?,
            level: *c_g,
        },
    };

    let spec = FunnelSpec {
        field,
        shape,
        grid: cfg.grid.times(),
        goal,
        params: cfg.algorithm.params(),
        seed: cfg.seed,
        threads: cfg.threads,
        integration,
        solver: SolverOptions::default(),
    };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Experiment {
        spec,
        linear,
        trajectory,
    })
}
