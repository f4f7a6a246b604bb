//! Experiment configuration: JSON schema, defaults and validation.

use std::path::{Path, PathBuf};

use funnel_core::funnel::FunnelParams;
use funnel_core::odeint::IntegrationConfig;
use funnel_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// A weight matrix given as `s` (meaning `s·I`), a diagonal, or full rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Weight {
    pub fn to_matrix(&self, dim: usize, name: &str) -> Result<Matrix, CliError> {
        let bad = |m: String| Err(CliError::Config(format!("{name}: {m}")));
        let m = match self {
            Weight::Scalar(s) => Matrix::identity(dim, dim) * *s,
            Weight::Diagonal(d) => {
                if d.len() != dim {
                    return bad(format!("expected {dim} diagonal entries, got {}", d.len()));
                }
                Matrix::from_diagonal(&funnel_core::Vector::from_column_slice(d))
            }
            Weight::Full(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return bad(format!("expected a {dim}x{dim} matrix"));
                }
                Matrix::from_fn(dim, dim, |i, j| rows[i][j])
            }
        };
        if m.iter().any(|v| !v.is_finite()) {
            return bad("entries must be finite".into());
        }
        if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
            return bad("matrix must be symmetric".into());
        }
        if funnel_core::numkernel::chol_lower(&m).is_err() {
            return bad("matrix must be positive definite".into());
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    Pendulum {
        #[serde(default = "one")]
        mass: f64,
        #[serde(default = "half")]
        length: f64,
        #[serde(default = "earth")]
        gravity: f64,
        #[serde(default = "tenth")]
        damping: f64,
    },
    Quadcopter {
        #[serde(default = "one")]
        mass: f64,
        #[serde(default = "earth")]
        gravity: f64,
    },
    Nlink {
        n: usize,
        #[serde(default = "earth")]
        gravity: f64,
    },
    NlinkLinearized {
        n: usize,
        #[serde(default = "earth")]
        gravity: f64,
    },
    ScalarDecay {
        #[serde(default = "one")]
        rate: f64,
    },
}

impl SystemConfig {
    pub fn name(&self) -> String {
        match self {
            SystemConfig::Pendulum { .. } => "pendulum".into(),
            SystemConfig::Quadcopter { .. } => "quadcopter".into(),
            SystemConfig::Nlink { n, .. } => format!("nlink{{{n}}}"),
            SystemConfig::NlinkLinearized { n, .. } => format!("nlink_linearized{{{n}}}"),
            SystemConfig::ScalarDecay { .. } => "scalar_decay".into(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            SystemConfig::Pendulum { .. } => 2,
            SystemConfig::Quadcopter { .. } => 12,
            SystemConfig::Nlink { n, .. } | SystemConfig::NlinkLinearized { n, .. } => 2 * n,
            SystemConfig::ScalarDecay { .. } => 1,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            SystemConfig::Pendulum { .. } => 1,
            SystemConfig::Quadcopter { .. } => 4,
            SystemConfig::Nlink { n, .. } | SystemConfig::NlinkLinearized { n, .. } => *n,
            SystemConfig::ScalarDecay { .. } => 0,
        }
    }

    /// Closed loops that are exactly `ẋ = A (x − x_eq)`.
    pub fn is_linear(&self) -> bool {
        matches!(self, SystemConfig::NlinkLinearized { .. } | SystemConfig::ScalarDecay { .. })
    }

    /// Systems whose reference is fixed at the design equilibrium.
    fn equilibrium_only(&self) -> bool {
        matches!(
            self,
            SystemConfig::Nlink { .. } | SystemConfig::NlinkLinearized { .. } | SystemConfig::ScalarDecay { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryConfig {
    /// Rest at `state` under `control`; both default to the system's equilibrium.
    Constant {
        #[serde(default)]
        state: Option<Vec<f64>>,
        #[serde(default)]
        control: Option<Vec<f64>>,
    },
    /// Minimum-effort collocation from `x0` to `xt` over the grid horizon.
    Generate {
        #[serde(default)]
        x0: Option<Vec<f64>>,
        #[serde(default)]
        xt: Option<Vec<f64>>,
        #[serde(default = "segments")]
        segments: usize,
        #[serde(default = "one")]
        effort_weight: f64,
        #[serde(default = "three")]
        restarts: usize,
    },
    /// Knot CSV `t,x1..xn,u1..um`, relative to the config file.
    File { path: PathBuf },
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig::Constant {
            state: None,
            control: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrConfig {
    #[serde(default)]
    pub q: Option<Weight>,
    #[serde(default)]
    pub r: Option<Weight>,
    /// Final cost-to-go; defaults to `q`.
    #[serde(default)]
    pub s_t: Option<Weight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GoalConfig {
    /// `{P(x, T) ≤ ρ}` with the volume of a ball of squared radius `r2`.
    VolumeMatched { r2: f64 },
    /// `{(x − x_G)ᵀ Q_G (x − x_G) ≤ c_G}`; `x_G` defaults to the trajectory end.
    Quadratic {
        #[serde(default)]
        q_g: Option<Weight>,
        c_g: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_final: f64,
    pub step: f64,
}

impl GridConfig {
    pub fn intervals(&self) -> usize {
        (self.t_final / self.step).round() as usize
    }

    /// `tᵢ = i·h`, with the last point exactly `T`.
    pub fn times(&self) -> Vec<f64> {
        let n = self.intervals();
        (0..=n).map(|i| if i == n { self.t_final } else { i as f64 * self.step }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    #[serde(default = "c_default")]
    pub c: f64,
    #[serde(default = "gamma1_default")]
    pub gamma1: f64,
    #[serde(default = "gamma2_default")]
    pub gamma2: f64,
    #[serde(default = "tau1_default")]
    pub tau1: usize,
    #[serde(default = "tau2_default")]
    pub tau2: usize,
    #[serde(default = "one_usize")]
    pub derivative_samples: usize,
    #[serde(default = "yes")]
    pub derivative_check: bool,
    #[serde(default)]
    pub strictness: f64,
    /// Extra falsification solves per interval after synthesis; 0 disables.
    #[serde(default)]
    pub audit_solves: usize,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        let p = FunnelParams::default();
        Self {
            c: p.c,
            gamma1: p.gamma1,
            gamma2: p.gamma2,
            tau1: p.tau1,
            tau2: p.tau2,
            derivative_samples: p.derivative_samples,
            derivative_check: p.derivative_check,
            strictness: p.strictness,
            audit_solves: 0,
        }
    }
}

impl AlgorithmConfig {
    pub fn params(&self) -> FunnelParams {
        FunnelParams {
            c: self.c,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            tau1: self.tau1,
            tau2: self.tau2,
            derivative_samples: self.derivative_samples,
            derivative_check: self.derivative_check,
            strictness: self.strictness,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationSettings {
    #[serde(default = "abs_tol")]
    pub abs_tol: f64,
    #[serde(default = "rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "max_step")]
    pub max_step: f64,
    #[serde(default = "max_steps")]
    pub max_steps: usize,
}

impl Default for IntegrationSettings {
    fn default() -> Self {
        let d = IntegrationConfig::default();
        Self {
            abs_tol: d.abs_tol,
            rel_tol: d.rel_tol,
            max_step: d.max_step,
            max_steps: d.max_steps,
        }
    }
}

impl IntegrationSettings {
    pub fn config(&self) -> IntegrationConfig {
        IntegrationConfig {
            abs_tol: self.abs_tol,
            rel_tol: self.rel_tol,
            max_step: self.max_step,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    #[serde(default)]
    pub trajectory: TrajectoryConfig,
    #[serde(default)]
    pub lqr: LqrConfig,
    pub goal: GoalConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub algorithm: AlgorithmConfig,
    #[serde(default)]
    pub integration: IntegrationSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub threads: usize,
    /// Used when `--out` is not given.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub svg: bool,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub no_derivative_check: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    /// Reads, resolves relative trajectory paths, applies overrides, fills
    /// defaults and validates.
    pub fn load(path: &Path, overrides: Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let TrajectoryConfig::File { path: p } = &mut cfg.trajectory {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.apply(overrides);
        cfg.resolve()
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if o.no_derivative_check {
            self.algorithm.derivative_check = false;
        }
    }

    /// Fills system-dependent defaults and validates the result.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let (q, r) = match &self.system {
            SystemConfig::Pendulum { .. } => (1.0, 1.0),
            SystemConfig::Quadcopter { .. } => (10.0, 1.0),
            SystemConfig::Nlink { n, .. } | SystemConfig::NlinkLinearized { n, .. } => (10.0 * *n as f64, 1.0),
            SystemConfig::ScalarDecay { .. } => (1.0, 1.0),
        };
        let lqr = &mut self.lqr;
        lqr.q.get_or_insert(Weight::Scalar(q));
        lqr.r.get_or_insert(Weight::Scalar(r));
        if lqr.s_t.is_none() {
            lqr.s_t = lqr.q.clone();
        }
        if let GoalConfig::Quadratic { q_g, .. } = &mut self.goal {
            q_g.get_or_insert(Weight::Scalar(1.0));
        }
        if let TrajectoryConfig::Generate { x0, xt, .. } = &mut self.trajectory {
            if let SystemConfig::Pendulum { .. } = self.system {
                // hanging rest to the upright, θ = 0 being upright
                x0.get_or_insert(vec![std::f64::consts::PI, 0.0]);
                xt.get_or_insert(vec![0.0, 0.0]);
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let n = self.system.state_dim();
        let m = self.system.control_dim();
        match &self.system {
            SystemConfig::Pendulum { mass, length, gravity, damping } => {
                if !(*mass > 0.0 && *length > 0.0 && gravity.is_finite() && *damping >= 0.0) {
                    return bad("pendulum needs mass, length > 0, finite gravity and damping ≥ 0".into());
                }
            }
            SystemConfig::Quadcopter { mass, gravity } => {
                if !(*mass > 0.0 && gravity.is_finite()) {
                    return bad("quadcopter needs mass > 0 and finite gravity".into());
                }
            }
            SystemConfig::Nlink { n, gravity } | SystemConfig::NlinkLinearized { n, gravity } => {
                if *n == 0 || !(gravity.is_finite() && *gravity > 0.0) {
                    return bad("n-link needs n ≥ 1 and gravity > 0".into());
                }
            }
            SystemConfig::ScalarDecay { rate } => {
                if !rate.is_finite() {
                    return bad("scalar_decay rate must be finite".into());
                }
            }
        }
        let g = self.grid;
        if !(g.t_final > 0.0 && g.t_final.is_finite() && g.step > 0.0 && g.step.is_finite()) {
            return bad("grid t_final and step must be positive".into());
        }
        let k = g.t_final / g.step;
        if k.round() < 1.0 || (k - k.round()).abs() > 1e-9 * k.max(1.0) {
            return bad(format!("grid step {} must divide t_final {}", g.step, g.t_final));
        }
        let a = self.algorithm;
        if !(a.c > 1.0 && a.c.is_finite()) {
            return bad(format!("algorithm.c must exceed 1, got {}", a.c));
        }
        for (name, v) in [("gamma1", a.gamma1), ("gamma2", a.gamma2)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("algorithm.{name} must lie in (0, 1), got {v}"));
            }
        }
        if a.tau1 == 0 || a.tau2 == 0 || a.derivative_samples == 0 {
            return bad("algorithm.tau1, tau2 and derivative_samples must be positive".into());
        }
        if !(a.strictness >= 0.0 && a.strictness.is_finite()) {
            return bad(format!("algorithm.strictness must be non-negative, got {}", a.strictness));
        }
        if self.threads == 0 {
            return bad("threads must be positive".into());
        }
        self.integration
            .config()
            .validate()
            .map_err(|e| CliError::Config(format!("integration: {e}")))?;

        if let (Some(q), Some(r), Some(s)) = (&self.lqr.q, &self.lqr.r, &self.lqr.s_t) {
            q.to_matrix(n, "lqr.q")?;
            if m > 0 {
                r.to_matrix(m, "lqr.r")?;
            }
            s.to_matrix(n, "lqr.s_t")?;
        }
        match &self.goal {
            GoalConfig::VolumeMatched { r2 } => {
                if !(*r2 > 0.0 && r2.is_finite()) {
                    return bad(format!("goal.r2 must be positive, got {r2}"));
                }
            }
            GoalConfig::Quadratic { q_g, c_g, center } => {
                if !(*c_g > 0.0 && c_g.is_finite()) {
                    return bad(format!("goal.c_g must be positive, got {c_g}"));
                }
                if let Some(q) = q_g {
                    q.to_matrix(n, "goal.q_g")?;
                }
                check_len(center.as_deref(), n, "goal.center")?;
            }
        }
        match &self.trajectory {
            TrajectoryConfig::Constant { state, control } => {
                check_len(state.as_deref(), n, "trajectory.state")?;
                check_len(control.as_deref(), m, "trajectory.control")?;
                if self.system.equilibrium_only() && (state.is_some() || control.is_some()) {
                    return bad(format!("{} runs at its design equilibrium; omit trajectory.state/control", self.system.name()));
                }
            }
            TrajectoryConfig::Generate { x0, xt, segments, effort_weight, .. } => {
                if self.system.equilibrium_only() {
                    return bad(format!("{} supports only a constant trajectory", self.system.name()));
                }
                if x0.is_none() || xt.is_none() {
                    return bad("trajectory.x0 and trajectory.xt are required".into());
                }
                check_len(x0.as_deref(), n, "trajectory.x0")?;
                check_len(xt.as_deref(), n, "trajectory.xt")?;
                if *segments < 2 || !(*effort_weight > 0.0) {
                    return bad("trajectory.segments must be ≥ 2 and effort_weight > 0".into());
                }
            }
            TrajectoryConfig::File { .. } => {
                if self.system.equilibrium_only() {
                    return bad(format!("{} supports only a constant trajectory", self.system.name()));
                }
            }
        }
        Ok(())
    }
}

fn check_len(v: Option<&[f64]>, n: usize, name: &str) -> Result<(), CliError> {
    match v {
        Some(v) if v.len() != n => Err(CliError::Config(format!("{name}: expected {n} entries, got {}", v.len()))),
        Some(v) if v.iter().any(|x| !x.is_finite()) => Err(CliError::Config(format!("{name}: entries must be finite"))),
        _ => Ok(()),
    }
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn tenth() -> f64 {
    0.1
}
fn earth() -> f64 {
    9.81
}
fn yes() -> bool {
    true
}
fn one_usize() -> usize {
    1
}
fn three() -> usize {
    3
}
fn segments() -> usize {
    300
}
fn c_default() -> f64 {
    FunnelParams::default().c
}
fn gamma1_default() -> f64 {
    FunnelParams::default().gamma1
}
fn gamma2_default() -> f64 {
    FunnelParams::default().gamma2
}
fn tau1_default() -> usize {
    FunnelParams::default().tau1
}
fn tau2_default() -> usize {
    FunnelParams::default().tau2
}
fn abs_tol() -> f64 {
    IntegrationConfig::default().abs_tol
}
fn rel_tol() -> f64 {
    IntegrationConfig::default().rel_tol
}
fn max_step() -> f64 {
    IntegrationConfig::default().max_step
}
fn max_steps() -> usize {
    IntegrationConfig::default().max_steps
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"system": {"kind": "scalar_decay"},
            "goal": {"kind": "quadratic", "c_g": 1.0},
            "grid": {"t_final": 1.0, "step": 0.1}}"#
    }

    #[test]
    fn defaults_are_filled() {
        let cfg = ExperimentConfig::from_json(minimal()).unwrap().resolve().unwrap();
        assert_eq!(cfg.algorithm, AlgorithmConfig::default());
        assert_eq!(cfg.lqr.s_t, Some(Weight::Scalar(1.0)));
        assert_eq!(cfg.threads, 1);
        assert_eq!(cfg.grid.times().len(), 11);
        assert_eq!(*cfg.grid.times().last().unwrap(), 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = minimal().replace("\"seed\"", "").replacen('{', "{\"sede\": 3,", 1);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(CliError::Config(_))));
        let text = minimal().replace("\"kind\": \"scalar_decay\"", "\"kind\": \"scalar_decay\", \"rte\": 2");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn negative_gamma_is_a_config_error() {
        let text = minimal().replacen('{', "{\"algorithm\": {\"gamma1\": -0.5},", 1);
        let err = ExperimentConfig::from_json(&text).unwrap().resolve().unwrap_err();
        assert!(matches!(err, CliError::Config(m) if m.contains("gamma1")));
    }

    #[test]
    fn grid_step_must_divide_horizon() {
        let text = minimal().replace("\"step\": 0.1", "\"step\": 0.3");
        assert!(ExperimentConfig::from_json(&text).unwrap().resolve().is_err());
    }

    #[test]
    fn nlink_weights_scale_with_links() {
        let text = r#"{"system": {"kind": "nlink_linearized", "n": 3},
            "goal": {"kind": "volume_matched", "r2": 0.025},
            "grid": {"t_final": 1.0, "step": 0.025}}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap().resolve().unwrap();
        assert_eq!(cfg.lqr.q, Some(Weight::Scalar(30.0)));
        assert_eq!(cfg.grid.intervals(), 40);
    }

    #[test]
    fn weights_parse_all_forms() {
        let w: Weight = serde_json::from_str("[1.0, 2.0]").unwrap();
        assert_eq!(w.to_matrix(2, "w").unwrap()[(1, 1)], 2.0);
        let w: Weight = serde_json::from_str("[[2.0, 1.0], [1.0, 2.0]]").unwrap();
        assert_eq!(w.to_matrix(2, "w").unwrap()[(0, 1)], 1.0);
        let w: Weight = serde_json::from_str("[[1.0, 2.0], [2.0, 1.0]]").unwrap();
        assert!(w.to_matrix(2, "w").is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = ExperimentConfig::from_json(minimal()).unwrap();
        cfg.apply(Overrides {
            seed: Some(7),
            threads: Some(8),
            no_derivative_check: true,
        });
        assert_eq!((cfg.seed, cfg.threads, cfg.algorithm.derivative_check), (7, 8, false));
    }
}
