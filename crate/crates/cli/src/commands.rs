use std::fs;
use std::path::Path;
use std::time::Instant;

use funnel_core::funnel::{audit, funnel_volume, goal_level, synthesize, AuditRecord, Funnel};
use funnel_core::linoracle::{optimal_rho_sequence, EllipsoidSet};
use funnel_core::Vector;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::experiment::{build, build_trajectory, Experiment};
use crate::svg::funnel_svg;
use crate::CliError;

/// What a command produced, for callers that want the numbers directly.
#[derive(Debug, Clone)]
pub struct Report {
    pub times: Vec<f64>,
    pub rho: Vec<f64>,
    /// Oracle levels, for `compare`.
    pub oracle: Option<Vec<f64>>,
    pub summary: Value,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let p = dir.join(name);
    fs::write(&p, contents).map_err(io(&p))
}

fn prepare(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io(out))
}

fn resolved(cfg: &ExperimentConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn compute(e: funnel_core::Error) -> CliError {
    CliError::Synthesis(e.to_string())
}

fn require_linear(cfg: &ExperimentConfig, exp: &Experiment) -> Result<funnel_core::Matrix, CliError> {
    exp.linear.clone().ok_or_else(|| CliError::Nonlinear(cfg.system.name()))
}

fn counts(f: &Funnel) -> Value {
    let per_k: Vec<Value> = f
        .stats
        .iter()
        .enumerate()
        .map(|(k, s)| {
            json!({
                "k": k,
                "reach": s.reach_counterexamples,
                "derivative": s.derivative_counterexamples,
                "reach_solves": s.reach_solves,
                "derivative_solves": s.derivative_solves,
            })
        })
        .collect();
    Value::Array(per_k)
}

fn audit_summary(records: &[AuditRecord]) -> Value {
    json!({
        "solves_per_interval": records.first().map_or(0, |r| r.reach_solves),
        "reach_counterexamples": records.iter().map(|r| r.reach_counterexamples).sum::<usize>(),
        "derivative_counterexamples": records.iter().map(|r| r.derivative_counterexamples).sum::<usize>(),
        "clean": records.iter().all(AuditRecord::clean),
    })
}

fn funnel_outputs(out: &Path, cfg: &ExperimentConfig, f: &Funnel, csv_name: &str) -> Result<(f64, f64), CliError> {
    write(out, csv_name, &f.to_csv().map_err(compute)?)?;
    if cfg.svg {
        let vols = f.cross_section_volumes().map_err(compute)?;
        write(out, "funnel.svg", &funnel_svg(&f.times, &f.rho, &vols))?;
    }
    funnel_volume(f).map_err(compute)
}

fn run_synthesis(exp: &Experiment) -> Result<Funnel, CliError> {
    synthesize(&exp.spec).map_err(compute)
}

fn oracle_levels(exp: &Experiment, a: &funnel_core::Matrix) -> Result<Vec<f64>, CliError> {
    let spec = &exp.spec;
    let t_final = *spec.grid.last().expect("grid");
    let s = spec.shape.s(t_final).map_err(compute)?;
    let rho_n = goal_level(&spec.shape, t_final, &spec.goal).map_err(compute)?;
    let e_t = EllipsoidSet::from_sublevel(&s, rho_n, Vector::zeros(s.nrows())).map_err(compute)?;
    optimal_rho_sequence(a, &s, &e_t, &spec.grid).map_err(compute)
}

pub fn cmd_synthesize(cfg: &ExperimentConfig, out: &Path) -> Result<Report, CliError> {
    let exp = build(cfg)?;
    let start = Instant::now();
    let funnel = run_synthesis(&exp)?;
    let audit_records = if cfg.algorithm.audit_solves > 0 {
        Some(audit(&exp.spec, &funnel, cfg.algorithm.audit_solves).map_err(compute)?)
    } else {
        None
    };
    let wall = start.elapsed().as_secs_f64();
    prepare(out)?;
    let (sum, volume) = funnel_outputs(out, cfg, &funnel, "funnel.csv")?;
    let summary = json!({
        "command": "synthesize",
        "system": cfg.system.name(),
        "seed": cfg.seed,
        "rho0": funnel.rho[0],
        "rho_final": funnel.rho.last(),
        "sum_rho": sum,
        "integrated_volume": volume,
        "wall_time_s": wall,
        "counterexamples": counts(&funnel),
        "audit": audit_records.as_deref().map(audit_summary),
        "config": resolved(cfg),
    });
    write(out, "summary.json", &pretty(&summary))?;
    Ok(Report {
        times: funnel.times,
        rho: funnel.rho,
        oracle: None,
        summary,
    })
}

pub fn cmd_oracle(cfg: &ExperimentConfig, out: &Path) -> Result<Report, CliError> {
    if !cfg.system.is_linear() {
        return Err(CliError::Nonlinear(cfg.system.name()));
    }
    let exp = build(cfg)?;
    let a = require_linear(cfg, &exp)?;
    let start = Instant::now();
    let rho = oracle_levels(&exp, &a)?;
    let wall = start.elapsed().as_secs_f64();
    let funnel = Funnel::from_levels(exp.spec.grid.clone(), rho, exp.spec.shape.clone()).map_err(compute)?;
    prepare(out)?;
    let (sum, volume) = funnel_outputs(out, cfg, &funnel, "oracle.csv")?;
    let summary = json!({
        "command": "oracle",
        "system": cfg.system.name(),
        "seed": cfg.seed,
        "rho0": funnel.rho[0],
        "rho_final": funnel.rho.last(),
        "sum_rho": sum,
        "integrated_volume": volume,
        "wall_time_s": wall,
        "config": resolved(cfg),
    });
    write(out, "summary.json", &pretty(&summary))?;
    Ok(Report {
        times: funnel.times,
        rho: funnel.rho,
        oracle: None,
        summary,
    })
}

pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<Report, CliError> {
    if !cfg.system.is_linear() {
        return Err(CliError::Nonlinear(cfg.system.name()));
    }
    let exp = build(cfg)?;
    let a = require_linear(cfg, &exp)?;
    let start = Instant::now();
    let oracle = oracle_levels(&exp, &a)?;
    let funnel = run_synthesis(&exp)?;
    let wall = start.elapsed().as_secs_f64();
    let ratios: Vec<f64> = funnel.rho.iter().zip(&oracle).map(|(f, o)| f / o).collect();
    prepare(out)?;
    let mut csv = String::from("t,rho_falsifier,rho_oracle,ratio\n");
    for (((t, f), o), r) in funnel.times.iter().zip(&funnel.rho).zip(&oracle).zip(&ratios) {
        csv.push_str(&format!("{t:.16e},{f:.16e},{o:.16e},{r:.16e}\n"));
    }
    write(out, "compare.csv", &csv)?;
    let (sum, volume) = funnel_outputs(out, cfg, &funnel, "funnel.csv")?;
    let max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let summary = json!({
        "command": "compare",
        "system": cfg.system.name(),
        "seed": cfg.seed,
        "derivative_check": cfg.algorithm.derivative_check,
        "rho0": funnel.rho[0],
        "rho0_oracle": oracle[0],
        "sum_rho": sum,
        "integrated_volume": volume,
        "max_ratio": max,
        "mean_ratio": mean,
        "min_ratio": min,
        "wall_time_s": wall,
        "counterexamples": counts(&funnel),
        "config": resolved(cfg),
    });
    write(out, "summary.json", &pretty(&summary))?;
    Ok(Report {
        times: funnel.times,
        rho: funnel.rho,
        oracle: Some(oracle),
        summary,
    })
}

pub fn cmd_trajgen(cfg: &ExperimentConfig, out: &Path) -> Result<Report, CliError> {
    let start = Instant::now();
    let traj = build_trajectory(cfg)?;
    let wall = start.elapsed().as_secs_f64();
    prepare(out)?;
    write(out, "trajectory.csv", &traj.to_csv())?;
    let summary = json!({
        "command": "trajgen",
        "system": cfg.system.name(),
        "seed": cfg.seed,
        "knots": traj.times().len(),
        "max_defect": traj.max_defect(),
        "wall_time_s": wall,
        "config": resolved(cfg),
    });
    write(out, "summary.json", &pretty(&summary))?;
    Ok(Report {
        times: traj.times().to_vec(),
        rho: Vec::new(),
        oracle: None,
        summary,
    })
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("summary serializes");
    s.push('\n');
    s
}
