use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_funnel-forge"))
}

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn scalar_synthesis_follows_the_derivative_cap() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = run(&["synthesize"], &config("scalar_decay.json"), &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("funnel.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("t,rho,cross_section_volume"));
    assert_eq!(csv.lines().count(), 12);
    let s = summary(&out);
    let ratio = s["rho0"].as_f64().unwrap() / s["rho_final"].as_f64().unwrap();
    let law = 1.2f64.powi(10);
    assert!((ratio - law).abs() <= 0.005 * law, "{ratio}");
    for key in ["sum_rho", "integrated_volume", "wall_time_s", "counterexamples", "seed", "config"] {
        assert!(!s[key].is_null(), "summary lacks {key}");
    }
    assert_eq!(s["counterexamples"].as_array().unwrap().len(), 10);
    assert_eq!(s["config"]["algorithm"]["c"].as_f64(), Some(1.5));
    assert!(fs::read_to_string(out.join("funnel.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn thread_count_leaves_outputs_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = config("scalar_decay.json");
    assert!(bin().args(["compare", "--threads", "1", "--config"]).arg(&cfg).arg("--out").arg(&a).status().unwrap().success());
    assert!(bin().args(["compare", "--threads", "8", "--config"]).arg(&cfg).arg("--out").arg(&b).status().unwrap().success());
    for f in ["compare.csv", "funnel.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn oracle_writes_levels_for_linear_systems() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = run(&["oracle"], &config("nlink_linearized_1.json"), &out);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(out.join("oracle.csv")).unwrap();
    assert_eq!(csv.lines().count(), 42);
    let r0 = summary(&out)["rho0"].as_f64().unwrap();
    assert!((r0 - 15.54).abs() < 0.01, "{r0}");
}

#[test]
fn oracle_rejects_nonlinear_systems_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["oracle", "compare"] {
        let out = tmp.path().join(cmd);
        let o = run(&[cmd], &config("pendulum.json"), &out);
        assert_eq!(o.status.code(), Some(3));
        assert!(!out.exists());
    }
}

#[test]
fn malformed_config_exits_one_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let cases = [
        r#"{"system": {"kind": "scalar_decay"}, "goal": {"kind": "quadratic", "c_g": 1.0}, "grid": {"t_final": 1.0, "step": 0.1}, "colour": 1}"#,
        r#"{"system": {"kind": "warp_drive"}, "goal": {"kind": "quadratic", "c_g": 1.0}, "grid": {"t_final": 1.0, "step": 0.1}}"#,
        r#"{"system": {"kind": "scalar_decay"}, "goal": {"kind": "quadratic", "c_g": 1.0}, "grid": {"t_final": 1.0, "step": -0.1}}"#,
        r#"{"system": {"kind": "scalar_decay"}, "goal": {"kind": "quadratic", "c_g": 1.0}, "grid": {"t_final": 1.0, "step": 0.1}, "algorithm": {"gamma1": 1.5}}"#,
        r#"{"system": {"kind": "scalar_decay"}, "goal": {"kind": "quadratic", "c_g": 1.0, "q_g": [[1.0, 2.0]]}, "grid": {"t_final": 1.0, "step": 0.1}}"#,
        "not json",
    ];
    for text in cases {
        let cfg = write_config(tmp.path(), text);
        let o = run(&["synthesize"], &cfg, &out);
        assert_eq!(o.status.code(), Some(1), "{text}");
        assert!(!out.exists(), "{text}");
    }
    let o = run(&["synthesize"], &tmp.path().join("missing.json"), &out);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_output_directory_is_a_config_error() {
    let o = bin().args(["oracle", "--config"]).arg(config("scalar_decay.json")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unreachable_goal_is_a_synthesis_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let cfg = write_config(
        tmp.path(),
        r#"{"system": {"kind": "scalar_decay"}, "goal": {"kind": "quadratic", "c_g": 1.0, "center": [5.0]},
            "grid": {"t_final": 1.0, "step": 0.1}}"#,
    );
    let o = run(&["synthesize"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn no_derivative_check_flag_recovers_the_reach_law() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = run(&["synthesize", "--no-derivative-check", "--seed", "9"], &config("scalar_decay.json"), &out);
    assert_eq!(o.status.code(), Some(0));
    let s = summary(&out);
    assert_eq!(s["seed"].as_u64(), Some(9));
    assert_eq!(s["config"]["algorithm"]["derivative_check"].as_bool(), Some(false));
    let ratio = s["rho0"].as_f64().unwrap() / s["rho_final"].as_f64().unwrap();
    let law = (0.9999f64 * 0.2f64.exp()).powi(10);
    assert!((ratio - law).abs() <= 1e-4 * law, "{ratio}");
}

#[test]
fn trajgen_writes_the_hover_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    let o = run(&["trajgen"], &config("quadcopter_hover.json"), &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with('t'));
    assert_eq!(summary(&out)["knots"].as_u64(), Some(2));
    let hover: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(hover.len(), 1 + 12 + 4);
    assert!((hover[13] - 9.81).abs() < 1e-12);
}
