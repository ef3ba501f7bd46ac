use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use shellnbody::fields::ExternalFieldModel;
use shellnbody::harness::cli::run_cli;
use shellnbody::harness::config::RunConfig;
use shellnbody::harness::oracle::{swap_asymmetry, ActionOracle, OracleConfig, OracleError};
use shellnbody::harness::output::read_table;
use shellnbody::minkowski::FourVector;
use shellnbody::worldline::{ParticleSpec, Worldline, WorldlineHistory};

const FREE: &str = r#"
dt = 0.05
t_end = 1.0
[[particles]]
label = "free"
rest_mass = 2.0
charge = 0.0
radius = 0.5
position = [1.0, -2.0, 0.5]
beta = [0.3, -0.2, 0.1]
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn cli(args: &[&str]) -> i32 {
    let mut all = vec!["shellnbody"];
    all.extend_from_slice(args);
    run_cli(all)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn config_round_trip_and_hash() {
    let cfg = RunConfig::from_toml(FREE).unwrap();
    let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(cfg.hash(), back.hash());
    assert_eq!(cfg.hash().len(), 64);
    let other = RunConfig::from_toml(&FREE.replace("t_end = 1.0", "t_end = 2.0")).unwrap();
    assert_ne!(cfg.hash(), other.hash());
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(RunConfig::from_toml(&format!("bogus = 1\n{FREE}")).is_err());
    assert!(RunConfig::from_toml(&FREE.replace("radius = 0.5", "radius = -0.5")).is_err());
    assert!(RunConfig::from_toml(&FREE.replace("dt = 0.05", "dt = 0.0")).is_err());
    assert!(RunConfig::from_toml(&FREE.replace("beta = [0.3, -0.2, 0.1]", "beta = [1.0, 0.0, 0.0]")).is_err());
}

#[test]
fn invalid_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "bad.toml", &FREE.replace("radius = 0.5", "radius = -0.5"));
    assert_eq!(cli(&["run", s(&cfg), "--output-dir", s(&out)]), 2);
    assert!(!out.exists());
}

#[test]
fn missing_config_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["run", s(&dir.path().join("absent.toml"))]), 4);
}

#[test]
fn free_run_is_linear_and_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = write_config(dir.path(), "free.toml", FREE);
    assert_eq!(cli(&["run", s(&cfg_path), "--output-dir", s(&out)]), 0);
    let (comment, header, rows) = read_table(&out.join("trajectory_free.csv")).unwrap();
    let hash = RunConfig::from_toml(FREE).unwrap().hash();
    assert_eq!(comment.unwrap(), format!("config_hash={hash}"));
    assert_eq!(header.len(), 14);
    assert_eq!(rows.len(), 21);
    let beta = [0.3, -0.2, 0.1];
    let x0 = [1.0, -2.0, 0.5];
    for r in &rows {
        let t: f64 = r[0].parse().unwrap();
        for d in 0..3 {
            let x: f64 = r[3 + d].parse().unwrap();
            assert!((x - (x0[d] + beta[d] * t)).abs() < 1e-12);
        }
    }
    assert!(out.join("diagnostics.csv").exists());

    let plots = dir.path().join("plots");
    assert_eq!(cli(&["plot-data", s(&out), "--output-dir", s(&plots)]), 0);
    let (_, h, proj) = read_table(&plots.join("projection_free.csv")).unwrap();
    assert_eq!(h, ["t", "x", "y", "z"]);
    assert_eq!(proj.len(), rows.len());
    assert!(plots.join("constraint_drift.csv").exists());
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "free.toml", FREE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(cli(&["run", s(&cfg_path), "--output-dir", s(&a)]), 0);
    assert_eq!(cli(&["run", s(&cfg_path), "--output-dir", s(&b)]), 0);
    for f in ["trajectory_free.csv", "diagnostics.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn plot_data_on_empty_dir_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["plot-data", s(dir.path())]), 4);
    assert_eq!(cli(&["plot-data", s(&dir.path().join("nowhere"))]), 4);
}

#[test]
fn check_pb_without_config() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["check-pb", "--output-dir", s(&dir.path().join("pb"))]), 0);
    let (_, header, rows) = read_table(&dir.path().join("pb").join("pb_residuals.csv")).unwrap();
    assert_eq!(header, ["check", "value", "threshold", "verdict"]);
    assert!(rows.iter().all(|r| r[3] != "fail"));
}

#[test]
fn compare_writes_one_row_per_radius() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
dt = 0.02
t_end = 0.2
[external]
kind = "uniform"
e = [0.3, 0.0, 0.0]
b = [0.0, 0.0, 0.2]
[compare]
sigmas = [0.4, 0.2]
[[particles]]
label = "p"
rest_mass = 1.0
charge = 0.05
radius = 0.4
position = [0.0, 0.0, 0.0]
beta = [0.0, 0.0, 0.0]
"#;
    let cfg = write_config(dir.path(), "cmp.toml", body);
    let out = dir.path().join("cmp");
    assert_eq!(cli(&["compare-asymptotic", s(&cfg), "--output-dir", s(&out)]), 0);
    let (_, header, rows) = read_table(&out.join("asymptotic_gap.csv")).unwrap();
    assert_eq!(header[0], "sigma");
    assert_eq!(rows.len(), 2);
}

fn inertial(beta: [f64; 3], x: [f64; 3]) -> WorldlineHistory {
    let r = FourVector::from_parts(2.0, std::array::from_fn(|k| x[k] + 2.0 * beta[k]));
    WorldlineHistory::inertial(1.0, r, FourVector::velocity_from_beta(beta), 0.0).unwrap()
}

#[test]
fn oracle_free_inertial_gradient_vanishes() {
    let line = inertial([0.2, -0.1, 0.0], [0.0; 3]);
    let spec = ParticleSpec::new("a", 1.0, 0.0, 0.5).unwrap();
    let oracle = ActionOracle::from_lines(&[spec], &[&line as &dyn Worldline], &ExternalFieldModel::None, 1.0, (0.5, 1.0), &OracleConfig::default()).unwrap();
    for g in oracle.gradient_field(&oracle.curves) {
        assert!(g.total().iter().all(|v| v.abs() < 1e-8), "{:?}", g.total());
    }
}

#[test]
fn oracle_rejects_tiny_width() {
    let a = inertial([0.1, 0.0, 0.0], [0.0; 3]);
    let b = inertial([-0.1, 0.0, 0.0], [1.5, 0.0, 0.0]);
    let specs = [ParticleSpec::new("a", 1.0, 0.3, 0.6).unwrap(), ParticleSpec::new("b", 1.0, -0.3, 0.6).unwrap()];
    let cfg = OracleConfig { width: Some(1e-9), ..OracleConfig::default() };
    let lines: [&dyn Worldline; 2] = [&a, &b];
    assert!(matches!(ActionOracle::from_lines(&specs, &lines, &ExternalFieldModel::None, 1.0, (0.5, 1.0), &cfg), Err(OracleError::WidthTooSmall { .. })));
}

#[test]
fn oracle_swap_symmetry_for_equal_radii() {
    let a = inertial([0.1, 0.05, 0.0], [0.0; 3]);
    let b = inertial([-0.1, 0.0, 0.05], [1.5, 0.3, 0.0]);
    let specs = [ParticleSpec::new("a", 1.0, 0.3, 0.6).unwrap(), ParticleSpec::new("b", 1.0, -0.3, 0.6).unwrap()];
    let lines: [&dyn Worldline; 2] = [&a, &b];
    let oracle = ActionOracle::from_lines(&specs, &lines, &ExternalFieldModel::None, 1.0, (0.5, 1.0), &OracleConfig::default()).unwrap();
    let other = oracle.perturbed(0.01, &mut ChaCha8Rng::seed_from_u64(2));
    let w = oracle.widths[0][1].max(oracle.widths[1][0]);
    let (asym, scale) = swap_asymmetry(&specs, &oracle.curves, &other, w, 1.0);
    assert!(scale > 0.0);
    assert!(asym.abs() <= 1e-12 * scale, "{asym} vs {scale}");
}
