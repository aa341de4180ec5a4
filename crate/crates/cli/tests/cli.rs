use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const HOMOGENIZE: &str = r#"
operation = "homogenize"

[integrand]
name = "quadratic_coeff_1d"
a = [1.0, 4.0]

[geometry]
xi = [[1.0]]
n_max = 3

[schedules]
resolution = [33]
"#;

fn gammalim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gammalim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_homogenize_reports_the_harmonic_mean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "homogenize.toml", HOMOGENIZE);
    let o = gammalim(dir.path(), &["run", &cfg, "--out", "res"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("res/homogenize.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let value: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    // harmonic mean of 1 and 4 over equal halves: 2 / (1 + 1/4)
    let oracle = 2.0 / (1.0 + 0.25);
    assert!(last.contains("estimate"), "{last}");
    assert!((value - oracle).abs() <= 1e-3, "{value}");
    assert!(dir.path().join("res/homogenize.json").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("homogenize"));
}

#[test]
fn subcommand_with_config_flag_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "h.toml", HOMOGENIZE);
    let a = gammalim(dir.path(), &["run", &cfg, "--out", "a"]);
    let b = gammalim(dir.path(), &["homogenize", "--config", &cfg, "--out", "b", "--jobs", "2"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    let ca = fs::read(dir.path().join("a/homogenize.csv")).unwrap();
    let cb = fs::read(dir.path().join("b/homogenize.csv")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn mismatched_subcommand_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "h.toml", HOMOGENIZE);
    let o = gammalim(dir.path(), &["cell", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn increasing_rho_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{HOMOGENIZE}rho = [0.1, 0.2]\n");
    let cfg = write(dir.path(), "bad.toml", &text);
    let o = gammalim(dir.path(), &["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("schedules.rho"), "{}", stderr(&o));
}

#[test]
fn noncoercive_integrand_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "dw.toml",
        r#"
operation = "homogenize"
[integrand]
name = "double_well_1d"
[geometry]
xi = [[0.5]]
n_max = 1
[schedules]
resolution = [9]
"#,
    );
    let o = gammalim(dir.path(), &["run", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).to_lowercase().contains("coerciv"), "{}", stderr(&o));
}

#[test]
fn missing_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = gammalim(dir.path(), &["run", "nowhere.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn multistart_without_seed_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{HOMOGENIZE}[solver]\nmultistart_count = 3\n");
    let cfg = write(dir.path(), "s.toml", &text);
    let o = gammalim(dir.path(), &["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let o = gammalim(dir.path(), &["run", &cfg, "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn verify_convex_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = gammalim(dir.path(), &["verify", "convex", "--out", "v"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("criterion 1") && out.contains("PASS"), "{out}");
}

#[test]
fn unknown_suite_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = gammalim(dir.path(), &["verify", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn randomized_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "d.toml",
        r#"
operation = "derivative"
seed = 19
[set_function]
kind = "affine_density"
c0 = 1.0
g = [2.0, -1.0, 0.0]
[geometry]
lower = [0.0, 0.0]
side = 1.0
points = [[0.5, 0.5], [0.25, 0.75]]
[schedules]
rho = [0.2, 0.1, 0.05]
"#,
    );
    let a = gammalim(dir.path(), &["run", &cfg, "--out", "a", "--jobs", "1"]);
    let b = gammalim(dir.path(), &["run", &cfg, "--out", "b", "--jobs", "3"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0));
    let ca = fs::read(dir.path().join("a/derivative.csv")).unwrap();
    assert_eq!(ca, fs::read(dir.path().join("b/derivative.csv")).unwrap());
    assert!(ca.len() > 100);
}

#[test]
fn cell_envelope_density_relax_and_gap_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = r#"
seed = 1
[integrand]
name = "p_power"
p = 2.0
d = 1
[geometry]
x = [0.0]
v = [0.0]
rho = 1.0
xi = [[0.7]]
lower = [0.0]
side = 1.0
k = 2
[schedules]
rho = [0.5, 0.25]
resolution = [9]
[set_function]
kind = "dirichlet"
[envelope]
depth = 3
"#;
    let cfg = write(dir.path(), "all.toml", base);
    for op in ["cell", "envelope", "density", "relax", "gamma-gap"] {
        let o = gammalim(dir.path(), &[op, "--config", &cfg, "--out", "all"]);
        assert_eq!(o.status.code(), Some(0), "{op}: {}", stderr(&o));
        let stem = op.replace('-', "_");
        assert!(dir.path().join(format!("all/{stem}.csv")).exists(), "{op}");
        assert!(dir.path().join(format!("all/{stem}.json")).exists(), "{op}");
    }
    // |ξ|² on a unit cube with affine data: every quantity equals 0.49
    let json: String = fs::read_to_string(dir.path().join("all/relax.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!((v["total"].as_f64().unwrap() - 0.49).abs() < 1e-6, "{json}");
}
