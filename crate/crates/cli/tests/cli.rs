use std::path::Path;
use std::process::{Command, Output};

fn satmle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_satmle")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn simulate(dir: &Path) -> String {
    let path = dir.join("d.csv").display().to_string();
    let o = satmle(&["simulate", "--alpha1", "0.8", "--gamma0", "-0.5", "--j", "20", "--seed", "5", "--out", &path]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    path
}

fn field(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no {key} in {out}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn simulate_then_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path());
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 20 * 20 + 1);

    let o = satmle(&["estimate", "--data", &data, "--config", "C", "--estimator", "satmle", "--jackknife"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let psi = field(&out, "psi_hat");
    assert!(psi.abs() < 1.0);
    assert!(field(&out, "v_jk") > 0.0);
    assert!(field(&out, "rho") > 0.0);

    let again = stdout(&satmle(&["estimate", "--data", &data, "--config", "C", "--estimator", "aipw"]));
    assert_eq!(field(&again, "psi_hat"), psi);
    assert!(!again.contains("v_jk"));
}

#[test]
fn run_writes_block_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b2.csv").display().to_string();
    let o = satmle(&["run", "--block", "II", "--out", &out, "--r-sandwich", "2", "--r-jackknife", "1", "--j", "12"]);
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("block,alpha1,gamma0,J,config,estimator"));
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn bad_arguments_fail() {
    assert!(!satmle(&["run", "--block", "V", "--out", "x.csv"]).status.success());
    assert!(!satmle(&["estimate", "--data", "x.csv", "--config", "Q", "--estimator", "SA-TMLE"]).status.success());
    assert!(!satmle(&["simulate", "--alpha1", "0.8", "--gamma0", "0.5", "--j", "1", "--out", "/nonexistent/d.csv"]).status.success());

    let dir = tempfile::tempdir().unwrap();
    let o = satmle(&["estimate", "--data", &dir.path().join("missing.csv").display().to_string(), "--config", "C", "--estimator", "gcomp"]);
    assert_eq!(o.status.code(), Some(1));
}
