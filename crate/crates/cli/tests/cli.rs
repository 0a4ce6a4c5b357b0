use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use heatchain_cli::output::sha256_hex;

const HARMONIC: &str = "\
[model]
n = 2
d = 1
u1.degree = 2
u1.a2 = 1
u2.degree = 2
u2.a2 = 1
lambda = 1
gamma = 1
t1 = 2
tn = 1

[integrator]
h = 0.05

[task]
alpha_grid = 0.2:0.2:0.8
w_grid = -0.02:0.01:0.02
t = 10
population = 100
replicas = 2
warmup_windows = 5
";

fn heatchain(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("run.ini");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_heatchain"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--quiet")
        .output()
        .unwrap()
}

fn header_of(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .find(|l| !l.starts_with('#'))
        .unwrap()
        .to_string()
}

#[test]
fn cgf_and_rate_tables_have_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = heatchain(
        dir.path(),
        HARMONIC,
        &["cgf", "--seed", "1", "--out", out.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(header_of(&out.join("cgf.csv")), "alpha,e_hat,stderr,method,t,N");
    let text = fs::read_to_string(out.join("cgf.csv")).unwrap();
    assert!(text.contains("# alpha_convention:"));
    assert!(text.contains("# seed: 1"));
    assert_eq!(text.lines().filter(|l| l.contains(",cloning,")).count(), 4);

    let o = heatchain(dir.path(), HARMONIC, &["rate", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(header_of(&out.join("rate.csv")), "w,I,alpha_star,symmetry");
}

#[test]
fn identical_seeds_give_identical_tables() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = heatchain(
            dir.path(),
            HARMONIC,
            &[
                "cgf",
                "--seed",
                seed,
                "--threads",
                threads,
                "--out",
                out.to_str().unwrap(),
            ],
        );
        assert!(o.status.success());
        fs::read(out.join("cgf.csv")).unwrap()
    };
    let a = run("a", "5", "1");
    let b = run("b", "5", "2");
    let c = run("c", "6", "1");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn manifest_records_seeds_and_digests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for _ in 0..2 {
        let o = heatchain(
            dir.path(),
            HARMONIC,
            &["simulate", "--seed", "3", "--out", out.to_str().unwrap()],
        );
        assert!(o.status.success());
    }
    let log = fs::read_to_string(out.join("runs.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    let record: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(record["subcommand"], "simulate");
    assert_eq!(record["master_seed"], 3);
    assert_eq!(record["config"], HARMONIC);
    assert!(record["generator"].as_str().unwrap().contains("ChaCha"));
    assert!(record["task_seeds"]["trajectory"].is_u64());
    assert_eq!(record["integration_steps"], 200);
    for output in record["outputs"].as_array().unwrap() {
        let bytes = fs::read(out.join(output["file"].as_str().unwrap())).unwrap();
        assert_eq!(output["sha256"].as_str().unwrap(), sha256_hex(&bytes));
    }
    let leftovers = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains(".tmp"))
        .count();
    assert_eq!(leftovers, 0);
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = heatchain(
        dir.path(),
        &HARMONIC.replace("gamma", "gama"),
        &["cgf", "--out", out.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 9") && err.contains("gama"), "{err}");

    let o = heatchain(
        dir.path(),
        &HARMONIC.replace("t1 = 2", "t1 = -1"),
        &["cgf", "--out", out.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("t1"));

    let o = heatchain(
        dir.path(),
        &HARMONIC.replace("h = 0.05", "h = 0.05.1"),
        &["cgf", "--out", out.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 14, column 5"));
    assert!(!out.join("cgf.csv").exists());
}

#[test]
fn identity_checks_pass_on_harmonic_chain() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = HARMONIC.replace("alpha_grid = 0.2:0.2:0.8", "alpha_grid = 0, 0.3, 1\nsamples = 30");
    let o = heatchain(
        dir.path(),
        &config,
        &["check-identities", "--out", out.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("identities.csv")).unwrap();
    assert!(!text.contains(",false"));
}

#[test]
fn failed_diagnostics_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    // Too few shell states to see the linear decay of a harmonic chain.
    let config =
        format!("{HARMONIC}energies = 100, 1000, 10000\nsamples = 20\nnoise_samples = 4\n").replace("t = 10\n", "");
    let o = heatchain(
        dir.path(),
        &config,
        &["diagnose", "--seed", "7", "--out", out.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("check failed"));
    assert!(out.join("diagnose_liapunov.csv").exists());
}

#[test]
fn oracle_reports_riccati_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = heatchain(dir.path(), HARMONIC, &["oracle", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(
        header_of(&out.join("oracle_flows.csv")),
        "observable,mean_flow,mean_sigma"
    );
    let cgf = fs::read_to_string(out.join("oracle_cgf.csv")).unwrap();
    let rows: Vec<Vec<String>> = cgf
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    let e = |k: usize| rows[k][1].parse::<f64>().unwrap();
    assert!((e(0) - e(3)).abs() < 1e-8);
    assert!((e(1) - e(2)).abs() < 1e-8);
}
