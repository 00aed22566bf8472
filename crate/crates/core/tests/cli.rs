use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn u4_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/u4.cfg")
}

fn uscatter(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uscatter"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("USCATTER_MAX_CELLS")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("grid.p = 2\ngrid.n = 1\ngrid.M = 1\ngrid.m = 1\n{body}")).unwrap();
    path
}

/// Data rows of a CSV written by the binary, after the comment and header.
fn rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn steady_on_u4() {
    let out = tempfile::tempdir().unwrap();
    let res = uscatter(&["steady"], &u4_config(), out.path());
    assert_eq!(res.status.code(), Some(0));
    for row in rows(&out.path().join("steady_states.csv")) {
        let n: f64 = row[1].parse().unwrap();
        let phi: f64 = row[2].parse().unwrap();
        assert!((n - 0.5).abs() < 1e-12 && (phi - 1.0).abs() < 1e-12);
    }
    for row in rows(&out.path().join("steady_summary.csv")) {
        let v: f64 = row[1].parse().unwrap();
        match row[0].as_str() {
            "rho" => assert!((v - 1.0).abs() < 1e-12),
            "steady_residual" | "dual_residual" => assert!(v <= 1e-10),
            _ => {}
        }
    }
}

#[test]
fn decay_on_u4_recovers_rate() {
    let out = tempfile::tempdir().unwrap();
    let res = uscatter(&["decay"], &u4_config(), out.path());
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = rows(&out.path().join("decay_summary.csv"));
    let rate: f64 = summary.iter().find(|r| r[0] == "fitted_rate").unwrap()[1].parse().unwrap();
    assert!((rate - 4.0).abs() < 1e-3, "{rate}");
}

#[test]
fn negative_kernel_entry_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("k.csv"),
        "1,1,1,1\n1,1,-0.5,1\n1,1,1,1\n1,1,1,1\n",
    )
    .unwrap();
    let cfg = write_config(dir.path(), "kernel.variant = table\nkernel.path = k.csv\n");
    let res = uscatter(&["simulate"], &cfg, &dir.path().join("out"));
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("negative value -0.5"), "{err}");
}

#[test]
fn failed_property_exits_with_two() {
    // No loss term: mass is created, so distances between solutions grow.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "kernel.k_mode = analytic\nkernel.analytic_k = 0\nrun.t_end = 1\nintegrator.dt = 0.01\n",
    );
    let res = uscatter(&["stability"], &cfg, &dir.path().join("out"));
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stdout).contains("exploratory"));
}

#[test]
fn bad_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "kernel.variant = nonsense\n");
    let res = uscatter(&["steady"], &cfg, &dir.path().join("out"));
    assert_eq!(res.status.code(), Some(1));
    let missing = uscatter(&["steady"], &dir.path().join("absent.cfg"), &dir.path().join("out"));
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn grid_limit_from_environment() {
    let out = tempfile::tempdir().unwrap();
    let res = Command::new(env!("CARGO_BIN_EXE_uscatter"))
        .args(["steady", "--config"])
        .arg(u4_config())
        .arg("--out")
        .arg(out.path())
        .env("USCATTER_MAX_CELLS", "3")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("limit is 3"));
}

#[test]
fn every_csv_carries_the_provenance_line() {
    let out = tempfile::tempdir().unwrap();
    for sub in ["simulate", "steady", "alpha", "decay", "rescale", "stability", "check"] {
        let res = uscatter(&[sub], &u4_config(), out.path());
        assert_eq!(res.status.code(), Some(0), "{sub}");
    }
    let mut count = 0;
    for entry in fs::read_dir(out.path()).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("# p=2,n=1,M=1,m=1,k_mode=column_sum,config_sha256="), "{}", path.display());
        assert!(first.contains(",M0=1"));
        count += 1;
    }
    assert!(count >= 12);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "kernel.variant = random_table\ninitial.variant = random_positive\nrun.t_end = 1\nrun.seed = 99\n",
    );
    let a = uscatter(&["simulate"], &cfg, &dir.path().join("a"));
    let b = uscatter(&["simulate"], &cfg, &dir.path().join("b"));
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    for name in ["simulate_trajectory.csv", "simulate_diagnostics.csv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap()
        );
    }
}

#[test]
fn time_dependent_kernel_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "kernel.modulation = periodic\nkernel.modulation_amplitude = 0.5\nkernel.modulation_frequency = 2\nrun.t_end = 1\n",
    );
    for sub in ["simulate", "stability", "check"] {
        let res = uscatter(&[sub], &cfg, &dir.path().join("out"));
        assert_eq!(res.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&res.stdout));
    }
}
