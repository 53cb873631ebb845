use std::path::Path;
use std::process::{Command, Output};

use cradle_core::coeff::CoefficientTable;
use cradle_core::dynamics::read_probe_csv;
use cradle_core::experiment::RunManifest;
use cradle_core::table::CsvTable;
use sha2::{Digest, Sha256};

fn cradle(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cradle"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    std::fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

const DECOUPLED: &str = r#"
[system]
modes = 2
alpha = 2.0
[environment]
gamma_big = 0.0
gamma = 1.0
[numerics]
cutoff = 16
dt = 0.05
t_max = 2.0
[output]
directory = "out"
wigner_times = [1.0]
wigner_points = 21
rho_times = [2.0]
"#;

const ENSEMBLE: &str = r#"
[system]
modes = 2
alpha = 1.0
[environment]
gamma = 0.5
delta = 2.0
[numerics]
cutoff = 8
dt = 0.05
t_max = 1.0
solver = "ensemble"
trajectories = 40
blocks = 4
seed = 11
[output]
directory = "ens"
"#;

#[test]
fn decoupled_run_keeps_cavity_one_and_lists_every_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.toml", DECOUPLED);
    let out = cradle(tmp.path(), &["run", "--config", &cfg]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = tmp.path().join("out");
    let probes = read_probe_csv(&dir.join("fidelity.csv")).unwrap();
    for f in probes.dense_column("F1").unwrap() {
        assert!((f - 1.0).abs() < 1e-6, "{f}");
    }
    let manifest = RunManifest::read(&dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.command, "run");
    let mut on_disk: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    let listed: Vec<String> = manifest.files.iter().map(|f| f.path.clone()).collect();
    assert_eq!(listed, on_disk);
    assert!(listed.iter().any(|p| p.starts_with("wigner_c2_t1")));
    for f in &manifest.files {
        let bytes = std::fs::read(dir.join(&f.path)).unwrap();
        assert_eq!(f.bytes, bytes.len() as u64);
        assert_eq!(f.sha256, hex::encode(Sha256::digest(&bytes)));
    }
    assert_eq!(manifest.runs[0].status, "ok");
    assert!(manifest.runs[0].convergence.as_ref().unwrap().passed);
}

#[test]
fn seeded_runs_and_manifest_replay_are_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "ens.toml", ENSEMBLE);
    for (dir, workers) in [("a", "1"), ("b", "2")] {
        let out = cradle(
            tmp.path(),
            &[
                "run",
                "--config",
                &cfg,
                "--out-dir",
                dir,
                "--workers",
                workers,
            ],
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let replay = cradle(
        tmp.path(),
        &["run", "--config", "a/manifest.json", "--out-dir", "c"],
    );
    assert!(
        replay.status.success(),
        "{}",
        String::from_utf8_lossy(&replay.stderr)
    );
    let files = |d: &str| {
        RunManifest::read(&tmp.path().join(d).join("manifest.json"))
            .unwrap()
            .files
    };
    assert_eq!(files("a"), files("b"));
    assert_eq!(files("a"), files("c"));

    let other = cradle(
        tmp.path(),
        &["run", "--config", &cfg, "--out-dir", "d", "--seed", "12"],
    );
    assert!(other.status.success());
    assert_ne!(files("a"), files("d"));
}

#[test]
fn unknown_key_is_a_config_error_with_suggestion() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.toml",
        &DECOUPLED.replace("cutoff = 16", "cutof = 16"),
    );
    let out = cradle(tmp.path(), &["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("cutof") && err.contains("did you mean `cutoff`"),
        "{err}"
    );

    let out = cradle(tmp.path(), &["run", "--preset", "fig99"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_halving_check_exits_numerical() {
    let tmp = tempfile::tempdir().unwrap();
    let text = DECOUPLED
        .replace("gamma_big = 0.0", "gamma_big = 1.0")
        .replace("dt = 0.05", "dt = 0.5\nhalving_tolerance = 1e-12");
    let cfg = write(tmp.path(), "coarse.toml", &text);
    let out = cradle(tmp.path(), &["run", "--config", &cfg]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest = RunManifest::read(&tmp.path().join("out/manifest.json")).unwrap();
    assert_eq!(manifest.runs[0].status, "unconverged");
    assert!(tmp.path().join("out/fidelity.csv").exists());
}

#[test]
fn sweep_records_failed_points_and_exits_partial() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ENSEMBLE.replace(
        "solver = \"ensemble\"",
        "solver = \"master\"\nhalving_check = false",
    ) + "[sweep]\nparameter = \"alpha\"\nvalues = [1.0, 6.0]\n";
    let cfg = write(tmp.path(), "sweep.toml", &text);
    let out = cradle(tmp.path(), &["sweep", "--config", &cfg]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = CsvTable::read(
        &tmp.path().join("ens/sweep_summary.csv"),
        "# schema: cradle-sweep-summary v1",
    )
    .unwrap();
    let status: Vec<&str> = summary.rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(status, ["ok", "failed"]);
    let long = CsvTable::read(
        &tmp.path().join("ens/sweep.csv"),
        "# schema: cradle-sweep v1",
    )
    .unwrap();
    assert_eq!(long.rows.len(), 3);
    assert!(tmp.path().join("ens/point000_fidelity.csv").exists());
}

#[test]
fn coeffs_markovian_and_symmetric_ou() {
    let tmp = tempfile::tempdir().unwrap();
    let markov = "[system]\nmodes = 2\n[environment]\nkind = \"markovian\"\n[numerics]\ndt = 0.1\nt_max = 2\n[output]\ndirectory = \"m\"\n";
    let cfg = write(tmp.path(), "m.toml", markov);
    let out = cradle(tmp.path(), &["coeffs", "--config", &cfg]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = CoefficientTable::read_csv(&tmp.path().join("m/coefficients.csv")).unwrap();
    for n in 0..=table.steps() {
        for f in table.at_step(n) {
            assert!((f.re - 0.5).abs() < 1e-12 && f.im.abs() < 1e-12);
        }
    }

    let ou = "[system]\nmodes = 2\n[environment]\ngamma = 0.1\ndelta = 10.0\n[numerics]\ndt = 0.05\nt_max = 50\n[output]\ndirectory = \"o\"\n";
    let cfg = write(tmp.path(), "o.toml", ou);
    let out = cradle(tmp.path(), &["coeffs", "--config", &cfg]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = CoefficientTable::read_csv(&tmp.path().join("o/coefficients.csv")).unwrap();
    for n in 0..=table.steps() {
        let f = table.at_step(n);
        assert_eq!(f[0], f[1]);
    }
}

#[test]
fn validate_reports_memory_and_cutoff() {
    let tmp = tempfile::tempdir().unwrap();
    let big = write(
        tmp.path(),
        "big.toml",
        "[system]\nmodes = 3\n[environment]\ngamma = 0.1\ndelta = 5.0\n[numerics]\ncutoff = 20\nsolver = \"master\"\n",
    );
    let out = cradle(tmp.path(), &["validate", "--config", &big]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains("warning[memory]") && text.contains("ensemble"),
        "{text}"
    );

    let low = write(
        tmp.path(),
        "low.toml",
        "[system]\nmodes = 2\nalpha = 2.0\n[environment]\ngamma = 0.1\ndelta = 10.0\n[numerics]\ncutoff = 8\n",
    );
    let text = String::from_utf8_lossy(&cradle(tmp.path(), &["validate", "--config", &low]).stdout)
        .into_owned();
    assert!(text.contains("warning[cutoff]"), "{text}");

    let out = cradle(tmp.path(), &["validate", "--preset", "fig2a"]);
    assert!(out.status.success());
}
