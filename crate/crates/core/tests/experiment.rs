use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cradle_core::config::ExperimentConfig;
use cradle_core::experiment::{
    cmd_sweep, coefficient_map, read_fmap, simulate, write_fmap, CommandOptions, RunManifest,
};

fn config(text: &str, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(text).unwrap();
    cfg.output.directory = dir.to_path_buf();
    cfg.validate().unwrap();
    cfg
}

const SWEEP: &str = r#"
[system]
modes = 2
alpha = 1.0
[environment]
gamma = 1.0
delta = 2.0
[numerics]
cutoff = 8
dt = 0.05
t_max = 2.0
halving_check = false
[sweep]
parameter = "delta"
values = VALUES
[output]
probe_interval = 0.5
"#;

fn point_files(dir: &Path, manifest: &RunManifest) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for run in &manifest.runs {
        let name = format!("{}_fidelity.csv", run.label);
        let key = format!("{}", run.sweep_value.unwrap());
        out.insert(key, fs::read(dir.join(name)).unwrap());
    }
    out
}

#[test]
fn sweep_points_do_not_depend_on_order() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let opts = CommandOptions::default();
    let fwd = config(&SWEEP.replace("VALUES", "[0.0, 4.0]"), a.path());
    let rev = config(&SWEEP.replace("VALUES", "[4.0, 0.0]"), b.path());
    let ma = cmd_sweep(&fwd, &opts).unwrap();
    let mb = cmd_sweep(&rev, &opts).unwrap();
    assert_eq!(ma.failed_runs(), 0);
    assert_eq!(point_files(a.path(), &ma), point_files(b.path(), &mb));
}

#[test]
fn fmap_dominance_grows_with_detuning_and_memory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        r#"
[system]
modes = 2
alpha = 2.0
[environment]
tau = 2.0
delta = 2.0
[fmap]
delta = { start = 3.0, stop = 9.0, points = 4 }
tau = { start = 0.5, stop = 2.0, points = 3 }
"#,
        dir.path(),
    );
    let points = coefficient_map(&cfg).unwrap();
    assert_eq!(points.len(), 4 * 3 * 2);
    let at = |delta: f64, tau: f64| {
        points
            .iter()
            .find(|p| p.cavity == 1 && p.delta == delta && p.tau == tau)
            .unwrap()
            .dominance
    };
    let deltas = [3.0, 5.0, 7.0, 9.0];
    let taus = [0.5, 1.25, 2.0];
    for tau in taus {
        for w in deltas.windows(2) {
            assert!(at(w[1], tau) > at(w[0], tau), "tau {tau}, delta {w:?}");
        }
    }
    for delta in deltas {
        for w in taus.windows(2) {
            assert!(
                at(delta, w[1]) > at(delta, w[0]),
                "delta {delta}, tau {w:?}"
            );
        }
    }
    assert!(points.iter().all(|p| !p.singular));
    let path = dir.path().join("fmap.csv");
    write_fmap(&points, &path).unwrap();
    assert_eq!(read_fmap(&path).unwrap(), points);
}

#[test]
fn resonant_long_memory_points_are_marked_singular() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        r#"
[system]
modes = 2
[environment]
tau = 2.0
delta = 1.0
[fmap]
delta = { start = 1.0, stop = 5.0, points = 2 }
tau = { start = 2.0, stop = 2.0, points = 1 }
"#,
        dir.path(),
    );
    let points = coefficient_map(&cfg).unwrap();
    let singular: Vec<(f64, bool)> = points.iter().map(|p| (p.delta, p.singular)).collect();
    assert_eq!(
        singular,
        [(1.0, true), (1.0, true), (5.0, false), (5.0, false)]
    );
    assert!(points[0].dominance.is_nan());
    let path = dir.path().join("fmap.csv");
    write_fmap(&points, &path).unwrap();
    let back = read_fmap(&path).unwrap();
    assert!(back[1].re.is_nan() && back[1].singular);
    assert_eq!(back[3], points[3]);
}

#[test]
fn balanced_weights_make_the_far_cavities_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        r#"
[system]
modes = 3
alpha = 1.0
eta = 0.0
[environment]
gamma = 0.5
delta = 2.0
[numerics]
cutoff = 6
dt = 0.05
t_max = 2.0
solver = "ensemble"
trajectories = 40
blocks = 4
[output]
probe_interval = 0.5
"#,
        dir.path(),
    );
    let sim = simulate(&cfg).unwrap();
    let pair = sim.pair_distance.unwrap();
    assert!(pair.identical, "{pair:?}");
    for p in 0..sim.times.len() {
        assert_eq!(sim.fidelity.values[1][p], sim.fidelity.values[2][p]);
    }
}
