use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use stnngp::pipeline::Dataset;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stnngp"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn toy_inputs(dir: &Path) -> PathBuf {
    write(dir, "stations.csv", "station_id,lat,lon\nA,0,0\nB,0,3\nG1,0,1\nG2,0,3\n");
    let days = ["2024-01-01", "2024-01-02", "2024-01-03", "2024-01-04", "2024-01-05", "2024-01-06"];
    let series = |rows: &[(&str, [&str; 6])]| {
        let mut s = String::from("station_id,date,value\n");
        for (id, vals) in rows {
            for (d, v) in days.iter().zip(vals) {
                s.push_str(&format!("{id},{d},{v}\n"));
            }
        }
        s
    };
    write(
        dir,
        "water.csv",
        &series(&[("A", ["1", "2", "3", "4", "5", "6"]), ("B", ["10", "10", "12", "12", "14", "NA"])]),
    );
    write(
        dir,
        "rain.csv",
        &series(&[("G1", ["0", "0", "0", "0", "5", "10"]), ("G2", ["10", "20", "30", "40", "50", "60"])]),
    );
    write(
        dir,
        "toy.cfg",
        "data.stations = stations.csv\ndata.water_level = water.csv\ndata.precipitation = rain.csv\n\
         data.metric = planar\nsplit.holdout_stations = 0\nsplit.holdout_days = 1\nmodel.m = 1\n",
    )
}

#[test]
fn prep_produces_the_hand_computed_panel() {
    let dir = tempfile::tempdir().unwrap();
    toy_inputs(dir.path());
    run(dir.path(), &["--config", "toy.cfg", "prep"]);
    let ds = Dataset::read_dir(&dir.path().join("out/dataset")).unwrap();
    assert_eq!(ds.stations.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["A", "B"]);
    assert_eq!(ds.covariate_names, ["intercept", "precipitation"]);

    // centered over the five training days: A mean 3, B mean 11.6
    let a = [-2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
    let b = [-1.6, -1.6, 0.4, 0.4, 2.4];
    for t in 0..6 {
        assert!((ds.values[0][t].unwrap() - a[t]).abs() < 1e-12);
    }
    for t in 0..5 {
        assert!((ds.values[1][t].unwrap() - b[t]).abs() < 1e-12);
    }
    assert_eq!(ds.values[1][5], None);

    // trailing 5-day means: G1 0,0,0,0,1,3 and G2 10,15,20,25,30,40;
    // A sits at distances 1 and 3, so weights 1 and 1/9; B coincides with G2
    let rain_a = [1.0, 1.5, 2.0, 2.5, 3.9, 6.7];
    let rain_b = [10.0, 15.0, 20.0, 25.0, 30.0, 40.0];
    for t in 0..6 {
        assert_eq!(ds.covariates[t][(0, 0)], 1.0);
        assert!((ds.covariates[t][(0, 1)] - rain_a[t]).abs() < 1e-12, "day {t}");
        assert!((ds.covariates[t][(1, 1)] - rain_b[t]).abs() < 1e-12, "day {t}");
    }
    let means = std::fs::read_to_string(dir.path().join("out/dataset/station_means.csv")).unwrap();
    assert!(means.starts_with("station_id,mean\nA,3\nB,11.6"), "{means}");
}

#[test]
fn one_iteration_smoke_run_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    toy_inputs(dir.path());
    let start = Instant::now();
    let flags = ["--config", "toy.cfg", "--set", "mcmc.iterations=1", "--set", "mcmc.warmup=1", "--set", "mcmc.chains=1"];
    for cmd in ["prep", "fit", "predict"] {
        let mut args = flags.to_vec();
        args.push(cmd);
        run(dir.path(), &args);
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
    let preds = std::fs::read_to_string(dir.path().join("out/predict/predictions_original.csv")).unwrap();
    assert!(preds.lines().skip(1).all(|l| l.ends_with(",original")));
}

const SMALL: &str = "synth.n_locations = 30\nsynth.n_days = 10\nsplit.holdout_stations = 5\n\
split.holdout_days = 2\nmcmc.chains = 2\nmcmc.iterations = 40\nmcmc.warmup = 40\nmodel.m = 5\nseed = 11\n";

fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for stage in ["dataset", "split", "fit", "predict", "evaluate"] {
        let mut files: Vec<PathBuf> = std::fs::read_dir(root.join(stage))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "csv" || e == "txt" || e == "json"))
            .map(|p| p.strip_prefix(root).unwrap().to_path_buf())
            .collect();
        files.sort();
        out.extend(files);
    }
    out
}

#[test]
fn pipeline_and_replay_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "small.cfg", SMALL);
    for out in ["a", "b"] {
        for cmd in ["simulate", "fit", "predict", "evaluate"] {
            run(dir.path(), &["--config", "small.cfg", "--out-dir", out, cmd]);
        }
    }
    for cmd in ["simulate", "fit", "predict", "evaluate"] {
        let manifest = format!("a/manifests/{cmd}.json");
        run(dir.path(), &["--out-dir", "c", "replay", &manifest]);
    }
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let files = csv_files(&a);
    assert!(files.len() >= 12, "{files:?}");
    for f in &files {
        let x = std::fs::read(a.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{} differs between runs", f.display());
        assert_eq!(x, std::fs::read(c.join(f)).unwrap(), "{} differs after replay", f.display());
    }
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| bin().current_dir(dir.path()).args(args).output().unwrap().status.code();
    assert_eq!(code(&["--set", "model.q=1", "fit"]), Some(2));
    assert_eq!(code(&["--set", "data.stations=missing.csv", "prep"]), Some(3));
    assert_eq!(code(&["fit"]), Some(3));
    write(dir.path(), "bad.cfg", "synth.phi = 1.5\n");
    assert_eq!(code(&["--config", "bad.cfg", "simulate"]), code(&["--config", "bad.cfg", "simulate"]));
    assert_ne!(code(&["--config", "bad.cfg", "simulate"]), Some(0));
}
