use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn selio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selio"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", "--output", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = selio(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn count_files(dir: &Path) -> usize {
    fs::read_dir(dir).unwrap().count()
}

#[test]
fn stationary_simulation_writes_one_file_per_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(
        &data,
        &["--set", "motion=stationary", "--set", "duration=5"],
    );
    assert_eq!(count_files(&data.join("sweeps")), 50);
    assert!(data.join("imu.csv").exists());
    assert!(data.join("gt.txt").exists());
}

#[test]
fn simulation_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        simulate(d, &["--seed", "7", "--set", "duration=2"]);
    }
    for f in ["imu.csv", "sweeps.csv", "gt.txt", "sweeps/000005.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = dir.path().join("c");
    simulate(&c, &["--seed", "8", "--set", "duration=2"]);
    assert_ne!(
        fs::read(a.join("imu.csv")).unwrap(),
        fs::read(c.join("imu.csv")).unwrap()
    );
}

#[test]
fn evaluating_ground_truth_against_itself_gives_zero() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--set", "duration=3"]);
    let gt = dir.path().join("gt.txt");
    let o = selio(&[
        "evaluate",
        "--estimate",
        gt.to_str().unwrap(),
        "--ground-truth",
        gt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ate_rmse=0.000000"), "{}", stdout(&o));
}

#[test]
fn disjoint_time_ranges_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    fs::write(&a, "0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n2 2 0 0 0 0 0 1\n").unwrap();
    fs::write(&b, "10 0 0 0 0 0 0 1\n11 1 0 0 0 0 0 1\n12 2 0 0 0 0 0 1\n").unwrap();
    let o = selio(&[
        "evaluate",
        "--estimate",
        a.to_str().unwrap(),
        "--ground-truth",
        b.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[data]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn missing_imu_file_fails_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = selio(&[
        "run",
        "--dataset",
        dir.path().to_str().unwrap(),
        "--output",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("imu.csv"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_are_usage_errors() {
    let o = selio(&["run", "--mode", "sideways"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[usage]:"), "{}", stderr(&o));
    let o = selio(&["print-config", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = selio(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[usage]:"), "{}", stderr(&o));
}

#[test]
fn printed_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = selio(&["print-config", "--set", "mode=elastic", "--set", "seed=9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let path = dir.path().join("run.cfg");
    fs::write(&path, stdout(&o)).unwrap();
    let again = selio(&["print-config", "--config", path.to_str().unwrap()]);
    assert_eq!(stdout(&again), stdout(&o));
    assert!(stdout(&o).contains("mode = elastic"));
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines
        .next()
        .unwrap()
        .split(',')
        .map(str::to_owned)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect();
    (header, rows)
}

#[test]
fn traditional_run_freezes_begin_state_and_ablation_covers_all_modes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data, &["--set", "duration=4"]);

    let out = dir.path().join("trad");
    let o = selio(&[
        "run",
        "--mode",
        "traditional",
        "--dataset",
        data.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("trajectory.txt").exists());
    assert!(out.join("metrics.txt").exists());
    let (header, rows) = csv_rows(&out.join("states.csv"));
    let b0 = header.iter().position(|h| h == "b_t").unwrap();
    let e0 = header.iter().position(|h| h == "e_t").unwrap();
    assert!(rows.len() > 10);
    for w in rows.windows(2) {
        // begin state of each sweep is the previous end state, column by column
        assert_eq!(w[1][b0..b0 + 17], w[0][e0..e0 + 17]);
    }

    let out = dir.path().join("ablation");
    let o = selio(&[
        "ablate",
        "--dataset",
        data.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&out.join("ablation.csv"));
    assert_eq!(header[0], "mode");
    let modes: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(modes.len(), 3);
    for m in ["traditional", "elastic", "semi-elastic"] {
        assert!(modes.contains(&m), "{modes:?}");
        assert!(out.join(m).join("trajectory.txt").exists());
    }
}
