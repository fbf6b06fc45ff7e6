use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ati(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ati")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_consolidate_eval_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let o = ati(&["train", "--preset", "dark_track", "--laps", "30", "--out", "run"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["frames.csv", "rl_log.csv", "table.csv", "policy.csv", "per_class.csv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }

    let o = ati(&["consolidate", "run/table.csv", "--out", "again.csv"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(d.join("again.csv")).unwrap(), fs::read(d.join("run/policy.csv")).unwrap());

    let o = ati(
        &[
            "eval",
            "--preset",
            "dark_track",
            "--laps",
            "4",
            "--sensing",
            "l1_l2_inference",
            "--inference",
            "l3_l4_split",
            "--policy",
            "run/policy.csv",
            "--out",
            "ev",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = stdout(&o).lines().next().unwrap().to_string();
    assert!(summary.starts_with("laps=4 "), "{summary}");

    let o = ati(&["replay", "ev/laps.csv"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), summary, "replay with the original thresholds reproduces the run");

    let o = ati(&["replay", "ev/laps.csv", "--tau-conf", "0.9", "--out", "pc.csv"], d);
    assert!(o.status.success());
    assert!(fs::read_to_string(d.join("pc.csv")).unwrap().starts_with("class,laps,accuracy"));
}

#[test]
fn eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        let o = ati(&["eval", "--preset", "dark_motion", "--laps", "1", "--seed", "5", "--sensing", "l1", "--out", out], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["frames.csv", "laps.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = ati(&["show-config", "--preset", "dark_motion", "--laps", "1", "--set", "network.late_prob=0.25"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let toml = stdout(&o);
    assert!(toml.contains("late_prob = 0.25"));
    fs::write(d.join("exp.toml"), &toml).unwrap();

    let o = ati(&["eval", "--config", "exp.toml", "--frame-route", "--out", "fr"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("stale_discarded="));
}

#[test]
fn grid_and_ablate_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = ati(&["grid", "--preset", "dark_motion", "--laps", "1", "--no-policy-rows"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 7);

    let o = ati(&["ablate", "--preset", "dark_motion", "--laps", "1", "--taus", "0.3,0.6,0.9", "--out", "abl.csv"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let abl = fs::read_to_string(d.join("abl.csv")).unwrap();
    assert_eq!(abl.lines().count(), 4);
    assert!(abl.starts_with("tau_conf,accuracy,escalation_rate\n0.300000,"));
}

#[test]
fn dynamic_trains_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = ati(&["dynamic", "--preset", "alternating", "--laps", "2", "--train-first", "--out", "dyn"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(d.join("dyn/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(d.join("dyn/ati_frames.csv").exists());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[run]\nseed = 1\n").unwrap();
    let cases: [&[&str]; 6] = [
        &["eval", "--preset", "nope"],
        &["eval"],
        &["eval", "--config", "bad.toml"],
        &["eval", "--preset", "dark_track", "--set", "routing.tau_conf=1.5"],
        &["grid", "--preset", "dark_motion", "--laps", "1"],
        &["frobnicate"],
    ];
    for args in cases {
        let o = ati(args, d);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty());
    }
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("laps.csv"), "lap,truth_label\n0,x\n").unwrap();
    fs::write(d.join("table.csv"), "motion_bin,light_bin,d_iso,d_exp,q,count\n9,0,0,0,0.5,1\n").unwrap();
    let o = ati(&["replay", "laps.csv"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
    let o = ati(&["replay", "missing.csv"], d);
    assert_eq!(o.status.code(), Some(2));
    let o = ati(&["consolidate", "table.csv"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn help_exits_cleanly() {
    let o = ati(&["--help"], Path::new("."));
    assert!(o.status.success());
    for sub in ["train", "eval", "grid", "ablate", "dynamic", "replay", "consolidate"] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
}
