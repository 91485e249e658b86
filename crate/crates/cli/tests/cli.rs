use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
nodes = 16
sample_size = 4
max_rounds = 150
stop_at_target = true
activity_window = 1000000

[task]
name = "linreg"
dim = 10
samples_per_node = 100

[compute]
kind = "constant"
ms = 500.0

[modest]
no_straggler_timeout = true
"#;

fn modest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modest"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_accepts_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let o = modest(&["validate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("4 / 1 / 1"), "{out}");
}

#[test]
fn low_success_fraction_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!("success_fraction = 0.4\n{SMALL}"),
    );
    let out = dir.path().join("out");
    let o = modest(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("0.5 < sf"), "{}", stderr(&o));
}

#[test]
fn more_aggregators_than_sample_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("aggregators = 5\n{SMALL}"));
    let o = modest(&["validate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("sample_szie = 3\n{SMALL}"));
    let o = modest(&["validate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sample_szie"), "{}", stderr(&o));
}

#[test]
fn run_writes_exports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let o = modest(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "timeline.csv",
        "bytes.csv",
        "rounds.csv",
        "propagation.csv",
        "summary.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["stalled"], false);
    assert!(summary["rounds_to_target"].as_u64().is_some());
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let digest = |seed: &str| {
        let out = dir.path().join(seed);
        let o = modest(&[
            "run",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let s: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        s["event_digest"].as_str().unwrap().to_string()
    };
    assert_ne!(digest("1"), digest("2"));
}

#[test]
fn crashing_everyone_stalls() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("success_fraction = 1.0\naggregators = 1\n");
    for j in 0..16 {
        text.push_str(&format!(
            "[[faults]]\ntime_ms = 5000.0\naction = \"crash\"\nnode = {j}\n"
        ));
    }
    let cfg = write_config(dir.path(), "c.toml", &format!("{text}{SMALL}"));
    let out = dir.path().join("out");
    let o = modest(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("stalled"), "{}", stderr(&o));
    assert!(out.join("summary.json").is_file());
}

#[test]
fn sweep_covers_grid_and_rounds_ignore_a() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let o = modest(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--grid-s",
        "2,4",
        "--grid-a",
        "1,2",
        "--seeds",
        "0,1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["s", "a", "seed", "rounds_to_target", "vtime_to_target"]
    );
    let rows: Vec<Vec<String>> = rdr
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 8);
    for s in ["2", "4"] {
        for seed in ["0", "1"] {
            let rounds: Vec<&str> = rows
                .iter()
                .filter(|r| r[0] == s && r[2] == seed)
                .map(|r| r[3].as_str())
                .collect();
            assert_eq!(rounds.len(), 2);
            assert!(!rounds[0].is_empty());
            assert_eq!(rounds[0], rounds[1], "s={s} seed={seed}");
        }
    }
    // Larger samples need no more rounds on average.
    let mean = |s: &str| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r[0] == s)
            .map(|r| r[3].parse().unwrap())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(
        mean("4") <= mean("2"),
        "s=4: {} s=2: {}",
        mean("4"),
        mean("2")
    );
}

#[test]
fn sweep_rejects_invalid_cell_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let o = modest(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--grid-s",
        "2",
        "--grid-a",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("s=2 a=3"), "{}", stderr(&o));
    assert!(!out.join("sweep.csv").exists());
}

#[test]
fn compare_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = modest(&["compare", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        fs::read_to_string(out.join("comparison.json")).unwrap()
    };
    let first = run("a");
    assert_eq!(first, run("b"));
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    let methods: Vec<&str> = v["methods"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["method"].as_str().unwrap())
        .collect();
    assert_eq!(methods, ["modest", "fedavg", "dsgd"]);
    assert!(v["dsgd_over_modest_model_bytes"].as_f64().unwrap() > 1.0);
    let fedavg = &v["methods"][1];
    let share = fedavg["max_node_share"].as_f64().unwrap();
    assert!((share - 0.5).abs() < 0.01, "server share {share}");
}
