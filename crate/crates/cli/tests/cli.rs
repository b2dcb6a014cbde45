use std::process::{Command, Stdio};

const SMALL: &str = "num_clients = 6\nalpha = 1\ndata.num_classes = 3\ndata.dim = 4\n\
data.samples_per_class = 20\ndata.test_samples_per_class = 10\nmodel.hidden = 5\n\
staleness.target_class = 1\nstaleness.num_stale_clients = 2\nstaleness.epochs = 2\n\
total_epochs = 4\nopt.learning_rate = 0.1\ngi.max_iters = 5\nseeds = 0\n";

fn sfl() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sfl"));
    c.env("SFL_THREADS", "1")
        .env("RUST_LOG", "error")
        .stdout(Stdio::null());
    c
}

#[test]
fn run_then_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("out");
    let status = sfl()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "3", "--method", "ours", "--out-dir"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("metrics_seed3.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.contains(",ours,3,")));
    let before = std::fs::read(out.join("summary.json")).unwrap();
    let status = sfl()
        .args(["summarize", "--in"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert_eq!(std::fs::read(out.join("summary.json")).unwrap(), before);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "alpha = -1\n").unwrap();
    let out = sfl().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha must be > 0"));
    let out = sfl()
        .args(["run", "--preset", "nonexistent"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(&cfg, "colour = blue\n").unwrap();
    let out = sfl().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn preset_with_overrides_runs_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("sweep");
    let status = sfl()
        .args(["run", "--preset", "table9", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for label in ["staleness=10", "staleness=40", "staleness=100"] {
        assert!(
            out.join(label).join("metrics_seed0.csv").exists(),
            "{label}"
        );
    }
}

#[test]
fn diverging_runs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("div.cfg");
    std::fs::write(
        &cfg,
        format!("{SMALL}opt.learning_rate = 1e300\nmethods = unweighted\n"),
    )
    .unwrap();
    let out = dir.path().join("out");
    let status = sfl()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let summary = std::fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("diverged"));
}
