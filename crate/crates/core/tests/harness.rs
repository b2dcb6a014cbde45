use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;

use sfl_core::config::{parse_config, serialize_config, ExperimentConfig, Method};
use sfl_core::harness::suite::{load_dir, read_metrics_csv};
use sfl_core::harness::{
    compare_epochs_to_accuracy, preset, run_preset, run_suite, summarize, PresetKind,
};

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.num_clients = 6;
    c.alpha = 1.0;
    c.data.num_classes = 3;
    c.data.dim = 4;
    c.data.samples_per_class = 20;
    c.data.test_samples_per_class = 10;
    c.model.hidden = vec![5];
    c.staleness.target_class = 1;
    c.staleness.num_stale_clients = 2;
    c.staleness.staleness_epochs = 2;
    c.total_epochs = 8;
    c.opt.learning_rate = 0.1;
    c.gi.max_iters = 5;
    c.seeds = vec![0];
    c
}

const SMALL_OVERRIDES: &str = "num_clients = 6\ndata.num_classes = 3\n\
data.dim = 4\ndata.samples_per_class = 20\ndata.test_samples_per_class = 10\nmodel.hidden = 5\n\
staleness.target_class = 1\nstaleness.num_stale_clients = 2\nstaleness.epochs = 2\n\
total_epochs = 6\nopt.learning_rate = 0.1\ngi.max_iters = 5\nseeds = 0,1";

/// Independent CSV scan: method → seed → target accuracies in file order.
fn scan(dir: &Path) -> BTreeMap<String, BTreeMap<u64, Vec<f64>>> {
    let mut out: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap().to_str().unwrap().to_string();
        if !(name.starts_with("metrics_seed") && name.ends_with(".csv")) {
            continue;
        }
        let text = std::fs::read_to_string(&p).unwrap();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let acc: f64 = if f[4].is_empty() {
                0.0
            } else {
                f[4].parse().unwrap()
            };
            out.entry(f[1].to_string())
                .or_default()
                .entry(f[2].parse().unwrap())
                .or_default()
                .push(acc);
        }
    }
    out
}

#[test]
fn one_method_one_seed_writes_one_row_per_epoch() {
    let mut cfg = small();
    cfg.methods = vec![Method::Unweighted];
    cfg.total_epochs = 5;
    let dir = tempfile::tempdir().unwrap();
    run_suite(&cfg, dir.path()).unwrap();
    let rows = read_metrics_csv(&dir.path().join("metrics_seed0.csv")).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(!dir.path().join("detections_seed0.csv").exists());
}

#[test]
fn rerun_into_fresh_directory_is_byte_identical() {
    let cfg = small();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_suite(&cfg, a.path()).unwrap();
    run_suite(&cfg, b.path()).unwrap();
    for f in [
        "metrics_seed0.csv",
        "detections_seed0.csv",
        "runs_seed0.json",
        "summary.json",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn seeds_run_separately_summarize_like_seeds_run_together() {
    let mut cfg = small();
    cfg.seeds = vec![0, 1];
    let together = tempfile::tempdir().unwrap();
    let apart = tempfile::tempdir().unwrap();
    let joint = run_suite(&cfg, together.path()).unwrap();
    for s in [1, 0] {
        let mut one = cfg.clone();
        one.seeds = vec![s];
        run_suite(&one, apart.path()).unwrap();
    }
    assert_eq!(summarize(apart.path()).unwrap(), joint);
}

#[test]
fn summary_matches_an_independent_scan() {
    let mut cfg = small();
    cfg.seeds = vec![2, 3];
    let dir = tempfile::tempdir().unwrap();
    let summary = run_suite(&cfg, dir.path()).unwrap();
    let raw = scan(dir.path());
    assert_eq!(summary.methods.len(), cfg.methods.len());
    for m in &summary.methods {
        for s in &m.seeds {
            let accs = &raw[&m.method][&s.seed];
            assert_eq!(s.final_acc, accs.last().copied());
            assert_eq!(s.best_acc, accs.iter().copied().reduce(f64::max));
        }
    }
    let from_json: sfl_core::harness::Summary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(from_json, summary);
}

#[test]
fn epoch_ratios_match_an_independent_scan() {
    let mut cfg = small();
    cfg.seeds = vec![0, 1];
    cfg.total_epochs = 12;
    let dir = tempfile::tempdir().unwrap();
    run_suite(&cfg, dir.path()).unwrap();
    let (records, _) = load_dir(dir.path()).unwrap();
    let raw = scan(dir.path());
    for m in &cfg.methods {
        let got = compare_epochs_to_accuracy(&records, m.name(), "ours").unwrap();
        for (seed, ratio) in got.per_seed {
            let target = &raw["ours"][&seed];
            let level = *target.last().unwrap();
            let first = |v: &Vec<f64>| v.iter().position(|&a| a >= level).map(|i| i + 1);
            let want =
                first(&raw[m.name()][&seed]).map(|e| e as f64 / first(target).unwrap() as f64);
            assert_eq!(ratio, want, "{} seed {seed}", m.name());
        }
    }
}

#[test]
fn aborted_runs_are_recorded_not_raised() {
    let mut cfg = small();
    cfg.methods = vec![Method::Unweighted, Method::Weighted];
    cfg.opt.learning_rate = 1e300;
    let dir = tempfile::tempdir().unwrap();
    let summary = run_suite(&cfg, dir.path()).unwrap();
    assert!(summary.aborted);
    for m in &summary.methods {
        assert!(m.seeds[0].abort.as_deref().unwrap().contains("diverged"));
    }
    assert_eq!(summarize(dir.path()).unwrap(), summary);
}

#[test]
fn alpha_sweep_preset_fills_the_method_grid() {
    let p = preset("table8")
        .unwrap()
        .with_overrides(SMALL_OVERRIDES)
        .unwrap();
    let PresetKind::Grid(vs) = &p.kind else {
        panic!("grid preset")
    };
    let alphas: Vec<f64> = vs.iter().map(|v| v.config.alpha).collect();
    assert_eq!(alphas, vec![1.0, 0.1, 0.01]);
    let dir = tempfile::tempdir().unwrap();
    let report = run_preset(&p, dir.path()).unwrap();
    assert_eq!(report.variants.len(), 3);
    for v in &report.variants {
        let names: Vec<&str> = v
            .summary
            .methods
            .iter()
            .map(|m| m.method.as_str())
            .collect();
        assert_eq!(
            names,
            Method::COMPARED.map(|m| m.name()).to_vec(),
            "{}",
            v.label
        );
        assert!(v.summary.methods.iter().all(|m| m.seeds.len() == 2));
        assert!(dir.path().join(&v.label).join("summary.json").exists());
    }
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn switch_point_preset_writes_each_arm() {
    let p = preset("table2")
        .unwrap()
        .with_overrides(&format!("{SMALL_OVERRIDES}\nseeds = 0\ntotal_epochs = 10"))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run_preset(&p, dir.path()).unwrap();
    let labels: Vec<&str> = report.variants.iter().map(|v| v.label.as_str()).collect();
    assert!(labels.starts_with(&["detected", "no_switch"]), "{labels:?}");
    for v in &report.variants {
        assert_eq!(v.summary.methods[0].method, v.label);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn config_round_trips(
        clients in 1usize..200,
        alpha in 0.001f64..10.0,
        tau in 0usize..300,
        lr in 1e-4f64..1.0,
        rate in 0.0f64..0.99,
        seeds in proptest::collection::vec(0u64..1000, 1..4),
        every_epoch in any::<bool>(),
        forced in proptest::option::of(0usize..500),
    ) {
        let mut c = ExperimentConfig::default();
        c.num_clients = clients;
        c.staleness.num_stale_clients = clients.min(c.staleness.num_stale_clients);
        c.alpha = alpha;
        c.staleness.staleness_epochs = tau;
        c.opt.learning_rate = lr;
        c.gi.sparsification_rate = rate;
        c.seeds = seeds;
        c.switch.forced_epoch = forced;
        if !every_epoch {
            c.staleness.cadence = sfl_core::data::Cadence::AfterDelivery;
        }
        let text = serialize_config(&c);
        let back = parse_config(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(serialize_config(&back), text);
    }
}
