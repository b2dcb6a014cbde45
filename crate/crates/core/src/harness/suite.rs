//! Multi-seed execution and the files it leaves behind.
//!
//! A run directory holds, per seed, `metrics_seed{s}.csv` (every method's
//! rows), `detections_seed{s}.csv` (uniqueness decisions of `ours`) and
//! `runs_seed{s}.json` (abort reasons and switch epochs). `summary.json` is
//! always recomputed from those files, so running seeds one at a time into
//! the same directory gives the same summary as running them together.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::presets::{Preset, PresetKind};
use crate::config::{ExperimentConfig, Method};
use crate::error::{Error, Result};
use crate::sim::{
    run_training, write_detections_csv, write_metrics_csv, MetricsRecord, RunOutput, METRICS_HEADER,
};

/// Epochs averaged for the tail accuracy.
pub const TAIL_EPOCHS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub switch_epoch: Option<usize>,
    pub abort: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_acc: Option<f64>,
    pub best_acc: Option<f64>,
    /// Mean over the last [`TAIL_EPOCHS`] epochs.
    pub tail_acc: Option<f64>,
    /// Epochs this method needs to reach the final accuracy of the target
    /// method; `None` if it never does.
    pub epochs_to_target: Option<usize>,
    pub relative_time: Option<f64>,
    pub switch_epoch: Option<usize>,
    pub abort: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub seeds: Vec<SeedResult>,
    pub median_final: Option<f64>,
    pub median_best: Option<f64>,
    pub median_tail: Option<f64>,
    pub median_relative_time: Option<f64>,
}

/// Target-class accuracy per method; all values come from the CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub target_method: Option<String>,
    pub methods: Vec<MethodSummary>,
    pub aborted: bool,
}

impl Summary {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledSummary {
    pub label: String,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetReport {
    pub preset: String,
    pub variants: Vec<LabelledSummary>,
}

impl PresetReport {
    pub fn aborted(&self) -> bool {
        self.variants.iter().any(|v| v.summary.aborted)
    }
}

/// Median with `None` ordered above every value; `None` if the median
/// itself is `None` or `xs` is empty.
pub fn median_opt(xs: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = xs.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    m.is_finite().then_some(m)
}

fn target_series<'a>(
    records: &'a [MetricsRecord],
    method: &str,
    seed: u64,
) -> Vec<&'a MetricsRecord> {
    let mut rows: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| r.method == method && r.seed == seed)
        .collect();
    rows.sort_by_key(|r| r.epoch);
    rows
}

fn acc(r: &MetricsRecord) -> f64 {
    r.target_class_acc.unwrap_or(0.0)
}

/// Epoch count (1-based) at which the series first reaches `level`.
fn epochs_to_reach(rows: &[&MetricsRecord], level: f64) -> Option<usize> {
    rows.iter().find(|r| acc(r) >= level).map(|r| r.epoch + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRatio {
    /// `(seed, ratio)`; `None` marks "not reached".
    pub per_seed: Vec<(u64, Option<f64>)>,
    pub median: Option<f64>,
}

/// Epochs `reference` needs to first reach the final target-class accuracy
/// of `target`, divided by the epochs `target` itself needs.
pub fn compare_epochs_to_accuracy(
    records: &[MetricsRecord],
    reference: &str,
    target: &str,
) -> Result<EpochRatio> {
    for m in [reference, target] {
        if !records.iter().any(|r| r.method == m) {
            return Err(Error::Precondition(format!("method {m} not in metrics")));
        }
    }
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut per_seed = Vec::new();
    for s in seeds {
        let t = target_series(records, target, s);
        let r = target_series(records, reference, s);
        let (Some(last), false) = (t.last(), r.is_empty()) else {
            continue;
        };
        let level = acc(last);
        let own = epochs_to_reach(&t, level).expect("the last row reaches its own level");
        let ratio = epochs_to_reach(&r, level).map(|e| e as f64 / own as f64);
        per_seed.push((s, ratio));
    }
    let median = median_opt(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>());
    Ok(EpochRatio { per_seed, median })
}

pub fn tail_mean(rows: &[&MetricsRecord], k: usize) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let tail = &rows[rows.len().saturating_sub(k)..];
    Some(tail.iter().map(|r| acc(r)).sum::<f64>() / tail.len() as f64)
}

/// Builds the summary from metric rows and run manifests.
pub fn summarize_records(records: &[MetricsRecord], manifests: &[RunManifest]) -> Summary {
    let mut methods: Vec<String> = Vec::new();
    for r in records
        .iter()
        .map(|r| &r.method)
        .chain(manifests.iter().map(|m| &m.method))
    {
        if !methods.contains(r) {
            methods.push(r.clone());
        }
    }
    let mut seeds: Vec<u64> = records
        .iter()
        .map(|r| r.seed)
        .chain(manifests.iter().map(|m| m.seed))
        .collect();
    seeds.sort_unstable();
    seeds.dedup();
    let target_method = [Method::Ours.name()]
        .into_iter()
        .find(|t| methods.iter().any(|m| m == t))
        .or_else(|| methods.first().map(String::as_str))
        .map(str::to_string);
    let out: Vec<MethodSummary> = methods
        .iter()
        .map(|m| {
            let seeds: Vec<SeedResult> = seeds
                .iter()
                .filter_map(|&s| {
                    let rows = target_series(records, m, s);
                    let man = manifests.iter().find(|x| &x.method == m && x.seed == s);
                    if rows.is_empty() && man.is_none() {
                        return None;
                    }
                    let level = target_method
                        .as_ref()
                        .and_then(|t| target_series(records, t, s).last().map(|r| acc(r)));
                    let epochs_to_target = level.and_then(|l| epochs_to_reach(&rows, l));
                    let target_epochs = target_method.as_ref().and_then(|t| {
                        let tr = target_series(records, t, s);
                        level.and_then(|l| epochs_to_reach(&tr, l))
                    });
                    Some(SeedResult {
                        seed: s,
                        final_acc: rows.last().map(|r| acc(r)),
                        best_acc: rows.iter().map(|r| acc(r)).reduce(f64::max),
                        tail_acc: tail_mean(&rows, TAIL_EPOCHS),
                        epochs_to_target,
                        relative_time: epochs_to_target
                            .zip(target_epochs)
                            .map(|(a, b)| a as f64 / b as f64),
                        switch_epoch: man.and_then(|x| x.switch_epoch),
                        abort: man.and_then(|x| x.abort.clone()),
                    })
                })
                .collect();
            let col = |f: fn(&SeedResult) -> Option<f64>| {
                median_opt(&seeds.iter().map(f).collect::<Vec<_>>())
            };
            MethodSummary {
                method: m.clone(),
                median_final: col(|s| s.final_acc),
                median_best: col(|s| s.best_acc),
                median_tail: col(|s| s.tail_acc),
                median_relative_time: col(|s| s.relative_time),
                seeds,
            }
        })
        .collect();
    Summary {
        target_method,
        aborted: out.iter().flat_map(|m| &m.seeds).any(|s| s.abort.is_some()),
        methods: out,
    }
}

fn seed_files(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let seed = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_suffix(ext))
            .and_then(|n| n.parse().ok());
        if let Some(s) = seed {
            out.push((s, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Csv(format!("{}: unexpected header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            MetricsRecord::from_csv_row(l)
                .ok_or_else(|| Error::Csv(format!("{}: bad row {}", path.display(), i + 2)))
        })
        .collect()
}

/// Reads every per-seed metrics file and manifest in `dir`.
pub fn load_dir(dir: &Path) -> Result<(Vec<MetricsRecord>, Vec<RunManifest>)> {
    let mut records = Vec::new();
    for (_, p) in seed_files(dir, "metrics_seed", ".csv")? {
        records.extend(read_metrics_csv(&p)?);
    }
    let mut manifests = Vec::new();
    for (_, p) in seed_files(dir, "runs_seed", ".json")? {
        let m: Vec<RunManifest> = serde_json::from_str(&fs::read_to_string(&p)?)?;
        manifests.extend(m);
    }
    Ok((records, manifests))
}

/// Recomputes and rewrites `dir/summary.json`.
pub fn summarize(dir: &Path) -> Result<Summary> {
    let (records, manifests) = load_dir(dir)?;
    if records.is_empty() && manifests.is_empty() {
        return Err(Error::Precondition(format!(
            "no metrics files in {}",
            dir.display()
        )));
    }
    let summary = summarize_records(&records, &manifests);
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Summaries of `dir` and of each immediate subdirectory holding metrics,
/// labelled by subdirectory name (`""` for `dir` itself).
pub fn summarize_tree(dir: &Path) -> Result<Vec<LabelledSummary>> {
    let mut out = Vec::new();
    if !seed_files(dir, "metrics_seed", ".csv")?.is_empty() {
        out.push(LabelledSummary {
            label: String::new(),
            summary: summarize(dir)?,
        });
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        if !seed_files(&sub, "metrics_seed", ".csv")?.is_empty() {
            out.push(LabelledSummary {
                label: sub.file_name().unwrap_or_default().to_string_lossy().into(),
                summary: summarize(&sub)?,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Precondition(format!(
            "no metrics files under {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Runs `(method, seed)` pairs in parallel; results come back in input order.
pub fn run_all(
    cfg: &ExperimentConfig,
    jobs: &[(Method, u64)],
) -> Vec<(Method, u64, Result<RunOutput>)> {
    jobs.par_iter()
        .map(|&(m, s)| (m, s, run_training(cfg, m, s)))
        .collect()
}

fn manifest(method: Method, seed: u64, run: &Result<RunOutput>) -> RunManifest {
    match run {
        Ok(o) => RunManifest {
            method: method.name().into(),
            seed,
            epochs_run: o.records.len(),
            switch_epoch: o.switch_epoch,
            abort: o.abort.clone(),
        },
        Err(e) => RunManifest {
            method: method.name().into(),
            seed,
            epochs_run: 0,
            switch_epoch: None,
            abort: Some(e.to_string()),
        },
    }
}

/// Writes the per-seed files for runs of one seed, relabelling rows with
/// `label` when given.
pub fn write_seed_files(
    dir: &Path,
    seed: u64,
    runs: &[(Method, &Result<RunOutput>)],
    label: Option<&str>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    let mut dets = Vec::new();
    let mut manifests = Vec::new();
    for &(m, run) in runs {
        let mut man = manifest(m, seed, run);
        if let Ok(o) = run {
            rows.extend(o.records.iter().cloned().map(|mut r| {
                if let Some(l) = label {
                    r.method = l.to_string();
                }
                r
            }));
            dets.extend(o.detections.iter().cloned());
        }
        if let Some(l) = label {
            man.method = l.to_string();
        }
        manifests.push(man);
    }
    let mut buf = Vec::new();
    write_metrics_csv(&rows, &mut buf)?;
    fs::write(dir.join(format!("metrics_seed{seed}.csv")), buf)?;
    if !dets.is_empty() {
        let mut buf = Vec::new();
        write_detections_csv(&dets, &mut buf)?;
        fs::write(dir.join(format!("detections_seed{seed}.csv")), buf)?;
    }
    fs::write(
        dir.join(format!("runs_seed{seed}.json")),
        serde_json::to_string_pretty(&manifests)?,
    )?;
    Ok(())
}

/// Runs every `(seed, method)` of `cfg` into `out_dir` and returns the
/// recomputed summary. Aborted runs are recorded, not raised.
pub fn run_suite(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    cfg.validate()?;
    let jobs: Vec<(Method, u64)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.methods.iter().map(move |&m| (m, s)))
        .collect();
    let results = run_all(cfg, &jobs);
    for &s in &cfg.seeds {
        let runs: Vec<(Method, &Result<RunOutput>)> = results
            .iter()
            .filter(|r| r.1 == s)
            .map(|(m, _, r)| (*m, r))
            .collect();
        write_seed_files(out_dir, s, &runs, None)?;
    }
    summarize(out_dir)
}

#[derive(Debug)]
pub struct SwitchStudy {
    pub seed: u64,
    pub detected: Option<usize>,
    /// `(label, run)` for the detected switch, no switch and each forced
    /// offset that lands inside the run.
    pub runs: Vec<(String, Result<RunOutput>)>,
}

pub fn forced_label(offset: i64) -> String {
    format!("forced{offset:+}")
}

/// Runs `ours` with the detected switch, without a switch, and with the
/// switch forced at the detected epoch shifted by each offset.
pub fn switch_point_study(cfg: &ExperimentConfig, seed: u64, offsets: &[i64]) -> SwitchStudy {
    let mut with = cfg.clone();
    with.switch.enabled = true;
    with.switch.forced_epoch = None;
    let mut without = with.clone();
    without.switch.enabled = false;
    let pair: Vec<(String, Result<RunOutput>)> =
        [("detected", with.clone()), ("no_switch", without)]
            .into_par_iter()
            .map(|(l, c)| (l.to_string(), run_training(&c, Method::Ours, seed)))
            .collect();
    let detected = pair[0].1.as_ref().ok().and_then(|o| o.switch_epoch);
    let mut runs = pair;
    if let Some(d) = detected {
        let forced: Vec<(String, Result<RunOutput>)> = offsets
            .par_iter()
            .filter_map(|&off| {
                let at = d as i64 + off;
                (at >= 0 && (at as usize) < cfg.total_epochs).then(|| {
                    let mut c = with.clone();
                    c.switch.forced_epoch = Some(at as usize);
                    (forced_label(off), run_training(&c, Method::Ours, seed))
                })
            })
            .collect();
        runs.extend(forced);
    }
    SwitchStudy {
        seed,
        detected,
        runs,
    }
}

/// Runs a preset into `out_dir`, one subdirectory per variant (or the
/// directory itself for single-variant presets).
pub fn run_preset(preset: &Preset, out_dir: &Path) -> Result<PresetReport> {
    let mut variants = Vec::new();
    match &preset.kind {
        PresetKind::Grid(vs) => {
            for v in vs {
                let dir = if v.label.is_empty() {
                    out_dir.to_path_buf()
                } else {
                    out_dir.join(&v.label)
                };
                variants.push(LabelledSummary {
                    label: v.label.clone(),
                    summary: run_suite(&v.config, &dir)?,
                });
            }
        }
        PresetKind::SwitchPoints { offsets } => {
            preset.base.validate()?;
            let studies: Vec<SwitchStudy> = preset
                .base
                .seeds
                .iter()
                .map(|&s| switch_point_study(&preset.base, s, offsets))
                .collect();
            let mut labels: Vec<String> = vec!["detected".into(), "no_switch".into()];
            labels.extend(offsets.iter().map(|&o| forced_label(o)));
            for label in labels {
                let dir = out_dir.join(&label);
                let mut any = false;
                for st in &studies {
                    if let Some((_, run)) = st.runs.iter().find(|r| r.0 == label) {
                        write_seed_files(&dir, st.seed, &[(Method::Ours, run)], Some(&label))?;
                        any = true;
                    }
                }
                if any {
                    variants.push(LabelledSummary {
                        summary: summarize(&dir)?,
                        label,
                    });
                }
            }
        }
    }
    let report = PresetReport {
        preset: preset.name.to_string(),
        variants,
    };
    if report.variants.len() > 1 || report.variants.iter().any(|v| !v.label.is_empty()) {
        fs::create_dir_all(out_dir)?;
        fs::write(
            out_dir.join("summary.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(report)
}
