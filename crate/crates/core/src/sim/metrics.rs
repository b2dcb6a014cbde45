use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const METRICS_HEADER: &str =
    "epoch,method,seed,overall_acc,target_class_acc,e1,e2,switch_state,gi_iters,wallclock_ms";
pub const DETECTIONS_HEADER: &str = "epoch,client_id,mean_dc,threshold,unique";

/// One row per (epoch, method, seed), describing the model after that epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub method: String,
    pub seed: u64,
    pub overall_acc: f64,
    pub target_class_acc: Option<f64>,
    pub e1: Option<f64>,
    pub e2: Option<f64>,
    pub switch_state: Option<String>,
    pub gi_iters: Option<usize>,
    pub wallclock_ms: Option<f64>,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.method,
            self.seed,
            self.overall_acc,
            opt(&self.target_class_acc),
            opt(&self.e1),
            opt(&self.e2),
            opt(&self.switch_state),
            opt(&self.gi_iters),
            opt(&self.wallclock_ms),
        )
    }

    pub fn from_csv_row(row: &str) -> Option<Self> {
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 10 {
            return None;
        }
        fn o<T: std::str::FromStr>(s: &str) -> Option<Option<T>> {
            if s.is_empty() {
                Some(None)
            } else {
                s.parse().ok().map(Some)
            }
        }
        Some(Self {
            epoch: f[0].parse().ok()?,
            method: f[1].to_string(),
            seed: f[2].parse().ok()?,
            overall_acc: f[3].parse().ok()?,
            target_class_acc: o(f[4])?,
            e1: o(f[5])?,
            e2: o(f[6])?,
            switch_state: o(f[7])?,
            gi_iters: o(f[8])?,
            wallclock_ms: o(f[9])?,
        })
    }
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut w: W) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.to_csv_row())?;
    }
    Ok(())
}

/// Uniqueness decision for one arriving stale update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionRecord {
    pub epoch: usize,
    pub client_id: usize,
    pub mean_dc: Option<f64>,
    pub threshold: Option<f64>,
    pub unique: bool,
    /// Whether the client holds a class no unstale client has. Not written
    /// to the CSV; used to score the detector.
    pub truly_unique: bool,
}

pub fn write_detections_csv<W: Write>(records: &[DetectionRecord], mut w: W) -> Result<()> {
    writeln!(w, "{DETECTIONS_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.epoch,
            r.client_id,
            opt(&r.mean_dc),
            opt(&r.threshold),
            r.unique
        )?;
    }
    Ok(())
}
