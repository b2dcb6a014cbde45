//! Experiment configuration and its line-oriented text format.
//!
//! One `key = value` per line, dotted prefixes for sections, `#` starts a
//! comment. Every key has a default, so an empty file is a valid config.
//! Unknown keys and malformed values are rejected with the line number.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{FirstOrderParams, WeightingParams};
use crate::data::{Cadence, StalenessPlan};
use crate::error::{Error, Result};
use crate::gi::GIConfig;
use crate::nn::{Activation, BatchSize, OptConfig, OptKind};
use crate::switch::SwitchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    FixedData,
    VariantData,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::FixedData => "fixed_data",
            Scenario::VariantData => "variant_data",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed_data" => Some(Scenario::FixedData),
            "variant_data" => Some(Scenario::VariantData),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Dirichlet,
    /// Every client draws one class at random and shares that class's
    /// samples evenly with the other clients that drew it.
    OneClassPerClient,
}

impl PartitionKind {
    pub fn name(self) -> &'static str {
        match self {
            PartitionKind::Dirichlet => "dirichlet",
            PartitionKind::OneClassPerClient => "one_class_per_client",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dirichlet" => Some(PartitionKind::Dirichlet),
            "one_class_per_client" => Some(PartitionKind::OneClassPerClient),
            _ => None,
        }
    }
}

/// How stale updates are folded into the global model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Unweighted,
    Weighted,
    FirstOrder,
    WPred,
    AsynTiers,
    Ours,
    /// Stale clients behave like unstale ones; a reference, not a strategy.
    UnstaleOracle,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Unweighted,
        Method::Weighted,
        Method::FirstOrder,
        Method::WPred,
        Method::AsynTiers,
        Method::Ours,
        Method::UnstaleOracle,
    ];

    /// The strategies compared against each other (everything but the oracle).
    pub const COMPARED: [Method; 6] = [
        Method::Unweighted,
        Method::Weighted,
        Method::FirstOrder,
        Method::WPred,
        Method::AsynTiers,
        Method::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Unweighted => "unweighted",
            Method::Weighted => "weighted",
            Method::FirstOrder => "first_order",
            Method::WPred => "w_pred",
            Method::AsynTiers => "asyn_tiers",
            Method::Ours => "ours",
            Method::UnstaleOracle => "unstale_oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Blobs,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub source: DataSource,
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    /// Per-coordinate standard deviation of every blob.
    pub spread: f64,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            num_classes: 10,
            dim: 16,
            samples_per_class: 100,
            test_samples_per_class: 50,
            spread: 0.15,
            train_csv: None,
            test_csv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationConfig {
    /// Samples replaced per client per epoch.
    pub rate: f64,
    /// Distance every class center moves in the second domain.
    pub shift: f64,
}

impl Default for VariationConfig {
    fn default() -> Self {
        Self {
            rate: 1.0,
            shift: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub partition: PartitionKind,
    pub num_clients: usize,
    pub alpha: f64,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub staleness: StalenessPlan,
    pub methods: Vec<Method>,
    pub opt: OptConfig,
    pub gi: GIConfig,
    pub weighting: WeightingParams,
    pub first_order: FirstOrderParams,
    pub variation: VariationConfig,
    pub switch: SwitchConfig,
    pub total_epochs: usize,
    pub seeds: Vec<u64>,
    pub noise_variance: f64,
    pub out_dir: PathBuf,
    pub dump_d_rec: bool,
    /// Off by default so that reruns produce byte-identical CSVs.
    pub record_wallclock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::FixedData,
            partition: PartitionKind::Dirichlet,
            num_clients: 100,
            alpha: 0.1,
            data: DataSpec::default(),
            model: ModelSpec::default(),
            staleness: StalenessPlan::default(),
            methods: Method::COMPARED.to_vec(),
            opt: OptConfig::default(),
            gi: GIConfig::default(),
            weighting: WeightingParams::default(),
            first_order: FirstOrderParams::default(),
            variation: VariationConfig::default(),
            switch: SwitchConfig::default(),
            total_epochs: 200,
            seeds: vec![0, 1, 2],
            noise_variance: 0.0,
            out_dir: PathBuf::from("runs"),
            dump_d_rec: false,
            record_wallclock: false,
        }
    }
}

fn bad(key: &str, message: impl Into<String>) -> (String, String) {
    (key.to_string(), message.into())
}

impl ExperimentConfig {
    /// Constraint check; the error names the offending key.
    pub fn check(&self) -> std::result::Result<(), (String, String)> {
        if self.num_clients == 0 {
            return Err(bad("num_clients", "num_clients must be > 0"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(bad("alpha", "alpha must be > 0"));
        }
        let d = &self.data;
        if d.num_classes < 2 {
            return Err(bad("data.num_classes", "data.num_classes must be >= 2"));
        }
        if d.source == DataSource::Blobs {
            if d.dim == 0 {
                return Err(bad("data.dim", "data.dim must be > 0"));
            }
            if d.samples_per_class == 0 {
                return Err(bad(
                    "data.samples_per_class",
                    "data.samples_per_class must be > 0",
                ));
            }
            if d.test_samples_per_class == 0 {
                return Err(bad(
                    "data.test_samples_per_class",
                    "data.test_samples_per_class must be > 0",
                ));
            }
            if !(d.spread >= 0.0) {
                return Err(bad("data.spread", "data.spread must be >= 0"));
            }
        } else {
            if d.train_csv.is_none() {
                return Err(bad(
                    "data.train_csv",
                    "data.train_csv is required for csv data",
                ));
            }
            if d.test_csv.is_none() {
                return Err(bad(
                    "data.test_csv",
                    "data.test_csv is required for csv data",
                ));
            }
            if self.scenario == Scenario::VariantData {
                return Err(bad("scenario", "variant_data needs blobs data"));
            }
        }
        if self.model.hidden.iter().any(|&h| h == 0) {
            return Err(bad("model.hidden", "model.hidden widths must be > 0"));
        }
        if self.staleness.target_class >= d.num_classes {
            return Err(bad(
                "staleness.target_class",
                "staleness.target_class must be < data.num_classes",
            ));
        }
        if self.staleness.num_stale_clients > self.num_clients {
            return Err(bad(
                "staleness.num_stale_clients",
                "staleness.num_stale_clients must be <= num_clients",
            ));
        }
        if self.methods.is_empty() {
            return Err(bad("methods", "methods must not be empty"));
        }
        if let Err(Error::Config(m)) = self.opt.validate() {
            let key = m.split_whitespace().next().unwrap_or("opt");
            return Err(bad(&format!("opt.{key}"), format!("opt.{m}")));
        }
        if self.opt.local_steps == 0 {
            return Err(bad("opt.local_steps", "opt.local_steps must be > 0"));
        }
        if let Err(Error::Config(m)) = self.gi.validate() {
            let key = m.split_whitespace().next().unwrap_or("gi");
            return Err(bad(&format!("gi.{key}"), format!("gi.{m}")));
        }
        if !(self.weighting.a > 0.0) {
            return Err(bad("weighting.a", "weighting.a must be > 0"));
        }
        if !(self.first_order.lambda >= 0.0) {
            return Err(bad("first_order.lambda", "first_order.lambda must be >= 0"));
        }
        if !(self.variation.rate >= 0.0) {
            return Err(bad("variation.rate", "variation.rate must be >= 0"));
        }
        if !(self.variation.shift >= 0.0) {
            return Err(bad("variation.shift", "variation.shift must be >= 0"));
        }
        if self.switch.smoothing_window == 0 {
            return Err(bad(
                "switch.smoothing_window",
                "switch.smoothing_window must be > 0",
            ));
        }
        if !(self.switch.window_fraction >= 0.0) {
            return Err(bad(
                "switch.window_fraction",
                "switch.window_fraction must be >= 0",
            ));
        }
        if self.total_epochs == 0 {
            return Err(bad("total_epochs", "total_epochs must be > 0"));
        }
        if self.seeds.is_empty() {
            return Err(bad("seeds", "seeds must not be empty"));
        }
        if !(self.noise_variance >= 0.0) {
            return Err(bad("noise_variance", "noise_variance must be >= 0"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(_, m)| Error::Config(m))
    }

    pub fn arch_dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.model.hidden);
        dims.push(num_classes);
        dims
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn opt_to_string<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref()
        .map_or_else(|| none.to_string(), |v| v.to_string())
}

/// Writes every key, in a fixed order, so the output reparses to an equal config.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("scenario", cfg.scenario.name().into());
    kv("partition", cfg.partition.name().into());
    kv("num_clients", cfg.num_clients.to_string());
    kv("alpha", cfg.alpha.to_string());
    kv("total_epochs", cfg.total_epochs.to_string());
    kv("seeds", join(&cfg.seeds));
    kv(
        "methods",
        cfg.methods
            .iter()
            .map(|m| m.name())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("noise_variance", cfg.noise_variance.to_string());
    kv("out_dir", cfg.out_dir.display().to_string());
    kv("dump_d_rec", cfg.dump_d_rec.to_string());
    kv("record_wallclock", cfg.record_wallclock.to_string());
    let d = &cfg.data;
    kv(
        "data.source",
        match d.source {
            DataSource::Blobs => "blobs",
            DataSource::Csv => "csv",
        }
        .into(),
    );
    kv("data.num_classes", d.num_classes.to_string());
    kv("data.dim", d.dim.to_string());
    kv("data.samples_per_class", d.samples_per_class.to_string());
    kv(
        "data.test_samples_per_class",
        d.test_samples_per_class.to_string(),
    );
    kv("data.spread", d.spread.to_string());
    kv(
        "data.train_csv",
        opt_to_string(&d.train_csv.as_ref().map(|p| p.display()), ""),
    );
    kv(
        "data.test_csv",
        opt_to_string(&d.test_csv.as_ref().map(|p| p.display()), ""),
    );
    kv("model.hidden", join(&cfg.model.hidden));
    kv("model.activation", cfg.model.activation.name().into());
    kv(
        "staleness.target_class",
        cfg.staleness.target_class.to_string(),
    );
    kv(
        "staleness.num_stale_clients",
        cfg.staleness.num_stale_clients.to_string(),
    );
    kv(
        "staleness.epochs",
        cfg.staleness.staleness_epochs.to_string(),
    );
    kv("staleness.cadence", cfg.staleness.cadence.name().into());
    let o = &cfg.opt;
    kv("opt.kind", o.kind.name().into());
    kv("opt.learning_rate", o.learning_rate.to_string());
    kv("opt.momentum", o.momentum.to_string());
    kv("opt.prox_mu", o.prox_mu.to_string());
    kv("opt.local_steps", o.local_steps.to_string());
    kv(
        "opt.batch_size",
        match o.batch_size {
            BatchSize::Full => "full".into(),
            BatchSize::Mini(b) => b.to_string(),
        },
    );
    let g = &cfg.gi;
    kv("gi.d_rec_fraction", g.d_rec_fraction.to_string());
    kv("gi.max_iters", g.max_iters.to_string());
    kv("gi.inner_lr", g.inner_lr.to_string());
    kv("gi.stop_tol", g.stop_tol.to_string());
    kv("gi.sparsification_rate", g.sparsification_rate.to_string());
    kv("gi.unroll_steps", opt_to_string(&g.unroll_steps, "auto"));
    kv("weighting.a", cfg.weighting.a.to_string());
    kv("weighting.b", cfg.weighting.b.to_string());
    kv("first_order.lambda", cfg.first_order.lambda.to_string());
    kv("variation.rate", cfg.variation.rate.to_string());
    kv("variation.shift", cfg.variation.shift.to_string());
    kv("switch.enabled", cfg.switch.enabled.to_string());
    kv(
        "switch.smoothing_window",
        cfg.switch.smoothing_window.to_string(),
    );
    kv(
        "switch.window_fraction",
        cfg.switch.window_fraction.to_string(),
    );
    kv(
        "switch.forced_epoch",
        opt_to_string(&cfg.switch.forced_epoch, "none"),
    );
    s
}

fn num<T: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got {v:?}"))
}

fn real(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v, "a number")?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("expected a finite number, got {v:?}"))
    }
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn list<T>(
    v: &str,
    each: impl Fn(&str) -> std::result::Result<T, String>,
) -> std::result::Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| each(p.trim())).collect()
}

fn choice<T>(parsed: Option<T>, v: &str, options: &str) -> std::result::Result<T, String> {
    parsed.ok_or_else(|| format!("expected one of {options}, got {v:?}"))
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Applies one `key = value` assignment.
pub fn set_key(cfg: &mut ExperimentConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    match key {
        "scenario" => cfg.scenario = choice(Scenario::parse(v), v, "fixed_data|variant_data")?,
        "partition" => {
            cfg.partition = choice(PartitionKind::parse(v), v, "dirichlet|one_class_per_client")?
        }
        "num_clients" => cfg.num_clients = num(v, "a non-negative integer")?,
        "alpha" => cfg.alpha = real(v)?,
        "total_epochs" => cfg.total_epochs = num(v, "a non-negative integer")?,
        "seeds" => cfg.seeds = list(v, |p| num(p, "a non-negative integer"))?,
        "methods" => {
            cfg.methods = list(v, |p| {
                Method::parse(p).ok_or_else(|| format!("unknown method {p:?}"))
            })?
        }
        "noise_variance" => cfg.noise_variance = real(v)?,
        "out_dir" => cfg.out_dir = PathBuf::from(v),
        "dump_d_rec" => cfg.dump_d_rec = boolean(v)?,
        "record_wallclock" => cfg.record_wallclock = boolean(v)?,
        "data.source" => {
            cfg.data.source = match v {
                "blobs" => DataSource::Blobs,
                "csv" => DataSource::Csv,
                _ => return Err(format!("expected blobs|csv, got {v:?}")),
            }
        }
        "data.num_classes" => cfg.data.num_classes = num(v, "a non-negative integer")?,
        "data.dim" => cfg.data.dim = num(v, "a non-negative integer")?,
        "data.samples_per_class" => cfg.data.samples_per_class = num(v, "a non-negative integer")?,
        "data.test_samples_per_class" => {
            cfg.data.test_samples_per_class = num(v, "a non-negative integer")?
        }
        "data.spread" => cfg.data.spread = real(v)?,
        "data.train_csv" => cfg.data.train_csv = path(v),
        "data.test_csv" => cfg.data.test_csv = path(v),
        "model.hidden" => cfg.model.hidden = list(v, |p| num(p, "a non-negative integer"))?,
        "model.activation" => cfg.model.activation = choice(Activation::parse(v), v, "relu|tanh")?,
        "staleness.target_class" => cfg.staleness.target_class = num(v, "a non-negative integer")?,
        "staleness.num_stale_clients" => {
            cfg.staleness.num_stale_clients = num(v, "a non-negative integer")?
        }
        "staleness.epochs" => cfg.staleness.staleness_epochs = num(v, "a non-negative integer")?,
        "staleness.cadence" => {
            cfg.staleness.cadence = choice(Cadence::parse(v), v, "every_epoch|after_delivery")?
        }
        "opt.kind" => cfg.opt.kind = choice(OptKind::parse(v), v, "sgd|sgd_momentum|fedprox")?,
        "opt.learning_rate" => cfg.opt.learning_rate = real(v)?,
        "opt.momentum" => cfg.opt.momentum = real(v)?,
        "opt.prox_mu" => cfg.opt.prox_mu = real(v)?,
        "opt.local_steps" => cfg.opt.local_steps = num(v, "a non-negative integer")?,
        "opt.batch_size" => {
            cfg.opt.batch_size = match v {
                "full" => BatchSize::Full,
                _ => BatchSize::Mini(num(v, "full or a positive integer")?),
            }
        }
        "gi.d_rec_fraction" => cfg.gi.d_rec_fraction = real(v)?,
        "gi.max_iters" => cfg.gi.max_iters = num(v, "a non-negative integer")?,
        "gi.inner_lr" => cfg.gi.inner_lr = real(v)?,
        "gi.stop_tol" => cfg.gi.stop_tol = real(v)?,
        "gi.sparsification_rate" => cfg.gi.sparsification_rate = real(v)?,
        "gi.unroll_steps" => {
            cfg.gi.unroll_steps = match v {
                "auto" => None,
                _ => Some(num(v, "auto or a positive integer")?),
            }
        }
        "weighting.a" => cfg.weighting.a = real(v)?,
        "weighting.b" => cfg.weighting.b = real(v)?,
        "first_order.lambda" => cfg.first_order.lambda = real(v)?,
        "variation.rate" => cfg.variation.rate = real(v)?,
        "variation.shift" => cfg.variation.shift = real(v)?,
        "switch.enabled" => cfg.switch.enabled = boolean(v)?,
        "switch.smoothing_window" => cfg.switch.smoothing_window = num(v, "a positive integer")?,
        "switch.window_fraction" => cfg.switch.window_fraction = real(v)?,
        "switch.forced_epoch" => {
            cfg.switch.forced_epoch = match v {
                "none" => None,
                _ => Some(num(v, "none or an epoch")?),
            }
        }
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

/// Parses config text on top of `base`, then validates.
pub fn parse_config_onto(mut cfg: ExperimentConfig, text: &str) -> Result<ExperimentConfig> {
    let mut lines_by_key = std::collections::HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::ConfigLine {
                line,
                key: content.to_string(),
                message: "expected `key = value`".into(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        set_key(&mut cfg, key, value).map_err(|message| Error::ConfigLine {
            line,
            key: key.to_string(),
            message,
        })?;
        lines_by_key.insert(key.to_string(), line);
    }
    cfg.check().map_err(|(key, message)| Error::ConfigLine {
        line: lines_by_key.get(&key).copied().unwrap_or(0),
        key,
        message,
    })?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_onto(ExperimentConfig::default(), text)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
