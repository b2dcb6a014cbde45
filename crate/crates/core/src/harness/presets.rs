//! Named experiment protocols. Every preset starts from [`desk`] and either
//! runs once or sweeps one setting.

use crate::config::{parse_config_onto, ExperimentConfig, Method, PartitionKind, Scenario};
use crate::error::Result;

/// One sweep point: a label used as the output subdirectory and the
/// configuration it runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PresetKind {
    /// Every variant runs independently.
    Grid(Vec<Variant>),
    /// `ours` with the switch disabled, at the detected epoch, and forced at
    /// the detected epoch shifted by each offset.
    SwitchPoints { offsets: Vec<i64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub summary: &'static str,
    pub base: ExperimentConfig,
    pub kind: PresetKind,
}

pub const PRESET_NAMES: [&str; 11] = [
    "main", "table8", "table9", "variant", "table12", "table13", "table22", "table2", "table3",
    "switch", "detector",
];

/// Desk-scale defaults: 20 clients of which 4 are stale, τ = 40, 200 epochs.
pub fn desk() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.num_clients = 20;
    c.staleness.num_stale_clients = 4;
    c.data.spread = 0.25;
    c.gi.stop_tol = 0.01;
    c
}

fn variant_data(mut c: ExperimentConfig) -> ExperimentConfig {
    c.scenario = Scenario::VariantData;
    c
}

fn sweep<T: Copy + std::fmt::Display>(
    base: &ExperimentConfig,
    key: &str,
    values: &[T],
    apply: impl Fn(&mut ExperimentConfig, T),
) -> PresetKind {
    PresetKind::Grid(
        values
            .iter()
            .map(|&v| {
                let mut config = base.clone();
                apply(&mut config, v);
                Variant {
                    label: format!("{key}={v}"),
                    config,
                }
            })
            .collect(),
    )
}

fn single(base: &ExperimentConfig) -> PresetKind {
    PresetKind::Grid(vec![Variant {
        label: String::new(),
        config: base.clone(),
    }])
}

pub fn preset(name: &str) -> Option<Preset> {
    let (summary, base, kind): (&'static str, ExperimentConfig, PresetKind) = match name {
        "main" => {
            let b = desk();
            let k = single(&b);
            ("fixed data, all methods", b, k)
        }
        "table8" => {
            let b = desk();
            let k = sweep(&b, "alpha", &[1.0, 0.1, 0.01], |c, v| c.alpha = v);
            ("fixed data, Dirichlet α sweep", b, k)
        }
        "table9" => {
            let b = desk();
            let k = sweep(&b, "staleness", &[10usize, 40, 100], |c, v| {
                c.staleness.staleness_epochs = v
            });
            ("fixed data, staleness sweep", b, k)
        }
        "variant" => {
            let mut b = variant_data(desk());
            b.methods.push(Method::UnstaleOracle);
            let k = single(&b);
            ("variant data against the unstale reference", b, k)
        }
        "table12" => {
            let b = variant_data(desk());
            let k = sweep(&b, "staleness", &[10usize, 40, 100], |c, v| {
                c.staleness.staleness_epochs = v
            });
            ("variant data, staleness sweep", b, k)
        }
        "table13" => {
            let mut b = variant_data(desk());
            b.staleness.staleness_epochs = 100;
            let k = sweep(&b, "rate", &[0.5, 1.0, 2.0], |c, v| c.variation.rate = v);
            ("variant data, variation-rate sweep", b, k)
        }
        "table22" => {
            let mut b = desk();
            b.methods = vec![Method::Ours];
            let k = sweep(&b, "sparsification", &[0.0, 0.9, 0.95, 0.99], |c, v| {
                c.gi.sparsification_rate = v
            });
            ("ours with different sparsification rates", b, k)
        }
        "table2" => {
            let mut b = desk();
            b.methods = vec![Method::Ours];
            b.opt.learning_rate = 0.04;
            (
                "switch disabled, detected and forced ±20 epochs",
                b,
                PresetKind::SwitchPoints {
                    offsets: vec![-20, 20],
                },
            )
        }
        "table3" => {
            let mut b = desk();
            b.methods = vec![Method::Ours];
            b.opt.learning_rate = 0.04;
            let k = sweep(&b, "window", &[0.0, 0.05, 0.1, 0.2], |c, v| {
                c.switch.window_fraction = v
            });
            ("blend window sweep", b, k)
        }
        "switch" => {
            let mut b = desk();
            b.methods = vec![Method::Ours];
            b.opt.learning_rate = 0.04;
            let k = sweep(&b, "switch", &[true, false], |c, v| c.switch.enabled = v);
            ("switch against no switch", b, k)
        }
        "detector" => {
            let mut b = desk();
            b.num_clients = 100;
            b.staleness.num_stale_clients = 10;
            b.partition = PartitionKind::OneClassPerClient;
            b.methods = vec![Method::Ours];
            b.gi.max_iters = 20;
            let k = single(&b);
            ("one class per client, uniqueness detection", b, k)
        }
        _ => return None,
    };
    Some(Preset {
        name: PRESET_NAMES.iter().find(|&&n| n == name)?,
        summary,
        base,
        kind,
    })
}

impl Preset {
    /// Applies `key = value` overrides to the base and to every variant. An
    /// override of the swept key replaces the swept value too.
    pub fn with_overrides(&self, text: &str) -> Result<Preset> {
        let kind = match &self.kind {
            PresetKind::Grid(vs) => PresetKind::Grid(
                vs.iter()
                    .map(|v| {
                        Ok(Variant {
                            label: v.label.clone(),
                            config: parse_config_onto(v.config.clone(), text)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            k => k.clone(),
        };
        Ok(Preset {
            base: parse_config_onto(self.base.clone(), text)?,
            kind,
            ..self.clone()
        })
    }
}
