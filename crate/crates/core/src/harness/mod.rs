//! Experiment drivers: presets, multi-seed suites and offline studies.

pub mod estimation;
pub mod presets;
pub mod suite;

pub use presets::{desk, preset, Preset, PresetKind, Variant, PRESET_NAMES};
pub use suite::{
    compare_epochs_to_accuracy, run_preset, run_suite, summarize, summarize_tree,
    switch_point_study, EpochRatio, PresetReport, Summary,
};
