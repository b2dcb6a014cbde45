//! Decides when to stop using inverted estimates and hand over to raw
//! stale updates.
//!
//! `E1(t)` is the error of the estimate made at epoch `t`, `E2(t)` the error
//! of the raw stale update used at `t`, both against the true update for `t`
//! which only arrives later. Once the smoothed `E1` exceeds the smoothed
//! `E2` the controller latches, blends the two updates with a weight `γ`
//! decaying linearly from 1 to 0, and then stays on raw updates.

use serde::{Deserialize, Serialize};

use crate::nn::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchMode {
    Estimating,
    Blending,
    Vanilla,
}

impl SwitchMode {
    pub fn name(self) -> &'static str {
        match self {
            SwitchMode::Estimating => "estimating",
            SwitchMode::Blending => "blending",
            SwitchMode::Vanilla => "vanilla",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchConfig {
    /// `false` keeps estimating for the whole run.
    pub enabled: bool,
    pub smoothing_window: usize,
    /// Blend window as a fraction of the epochs elapsed at the switch.
    pub window_fraction: f64,
    /// Switch at this epoch regardless of the logged errors.
    pub forced_epoch: Option<usize>,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            smoothing_window: 3,
            window_fraction: 0.1,
            forced_epoch: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorEntry {
    pub epoch: usize,
    e1_sum: f64,
    e2_sum: f64,
    count: usize,
}

impl ErrorEntry {
    pub fn e1(&self) -> f64 {
        self.e1_sum / self.count as f64
    }

    pub fn e2(&self) -> f64 {
        self.e2_sum / self.count as f64
    }
}

#[derive(Clone, Debug)]
pub struct SwitchState {
    config: SwitchConfig,
    mode: SwitchMode,
    switch_epoch: Option<usize>,
    gamma: f64,
    window_len: usize,
    log: Vec<ErrorEntry>,
}

impl SwitchState {
    pub fn new(config: SwitchConfig) -> Self {
        Self {
            config,
            mode: SwitchMode::Estimating,
            switch_epoch: None,
            gamma: 1.0,
            window_len: 0,
            log: Vec::new(),
        }
    }

    pub fn mode(&self) -> SwitchMode {
        self.mode
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn switch_epoch(&self) -> Option<usize> {
        self.switch_epoch
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// Per-epoch averages across the stale clients, in recording order.
    pub fn log(&self) -> &[ErrorEntry] {
        &self.log
    }

    /// Logs `E1 = L1(est, true)` and `E2 = L1(stale, true)` for epoch `t`.
    /// Pairs for the same epoch are averaged together.
    pub fn record_pair(
        &mut self,
        epoch_t: usize,
        est: &ParamVector,
        stale: &ParamVector,
        truth: &ParamVector,
    ) {
        let e1 = est.mean_abs_diff(truth);
        let e2 = stale.mean_abs_diff(truth);
        match self.log.iter_mut().find(|e| e.epoch == epoch_t) {
            Some(entry) => {
                entry.e1_sum += e1;
                entry.e2_sum += e2;
                entry.count += 1;
            }
            None => self.log.push(ErrorEntry {
                epoch: epoch_t,
                e1_sum: e1,
                e2_sum: e2,
                count: 1,
            }),
        }
    }

    /// Whether the smoothed `E1` currently exceeds the smoothed `E2`.
    /// Once true (or once latched) it stays true.
    pub fn should_switch(&self) -> bool {
        if self.switch_epoch.is_some() {
            return true;
        }
        let w = self.config.smoothing_window.max(1);
        if self.log.len() < w {
            return false;
        }
        let tail = &self.log[self.log.len() - w..];
        let e1: f64 = tail.iter().map(ErrorEntry::e1).sum();
        let e2: f64 = tail.iter().map(ErrorEntry::e2).sum();
        e1 > e2
    }

    fn latch(&mut self, epoch: usize) {
        self.switch_epoch = Some(epoch);
        self.window_len = (self.config.window_fraction * epoch as f64).round() as usize;
        self.mode = SwitchMode::Blending;
    }

    /// Moves the controller to `epoch`: latches the switch if due and updates
    /// γ and the mode. Call once per epoch before aggregating.
    pub fn advance(&mut self, epoch: usize) {
        if self.switch_epoch.is_none() && self.config.enabled {
            let due = match self.config.forced_epoch {
                Some(f) => epoch >= f,
                None => self.should_switch(),
            };
            if due {
                self.latch(epoch);
            }
        }
        if let Some(s) = self.switch_epoch {
            let elapsed = epoch.saturating_sub(s);
            if elapsed >= self.window_len {
                self.gamma = 0.0;
                self.mode = SwitchMode::Vanilla;
            } else {
                self.gamma = 1.0 - elapsed as f64 / self.window_len as f64;
                self.mode = SwitchMode::Blending;
            }
        }
    }
}

/// `γ·est + (1−γ)·stale` with the controller's current γ.
pub fn blended_update(est: &ParamVector, stale: &ParamVector, state: &SwitchState) -> ParamVector {
    blend(est, stale, state.gamma())
}

pub fn blend(est: &ParamVector, stale: &ParamVector, gamma: f64) -> ParamVector {
    let mut out = est.scaled(gamma);
    out.axpy(1.0 - gamma, stale);
    out
}
