//! Semi-asynchronous federated training loop.
//!
//! Unstale clients train on the current global model every epoch. A stale
//! client's update trained on the snapshot of epoch `t` lands at `t + τ`;
//! depending on the cadence the client starts a round every epoch or only
//! after each delivery. All updates are deltas from the snapshot they were
//! trained on.

mod metrics;
mod run;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{predict, Dataset, ParamVector};

pub use metrics::{
    write_detections_csv, write_metrics_csv, DetectionRecord, MetricsRecord, DETECTIONS_HEADER,
    METRICS_HEADER,
};
pub use run::{build_setup, run_training, run_with_setup, InversionStat, RunOutput, Setup};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelUpdate {
    pub client_id: usize,
    /// Epoch whose global snapshot the client trained from.
    pub base_epoch: usize,
    pub arrival_epoch: usize,
    pub delta: ParamVector,
    pub num_samples: usize,
}

impl ModelUpdate {
    pub fn staleness(&self) -> usize {
        self.arrival_epoch - self.base_epoch
    }
}

/// Global weights plus a bounded history of snapshots.
#[derive(Clone, Debug)]
pub struct GlobalState {
    epoch: usize,
    weights: ParamVector,
    /// `(epoch, weights at the start of that epoch)`, oldest first.
    history: VecDeque<(usize, ParamVector)>,
    capacity: usize,
}

impl GlobalState {
    /// `capacity` snapshots are kept, the current one included.
    pub fn new(initial: ParamVector, capacity: usize) -> Self {
        let capacity = capacity.max(1);
        let mut history = VecDeque::with_capacity(capacity);
        history.push_back((0, initial.clone()));
        Self {
            epoch: 0,
            weights: initial,
            history,
            capacity,
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn weights(&self) -> &ParamVector {
        &self.weights
    }

    /// Weights at the start of `epoch`, if still retained.
    pub fn snapshot(&self, epoch: usize) -> Option<&ParamVector> {
        let oldest = self.history.front()?.0;
        if epoch < oldest || epoch > self.epoch {
            return None;
        }
        self.history.get(epoch - oldest).map(|(_, w)| w)
    }

    /// Global deltas `w(k+1) − w(k)` for the last `count` steps ending at `epoch`.
    pub fn deltas_ending_at(&self, epoch: usize, count: usize) -> Vec<ParamVector> {
        let mut out = Vec::new();
        let start = epoch.saturating_sub(count);
        for k in start..epoch {
            if let (Some(a), Some(b)) = (self.snapshot(k), self.snapshot(k + 1)) {
                out.push(b.sub(a));
            }
        }
        out
    }

    /// Moves to the next epoch with `weights += delta`.
    pub fn apply(&mut self, delta: &ParamVector) {
        self.weights.axpy(1.0, delta);
        self.epoch += 1;
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back((self.epoch, self.weights.clone()));
    }
}

/// In-flight updates keyed by arrival epoch. A client may have several
/// updates in flight, but at most one per base epoch.
#[derive(Clone, Debug, Default)]
pub struct DelayQueue {
    pending: BTreeMap<usize, Vec<ModelUpdate>>,
    in_flight: BTreeSet<(usize, usize)>,
}

impl DelayQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dispatch(&mut self, update: ModelUpdate) -> Result<()> {
        if update.arrival_epoch < update.base_epoch {
            return Err(Error::Precondition(
                "update arrives before it was trained".into(),
            ));
        }
        if !self.in_flight.insert((update.client_id, update.base_epoch)) {
            return Err(Error::Precondition(format!(
                "client {} already has an update in flight for epoch {}",
                update.client_id, update.base_epoch
            )));
        }
        self.pending
            .entry(update.arrival_epoch)
            .or_default()
            .push(update);
        Ok(())
    }

    /// Updates arriving at `epoch`, ordered by client id.
    pub fn deliver(&mut self, epoch: usize) -> Vec<ModelUpdate> {
        let mut out = self.pending.remove(&epoch).unwrap_or_default();
        out.sort_by_key(|u| (u.client_id, u.base_epoch));
        for u in &out {
            self.in_flight.remove(&(u.client_id, u.base_epoch));
        }
        out
    }

    /// Whether any update of `client_id` is in flight.
    pub fn in_flight(&self, client_id: usize) -> bool {
        self.in_flight
            .range((client_id, 0)..=(client_id, usize::MAX))
            .next()
            .is_some()
    }

    pub fn len(&self) -> usize {
        self.in_flight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_flight.is_empty()
    }
}

/// `Σ n_i e_i Δ_i / Σ n_i e_i`, with `e_i = 1` when no extra weights are given.
pub fn aggregate_fedavg(
    updates: &[ModelUpdate],
    extra_weights: Option<&[f64]>,
) -> Result<ParamVector> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Aggregation("no updates to aggregate".into()))?;
    if let Some(e) = extra_weights {
        if e.len() != updates.len() {
            return Err(Error::Shape(format!(
                "{} extra weights for {} updates",
                e.len(),
                updates.len()
            )));
        }
    }
    let weights: Vec<f64> = updates
        .iter()
        .enumerate()
        .map(|(i, u)| u.num_samples as f64 * extra_weights.map_or(1.0, |e| e[i]))
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Aggregation(
            "combined aggregation weights sum to zero".into(),
        ));
    }
    let mut out = ParamVector::zeros(first.delta.arch().clone());
    for (u, w) in updates.iter().zip(&weights) {
        out.axpy(w / total, &u.delta);
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, variance)` noise to the delta.
pub fn add_gaussian_noise(update: &ModelUpdate, variance: f64, seed: u64) -> Result<ModelUpdate> {
    if !(variance >= 0.0) {
        return Err(Error::Precondition("noise variance must be >= 0".into()));
    }
    let mut out = update.clone();
    if variance == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.delta.values_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `None` for classes without test samples.
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
}

pub fn evaluate(weights: &ParamVector, test: &Dataset) -> Result<Evaluation> {
    let labels = test
        .hard_labels()
        .ok_or_else(|| Error::Precondition("evaluation needs hard labels".into()))?;
    let pred = predict(weights.arch(), weights, test.features())?;
    let c = test.num_classes();
    let mut correct = vec![0usize; c];
    let mut count = vec![0usize; c];
    for (&p, &y) in pred.iter().zip(labels) {
        count[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let per_class = (0..c)
        .map(|k| (count[k] > 0).then(|| correct[k] as f64 / count[k] as f64))
        .collect();
    Ok(Evaluation {
        per_class,
        overall: correct.iter().sum::<usize>() as f64 / labels.len() as f64,
    })
}
