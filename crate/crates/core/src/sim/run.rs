use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{DetectionRecord, MetricsRecord};
use super::{add_gaussian_noise, aggregate_fedavg, evaluate, DelayQueue, GlobalState, ModelUpdate};
use crate::baselines::{
    asyn_tiers_aggregate, first_order_compensate, staleness_weight, w_pred_compensate, Tier,
    TREND_WINDOW,
};
use crate::config::{DataSource, ExperimentConfig, Method, PartitionKind, Scenario};
use crate::data::{
    apply_variation, dirichlet_partition_indices, one_class_partition_indices, read_dataset_csv,
    select_stale_clients, BlobFamily, Cadence, PartitionSpec, VariationSpec,
};
use crate::detector::{is_unique, CohortSnapshot};
use crate::error::{Error, Result};
use crate::gi::{estimate_unstale, invert, GIResult};
use crate::nn::{local_update, Dataset, ModelArch, ParamVector};
use crate::seed::derive_seed;
use crate::switch::{blend, SwitchMode, SwitchState};

// stream tags for derive_seed
const DATA: u64 = 1;
const TRAIN: u64 = 2;
const TEST: u64 = 3;
const SHIFT: u64 = 4;
const PARTITION: u64 = 5;
const INIT: u64 = 6;
const LOCAL: u64 = 7;
const NOISE: u64 = 8;
const VARIATION: u64 = 9;
const INVERT: u64 = 10;

/// Everything about a run that does not depend on the method.
#[derive(Clone, Debug)]
pub struct Setup {
    pub arch: Arc<ModelArch>,
    pub initial: ParamVector,
    pub clients: Vec<Dataset>,
    /// Replacement pools for the variant-data scenario, one per client.
    pub pools: Option<Vec<Dataset>>,
    pub test: Dataset,
    pub stale: BTreeSet<usize>,
    /// Stale clients holding a class that no unstale client has.
    pub truly_unique: BTreeSet<usize>,
    /// Median client dataset size; the server's stand-in for `|D_i|`.
    pub reference_size: usize,
}

fn load_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset_csv(std::io::BufReader::new(file), Some(num_classes))
}

pub fn build_setup(cfg: &ExperimentConfig, seed: u64) -> Result<Setup> {
    cfg.validate()?;
    let d = &cfg.data;
    let (train, pool_train, test) = match d.source {
        DataSource::Blobs => {
            let family = BlobFamily::new(d.num_classes, d.dim, derive_seed(seed, &[DATA]))?;
            let train =
                family.sample(d.samples_per_class, d.spread, derive_seed(seed, &[TRAIN]))?;
            if cfg.scenario == Scenario::VariantData {
                let shifted = family.shifted(cfg.variation.shift, derive_seed(seed, &[SHIFT]));
                // same seed, same class-major layout: row i of the pool has row i's label
                let pool =
                    shifted.sample(d.samples_per_class, d.spread, derive_seed(seed, &[TRAIN]))?;
                let half = (d.test_samples_per_class / 2).max(1);
                let rest = d.test_samples_per_class.saturating_sub(half).max(1);
                let a = family.sample(half, d.spread, derive_seed(seed, &[TEST]))?;
                let b = shifted.sample(rest, d.spread, derive_seed(seed, &[TEST, 1]))?;
                (train, Some(pool), Dataset::concat(&[&a, &b])?)
            } else {
                let test = family.sample(
                    d.test_samples_per_class,
                    d.spread,
                    derive_seed(seed, &[TEST]),
                )?;
                (train, None, test)
            }
        }
        DataSource::Csv => {
            let train = load_csv(d.train_csv.as_deref().expect("validated"), d.num_classes)?;
            let test = load_csv(d.test_csv.as_deref().expect("validated"), d.num_classes)?;
            (train, None, test)
        }
    };
    let parts = match cfg.partition {
        PartitionKind::Dirichlet => dirichlet_partition_indices(
            &train,
            &PartitionSpec {
                num_clients: cfg.num_clients,
                alpha: cfg.alpha,
                seed: derive_seed(seed, &[PARTITION]),
            },
        )?,
        PartitionKind::OneClassPerClient => {
            one_class_partition_indices(&train, cfg.num_clients, derive_seed(seed, &[PARTITION]))?
        }
    };
    if parts.iter().any(Vec::is_empty) {
        return Err(Error::Partition("a client received no samples".into()));
    }
    let clients = parts
        .iter()
        .map(|p| train.select(p))
        .collect::<Result<Vec<_>>>()?;
    let pools = match &pool_train {
        Some(pool) => Some(
            parts
                .iter()
                .map(|p| pool.select(p))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let stale = select_stale_clients(&clients, &cfg.staleness)?;
    let mut unstale_classes = vec![false; train.num_classes()];
    for (i, c) in clients.iter().enumerate() {
        if !stale.contains(&i) {
            for (k, &n) in c.class_counts().iter().enumerate() {
                unstale_classes[k] |= n > 0;
            }
        }
    }
    let truly_unique = stale
        .iter()
        .copied()
        .filter(|&i| {
            clients[i]
                .class_counts()
                .iter()
                .enumerate()
                .any(|(k, &n)| n > 0 && !unstale_classes[k])
        })
        .collect();
    let mut sizes: Vec<usize> = clients.iter().map(Dataset::len).collect();
    sizes.sort_unstable();
    let reference_size = sizes[sizes.len() / 2];
    let arch = Arc::new(ModelArch::new(
        cfg.arch_dims(train.dim(), train.num_classes()),
        cfg.model.activation,
    )?);
    let initial = ParamVector::init_random(
        arch.clone(),
        None,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[INIT])),
    );
    Ok(Setup {
        arch,
        initial,
        clients,
        pools,
        test,
        stale,
        truly_unique,
        reference_size,
    })
}

/// Summary of one inversion performed during a run.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionStat {
    pub epoch: usize,
    pub client_id: usize,
    pub iters: usize,
    pub final_disparity: f64,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub detections: Vec<DetectionRecord>,
    pub inversions: Vec<InversionStat>,
    pub switch_epoch: Option<usize>,
    pub final_weights: ParamVector,
    /// Set when the run stopped early; records cover the epochs before it.
    pub abort: Option<String>,
}

pub fn run_training(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<RunOutput> {
    let setup = build_setup(cfg, seed)?;
    run_with_setup(cfg, &setup, method, seed)
}

/// An estimate made for a stale client, waiting for the true update it stands in for.
struct PendingEstimate {
    epoch: usize,
    estimate: ParamVector,
    stale: ParamVector,
}

struct Train<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
}

impl Train<'_> {
    fn update(
        &self,
        client: usize,
        data: &Dataset,
        base: &ParamVector,
        base_epoch: usize,
        arrival_epoch: usize,
    ) -> Result<ModelUpdate> {
        let shuffle = derive_seed(self.seed, &[LOCAL, client as u64, base_epoch as u64]);
        let trained = local_update(base, data, &self.cfg.opt, Some(base), shuffle)?;
        let update = ModelUpdate {
            client_id: client,
            base_epoch,
            arrival_epoch,
            delta: trained.sub(base),
            num_samples: data.len(),
        };
        let noise_seed = derive_seed(self.seed, &[NOISE, client as u64, base_epoch as u64]);
        add_gaussian_noise(&update, self.cfg.noise_variance, noise_seed)
    }
}

fn negate(p: &ParamVector) -> ParamVector {
    p.scaled(-1.0)
}

pub fn run_with_setup(
    cfg: &ExperimentConfig,
    setup: &Setup,
    method: Method,
    seed: u64,
) -> Result<RunOutput> {
    cfg.validate()?;
    let tau = cfg.staleness.staleness_epochs;
    let stale: BTreeSet<usize> = if method == Method::UnstaleOracle {
        BTreeSet::new()
    } else {
        setup.stale.clone()
    };
    let unstale: Vec<usize> = (0..setup.clients.len())
        .filter(|i| !stale.contains(i))
        .collect();
    let train = Train { cfg, seed };
    let variations: Option<Vec<VariationSpec>> = setup.pools.as_ref().map(|pools| {
        pools
            .iter()
            .enumerate()
            .map(|(i, p)| VariationSpec {
                rate: cfg.variation.rate,
                pool: p.clone(),
                seed: derive_seed(seed, &[VARIATION, i as u64]),
            })
            .collect()
    });
    let mut current = setup.clients.clone();
    let mut global = GlobalState::new(setup.initial.clone(), tau + TREND_WINDOW + 2);
    let mut queue = DelayQueue::new();
    let mut cohorts: BTreeMap<usize, Vec<ParamVector>> = BTreeMap::new();
    let mut switch = SwitchState::new(cfg.switch);
    let mut pending: HashMap<(usize, usize), PendingEstimate> = HashMap::new();
    let mut warm: HashMap<usize, GIResult> = HashMap::new();
    let mut last_stale_tier: Option<ParamVector> = None;
    let mut records = Vec::with_capacity(cfg.total_epochs);
    let mut detections = Vec::new();
    let mut inversions = Vec::new();
    let mut abort = None;
    let steps = cfg.gi.steps_for(&cfg.opt);
    let d_rec_dir = cfg.out_dir.join("d_rec");
    if cfg.dump_d_rec && method == Method::Ours {
        std::fs::create_dir_all(&d_rec_dir)?;
    }

    for epoch in 0..cfg.total_epochs {
        let started = Instant::now();
        if let Some(specs) = &variations {
            current = current
                .par_iter()
                .zip(specs)
                .map(|(data, spec)| apply_variation(data, spec, epoch))
                .collect::<Result<Vec<_>>>()?;
        }
        if method == Method::Ours {
            switch.advance(epoch);
        }
        let w_now = global.weights().clone();

        let fresh: Vec<ModelUpdate> = unstale
            .par_iter()
            .map(|&i| train.update(i, &current[i], &w_now, epoch, epoch))
            .collect::<Result<_>>()?;
        cohorts.insert(epoch, fresh.iter().map(|u| u.delta.clone()).collect());
        while let Some((&oldest, _)) = cohorts.first_key_value() {
            if oldest + tau < epoch {
                cohorts.pop_first();
            } else {
                break;
            }
        }

        let mut arrivals = queue.deliver(epoch);
        let idle: Vec<usize> = match cfg.staleness.cadence {
            Cadence::EveryEpoch => stale.iter().copied().collect(),
            Cadence::AfterDelivery => stale
                .iter()
                .copied()
                .filter(|&i| !queue.in_flight(i))
                .collect(),
        };
        let dispatched: Vec<ModelUpdate> = idle
            .par_iter()
            .map(|&i| train.update(i, &current[i], &w_now, epoch, epoch + tau))
            .collect::<Result<_>>()?;
        for u in dispatched {
            queue.dispatch(u)?;
        }
        arrivals.extend(queue.deliver(epoch));
        arrivals.sort_by_key(|u| u.client_id);

        let (late, on_time): (Vec<ModelUpdate>, Vec<ModelUpdate>) =
            arrivals.into_iter().partition(|u| u.staleness() > 0);
        let mut gi_iters = 0usize;
        let processed: Vec<ModelUpdate> = match method {
            Method::Unweighted | Method::Weighted | Method::AsynTiers | Method::UnstaleOracle => {
                late.clone()
            }
            Method::FirstOrder | Method::WPred => late
                .iter()
                .map(|u| {
                    let w_base = global
                        .snapshot(u.base_epoch)
                        .expect("history covers staleness");
                    let g = negate(&u.delta);
                    let comp = if method == Method::FirstOrder {
                        first_order_compensate(&g, &w_now, w_base, &cfg.first_order)
                    } else {
                        let trend =
                            global.deltas_ending_at(u.base_epoch, u.staleness().min(TREND_WINDOW));
                        w_pred_compensate(
                            &g,
                            &w_now,
                            w_base,
                            &trend,
                            u.staleness(),
                            &cfg.first_order,
                        )
                    };
                    ModelUpdate {
                        delta: negate(&comp),
                        ..u.clone()
                    }
                })
                .collect(),
            Method::Ours => {
                let mut jobs = Vec::new();
                for u in &late {
                    if let Some(p) = pending.remove(&(u.client_id, u.base_epoch)) {
                        switch.record_pair(p.epoch, &p.estimate, &p.stale, &u.delta);
                    }
                    let cohort = CohortSnapshot {
                        epoch: u.base_epoch,
                        unstale_deltas: cohorts.get(&u.base_epoch).cloned().unwrap_or_default(),
                    };
                    let det = is_unique(&u.delta, &cohort)?;
                    detections.push(DetectionRecord {
                        epoch,
                        client_id: u.client_id,
                        mean_dc: det.mean_dc,
                        threshold: det.threshold,
                        unique: det.unique,
                        truly_unique: setup.truly_unique.contains(&u.client_id),
                    });
                    jobs.push((u, det.unique && switch.mode() != SwitchMode::Vanilla));
                }
                let results: Vec<Option<std::result::Result<GIResult, Error>>> = jobs
                    .par_iter()
                    .map(|(u, run)| {
                        run.then(|| {
                            let base = global
                                .snapshot(u.base_epoch)
                                .expect("history covers staleness");
                            let warm_start = warm.get(&u.client_id).map(GIResult::warm_start);
                            let s = derive_seed(seed, &[INVERT, u.client_id as u64, epoch as u64]);
                            invert(
                                &u.delta,
                                base,
                                &cfg.opt,
                                &cfg.gi,
                                setup.reference_size,
                                warm_start.as_ref(),
                                s,
                            )
                        })
                    })
                    .collect();
                let mut out = Vec::with_capacity(jobs.len());
                for ((u, _), res) in jobs.into_iter().zip(results) {
                    let used = match res {
                        None => u.delta.clone(),
                        Some(Err(e)) => {
                            log::warn!(
                                "epoch {epoch}, client {}: {e}; using the stale update",
                                u.client_id
                            );
                            u.delta.clone()
                        }
                        Some(Ok(r)) => {
                            gi_iters += r.iters_used;
                            inversions.push(InversionStat {
                                epoch,
                                client_id: u.client_id,
                                iters: r.iters_used,
                                final_disparity: r.final_disparity,
                                converged: r.converged,
                            });
                            if cfg.dump_d_rec {
                                let path = d_rec_dir.join(format!(
                                    "seed{seed}_client{}_epoch{epoch}.csv",
                                    u.client_id
                                ));
                                crate::gi::dump_d_rec(&r, &path)?;
                            }
                            match estimate_unstale(&w_now, &r.d_rec, &cfg.opt, steps) {
                                Ok(est) => {
                                    let used = blend(&est, &u.delta, switch.gamma());
                                    pending.insert(
                                        (u.client_id, epoch),
                                        PendingEstimate {
                                            epoch,
                                            estimate: est,
                                            stale: u.delta.clone(),
                                        },
                                    );
                                    warm.insert(u.client_id, r);
                                    used
                                }
                                Err(e) => {
                                    log::warn!("epoch {epoch}, client {}: estimate failed ({e}); using the stale update", u.client_id);
                                    u.delta.clone()
                                }
                            }
                        }
                    };
                    out.push(ModelUpdate {
                        delta: used,
                        ..u.clone()
                    });
                }
                out
            }
        };

        let mut all: Vec<ModelUpdate> = fresh.into_iter().chain(on_time).chain(processed).collect();
        all.sort_by_key(|u| u.client_id);
        let aggregated = match method {
            Method::Weighted => {
                let extra: Vec<f64> = all
                    .iter()
                    .map(|u| {
                        if u.staleness() > 0 {
                            staleness_weight(u.staleness() as f64, &cfg.weighting)
                        } else {
                            1.0
                        }
                    })
                    .collect();
                aggregate_fedavg(&all, Some(&extra))
            }
            Method::AsynTiers => {
                let (slow, fast): (Vec<ModelUpdate>, Vec<ModelUpdate>) =
                    all.into_iter().partition(|u| u.staleness() > 0);
                let slow_fresh = if slow.is_empty() {
                    None
                } else {
                    Some(aggregate_fedavg(&slow, None)?)
                };
                if slow_fresh.is_some() {
                    last_stale_tier.clone_from(&slow_fresh);
                }
                let tiers = [
                    Tier {
                        fresh: if fast.is_empty() {
                            None
                        } else {
                            Some(aggregate_fedavg(&fast, None)?)
                        },
                        last: None,
                        num_clients: setup.clients.len() - if tau > 0 { stale.len() } else { 0 },
                    },
                    Tier {
                        fresh: slow_fresh,
                        last: last_stale_tier.clone(),
                        num_clients: if tau > 0 { stale.len() } else { 0 },
                    },
                ];
                asyn_tiers_aggregate(&tiers)
            }
            _ => aggregate_fedavg(&all, None),
        };
        let delta = match aggregated {
            Ok(d) => d,
            Err(Error::Aggregation(_)) => ParamVector::zeros(setup.arch.clone()),
            Err(e) => return Err(e),
        };
        if !delta.is_finite() {
            abort = Some(
                Error::Divergence {
                    epoch,
                    detail: format!(
                        "aggregated update is non-finite ({} contributing updates)",
                        setup.clients.len()
                    ),
                }
                .to_string(),
            );
            break;
        }
        global.apply(&delta);

        let eval = evaluate(global.weights(), &setup.test)?;
        records.push(MetricsRecord {
            epoch,
            method: method.name().to_string(),
            seed,
            overall_acc: eval.overall,
            target_class_acc: eval.per_class[cfg.staleness.target_class],
            e1: None,
            e2: None,
            switch_state: (method == Method::Ours).then(|| switch.mode().name().to_string()),
            gi_iters: (method == Method::Ours).then_some(gi_iters),
            wallclock_ms: cfg
                .record_wallclock
                .then(|| started.elapsed().as_secs_f64() * 1e3),
        });
    }

    for entry in switch.log() {
        if let Some(r) = records.get_mut(entry.epoch) {
            r.e1 = Some(entry.e1());
            r.e2 = Some(entry.e2());
        }
    }
    Ok(RunOutput {
        method,
        seed,
        records,
        detections,
        inversions,
        switch_epoch: switch.switch_epoch(),
        final_weights: global.weights().clone(),
        abort,
    })
}
