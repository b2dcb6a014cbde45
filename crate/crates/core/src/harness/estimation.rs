//! How well each compensation rule predicts the update a stale client
//! would send if it trained on the current model.

use serde::Serialize;

use crate::baselines::first_order_compensate;
use crate::config::ExperimentConfig;
use crate::detector::cosine_distance;
use crate::error::{Error, Result};
use crate::gi::{estimate_unstale, invert};
use crate::nn::{local_update, ParamVector};
use crate::seed::derive_seed;
use crate::sim::{aggregate_fedavg, build_setup, ModelUpdate};

/// Errors against the true current-model update, averaged over stale clients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EstimationErrors {
    pub tau: usize,
    pub seed: u64,
    pub stale_l1: f64,
    pub stale_cos: f64,
    pub first_order_l1: f64,
    pub first_order_cos: f64,
    pub gi_l1: f64,
    pub gi_cos: f64,
    pub gi_iters: f64,
}

/// Synchronous FedAvg over every client, returning the start-of-epoch
/// weights for epochs `0..=epochs`.
pub fn synchronous_trajectory(
    cfg: &ExperimentConfig,
    seed: u64,
    epochs: usize,
) -> Result<Vec<ParamVector>> {
    let setup = build_setup(cfg, seed)?;
    let mut out = Vec::with_capacity(epochs + 1);
    out.push(setup.initial.clone());
    for e in 0..epochs {
        let w = out.last().expect("nonempty").clone();
        let updates = setup
            .clients
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let s = derive_seed(seed, &[0xE5, i as u64, e as u64]);
                Ok(ModelUpdate {
                    client_id: i,
                    base_epoch: e,
                    arrival_epoch: e,
                    delta: local_update(&w, d, &cfg.opt, Some(&w), s)?.sub(&w),
                    num_samples: d.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut next = w;
        next.axpy(1.0, &aggregate_fedavg(&updates, None)?);
        if !next.is_finite() {
            return Err(Error::Divergence {
                epoch: e,
                detail: "synchronous reference run diverged".into(),
            });
        }
        out.push(next);
    }
    Ok(out)
}

/// For each `τ`, compares the stale update trained on `w[at − τ]` and its
/// first-order and inversion-based corrections with the update trained on
/// `w[at]`, for every stale client of the setup.
pub fn estimation_errors(
    cfg: &ExperimentConfig,
    seed: u64,
    at: usize,
    taus: &[usize],
) -> Result<Vec<EstimationErrors>> {
    if let Some(&t) = taus.iter().find(|&&t| t > at) {
        return Err(Error::Precondition(format!(
            "staleness {t} exceeds the evaluation epoch {at}"
        )));
    }
    let setup = build_setup(cfg, seed)?;
    let traj = synchronous_trajectory(cfg, seed, at)?;
    let steps = cfg.gi.steps_for(&cfg.opt);
    let w_now = &traj[at];
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let w_base = &traj[at - tau];
        let mut acc = [0.0f64; 7];
        for &i in &setup.stale {
            let data = &setup.clients[i];
            let s = derive_seed(seed, &[0xE6, i as u64]);
            let truth = local_update(w_now, data, &cfg.opt, Some(w_now), s)?.sub(w_now);
            let stale = local_update(w_base, data, &cfg.opt, Some(w_base), s)?.sub(w_base);
            let fo = first_order_compensate(&stale.scaled(-1.0), w_now, w_base, &cfg.first_order)
                .scaled(-1.0);
            let inv = invert(
                &stale,
                w_base,
                &cfg.opt,
                &cfg.gi,
                setup.reference_size,
                None,
                derive_seed(s, &[tau as u64]),
            )?;
            let gi = estimate_unstale(w_now, &inv.d_rec, &cfg.opt, steps)?;
            let vals = [
                stale.mean_abs_diff(&truth),
                cosine_distance(&stale, &truth)?,
                fo.mean_abs_diff(&truth),
                cosine_distance(&fo, &truth)?,
                gi.mean_abs_diff(&truth),
                cosine_distance(&gi, &truth)?,
                inv.iters_used as f64,
            ];
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += v;
            }
        }
        let n = setup.stale.len().max(1) as f64;
        let [stale_l1, stale_cos, first_order_l1, first_order_cos, gi_l1, gi_cos, gi_iters] =
            acc.map(|v| v / n);
        out.push(EstimationErrors {
            tau,
            seed,
            stale_l1,
            stale_cos,
            first_order_l1,
            first_order_cos,
            gi_l1,
            gi_cos,
            gi_iters,
        });
    }
    Ok(out)
}
