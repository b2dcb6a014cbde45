//! Comparison strategies for stale updates that do not invert anything.
//!
//! All compensators work in gradient space: the caller passes a pseudo-
//! gradient (for a model delta, its negation) and gets one back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightingParams {
    pub a: f64,
    pub b: f64,
}

impl Default for WeightingParams {
    fn default() -> Self {
        Self { a: 0.25, b: 10.0 }
    }
}

/// `1 / (1 + e^{a(τ − b)})`.
pub fn staleness_weight(tau: f64, params: &WeightingParams) -> f64 {
    1.0 / (1.0 + (params.a * (tau - params.b)).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderParams {
    pub lambda: f64,
}

impl Default for FirstOrderParams {
    fn default() -> Self {
        Self { lambda: 0.3 }
    }
}

/// `g + λ·(g⊙g)⊙(w_now − w_base)`: a Taylor step with the Hessian
/// replaced by the scaled outer-product diagonal.
pub fn first_order_compensate(
    g: &ParamVector,
    w_now: &ParamVector,
    w_base: &ParamVector,
    params: &FirstOrderParams,
) -> ParamVector {
    let lambda = params.lambda;
    let mut out = g.clone();
    for (((o, &gi), &wn), &wb) in out
        .values_mut()
        .iter_mut()
        .zip(g.values())
        .zip(w_now.values())
        .zip(w_base.values())
    {
        *o = gi + lambda * gi * gi * (wn - wb);
    }
    out
}

pub const TREND_WINDOW: usize = 5;

/// Extrapolates the global model `τ` epochs past `w_base` along the mean of
/// the last `min(τ, 5)` global deltas and compensates toward it.
///
/// `deltas_to_base` are global deltas in epoch order, the last one being the
/// step that produced `w_base`. With no history this is plain first-order
/// compensation against `w_now`.
pub fn w_pred_compensate(
    g: &ParamVector,
    w_now: &ParamVector,
    w_base: &ParamVector,
    deltas_to_base: &[ParamVector],
    tau: usize,
    params: &FirstOrderParams,
) -> ParamVector {
    if deltas_to_base.is_empty() {
        return first_order_compensate(g, w_now, w_base, params);
    }
    let window = tau.min(TREND_WINDOW).min(deltas_to_base.len());
    let predicted = if window == 0 {
        w_base.clone()
    } else {
        let mut trend = ParamVector::zeros(w_base.arch().clone());
        for d in &deltas_to_base[deltas_to_base.len() - window..] {
            trend.axpy(1.0, d);
        }
        let mut p = w_base.clone();
        p.axpy(tau as f64 / window as f64, &trend);
        p
    };
    first_order_compensate(g, &predicted, w_base, params)
}

/// One staleness tier of the two-tier scheme.
#[derive(Clone, Debug)]
pub struct Tier {
    /// Aggregate formed this epoch, if any member delivered.
    pub fresh: Option<ParamVector>,
    /// Most recent earlier aggregate.
    pub last: Option<ParamVector>,
    pub num_clients: usize,
}

/// Cross-tier mean weighted by tier size. A tier without a fresh aggregate
/// reuses its last one; tiers with neither, or no members, are skipped.
pub fn asyn_tiers_aggregate(tiers: &[Tier]) -> Result<ParamVector> {
    let active: Vec<(&ParamVector, usize)> = tiers
        .iter()
        .filter(|t| t.num_clients > 0)
        .filter_map(|t| {
            t.fresh
                .as_ref()
                .or(t.last.as_ref())
                .map(|a| (a, t.num_clients))
        })
        .collect();
    match active.as_slice() {
        [] => Err(Error::Aggregation("no tier has an aggregate".into())),
        [(only, _)] => Ok((*only).clone()),
        _ => {
            let total: usize = active.iter().map(|(_, n)| n).sum();
            let mut out = ParamVector::zeros(active[0].0.arch().clone());
            for (agg, n) in &active {
                out.axpy(*n as f64 / total as f64, agg);
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ModelArch};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn pv(values: &[f64]) -> ParamVector {
        let arch = Arc::new(ModelArch::new(vec![1, values.len() / 2], Activation::Relu).unwrap());
        ParamVector::new(arch, values.to_vec()).unwrap()
    }

    #[test]
    fn weight_landmarks() {
        let p = WeightingParams::default();
        assert!((staleness_weight(10.0, &p) - 0.5).abs() < 1e-15);
        assert!(staleness_weight(110.0, &p) < 1e-10);
        // e^{-2.5} = 0.0820849986238988
        let expect = 1.0 / (1.0 + 0.082_084_998_623_898_8);
        assert!((staleness_weight(0.0, &p) - expect).abs() < 1e-15);
    }

    #[test]
    fn first_order_identities() {
        let g = pv(&[0.3, -1.2]);
        let wb = pv(&[1.0, 2.0]);
        let wn = pv(&[0.5, 3.0]);
        assert_eq!(
            first_order_compensate(&g, &wb, &wb, &FirstOrderParams::default()),
            g
        );
        assert_eq!(
            first_order_compensate(&g, &wn, &wb, &FirstOrderParams { lambda: 0.0 }),
            g
        );
    }

    #[test]
    fn first_order_is_exact_on_tuned_quadratic() {
        // L(w) = w²/2: gradient at base is w_base, Hessian is 1, so λg² = 1
        // makes the Taylor step exact.
        let (wb, wn) = (2.0, 0.7);
        let lambda = 1.0 / (wb * wb);
        let out = first_order_compensate(
            &pv(&[wb, wb]),
            &pv(&[wn, wn]),
            &pv(&[wb, wb]),
            &FirstOrderParams { lambda },
        );
        for v in out.values() {
            assert!((v - wn).abs() < 1e-15);
        }
    }

    #[test]
    fn w_pred_degenerate_cases() {
        let g = pv(&[0.3, -1.2]);
        let wb = pv(&[1.0, 2.0]);
        let wn = pv(&[0.5, 3.0]);
        let p = FirstOrderParams::default();
        let zeros = vec![pv(&[0.0, 0.0]); 6];
        assert_eq!(w_pred_compensate(&g, &wn, &wb, &zeros, 10, &p), g);
        assert_eq!(
            w_pred_compensate(&g, &wn, &wb, &[pv(&[1.0, 1.0])], 0, &p),
            g
        );
        assert_eq!(
            w_pred_compensate(&g, &wn, &wb, &[], 10, &p),
            first_order_compensate(&g, &wn, &wb, &p)
        );
    }

    #[test]
    fn w_pred_constant_drift() {
        // drift δ per epoch, τ = 8: predicted displacement 8δ
        let g = pv(&[0.5, -2.0]);
        let wb = pv(&[0.0, 0.0]);
        let delta = pv(&[0.1, -0.05]);
        let out = w_pred_compensate(
            &g,
            &wb,
            &wb,
            &vec![delta; 7],
            8,
            &FirstOrderParams { lambda: 1.0 },
        );
        let expect = [0.5 + 0.25 * 0.8, -2.0 + 4.0 * -0.4];
        for (o, e) in out.values().iter().zip(expect) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn tier_landmarks() {
        let a = pv(&[1.0, 0.0]);
        let b = pv(&[0.0, 1.0]);
        let tiers = [
            Tier {
                fresh: Some(a.clone()),
                last: None,
                num_clients: 9,
            },
            Tier {
                fresh: None,
                last: Some(b.clone()),
                num_clients: 1,
            },
        ];
        let out = asyn_tiers_aggregate(&tiers).unwrap();
        assert!((out.values()[0] - 0.9).abs() < 1e-15 && (out.values()[1] - 0.1).abs() < 1e-15);
        let single = [
            Tier {
                fresh: Some(a.clone()),
                last: None,
                num_clients: 3,
            },
            Tier {
                fresh: None,
                last: None,
                num_clients: 2,
            },
        ];
        assert_eq!(asyn_tiers_aggregate(&single).unwrap(), a);
        assert!(asyn_tiers_aggregate(&[]).is_err());
    }

    proptest! {
        #[test]
        fn weight_strictly_decreasing(t in 0.0f64..60.0, dt in 0.01f64..10.0) {
            let p = WeightingParams::default();
            let (w0, w1) = (staleness_weight(t, &p), staleness_weight(t + dt, &p));
            prop_assert!(w1 < w0 && w0 < 1.0 && w1 > 0.0);
        }

        #[test]
        fn tiers_match_two_stage_mean(
            raw in proptest::collection::vec((proptest::collection::vec(-3.0f64..3.0, 4), 1usize..10), 2..6),
            split in 1usize..5,
        ) {
            // brute force: FedAvg per tier (uniform sizes), then tier-size weighted mean
            let split = split.min(raw.len() - 1);
            let mean = |xs: &[(Vec<f64>, usize)]| {
                let mut m = vec![0.0; 4];
                let total: usize = xs.iter().map(|x| x.1).sum();
                for (v, n) in xs { for i in 0..4 { m[i] += v[i] * *n as f64 / total as f64; } }
                m
            };
            let (t0, t1) = raw.split_at(split);
            let (a0, a1) = (mean(t0), mean(t1));
            let tiers = [
                Tier { fresh: Some(pv(&a0)), last: None, num_clients: t0.len() },
                Tier { fresh: Some(pv(&a1)), last: None, num_clients: t1.len() },
            ];
            let got = asyn_tiers_aggregate(&tiers).unwrap();
            let n = raw.len() as f64;
            for i in 0..4 {
                let expect = (a0[i] * t0.len() as f64 + a1[i] * t1.len() as f64) / n;
                prop_assert!((got.values()[i] - expect).abs() < 1e-12);
            }
        }
    }
}
