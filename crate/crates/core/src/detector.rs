//! Uniqueness detection: does a stale update point somewhere the unstale
//! cohort does not?

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// Unstale deltas received at one epoch.
#[derive(Clone, Debug)]
pub struct CohortSnapshot {
    pub epoch: usize,
    pub unstale_deltas: Vec<ParamVector>,
}

/// `1 − u·v / (‖u‖‖v‖)`, in `[0, 2]`.
pub fn cosine_distance(u: &ParamVector, v: &ParamVector) -> Result<f64> {
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Precondition(
            "cosine distance of a zero vector".into(),
        ));
    }
    Ok((1.0 - u.dot(v) / (nu * nv)).clamp(0.0, 2.0))
}

/// Mean pairwise cosine distance over all ordered pairs of the cohort,
/// diagonal included. `None` when the cohort has fewer than two members.
pub fn adaptive_threshold(cohort: &CohortSnapshot) -> Result<Option<f64>> {
    let s = &cohort.unstale_deltas;
    if s.len() < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    for j in 0..s.len() {
        for k in (j + 1)..s.len() {
            total += 2.0 * cosine_distance(&s[j], &s[k])?;
        }
    }
    Ok(Some(total / (s.len() * s.len()) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Detection {
    /// Mean cosine distance from the stale update to the cohort members.
    pub mean_dc: Option<f64>,
    pub threshold: Option<f64>,
    pub unique: bool,
}

/// A disabled detector (cohort too small) reports every update as unique.
pub fn is_unique(stale_delta: &ParamVector, cohort: &CohortSnapshot) -> Result<Detection> {
    let Some(threshold) = adaptive_threshold(cohort)? else {
        log::warn!(
            "cohort at epoch {} has {} members; uniqueness detection disabled",
            cohort.epoch,
            cohort.unstale_deltas.len()
        );
        return Ok(Detection {
            mean_dc: None,
            threshold: None,
            unique: true,
        });
    };
    let mut sum = 0.0;
    for w in &cohort.unstale_deltas {
        sum += cosine_distance(stale_delta, w)?;
    }
    let mean = sum / cohort.unstale_deltas.len() as f64;
    Ok(Detection {
        mean_dc: Some(mean),
        threshold: Some(threshold),
        unique: mean > threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ModelArch};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn arch(n: usize) -> Arc<ModelArch> {
        // a 1 → n/2 linear layer has exactly n parameters
        Arc::new(ModelArch::new(vec![1, n / 2], Activation::Relu).unwrap())
    }

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::new(arch(values.len()), values.to_vec()).unwrap()
    }

    fn cohort(members: Vec<ParamVector>) -> CohortSnapshot {
        CohortSnapshot {
            epoch: 0,
            unstale_deltas: members,
        }
    }

    #[test]
    fn distance_landmarks() {
        let w = pv(&[1.0, 2.0]);
        assert!(cosine_distance(&w, &w).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&w, &w.scaled(-1.0)).unwrap() - 2.0).abs() < 1e-15);
        assert!((cosine_distance(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_distance(&w, &pv(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn threshold_landmarks() {
        let same = cohort(vec![pv(&[1.0, 1.0]); 3]);
        assert!(adaptive_threshold(&same).unwrap().unwrap().abs() < 1e-15);
        let ortho = cohort(vec![pv(&[1.0, 0.0]), pv(&[0.0, 1.0])]);
        assert!((adaptive_threshold(&ortho).unwrap().unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(
            adaptive_threshold(&cohort(vec![pv(&[1.0, 0.0])])).unwrap(),
            None
        );
    }

    #[test]
    fn tight_cohort_decisions() {
        let tight = cohort(vec![pv(&[1.0, 0.01]), pv(&[1.0, 0.0]), pv(&[1.0, -0.01])]);
        assert!(!is_unique(&pv(&[1.0, 0.0]), &tight).unwrap().unique);
        assert!(is_unique(&pv(&[0.0, 1.0]), &tight).unwrap().unique);
    }

    #[test]
    fn small_cohort_disables_detector() {
        let d = is_unique(&pv(&[1.0, 0.0]), &cohort(vec![pv(&[1.0, 0.0])])).unwrap();
        assert!(d.unique && d.threshold.is_none());
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1.0f64..1.0, n)
            .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn threshold_matches_double_loop(members in proptest::collection::vec(vec_strategy(6), 2..7)) {
            let c = cohort(members.iter().map(|m| pv(m)).collect());
            let got = adaptive_threshold(&c).unwrap().unwrap();
            let s = &c.unstale_deltas;
            let mut brute = 0.0;
            for j in s {
                for k in s {
                    let cos = j.dot(k) / (j.norm() * k.norm());
                    brute += 1.0 - cos;
                }
            }
            brute /= (s.len() * s.len()) as f64;
            prop_assert!((got - brute).abs() < 1e-12);
            let bound = 2.0 * (s.len() as f64 - 1.0) / s.len() as f64;
            prop_assert!(got >= 0.0 && got <= bound + 1e-12);
        }

        #[test]
        fn scale_invariance(members in proptest::collection::vec(vec_strategy(6), 2..6),
                            stale in vec_strategy(6), k in 0.01f64..100.0) {
            let c = cohort(members.iter().map(|m| pv(m)).collect());
            let scaled = cohort(members.iter().map(|m| pv(m).scaled(k)).collect());
            let t1 = adaptive_threshold(&c).unwrap().unwrap();
            let t2 = adaptive_threshold(&scaled).unwrap().unwrap();
            prop_assert!((t1 - t2).abs() < 1e-9);
            let s = pv(&stale);
            let a = is_unique(&s, &c).unwrap();
            let b = is_unique(&s.scaled(k), &c).unwrap();
            prop_assert!((a.mean_dc.unwrap() - b.mean_dc.unwrap()).abs() < 1e-9);
            if (a.mean_dc.unwrap() - a.threshold.unwrap()).abs() > 1e-9 {
                prop_assert_eq!(a.unique, b.unique);
            }
        }
    }
}
