use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Dataset;

/// When a stale client starts its next local round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cadence {
    /// A new round every epoch: at epoch `t` the server receives the update
    /// trained on the snapshot of `t − τ`.
    EveryEpoch,
    /// A new round only once the previous update has been delivered, so at
    /// most one update per client is in flight.
    AfterDelivery,
}

impl Cadence {
    pub fn name(self) -> &'static str {
        match self {
            Cadence::EveryEpoch => "every_epoch",
            Cadence::AfterDelivery => "after_delivery",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "every_epoch" => Some(Cadence::EveryEpoch),
            "after_delivery" => Some(Cadence::AfterDelivery),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessPlan {
    pub target_class: usize,
    pub num_stale_clients: usize,
    /// τ: epochs between the snapshot a stale client trains on and delivery.
    pub staleness_epochs: usize,
    pub cadence: Cadence,
}

impl Default for StalenessPlan {
    fn default() -> Self {
        Self {
            target_class: 5,
            num_stale_clients: 10,
            staleness_epochs: 40,
            cadence: Cadence::EveryEpoch,
        }
    }
}

/// The `num_stale_clients` clients holding the most `target_class` samples,
/// ties broken by lower client id.
pub fn select_stale_clients(
    partitions: &[Dataset],
    plan: &StalenessPlan,
) -> Result<BTreeSet<usize>> {
    if plan.num_stale_clients > partitions.len() {
        return Err(Error::Config(format!(
            "num_stale_clients {} exceeds the {} clients",
            plan.num_stale_clients,
            partitions.len()
        )));
    }
    if let Some(p) = partitions.first() {
        if plan.target_class >= p.num_classes() {
            return Err(Error::Config(format!(
                "target_class {} outside [0, {})",
                plan.target_class,
                p.num_classes()
            )));
        }
    }
    let mut ranked: Vec<(usize, usize)> = partitions
        .iter()
        .enumerate()
        .map(|(id, d)| (id, d.class_counts()[plan.target_class]))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .take(plan.num_stale_clients)
        .map(|(id, _)| id)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dirichlet_partition, make_blobs, PartitionSpec};
    use crate::nn::Labels;

    fn client(labels: Vec<usize>) -> Dataset {
        let n = labels.len();
        Dataset::new(vec![0.5; n], 1, Labels::Hard(labels), 3).unwrap()
    }

    fn plan(k: usize) -> StalenessPlan {
        StalenessPlan {
            target_class: 1,
            num_stale_clients: k,
            staleness_epochs: 4,
            cadence: Cadence::EveryEpoch,
        }
    }

    #[test]
    fn ties_go_to_lower_ids() {
        let parts: Vec<Dataset> = (0..5).map(|_| client(vec![0, 1, 2])).collect();
        assert_eq!(
            select_stale_clients(&parts, &plan(2)).unwrap(),
            BTreeSet::from([0, 1])
        );
    }

    #[test]
    fn sole_holder_is_chosen() {
        let parts = vec![
            client(vec![0, 2]),
            client(vec![0]),
            client(vec![1, 1, 0]),
            client(vec![2]),
        ];
        assert_eq!(
            select_stale_clients(&parts, &plan(1)).unwrap(),
            BTreeSet::from([2])
        );
    }

    #[test]
    fn too_many_stale_clients_rejected() {
        let parts = vec![client(vec![0])];
        assert!(matches!(
            select_stale_clients(&parts, &plan(2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn matches_brute_force_ranking() {
        let data = make_blobs(4, 2, 40, 0.1, 0).unwrap();
        for seed in 0..10 {
            let parts = dirichlet_partition(
                &data,
                &PartitionSpec {
                    num_clients: 8,
                    alpha: 0.3,
                    seed,
                },
            )
            .unwrap();
            let k = 3;
            let chosen = select_stale_clients(
                &parts,
                &StalenessPlan {
                    target_class: 2,
                    num_stale_clients: k,
                    staleness_epochs: 1,
                    cadence: Cadence::EveryEpoch,
                },
            )
            .unwrap();
            // every chosen client beats (or ties with a higher id) every unchosen one
            let count = |i: usize| parts[i].class_counts()[2];
            for &a in &chosen {
                for b in (0..parts.len()).filter(|b| !chosen.contains(b)) {
                    assert!(count(a) > count(b) || (count(a) == count(b) && a < b));
                }
            }
            assert_eq!(chosen.len(), k);
        }
    }
}
