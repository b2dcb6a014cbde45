use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Dataset;
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

const MAX_RETRIES: usize = 100;

/// Symmetric Dirichlet draw computed in log space.
///
/// For α < 1 the Gamma variates underflow routinely, so each one is drawn
/// as `log Gamma(α+1) + ln(U)/α` and normalized with log-sum-exp.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let boosted = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = boosted.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.max(f64::MIN_POSITIVE).ln() + u.ln() / alpha
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn draw(
    labels: &[usize],
    num_classes: usize,
    spec: &PartitionSpec,
    attempt: u64,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xD1, attempt]));
    let mut clients = vec![Vec::new(); spec.num_clients];
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let p = sample_dirichlet(spec.alpha, spec.num_clients, &mut rng);
        let n = idx.len() as f64;
        let mut cum = 0.0;
        let mut start = 0usize;
        for (k, pk) in p.iter().enumerate() {
            cum += pk;
            let end = if k + 1 == spec.num_clients {
                idx.len()
            } else {
                ((cum * n).round() as usize).min(idx.len())
            };
            clients[k].extend_from_slice(&idx[start..end.max(start)]);
            start = end.max(start);
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    clients
}

/// Row indices of each client's share.
///
/// Per class, samples are split across clients according to a fresh
/// Dirichlet(α) draw. A draw that leaves a client empty is discarded and the
/// whole partition resampled; after `MAX_RETRIES` failed redraws the draw
/// with the fewest empty clients is repaired by moving single samples from
/// the largest clients.
pub fn dirichlet_partition_indices(
    data: &Dataset,
    spec: &PartitionSpec,
) -> Result<Vec<Vec<usize>>> {
    let labels = data
        .hard_labels()
        .ok_or_else(|| Error::Precondition("partitioning needs hard labels".into()))?;
    if spec.num_clients == 0 {
        return Err(Error::Config("num_clients must be positive".into()));
    }
    if !(spec.alpha > 0.0) || !spec.alpha.is_finite() {
        return Err(Error::Config("alpha must be > 0".into()));
    }
    if labels.len() < spec.num_clients {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {} clients",
            labels.len(),
            spec.num_clients
        )));
    }
    let mut best: Option<Vec<Vec<usize>>> = None;
    let empties = |p: &Vec<Vec<usize>>| p.iter().filter(|c| c.is_empty()).count();
    for attempt in 0..=MAX_RETRIES as u64 {
        let p = draw(labels, data.num_classes(), spec, attempt);
        if empties(&p) == 0 {
            return Ok(p);
        }
        if best.as_ref().map_or(true, |b| empties(&p) < empties(b)) {
            best = Some(p);
        }
    }
    let mut p = best.unwrap();
    log::debug!(
        "dirichlet partition (alpha={}) still had {} empty clients after {MAX_RETRIES} redraws; repairing",
        spec.alpha,
        empties(&p)
    );
    for k in 0..p.len() {
        if p[k].is_empty() {
            let donor = (0..p.len())
                .max_by(|&a, &b| p[a].len().cmp(&p[b].len()).then(b.cmp(&a)))
                .unwrap();
            if p[donor].len() < 2 {
                return Err(Error::Partition("repair ran out of donor samples".into()));
            }
            let moved = p[donor].pop().unwrap();
            p[k].push(moved);
        }
    }
    Ok(p)
}

pub fn dirichlet_partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    dirichlet_partition_indices(data, spec)?
        .iter()
        .map(|rows| data.select(rows))
        .collect()
}

/// Every client gets one random class, with classes spread as evenly as
/// possible: a shuffled deck holding each class `⌊n/c⌋` times, topped up by
/// distinct random classes. Each class's rows are dealt round-robin to its
/// owners; classes nobody holds are left out.
pub fn one_class_partition_indices(
    data: &Dataset,
    num_clients: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let labels = data
        .hard_labels()
        .ok_or_else(|| Error::Precondition("partitioning needs hard labels".into()))?;
    if num_clients == 0 {
        return Err(Error::Config("num_clients must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xD2]));
    let c = data.num_classes();
    let mut extra: Vec<usize> = (0..c).collect();
    extra.shuffle(&mut rng);
    let mut drawn: Vec<usize> = (0..num_clients / c * c)
        .map(|k| k % c)
        .chain(extra.into_iter().take(num_clients % c))
        .collect();
    drawn.shuffle(&mut rng);
    let mut clients = vec![Vec::new(); num_clients];
    for class in 0..c {
        let owners: Vec<usize> = (0..num_clients).filter(|&k| drawn[k] == class).collect();
        if owners.is_empty() {
            continue;
        }
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if rows.len() < owners.len() {
            return Err(Error::Partition(format!(
                "class {class} has {} samples for {} clients",
                rows.len(),
                owners.len()
            )));
        }
        for (j, r) in rows.into_iter().enumerate() {
            clients[owners[j % owners.len()]].push(r);
        }
    }
    Ok(clients)
}
