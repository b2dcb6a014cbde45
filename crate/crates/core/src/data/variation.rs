use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Dataset;
use crate::seed::derive_seed;

/// Streaming replacement of client samples.
#[derive(Clone, Debug)]
pub struct VariationSpec {
    /// Samples replaced per epoch; fractional rates accumulate.
    pub rate: f64,
    pub pool: Dataset,
    pub seed: u64,
}

/// Number of replacements performed by the first `applications` calls.
pub fn cumulative_replacements(rate: f64, applications: usize) -> usize {
    (rate * applications as f64).round() as usize
}

/// Applies the variation step with 0-based index `epoch`.
///
/// Replacement `k` (counted across all epochs) overwrites row `perm[k mod n]`
/// of a permutation fixed by the seed, with a pool row drawn uniformly from
/// a stream keyed by `k`. Rows are therefore distinct until every row has
/// been replaced once, after which the cycle repeats.
pub fn apply_variation(
    client_data: &Dataset,
    spec: &VariationSpec,
    epoch: usize,
) -> Result<Dataset> {
    if spec.pool.is_empty() {
        return Err(Error::Precondition("variation pool is empty".into()));
    }
    if !(spec.rate >= 0.0) {
        return Err(Error::Config("variation rate must be >= 0".into()));
    }
    let from = cumulative_replacements(spec.rate, epoch);
    let to = cumulative_replacements(spec.rate, epoch + 1);
    let mut out = client_data.clone();
    if to == from {
        return Ok(out);
    }
    let n = client_data.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed,
        &[0xA7],
    )));
    for k in from..to {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xA8, k as u64]));
        let src = rng.random_range(0..spec.pool.len());
        out.replace_row(perm[k % n], &spec.pool, src)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BlobFamily;

    fn setup(rate: f64) -> (Dataset, VariationSpec) {
        let fam = BlobFamily::new(3, 4, 1).unwrap();
        let data = fam.sample(10, 0.1, 1).unwrap();
        let pool = fam.shifted(0.4, 2).sample(10, 0.1, 2).unwrap();
        (
            data,
            VariationSpec {
                rate,
                pool,
                seed: 7,
            },
        )
    }

    fn run(data: &Dataset, spec: &VariationSpec, epochs: usize) -> Dataset {
        (0..epochs).fold(data.clone(), |d, e| apply_variation(&d, spec, e).unwrap())
    }

    fn rows_changed(a: &Dataset, b: &Dataset) -> usize {
        (0..a.len()).filter(|&i| a.row(i) != b.row(i)).count()
    }

    #[test]
    fn zero_rate_is_identity() {
        let (data, spec) = setup(0.0);
        assert_eq!(run(&data, &spec, 6), data);
    }

    #[test]
    fn integer_rate_changes_distinct_rows() {
        let (data, spec) = setup(2.0);
        let out = run(&data, &spec, 5);
        assert_eq!(rows_changed(&data, &out), 10);
        assert_eq!(out.len(), data.len());
    }

    #[test]
    fn fractional_rate_accumulates() {
        let (data, spec) = setup(0.5);
        assert_eq!(cumulative_replacements(0.5, 4), 2);
        assert_eq!(rows_changed(&data, &run(&data, &spec, 4)), 2);
    }
}
