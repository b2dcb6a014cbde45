//! Dense neural-network substrate: forward pass, exact backward pass,
//! soft-label cross-entropy and local-training optimizers.

mod backprop;
mod dataset;
mod optim;
mod params;
pub mod real;

pub use backprop::{
    backprop, forward, hessian_vector, loss, loss_and_grad, Backward, HessianVector,
};
pub use dataset::{Dataset, Labels};
pub use optim::{local_update, BatchSize, LocalTrainer, OptConfig, OptKind};
pub use params::{Activation, ModelArch, ParamVector};

use crate::error::{Error, Result};

/// Central-difference gradient of the mean cross-entropy. Test oracle only.
pub fn finite_diff_grad(
    arch: &ModelArch,
    params: &ParamVector,
    data: &Dataset,
    step: f64,
) -> Result<ParamVector> {
    if step == 0.0 || !step.is_finite() {
        return Err(Error::Precondition(
            "finite-difference step must be nonzero".into(),
        ));
    }
    let mut probe = params.clone();
    let mut out = vec![0.0; params.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + step;
        let up = loss(arch, &probe, data)?;
        probe.values_mut()[i] = orig - step;
        let down = loss(arch, &probe, data)?;
        probe.values_mut()[i] = orig;
        *o = (up - down) / (2.0 * step);
    }
    Ok(ParamVector::from_raw(params.arch().clone(), out))
}

/// Argmax class of the logits for every row.
pub fn predict(arch: &ModelArch, params: &ParamVector, features: &[f64]) -> Result<Vec<usize>> {
    let logits = forward(arch, params, features)?;
    let c = arch.num_classes();
    Ok(logits
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::sync::Arc;

    fn random_case(
        dims: &[usize],
        act: Activation,
        n: usize,
        seed: u64,
    ) -> (Arc<ModelArch>, ParamVector, Dataset) {
        let arch = Arc::new(ModelArch::new(dims.to_vec(), act).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let vals = (0..arch.num_params())
            .map(|_| normal.sample(&mut rng))
            .collect();
        let p = ParamVector::new(arch.clone(), vals).unwrap();
        let x = (0..n * dims[0]).map(|_| rng.random()).collect();
        let c = *dims.last().unwrap();
        let y = (0..n).map(|_| rng.random_range(0..c)).collect();
        (
            arch,
            p,
            Dataset::new(x, dims[0], Labels::Hard(y), c).unwrap(),
        )
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
    }

    #[test]
    fn analytic_matches_central_differences_on_small_mlp() {
        let (arch, p, d) = random_case(&[2, 4, 3], Activation::Tanh, 6, 1);
        let (_, g) = loss_and_grad(&arch, &p, &d).unwrap();
        let fd = finite_diff_grad(&arch, &p, &d, 1e-5).unwrap();
        for (a, b) in g.values().iter().zip(fd.values()) {
            assert!(rel_err(*a, *b) < 1e-4 || (a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn linear_model_gradient_has_closed_form() {
        let (arch, p, d) = random_case(&[3, 4], Activation::Relu, 5, 2);
        let (_, g) = loss_and_grad(&arch, &p, &d).unwrap();
        // softmax regression: dW = Xᵀ(P − Y)/n, db = colsum(P − Y)/n
        let logits = forward(&arch, &p, d.features()).unwrap();
        let y = d.label_matrix();
        let (n, dim, c) = (d.len(), 3, 4);
        let mut expect = vec![0.0; arch.num_params()];
        for i in 0..n {
            let row = &logits[i * c..(i + 1) * c];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..c {
                let r = (row[j].exp() / z - y[i * c + j]) / n as f64;
                for k in 0..dim {
                    expect[k * c + j] += d.row(i)[k] * r;
                }
                expect[dim * c + j] += r;
            }
        }
        let fd = finite_diff_grad(&arch, &p, &d, 1e-5).unwrap();
        for i in 0..expect.len() {
            assert!((g.values()[i] - expect[i]).abs() < 1e-12);
            assert!((fd.values()[i] - expect[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn central_difference_ignores_step_sign() {
        let (arch, p, d) = random_case(&[2, 3, 2], Activation::Relu, 4, 3);
        let a = finite_diff_grad(&arch, &p, &d, 1e-4).unwrap();
        let b = finite_diff_grad(&arch, &p, &d, -1e-4).unwrap();
        assert_eq!(a, b);
        assert!(finite_diff_grad(&arch, &p, &d, 0.0).is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(Dataset::new(vec![], 2, Labels::Hard(vec![]), 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn gradient_check_over_architectures(
            seed in 0u64..1000,
            hidden in 1usize..12,
            tanh in proptest::bool::ANY,
            n in 1usize..6,
        ) {
            let act = if tanh { Activation::Tanh } else { Activation::Relu };
            let (arch, p, d) = random_case(&[4, hidden, 3], act, n, seed);
            let (_, g) = loss_and_grad(&arch, &p, &d).unwrap();
            let fd = finite_diff_grad(&arch, &p, &d, 1e-5).unwrap();
            for (a, b) in g.values().iter().zip(fd.values()) {
                prop_assert!(rel_err(*a, *b) < 1e-4 || (a - b).abs() < 1e-9, "{} vs {}", a, b);
            }
        }

        #[test]
        fn loss_invariant_under_row_permutation(seed in 0u64..1000, n in 2usize..8) {
            let (arch, p, d) = random_case(&[3, 5, 2], Activation::Relu, n, seed);
            let mut rows: Vec<usize> = (0..n).collect();
            rows.reverse();
            rows.rotate_left(seed as usize % n);
            let shuffled = d.select(&rows).unwrap();
            let a = loss(&arch, &p, &d).unwrap();
            let b = loss(&arch, &p, &shuffled).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn training_stays_finite(seed in 0u64..1000, lr in 0.001f64..0.5) {
            let (_, p, d) = random_case(&[3, 6, 3], Activation::Relu, 6, seed);
            let opt = OptConfig { learning_rate: lr, local_steps: 20, ..OptConfig::default() };
            let out = local_update(&p, &d, &opt, None, seed).unwrap();
            prop_assert!(out.is_finite());
        }
    }
}
