//! Disparity between a simulated local update and a target delta, with its
//! exact gradient with respect to the synthetic data.

use crate::nn::{backprop, hessian_vector, ModelArch, OptConfig};

use super::SparsityMask;

/// Half-width of the quadratic zone of the smoothed absolute value.
pub const HUBER_DELTA: f64 = 1e-6;

fn huber(r: f64) -> (f64, f64) {
    if r.abs() <= HUBER_DELTA {
        (r * r / (2.0 * HUBER_DELTA), r / HUBER_DELTA)
    } else {
        (r.abs() - HUBER_DELTA / 2.0, r.signum())
    }
}

/// Local-training hyperparameters as seen by the unroll.
#[derive(Clone, Copy, Debug)]
pub struct Unroll {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub prox_mu: f64,
}

impl Unroll {
    pub fn from_opt(opt: &OptConfig, steps: usize) -> Self {
        Self {
            steps,
            learning_rate: opt.learning_rate,
            momentum: opt.effective_momentum(),
            prox_mu: opt.effective_prox(),
        }
    }

    /// Full-batch local training from `base`; returns `w_K − base` and the
    /// iterates `w_0..w_{K−1}`.
    pub fn delta(
        &self,
        arch: &ModelArch,
        base: &[f64],
        x: &[f64],
        y: &[f64],
        n: usize,
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut w = base.to_vec();
        let mut v = vec![0.0; w.len()];
        let mut iterates = Vec::with_capacity(self.steps);
        for _ in 0..self.steps {
            let g = backprop(arch, &w, x, y, n, false).grad_params;
            iterates.push(w.clone());
            for i in 0..w.len() {
                let gi = g[i] + self.prox_mu * (w[i] - base[i]);
                v[i] = self.momentum * v[i] + gi;
                w[i] -= self.learning_rate * v[i];
            }
        }
        let delta = w.iter().zip(base).map(|(a, b)| a - b).collect();
        (delta, iterates)
    }
}

/// Value and gradient of the inversion objective at one D_rec.
pub struct Objective {
    /// Plain masked mean-L1 disparity.
    pub disparity: f64,
    /// Masked mean of the smoothed absolute value; what the gradient is of.
    pub smoothed: f64,
    pub grad_features: Vec<f64>,
    pub grad_labels: Vec<f64>,
}

impl Objective {
    pub fn is_finite(&self) -> bool {
        self.disparity.is_finite()
            && self.smoothed.is_finite()
            && self.grad_features.iter().all(|v| v.is_finite())
            && self.grad_labels.iter().all(|v| v.is_finite())
    }
}

/// Reverse pass through the unrolled momentum/prox recursion
/// `v ← μv + ∇L(w) + ρ(w − base)`, `w ← w − ηv`, using exact
/// Hessian-vector products for every step.
///
/// `y` are label distributions; gradients are with respect to `x` and `y`.
pub fn objective(
    arch: &ModelArch,
    unroll: &Unroll,
    base: &[f64],
    target: &[f64],
    mask: &SparsityMask,
    x: &[f64],
    y: &[f64],
    n: usize,
) -> Objective {
    let (delta, iterates) = unroll.delta(arch, base, x, y, n);
    let m = mask.len() as f64;
    let mut disparity = 0.0;
    let mut smoothed = 0.0;
    let mut a_w = vec![0.0; base.len()];
    for &i in mask.indices() {
        let r = delta[i] - target[i];
        disparity += r.abs();
        let (h, dh) = huber(r);
        smoothed += h;
        a_w[i] = dh / m;
    }
    let mut a_v = vec![0.0; base.len()];
    let mut a_x = vec![0.0; x.len()];
    let mut a_y = vec![0.0; y.len()];
    let (lr, mu, rho) = (unroll.learning_rate, unroll.momentum, unroll.prox_mu);
    for w_k in iterates.iter().rev() {
        // adjoint of v_{k+1}, which feeds both w_{k+1} and v_{k+2}
        let u: Vec<f64> = a_v.iter().zip(&a_w).map(|(av, aw)| av - lr * aw).collect();
        let hv = hessian_vector(arch, w_k, x, y, n, &u);
        for i in 0..a_w.len() {
            a_w[i] += hv.params[i] + rho * u[i];
            a_v[i] = mu * u[i];
        }
        for (a, h) in a_x.iter_mut().zip(&hv.features) {
            *a += h;
        }
        for (a, h) in a_y.iter_mut().zip(&hv.labels) {
            *a += h;
        }
    }
    Objective {
        disparity: disparity / m,
        smoothed: smoothed / m,
        grad_features: a_x,
        grad_labels: a_y,
    }
}

/// Row-wise softmax of `n × c` logits.
pub fn softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Pulls a gradient on softmax outputs back to the logits.
pub fn softmax_pullback(probs: &[f64], grad: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(grad.len());
    for (p, g) in probs.chunks(c).zip(grad.chunks(c)) {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{local_update, Activation, Dataset, Labels, OptKind, ParamVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn unrolled_delta_matches_local_update() {
        let arch = Arc::new(ModelArch::new(vec![3, 5, 2], Activation::Tanh).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = ParamVector::init_random(arch.clone(), None, &mut rng);
        let x: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let data = Dataset::new(x.clone(), 3, Labels::Hard(vec![0, 1, 1, 0]), 2).unwrap();
        for kind in [OptKind::Sgd, OptKind::SgdMomentum, OptKind::Fedprox] {
            let opt = OptConfig {
                kind,
                learning_rate: 0.3,
                momentum: 0.7,
                prox_mu: 0.2,
                local_steps: 4,
                ..OptConfig::default()
            };
            let trained = local_update(&base, &data, &opt, Some(&base), 0).unwrap();
            let (delta, iterates) =
                Unroll::from_opt(&opt, 4).delta(&arch, base.values(), &x, &data.label_matrix(), 4);
            assert_eq!(iterates.len(), 4);
            for ((d, t), b) in delta.iter().zip(trained.values()).zip(base.values()) {
                assert!((d - (t - b)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn huber_is_continuous_at_the_seam() {
        let (inside, _) = huber(HUBER_DELTA);
        let (outside, _) = huber(HUBER_DELTA * (1.0 + 1e-12));
        assert!((inside - outside).abs() < 1e-15);
        assert_eq!(huber(0.0), (0.0, 0.0));
        assert_eq!(huber(-3.0).1, -1.0);
    }

    #[test]
    fn softmax_pullback_matches_differences() {
        let z = [0.3, -1.0, 2.0, 0.0, 0.5, 0.5];
        let g = [1.0, -2.0, 0.5, 0.3, 0.0, -1.0];
        let back = softmax_pullback(&softmax_rows(&z, 3), &g, 3);
        let f = |z: &[f64]| {
            softmax_rows(z, 3)
                .iter()
                .zip(&g)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        for i in 0..6 {
            let (mut up, mut dn) = (z, z);
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((fd - back[i]).abs() < 1e-8);
        }
    }
}
