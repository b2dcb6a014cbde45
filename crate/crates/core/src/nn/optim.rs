//! Client-side local training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backprop::backprop;
use super::dataset::Dataset;
use super::params::ParamVector;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    Sgd,
    SgdMomentum,
    Fedprox,
}

impl OptKind {
    pub fn name(self) -> &'static str {
        match self {
            OptKind::Sgd => "sgd",
            OptKind::SgdMomentum => "sgd_momentum",
            OptKind::Fedprox => "fedprox",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptKind::Sgd),
            "sgd_momentum" => Some(OptKind::SgdMomentum),
            "fedprox" => Some(OptKind::Fedprox),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchSize {
    Full,
    Mini(usize),
}

/// Adaptive optimizers are deliberately absent: inverting their updates
/// does not recover a usable data estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub kind: OptKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub prox_mu: f64,
    pub local_steps: usize,
    pub batch_size: BatchSize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            kind: OptKind::SgdMomentum,
            learning_rate: 0.01,
            momentum: 0.5,
            prox_mu: 0.0,
            local_steps: 5,
            batch_size: BatchSize::Full,
        }
    }
}

impl OptConfig {
    pub fn sgd(learning_rate: f64, local_steps: usize) -> Self {
        Self {
            kind: OptKind::Sgd,
            learning_rate,
            momentum: 0.0,
            prox_mu: 0.0,
            local_steps,
            batch_size: BatchSize::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.prox_mu >= 0.0) {
            return Err(Error::Config("prox_mu must be >= 0".into()));
        }
        if let BatchSize::Mini(0) = self.batch_size {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Momentum coefficient actually applied by this optimizer kind.
    pub fn effective_momentum(&self) -> f64 {
        match self.kind {
            OptKind::SgdMomentum => self.momentum,
            _ => 0.0,
        }
    }

    /// Proximal coefficient actually applied by this optimizer kind.
    pub fn effective_prox(&self) -> f64 {
        match self.kind {
            OptKind::Fedprox => self.prox_mu,
            _ => 0.0,
        }
    }
}

/// Optimizer state carried across steps: `v ← μ v + g`, `w ← w − η v`.
#[derive(Clone, Debug)]
pub struct LocalTrainer<'a> {
    pub weights: ParamVector,
    velocity: Vec<f64>,
    opt: OptConfig,
    data: &'a Dataset,
    labels: Vec<f64>,
    global_ref: Option<ParamVector>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> LocalTrainer<'a> {
    pub fn new(
        base: &ParamVector,
        data: &'a Dataset,
        opt: OptConfig,
        global_ref: Option<&ParamVector>,
        shuffle_seed: u64,
    ) -> Result<Self> {
        opt.validate()?;
        if opt.kind == OptKind::Fedprox && global_ref.is_none() {
            return Err(Error::Config(
                "fedprox needs the global reference weights".into(),
            ));
        }
        if data.is_empty() {
            return Err(Error::Precondition(
                "local training on an empty dataset".into(),
            ));
        }
        let arch = base.arch();
        if data.dim() != arch.input_dim() || data.num_classes() != arch.num_classes() {
            return Err(Error::Shape("dataset does not fit the model".into()));
        }
        Ok(Self {
            weights: base.clone(),
            velocity: vec![0.0; base.len()],
            opt,
            data,
            labels: data.label_matrix(),
            global_ref: global_ref.cloned(),
            order: (0..data.len()).collect(),
            cursor: data.len(),
            rng: ChaCha8Rng::seed_from_u64(shuffle_seed),
        })
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.data.len());
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Gradient of the (possibly proximal) local objective at the current weights.
    pub fn gradient(&mut self) -> Vec<f64> {
        let arch = self.weights.arch().clone();
        let mut g = match self.opt.batch_size {
            BatchSize::Full => {
                backprop(
                    &arch,
                    self.weights.values(),
                    self.data.features(),
                    &self.labels,
                    self.data.len(),
                    false,
                )
                .grad_params
            }
            BatchSize::Mini(b) => {
                let rows = self.next_batch(b);
                let c = self.data.num_classes();
                let mut x = Vec::with_capacity(rows.len() * self.data.dim());
                let mut y = Vec::with_capacity(rows.len() * c);
                for &r in &rows {
                    x.extend_from_slice(self.data.row(r));
                    y.extend_from_slice(&self.labels[r * c..(r + 1) * c]);
                }
                backprop(&arch, self.weights.values(), &x, &y, rows.len(), false).grad_params
            }
        };
        let mu = self.opt.effective_prox();
        if mu > 0.0 {
            let r = self.global_ref.as_ref().expect("checked in new");
            for ((gi, &wi), &ri) in g.iter_mut().zip(self.weights.values()).zip(r.values()) {
                *gi += mu * (wi - ri);
            }
        }
        g
    }

    pub fn step(&mut self) {
        let g = self.gradient();
        let mom = self.opt.effective_momentum();
        let lr = self.opt.learning_rate;
        for ((w, v), gi) in self
            .weights
            .values_mut()
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(g)
        {
            *v = mom * *v + gi;
            *w -= lr * *v;
        }
    }
}

/// Runs `opt.local_steps` optimizer steps from `base` and returns the trained weights.
pub fn local_update(
    base: &ParamVector,
    data: &Dataset,
    opt: &OptConfig,
    global_ref: Option<&ParamVector>,
    shuffle_seed: u64,
) -> Result<ParamVector> {
    let mut trainer = LocalTrainer::new(base, data, *opt, global_ref, shuffle_seed)?;
    for _ in 0..opt.local_steps {
        trainer.step();
    }
    Ok(trainer.weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dataset::Labels;
    use crate::nn::params::{Activation, ModelArch};
    use crate::nn::{finite_diff_grad, loss_and_grad};
    use rand::Rng;
    use std::sync::Arc;

    fn toy() -> (Arc<ModelArch>, ParamVector, Dataset) {
        let arch = Arc::new(ModelArch::new(vec![2, 4, 3], Activation::Tanh).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ParamVector::init_random(arch.clone(), Some(0.3), &mut rng);
        let x: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let d = Dataset::new(x, 2, Labels::Hard(vec![0, 1, 2, 1, 0, 2]), 3).unwrap();
        (arch, p, d)
    }

    #[test]
    fn fixed_point_at_zero_gradient() {
        // Every sample carries the uniform label: at zero weights the softmax
        // already matches it, so the gradient vanishes.
        let arch = Arc::new(ModelArch::new(vec![2, 3, 2], Activation::Tanh).unwrap());
        let base = ParamVector::zeros(arch);
        let d = Dataset::new(vec![0.2, 0.4, 0.9, 0.1], 2, Labels::Soft(vec![0.5; 4]), 2).unwrap();
        let out = local_update(&base, &d, &OptConfig::default(), None, 0).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn quadratic_surrogate_single_step() {
        // L(w) = w²/2 has gradient w; one SGD step at lr 0.1 from w = 1.
        let mut w = 1.0f64;
        let lr = 0.1;
        w -= lr * w;
        assert!((w - 0.9).abs() < 1e-15);
    }

    #[test]
    fn fedprox_requires_reference() {
        let (_, p, d) = toy();
        let opt = OptConfig {
            kind: OptKind::Fedprox,
            prox_mu: 0.1,
            ..OptConfig::default()
        };
        assert!(matches!(
            local_update(&p, &d, &opt, None, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fedprox_gradient_is_augmented_loss_gradient() {
        let (arch, p, d) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = ParamVector::init_random(arch.clone(), Some(0.3), &mut rng);
        let mu = 0.7;
        let opt = OptConfig {
            kind: OptKind::Fedprox,
            prox_mu: mu,
            ..OptConfig::sgd(0.1, 1)
        };
        let mut t = LocalTrainer::new(&p, &d, opt, Some(&r), 0).unwrap();
        let g = t.gradient();
        // Finite differences of L(w) + μ/2 ‖w − r‖².
        let fd_plain = finite_diff_grad(&arch, &p, &d, 1e-5).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let prox = |s: f64| {
                let mut q = p.values().to_vec();
                q[i] += s;
                0.5 * mu
                    * q.iter()
                        .zip(r.values())
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
            };
            let fd = fd_plain.values()[i] + (prox(h) - prox(-h)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        let (_, plain) = loss_and_grad(&arch, &p, &d).unwrap();
        for i in 0..p.len() {
            let expect = plain.values()[i] + mu * (p.values()[i] - r.values()[i]);
            assert!((g[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn k_steps_equal_k_single_steps_with_carried_state() {
        let (_, p, d) = toy();
        let opt = OptConfig {
            local_steps: 4,
            learning_rate: 0.2,
            ..OptConfig::default()
        };
        let all = local_update(&p, &d, &opt, None, 1).unwrap();
        let mut t = LocalTrainer::new(
            &p,
            &d,
            OptConfig {
                local_steps: 1,
                ..opt
            },
            None,
            1,
        )
        .unwrap();
        for _ in 0..4 {
            t.step();
        }
        assert_eq!(all, t.weights);
    }

    #[test]
    fn minibatch_runs_are_reproducible() {
        let (_, p, d) = toy();
        let opt = OptConfig {
            batch_size: BatchSize::Mini(2),
            local_steps: 7,
            ..OptConfig::default()
        };
        let a = local_update(&p, &d, &opt, None, 42).unwrap();
        let b = local_update(&p, &d, &opt, None, 42).unwrap();
        let c = local_update(&p, &d, &opt, None, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
