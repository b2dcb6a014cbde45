//! Gradient inversion of stale updates.
//!
//! Given a stale delta and the snapshot it was trained from, [`invert`]
//! optimizes a small synthetic dataset until full-batch local training on it
//! reproduces the delta on the sparsity mask. [`estimate_unstale`] then
//! trains the current global model on that dataset.

mod unroll;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dataset, Labels, OptConfig, ParamVector};

pub use unroll::{objective, softmax_pullback, softmax_rows, Objective, Unroll, HUBER_DELTA};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GIConfig {
    /// `|D_rec|` as a fraction of the reference client size.
    pub d_rec_fraction: f64,
    pub max_iters: usize,
    /// Adam step size on features and label logits.
    pub inner_lr: f64,
    /// Stop once disparity ≤ `stop_tol × mean |target|` over the mask.
    pub stop_tol: f64,
    pub sparsification_rate: f64,
    /// `None` uses the client's `local_steps`.
    pub unroll_steps: Option<usize>,
}

impl Default for GIConfig {
    fn default() -> Self {
        Self {
            d_rec_fraction: 0.5,
            max_iters: 200,
            inner_lr: 0.05,
            stop_tol: 0.1,
            sparsification_rate: 0.95,
            unroll_steps: None,
        }
    }
}

const MAX_RETRIES: usize = 3;

impl GIConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_rec_fraction > 0.0 && self.d_rec_fraction <= 1.0) {
            return Err(Error::Config("d_rec_fraction must be in (0, 1]".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        if !(self.inner_lr > 0.0) || !self.inner_lr.is_finite() {
            return Err(Error::Config("inner_lr must be > 0".into()));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(Error::Config("stop_tol must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.sparsification_rate) {
            return Err(Error::Config(
                "sparsification_rate must be in [0, 1)".into(),
            ));
        }
        if self.unroll_steps == Some(0) {
            return Err(Error::Config("unroll_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn d_rec_size(&self, reference_size: usize) -> usize {
        ((self.d_rec_fraction * reference_size as f64).round() as usize).max(1)
    }

    pub fn steps_for(&self, client_opt: &OptConfig) -> usize {
        self.unroll_steps.unwrap_or(client_opt.local_steps)
    }
}

/// Sorted parameter positions that take part in the disparity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityMask {
    indices: Vec<usize>,
    source_len: usize,
}

impl SparsityMask {
    pub fn full(len: usize) -> Self {
        Self {
            indices: (0..len).collect(),
            source_len: len,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Keeps the `round((1 − rate)·len)` largest-magnitude entries (at least one),
/// lower index first on ties.
pub fn top_k_mask(target: &ParamVector, rate: f64) -> Result<SparsityMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Precondition(format!(
            "sparsification rate {rate} outside [0, 1)"
        )));
    }
    let len = target.len();
    let k = (((1.0 - rate) * len as f64).round() as usize).clamp(1, len.max(1));
    let v = target.values();
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(SparsityMask {
        indices: order,
        source_len: len,
    })
}

/// Mean absolute difference over the masked coordinates.
pub fn disparity(
    candidate: &ParamVector,
    target: &ParamVector,
    mask: &SparsityMask,
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Precondition("disparity over an empty mask".into()));
    }
    if candidate.len() != target.len() || mask.source_len != target.len() {
        return Err(Error::Shape(format!(
            "disparity of {} vs {} values under a mask for {}",
            candidate.len(),
            target.len(),
            mask.source_len
        )));
    }
    let (c, t) = (candidate.values(), target.values());
    let s: f64 = mask.indices.iter().map(|&i| (c[i] - t[i]).abs()).sum();
    Ok(s / mask.len() as f64)
}

/// Starting point for the synthetic data: features and label logits.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmStart {
    pub features: Vec<f64>,
    pub label_logits: Vec<f64>,
}

/// Logit assigned to zero-probability labels when starting from real data.
const LOGIT_FLOOR: f64 = -40.0;

impl WarmStart {
    pub fn from_dataset(data: &Dataset) -> Self {
        let label_logits = data
            .label_matrix()
            .iter()
            .map(|&p| {
                if p > 0.0 {
                    p.ln().max(LOGIT_FLOOR)
                } else {
                    LOGIT_FLOOR
                }
            })
            .collect();
        Self {
            features: data.features().to_vec(),
            label_logits,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GIResult {
    pub d_rec: Dataset,
    pub label_logits: Vec<f64>,
    pub initial_disparity: f64,
    /// Best disparity seen; never above `initial_disparity`.
    pub final_disparity: f64,
    /// Absolute tolerance the run was stopped against.
    pub tolerance: f64,
    /// D_rec updates performed.
    pub iters_used: usize,
    pub converged: bool,
    /// Step size in force at the end, after any halvings.
    pub inner_lr: f64,
    pub mask: SparsityMask,
}

impl GIResult {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            features: self.d_rec.features().to_vec(),
            label_logits: self.label_logits.clone(),
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-12;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= lr * mh / (vh.sqrt() + Self::EPS * (1.0 + vh.sqrt()));
        }
    }
}

/// Recovers a synthetic dataset whose simulated local update from `base`
/// matches `stale_delta` on the top-K mask.
///
/// Cold starts draw features uniformly from `[0,1]` and use uniform soft
/// labels; `|D_rec|` is `cfg.d_rec_fraction × reference_size`. A warm start
/// fixes both the size and the initial point.
pub fn invert(
    stale_delta: &ParamVector,
    base: &ParamVector,
    client_opt: &OptConfig,
    cfg: &GIConfig,
    reference_size: usize,
    warm: Option<&WarmStart>,
    seed: u64,
) -> Result<GIResult> {
    cfg.validate()?;
    client_opt.validate()?;
    let arch = base.arch().clone();
    if stale_delta.len() != base.len() {
        return Err(Error::Shape(
            "stale delta and base snapshot differ in length".into(),
        ));
    }
    let (d, c) = (arch.input_dim(), arch.num_classes());
    let (mut x, mut z) = match warm {
        Some(w) => {
            if w.features.is_empty()
                || w.features.len() % d != 0
                || w.label_logits.len() != w.features.len() / d * c
            {
                return Err(Error::Shape("warm start does not fit the model".into()));
            }
            (w.features.clone(), w.label_logits.clone())
        }
        None => {
            let n = cfg.d_rec_size(reference_size);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                (0..n * d).map(|_| rng.random::<f64>()).collect(),
                vec![0.0; n * c],
            )
        }
    };
    let n = x.len() / d;
    let mask = top_k_mask(stale_delta, cfg.sparsification_rate)?;
    let target = stale_delta.values();
    let scale = mask.indices().iter().map(|&i| target[i].abs()).sum::<f64>() / mask.len() as f64;
    let tolerance = cfg.stop_tol * scale;
    let unroll = Unroll::from_opt(client_opt, cfg.steps_for(client_opt));

    let eval = |x: &[f64], z: &[f64]| {
        let y = softmax_rows(z, c);
        let o = objective(&arch, &unroll, base.values(), target, &mask, x, &y, n);
        let gz = softmax_pullback(&y, &o.grad_labels, c);
        (o, gz)
    };

    let (mut obj, mut gz) = eval(&x, &z);
    if !obj.is_finite() {
        return Err(Error::Inversion(format!(
            "non-finite disparity at the starting point ({} rows, delta norm {:.3e})",
            n,
            stale_delta.norm()
        )));
    }
    let initial = obj.disparity;
    let mut best = (initial, x.clone(), z.clone());
    let mut lr = cfg.inner_lr;
    let mut retries = 0;
    let mut iters = 0;
    let mut converged = initial <= tolerance;
    let (mut adam_x, mut adam_z) = (Adam::new(x.len()), Adam::new(z.len()));
    while !converged && iters < cfg.max_iters {
        adam_x.step(&mut x, &obj.grad_features, lr);
        adam_z.step(&mut z, &gz, lr);
        for v in &mut x {
            *v = v.clamp(0.0, 1.0);
        }
        (obj, gz) = eval(&x, &z);
        if !obj.is_finite() || !z.iter().all(|v| v.is_finite()) {
            retries += 1;
            if retries > MAX_RETRIES {
                return Err(Error::Inversion(format!(
                    "non-finite values after {retries} step-size halvings (inner_lr now {lr:.3e}, iteration {iters}, best disparity {:.3e})",
                    best.0
                )));
            }
            lr /= 2.0;
            log::warn!("inversion produced non-finite values; retrying from best iterate with inner_lr {lr:.3e}");
            x.clone_from(&best.1);
            z.clone_from(&best.2);
            adam_x = Adam::new(x.len());
            adam_z = Adam::new(z.len());
            (obj, gz) = eval(&x, &z);
            continue;
        }
        iters += 1;
        if obj.disparity < best.0 {
            best = (obj.disparity, x.clone(), z.clone());
        }
        converged = obj.disparity <= tolerance;
    }
    let (final_disparity, x, z) = best;
    let y = softmax_rows(&z, c);
    Ok(GIResult {
        d_rec: Dataset::new(x, d, Labels::Soft(y), c)?,
        label_logits: z,
        initial_disparity: initial,
        final_disparity,
        tolerance,
        iters_used: iters,
        converged,
        inner_lr: lr,
        mask,
    })
}

/// `LocalUpdate(w_now; D_rec) − w_now` with full-batch steps.
/// Errors if training on `D_rec` produces non-finite weights.
pub fn estimate_unstale(
    w_now: &ParamVector,
    d_rec: &Dataset,
    client_opt: &OptConfig,
    steps: usize,
) -> Result<ParamVector> {
    let arch = w_now.arch();
    if d_rec.dim() != arch.input_dim() || d_rec.num_classes() != arch.num_classes() {
        return Err(Error::Shape("recovered data does not fit the model".into()));
    }
    let unroll = Unroll::from_opt(client_opt, steps);
    let (delta, _) = unroll.delta(
        arch,
        w_now.values(),
        d_rec.features(),
        &d_rec.label_matrix(),
        d_rec.len(),
    );
    ParamVector::new(arch.clone(), delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RecoveryQuality {
    pub best_match_mse: f64,
    pub psnr: f64,
    pub label_recovery_acc: f64,
}

/// Pairs with MSE below this are scored at the PSNR cap.
const MSE_FLOOR: f64 = 1e-10;

/// Matches every recovered row with its nearest true row by MSE.
///
/// Label recovery is the overlap `Σ min(p_c, q_c)` between the argmax class
/// histogram of `d_rec` and the class histogram of `d_true`.
pub fn recovery_quality(d_rec: &Dataset, d_true: &Dataset) -> Result<RecoveryQuality> {
    if d_rec.dim() != d_true.dim() || d_rec.num_classes() != d_true.num_classes() {
        return Err(Error::Shape(
            "recovered and true data differ in shape".into(),
        ));
    }
    let d = d_rec.dim() as f64;
    let mut mse_sum = 0.0;
    let mut psnr_sum = 0.0;
    for i in 0..d_rec.len() {
        let r = d_rec.row(i);
        let best = (0..d_true.len())
            .map(|j| {
                r.iter()
                    .zip(d_true.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / d
            })
            .fold(f64::INFINITY, f64::min);
        mse_sum += best;
        psnr_sum += 10.0 * (1.0 / best.max(MSE_FLOOR)).log10();
    }
    let hist = |labels: Vec<usize>, c: usize| {
        let mut h = vec![0.0; c];
        let n = labels.len() as f64;
        for l in labels {
            h[l] += 1.0 / n;
        }
        h
    };
    let c = d_rec.num_classes();
    let p = hist(d_rec.argmax_labels(), c);
    let q = hist(d_true.argmax_labels(), c);
    let overlap = p.iter().zip(&q).map(|(a, b)| a.min(*b)).sum::<f64>();
    let n = d_rec.len() as f64;
    Ok(RecoveryQuality {
        best_match_mse: mse_sum / n,
        psnr: psnr_sum / n,
        label_recovery_acc: overlap.min(1.0),
    })
}

/// Writes `D_rec` as CSV with soft-label columns.
pub fn dump_d_rec(result: &GIResult, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    crate::data::write_dataset_csv(&result.d_rec, file)
}
