use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Dense MLP shape: input dim, hidden dims, output dim. Output is raw logits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    layer_dims: Vec<usize>,
    activation: Activation,
}

impl ModelArch {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Shape(format!(
                "need at least input and output dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-width layer in {layer_dims:?}")));
        }
        Ok(Self {
            layer_dims,
            activation,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offsets of (weights, biases) for layer `l` inside the flat vector.
    /// Weights are stored row-major as `d_in × d_out`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.layer_dims.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        let (d_in, d_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
        (off, off + d_in * d_out)
    }
}

/// Flat parameter (or gradient, or delta) vector tied to an architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    arch: Arc<ModelArch>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(arch: Arc<ModelArch>, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                arch.num_params(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!(
                "non-finite value {} at index {i}",
                values[i]
            )));
        }
        Ok(Self { arch, values })
    }

    /// Skips the finiteness scan; length is still checked in debug builds.
    pub(crate) fn from_raw(arch: Arc<ModelArch>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), arch.num_params());
        Self { arch, values }
    }

    pub fn zeros(arch: Arc<ModelArch>) -> Self {
        let n = arch.num_params();
        Self::from_raw(arch, vec![0.0; n])
    }

    /// Weights ~ N(0, std²) with fan-in scaling when `std` is `None`; biases zero.
    pub fn init_random<R: Rng + ?Sized>(
        arch: Arc<ModelArch>,
        std: Option<f64>,
        rng: &mut R,
    ) -> Self {
        let mut values = vec![0.0; arch.num_params()];
        for l in 0..arch.num_layers() {
            let (w_off, b_off) = arch.layer_offsets(l);
            let d_in = arch.layer_dims()[l];
            let s = std.unwrap_or_else(|| (1.0 / d_in as f64).sqrt());
            let normal = Normal::new(0.0, s).expect("finite std");
            for v in &mut values[w_off..b_off] {
                *v = normal.sample(rng);
            }
        }
        Self::from_raw(arch, values)
    }

    pub fn arch(&self) -> &Arc<ModelArch> {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_len(&self, other: &ParamVector) {
        assert_eq!(
            self.values.len(),
            other.values.len(),
            "parameter vectors of different length"
        );
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        self.check_len(other);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Self::from_raw(self.arch.clone(), values)
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        self.check_len(other);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Self::from_raw(self.arch.clone(), values)
    }

    pub fn scaled(&self, k: f64) -> ParamVector {
        Self::from_raw(
            self.arch.clone(),
            self.values.iter().map(|v| v * k).collect(),
        )
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &ParamVector) {
        self.check_len(other);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += k * b;
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.check_len(other);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Mean absolute difference over all coordinates.
    pub fn mean_abs_diff(&self, other: &ParamVector) -> f64 {
        self.check_len(other);
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum();
        s / self.values.len() as f64
    }

    const MAGIC: &'static [u8; 4] = b"SFLW";
    const VERSION: u32 = 1;

    /// Little-endian checkpoint: magic, version, dim count, dims, f32 values.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        let dims = self.arch.layer_dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// The format carries no activation tag, so the caller supplies it.
    pub fn read_checkpoint<R: Read>(mut r: R, activation: Activation) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        if count > 1024 {
            return Err(Error::Checkpoint(format!(
                "implausible layer count {count}"
            )));
        }
        let dims = (0..count)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let arch = Arc::new(ModelArch::new(dims, activation)?);
        let mut values = Vec::with_capacity(arch.num_params());
        let mut buf = [0u8; 4];
        for _ in 0..arch.num_params() {
            r.read_exact(&mut buf)?;
            values.push(f32::from_le_bytes(buf) as f64);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after values".into()));
        }
        ParamVector::new(arch, values)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
