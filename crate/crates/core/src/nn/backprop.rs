//! Forward and backward passes of the dense MLP with softmax cross-entropy.

use super::dataset::Dataset;
use super::params::{Activation, ModelArch, ParamVector};
use super::real::{Dual, Real};
use crate::error::{Error, Result};

/// Output of one full backward pass.
pub struct Backward<T> {
    pub loss: T,
    pub grad_params: Vec<T>,
    /// `n × d`, present when input gradients were requested.
    pub grad_features: Option<Vec<T>>,
    /// `n × C`, present when input gradients were requested.
    pub grad_labels: Option<Vec<T>>,
}

fn activate<T: Real>(act: Activation, z: T) -> T {
    match act {
        Activation::Relu => {
            if z.value() > 0.0 {
                z
            } else {
                T::zero()
            }
        }
        Activation::Tanh => z.tanh(),
    }
}

/// Derivative of the activation expressed through its output.
fn activate_grad<T: Real>(act: Activation, a: T) -> T {
    match act {
        Activation::Relu => {
            if a.value() > 0.0 {
                T::from_f64(1.0)
            } else {
                T::zero()
            }
        }
        Activation::Tanh => T::from_f64(1.0) - a * a,
    }
}

/// Returns the activations of every layer; the last entry holds logits.
fn forward_all<T: Real>(arch: &ModelArch, params: &[T], x: &[T], n: usize) -> Vec<Vec<T>> {
    let dims = arch.layer_dims();
    let mut acts: Vec<Vec<T>> = Vec::with_capacity(dims.len());
    acts.push(x.to_vec());
    for l in 0..arch.num_layers() {
        let (d_in, d_out) = (dims[l], dims[l + 1]);
        let (w_off, b_off) = arch.layer_offsets(l);
        let w = &params[w_off..b_off];
        let b = &params[b_off..b_off + d_out];
        let a = &acts[l];
        let mut z = vec![T::zero(); n * d_out];
        for i in 0..n {
            let zi = &mut z[i * d_out..(i + 1) * d_out];
            zi.copy_from_slice(b);
            let ai = &a[i * d_in..(i + 1) * d_in];
            for (k, &aik) in ai.iter().enumerate() {
                let wk = &w[k * d_out..(k + 1) * d_out];
                for (zij, &wkj) in zi.iter_mut().zip(wk) {
                    *zij += aik * wkj;
                }
            }
        }
        if l + 1 < arch.num_layers() {
            for v in &mut z {
                *v = activate(arch.activation(), *v);
            }
        }
        acts.push(z);
    }
    acts
}

/// Row-wise log-softmax. The row max is subtracted as a constant, which
/// leaves both the value and every derivative unchanged.
fn log_softmax<T: Real>(logits: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let m = row
            .iter()
            .map(|v| v.value())
            .fold(f64::NEG_INFINITY, f64::max);
        let shift = T::from_f64(m);
        let mut s = T::zero();
        for &v in row {
            s += (v - shift).exp();
        }
        let lse = s.ln() + shift;
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

/// Mean soft-label cross-entropy and its gradients.
///
/// `x` is `n × d_in`, `y` is `n × C` (rows need not be normalized; the
/// gradient is exact for any `y`).
pub fn backprop<T: Real>(
    arch: &ModelArch,
    params: &[T],
    x: &[T],
    y: &[T],
    n: usize,
    want_inputs: bool,
) -> Backward<T> {
    let dims = arch.layer_dims();
    let c = arch.num_classes();
    let acts = forward_all(arch, params, x, n);
    let logp = log_softmax(&acts[arch.num_layers()], c);
    let inv_n = 1.0 / n as f64;

    let mut loss = T::zero();
    for (&yi, &lp) in y.iter().zip(&logp) {
        loss -= yi * lp;
    }
    let loss = loss.scale(inv_n);

    // dL/dz = (p · Σy − y) / n
    let mut delta = vec![T::zero(); n * c];
    for i in 0..n {
        let yi = &y[i * c..(i + 1) * c];
        let mut ysum = T::zero();
        for &v in yi {
            ysum += v;
        }
        for j in 0..c {
            let p = logp[i * c + j].exp();
            delta[i * c + j] = (p * ysum - yi[j]).scale(inv_n);
        }
    }
    let grad_labels = want_inputs.then(|| logp.iter().map(|&lp| (-lp).scale(inv_n)).collect());

    let mut grad = vec![T::zero(); params.len()];
    let mut grad_features = None;
    for l in (0..arch.num_layers()).rev() {
        let (d_in, d_out) = (dims[l], dims[l + 1]);
        let (w_off, b_off) = arch.layer_offsets(l);
        let a = &acts[l];
        {
            let (gw, gb) = grad[w_off..b_off + d_out].split_at_mut(d_in * d_out);
            for i in 0..n {
                let di = &delta[i * d_out..(i + 1) * d_out];
                for (gbj, &dij) in gb.iter_mut().zip(di) {
                    *gbj += dij;
                }
                let ai = &a[i * d_in..(i + 1) * d_in];
                for (k, &aik) in ai.iter().enumerate() {
                    let gwk = &mut gw[k * d_out..(k + 1) * d_out];
                    for (g, &dij) in gwk.iter_mut().zip(di) {
                        *g += aik * dij;
                    }
                }
            }
        }
        if l == 0 && !want_inputs {
            break;
        }
        let w = &params[w_off..b_off];
        let mut da = vec![T::zero(); n * d_in];
        for i in 0..n {
            let di = &delta[i * d_out..(i + 1) * d_out];
            for k in 0..d_in {
                let wk = &w[k * d_out..(k + 1) * d_out];
                let mut s = T::zero();
                for (&wkj, &dij) in wk.iter().zip(di) {
                    s += wkj * dij;
                }
                da[i * d_in + k] = s;
            }
        }
        if l == 0 {
            grad_features = Some(da);
            break;
        }
        for (dv, &av) in da.iter_mut().zip(a) {
            *dv *= activate_grad(arch.activation(), av);
        }
        delta = da;
    }

    Backward {
        loss,
        grad_params: grad,
        grad_features,
        grad_labels,
    }
}

fn check_features(arch: &ModelArch, features: &[f64]) -> Result<usize> {
    let d = arch.input_dim();
    if features.is_empty() || features.len() % d != 0 {
        return Err(Error::Shape(format!(
            "{} feature values do not form rows of width {d}",
            features.len()
        )));
    }
    Ok(features.len() / d)
}

fn check_params(arch: &ModelArch, params: &ParamVector) -> Result<()> {
    if params.arch().as_ref() != arch || params.len() != arch.num_params() {
        return Err(Error::Shape(format!(
            "parameters built for {:?}, expected {:?}",
            params.arch().layer_dims(),
            arch.layer_dims()
        )));
    }
    Ok(())
}

fn check_dataset(arch: &ModelArch, data: &Dataset) -> Result<()> {
    if data.dim() != arch.input_dim() || data.num_classes() != arch.num_classes() {
        return Err(Error::Shape(format!(
            "dataset is {}→{} but model is {}→{}",
            data.dim(),
            data.num_classes(),
            arch.input_dim(),
            arch.num_classes()
        )));
    }
    Ok(())
}

/// Row-major `n × C` logits.
pub fn forward(arch: &ModelArch, params: &ParamVector, features: &[f64]) -> Result<Vec<f64>> {
    check_params(arch, params)?;
    let n = check_features(arch, features)?;
    let mut acts = forward_all(arch, params.values(), features, n);
    Ok(acts.pop().unwrap())
}

pub fn loss_and_grad(
    arch: &ModelArch,
    params: &ParamVector,
    data: &Dataset,
) -> Result<(f64, ParamVector)> {
    check_params(arch, params)?;
    check_dataset(arch, data)?;
    if data.is_empty() {
        return Err(Error::Precondition("loss of an empty dataset".into()));
    }
    let y = data.label_matrix();
    let b = backprop(
        arch,
        params.values(),
        data.features(),
        &y,
        data.len(),
        false,
    );
    Ok((
        b.loss,
        ParamVector::from_raw(params.arch().clone(), b.grad_params),
    ))
}

pub fn loss(arch: &ModelArch, params: &ParamVector, data: &Dataset) -> Result<f64> {
    loss_and_grad(arch, params, data).map(|(l, _)| l)
}

/// Directional second derivatives of the loss at `(params, x, y)`.
///
/// With `g(w, x, y) = ∂L/∂w`, returns the gradients of the scalar `g · dir`
/// with respect to the parameters, the features and the label matrix.
pub struct HessianVector {
    pub params: Vec<f64>,
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
}

pub fn hessian_vector(
    arch: &ModelArch,
    params: &[f64],
    x: &[f64],
    y: &[f64],
    n: usize,
    dir: &[f64],
) -> HessianVector {
    let pd: Vec<Dual> = params
        .iter()
        .zip(dir)
        .map(|(&p, &v)| Dual::new(p, v))
        .collect();
    let xd: Vec<Dual> = x.iter().map(|&v| Dual::from_f64(v)).collect();
    let yd: Vec<Dual> = y.iter().map(|&v| Dual::from_f64(v)).collect();
    let b = backprop(arch, &pd, &xd, &yd, n, true);
    HessianVector {
        params: b.grad_params.iter().map(|d| d.eps).collect(),
        features: b.grad_features.unwrap().iter().map(|d| d.eps).collect(),
        labels: b.grad_labels.unwrap().iter().map(|d| d.eps).collect(),
    }
}
