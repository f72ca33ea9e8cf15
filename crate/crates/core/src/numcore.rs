//! Dense vector helpers, a small ReLU feedforward network with hand-written
//! reverse-mode gradients, and a central finite-difference oracle.
//!
//! Parameters are stored in one flat buffer laid out layer by layer
//! (row-major weights `out x in`, then the `out` biases), so the flattened
//! view used by the transfer coupling is the storage itself.

use rand::Rng;

use crate::error::{check_len, CamrlError, Result};

/// Weights and biases of a fully-connected network with ReLU hidden layers
/// and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// Gradient with the same layout as the [`MlpParams`] it was taken against.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(CamrlError::InvalidArgument(format!(
            "network dims must have >= 2 nonzero entries, got {dims:?}"
        )));
    }
    Ok(())
}

impl MlpParams {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![0.0; param_count(dims)],
        })
    }

    /// Every parameter drawn uniformly from `[-scale, scale]`.
    pub fn random_uniform<R: Rng + ?Sized>(dims: &[usize], scale: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        for v in &mut p.data {
            *v = rng.gen_range(-scale..=scale);
        }
        Ok(p)
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot_uniform<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        for l in 0..p.num_layers() {
            let limit = (6.0 / (dims[l] + dims[l + 1]) as f64).sqrt();
            let (w, _) = p.layer_mut(l);
            for v in w.iter_mut() {
                *v = rng.gen_range(-limit..=limit);
            }
        }
        Ok(p)
    }

    pub fn from_flat(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_dims(dims)?;
        check_len(param_count(dims), data.len())?;
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Width of the last hidden layer (the embedding size); equals the input
    /// width for a network without hidden layers.
    pub fn embedding_dim(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.dims[..=layer])
    }

    /// `(weights, biases)` of layer `layer`; weights are row-major `out x in`.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.layer_offset(layer);
        let (w, rest) = self.data[off..].split_at(n_in * n_out);
        (w, &rest[..n_out])
    }

    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (n_in, n_out) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.layer_offset(layer);
        let (w, rest) = self.data[off..].split_at_mut(n_in * n_out);
        (w, &mut rest[..n_out])
    }

    /// `self += scale * grads`.
    pub fn add_scaled(&mut self, grads: &MlpGrads, scale: f64) -> Result<()> {
        if grads.dims != self.dims {
            return Err(CamrlError::DimensionMismatch {
                expected: self.data.len(),
                got: grads.data.len(),
            });
        }
        axpy(scale, &grads.data, &mut self.data);
        Ok(())
    }
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            dims: params.dims.clone(),
            data: vec![0.0; params.data.len()],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: &MlpGrads, scale: f64) {
        debug_assert_eq!(self.dims, other.dims);
        axpy(scale, &other.data, &mut self.data);
    }
}

struct ForwardTrace {
    // activations[0] is the input, activations[k] the output of layer k-1
    activations: Vec<Vec<f64>>,
}

fn forward_trace(params: &MlpParams, input: &[f64]) -> Result<ForwardTrace> {
    check_len(params.in_dim(), input.len())?;
    let n_layers = params.num_layers();
    let mut activations = Vec::with_capacity(n_layers + 1);
    activations.push(input.to_vec());
    for l in 0..n_layers {
        let (w, b) = params.layer(l);
        let x = &activations[l];
        let n_in = x.len();
        let mut z: Vec<f64> = b
            .iter()
            .enumerate()
            .map(|(o, &bias)| bias + dot(&w[o * n_in..(o + 1) * n_in], x))
            .collect();
        if l + 1 < n_layers {
            for v in &mut z {
                *v = v.max(0.0);
            }
        }
        activations.push(z);
    }
    Ok(ForwardTrace { activations })
}

/// Returns `(output, last hidden-layer activations)`.
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut trace = forward_trace(params, input)?;
    let output = trace.activations.pop().unwrap();
    let hidden = trace.activations.pop().unwrap();
    Ok((output, hidden))
}

/// Gradient of `output . out_grad` with respect to every parameter.
pub fn mlp_backward(params: &MlpParams, input: &[f64], out_grad: &[f64]) -> Result<MlpGrads> {
    check_len(params.out_dim(), out_grad.len())?;
    let trace = forward_trace(params, input)?;
    let mut grads = MlpGrads::zeros_like(params);
    let mut delta = out_grad.to_vec();
    for l in (0..params.num_layers()).rev() {
        let x = &trace.activations[l];
        let n_in = x.len();
        let (w, _) = params.layer(l);
        {
            let off = params.layer_offset(l);
            let n_out = delta.len();
            let (gw, rest) = grads.data[off..].split_at_mut(n_in * n_out);
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, x, &mut gw[o * n_in..(o + 1) * n_in]);
                }
                rest[o] = d;
            }
        }
        if l == 0 {
            break;
        }
        // back through the weights, then through the ReLU of layer l-1
        let mut prev = vec![0.0; n_in];
        for (o, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                axpy(d, &w[o * n_in..(o + 1) * n_in], &mut prev);
            }
        }
        for (p, &a) in prev.iter_mut().zip(x) {
            if a <= 0.0 {
                *p = 0.0;
            }
        }
        delta = prev;
    }
    Ok(grads)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `u.v / (|u| |v|)`; defined as 0 when either vector is all zeros.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len(u.len(), v.len())?;
    let nu = norm_sq(u).sqrt();
    let nv = norm_sq(v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}
