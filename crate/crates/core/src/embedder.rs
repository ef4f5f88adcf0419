//! Embedding network, its momentum (EMA) shadow, and the Adam optimizer.
//!
//! The network is a small MLP: affine layers with `tanh` between them, a
//! linear last layer, and row-wise L2 normalization of the output. Gradients
//! are computed by a hand-written reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

/// MLP parameters stored flat: for each layer, the `out×in` weight matrix
/// (row-major) followed by the `out` bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    /// Layer widths `[d_in, h_1, ..., d_out]`; weights and biases uniform in
    /// `±1/sqrt(fan_in)`.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        check_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] + 1) * w[1] {
                params.push(rng.gen_range(-bound..bound));
            }
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    /// Single linear layer with identity weights and zero bias.
    pub fn identity(dim: usize) -> Result<Self> {
        let sizes = [dim, dim];
        check_sizes(&sizes)?;
        let mut params = vec![0.0; param_count(&sizes)];
        for i in 0..dim {
            params[i * dim + i] = 1.0;
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        check_sizes(&sizes)?;
        if params.len() != param_count(&sizes) {
            return Err(Error::Dimension {
                expected: param_count(&sizes),
                got: params.len(),
            });
        }
        Ok(Self { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layers(&self) -> impl Iterator<Item = Layer<'_>> {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            let l = Layer {
                n_in,
                n_out,
                offset,
                weights,
                bias,
            };
            offset += (n_in + 1) * n_out;
            l
        })
    }

    /// Unit-norm embeddings of every input row.
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(inputs)?.output)
    }

    fn forward_cached(&self, inputs: &Matrix) -> Result<Cache> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: inputs.cols(),
            });
        }
        if !inputs.is_finite() {
            return Err(Error::NonFinite("network input".into()));
        }
        let n = inputs.rows();
        let n_layers = self.sizes.len() - 1;
        // activations[l] is the input to layer l
        let mut activations = vec![inputs.clone()];
        for (l, layer) in self.layers().enumerate() {
            let x = activations.last().unwrap();
            let mut y = Matrix::zeros(n, layer.n_out);
            for r in 0..n {
                let xr = x.row(r);
                let yr = y.row_mut(r);
                for o in 0..layer.n_out {
                    let z = dot(&layer.weights[o * layer.n_in..(o + 1) * layer.n_in], xr)
                        + layer.bias[o];
                    yr[o] = if l + 1 < n_layers { z.tanh() } else { z };
                }
            }
            activations.push(y);
        }
        let pre_norm = activations.pop().unwrap();
        let mut output = pre_norm.clone();
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = output.row_mut(r);
            let nr = norm(row);
            if !(nr > 0.0 && nr.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "embedding of row {r} has norm {nr}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= nr);
            norms.push(nr);
        }
        Ok(Cache {
            activations,
            output,
            norms,
        })
    }

    /// Gradient of a scalar loss with respect to the flat parameters, given
    /// the loss gradient with respect to the normalized embeddings.
    pub fn backward(&self, inputs: &Matrix, upstream: &Matrix) -> Result<Vec<f64>> {
        let cache = self.forward_cached(inputs)?;
        if upstream.rows() != inputs.rows() || upstream.cols() != self.output_dim() {
            return Err(Error::Dimension {
                expected: inputs.rows() * self.output_dim(),
                got: upstream.rows() * upstream.cols(),
            });
        }
        let n = inputs.rows();
        let mut grads = vec![0.0; self.params.len()];

        // through y = z/|z|: dz = (g - y (y·g)) / |z|
        let mut delta = Matrix::zeros(n, self.output_dim());
        for r in 0..n {
            let y = cache.output.row(r);
            let g = upstream.row(r);
            let yg = dot(y, g);
            let nr = cache.norms[r];
            for (k, d) in delta.row_mut(r).iter_mut().enumerate() {
                *d = (g[k] - y[k] * yg) / nr;
            }
        }

        let layers: Vec<Layer<'_>> = self.layers().collect();
        for (l, layer) in layers.iter().enumerate().rev() {
            let x = &cache.activations[l];
            let gw = layer.offset;
            let gb = layer.offset + layer.n_in * layer.n_out;
            for r in 0..n {
                let dr = delta.row(r);
                let xr = x.row(r);
                for o in 0..layer.n_out {
                    if dr[o] == 0.0 {
                        continue;
                    }
                    let row = &mut grads[gw + o * layer.n_in..gw + (o + 1) * layer.n_in];
                    for (g, xi) in row.iter_mut().zip(xr) {
                        *g += dr[o] * xi;
                    }
                    grads[gb + o] += dr[o];
                }
            }
            if l == 0 {
                break;
            }
            // back through W then through tanh of the previous layer
            let mut prev = Matrix::zeros(n, layer.n_in);
            for r in 0..n {
                let dr = delta.row(r);
                let a = x.row(r);
                let pr = prev.row_mut(r);
                for o in 0..layer.n_out {
                    if dr[o] == 0.0 {
                        continue;
                    }
                    let w = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                    for (p, wi) in pr.iter_mut().zip(w) {
                        *p += dr[o] * wi;
                    }
                }
                for (p, ai) in pr.iter_mut().zip(a) {
                    *p *= 1.0 - ai * ai;
                }
            }
            delta = prev;
        }
        Ok(grads)
    }
}

struct Layer<'a> {
    n_in: usize,
    n_out: usize,
    offset: usize,
    weights: &'a [f64],
    bias: &'a [f64],
}

struct Cache {
    activations: Vec<Matrix>,
    output: Matrix,
    norms: Vec<f64>,
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::config(
            "layer_sizes",
            format!("need at least two positive widths, got {sizes:?}"),
        ));
    }
    Ok(())
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

/// Trainable network `theta` and its exponential moving average `phi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderPair {
    pub theta: Mlp,
    pub phi: Mlp,
    /// Momentum in `[0, 1]`; 1 freezes `phi`.
    pub gamma: f64,
}

impl EmbedderPair {
    /// `phi` starts as an exact copy of `theta`.
    pub fn new(theta: Mlp, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::config("gamma", "must lie in [0, 1]"));
        }
        Ok(Self {
            phi: theta.clone(),
            theta,
            gamma,
        })
    }

    /// `phi <- gamma * phi + (1 - gamma) * theta`
    pub fn ema_update(&mut self) {
        let g = self.gamma;
        // Incremental form keeps phi bit-stable when it already equals theta.
        for (p, t) in self.phi.params.iter_mut().zip(&self.theta.params) {
            *p += (1.0 - g) * (t - *p);
        }
    }
}

/// Adam with bias correction for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(lr: f64, m: Vec<f64>, v: Vec<f64>, step: u64) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Dimension {
                expected: m.len(),
                got: v.len(),
            });
        }
        Ok(Self {
            m,
            v,
            step,
            ..Self::new(0, lr)
        })
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                expected: self.m.len(),
                got: params.len().max(grads.len()),
            });
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Optimizer state for the two parameter groups: network weights and
/// proxies (locations and frames), the latter at a scaled learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub network: Adam,
    pub proxies: Adam,
}

impl AdamState {
    pub fn new(n_network: usize, n_proxy: usize, lr: f64, proxy_lr_multiplier: f64) -> Self {
        Self {
            network: Adam::new(n_network, lr),
            proxies: Adam::new(n_proxy, lr * proxy_lr_multiplier),
        }
    }
}
