//! The network as a discrete-time dynamical system.
//!
//! A network is an ordered list of layer maps `x_{t+1} = f_t(x_t, theta_t)`.
//! This module owns the layer definitions, the forward sweep that records the
//! whole state trajectory, and the vector-Jacobian products (with respect to
//! state and parameters) that every backward pass in the crate is built from.
//!
//! The leading `first_layer_len` layers form the composite "first layer" that
//! decoupled adversary updates are restricted to; by default that is one
//! affine map plus its activation, so the composite is a nonlinear function
//! of the input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrumentation::PropCounter;
use crate::numerics::{sample_uniform, Rng, Tensor};

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softplus,
    Relu,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            // Stable softplus: max(x, 0) + ln(1 + exp(-|x|)).
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative; relu uses the subgradient 0 at exactly 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One layer of the dynamical system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `x -> W x + b`, with `W` stored row-major ahead of `b` in the flat
    /// parameter tensor.
    Affine { in_dim: usize, out_dim: usize },
    /// Elementwise nonlinearity; parameter-free, so `in_dim == out_dim`.
    Activation { dim: usize, activation: Activation },
}

impl LayerSpec {
    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::Affine { in_dim, .. } => in_dim,
            LayerSpec::Activation { dim, .. } => dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::Affine { out_dim, .. } => out_dim,
            LayerSpec::Activation { dim, .. } => dim,
        }
    }

    /// Length of the flat parameter tensor for this layer.
    pub fn param_len(&self) -> usize {
        match *self {
            LayerSpec::Affine { in_dim, out_dim } => out_dim * in_dim + out_dim,
            LayerSpec::Activation { .. } => 0,
        }
    }
}

/// Applies one layer: affine `W x + b` or the elementwise nonlinearity.
pub fn layer_forward(layer: &LayerSpec, theta: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x.len() != layer.in_dim() {
        return Err(Error::shape("layer_forward input", &[layer.in_dim()], x.shape()));
    }
    match *layer {
        LayerSpec::Affine { in_dim, out_dim } => {
            if theta.len() != layer.param_len() {
                return Err(Error::shape(
                    "layer_forward params",
                    &[layer.param_len()],
                    theta.shape(),
                ));
            }
            let w = &theta.data()[..out_dim * in_dim];
            let b = &theta.data()[out_dim * in_dim..];
            let mut y = vec![0.0; out_dim];
            for r in 0..out_dim {
                let row = &w[r * in_dim..(r + 1) * in_dim];
                let mut acc = b[r];
                for (wc, xc) in row.iter().zip(x.data()) {
                    acc += wc * xc;
                }
                y[r] = acc;
            }
            Ok(Tensor::raw(vec![out_dim], y))
        }
        LayerSpec::Activation { activation, .. } => Ok(Tensor::raw(
            x.shape().to_vec(),
            x.data().iter().map(|&v| activation.eval(v)).collect(),
        )),
    }
}

/// `(d f_t / d x)^T v` evaluated at `x`: `W^T v` for affine layers,
/// `v * sigma'(x)` for activations.
pub fn vjp_x(layer: &LayerSpec, theta: &Tensor, x: &Tensor, v: &Tensor) -> Result<Tensor> {
    if v.len() != layer.out_dim() {
        return Err(Error::shape("vjp_x cotangent", &[layer.out_dim()], v.shape()));
    }
    if x.len() != layer.in_dim() {
        return Err(Error::shape("vjp_x input", &[layer.in_dim()], x.shape()));
    }
    match *layer {
        LayerSpec::Affine { in_dim, out_dim } => {
            let w = &theta.data()[..out_dim * in_dim];
            let mut out = vec![0.0; in_dim];
            for r in 0..out_dim {
                let vr = v.data()[r];
                let row = &w[r * in_dim..(r + 1) * in_dim];
                for (o, wc) in out.iter_mut().zip(row) {
                    *o += wc * vr;
                }
            }
            Ok(Tensor::raw(vec![in_dim], out))
        }
        LayerSpec::Activation { activation, .. } => Ok(Tensor::raw(
            v.shape().to_vec(),
            v.data()
                .iter()
                .zip(x.data())
                .map(|(&vi, &xi)| vi * activation.derivative(xi))
                .collect(),
        )),
    }
}

/// `(d f_t / d theta)^T v` at `x`: weight part `v x^T`, bias part `v`.
/// Activation layers return an empty tensor.
pub fn vjp_theta(layer: &LayerSpec, _theta: &Tensor, x: &Tensor, v: &Tensor) -> Result<Tensor> {
    if v.len() != layer.out_dim() {
        return Err(Error::shape("vjp_theta cotangent", &[layer.out_dim()], v.shape()));
    }
    if x.len() != layer.in_dim() {
        return Err(Error::shape("vjp_theta input", &[layer.in_dim()], x.shape()));
    }
    match *layer {
        LayerSpec::Affine { in_dim, out_dim } => {
            let mut out = vec![0.0; out_dim * in_dim + out_dim];
            for r in 0..out_dim {
                let vr = v.data()[r];
                for c in 0..in_dim {
                    out[r * in_dim + c] = vr * x.data()[c];
                }
                out[out_dim * in_dim + r] = vr;
            }
            Ok(Tensor::raw(vec![out_dim * in_dim + out_dim], out))
        }
        LayerSpec::Activation { .. } => Ok(Tensor::raw(vec![0], vec![])),
    }
}

/// `(d f_t / d x) delta` at `x`: the tangent-side product used by the
/// linearized sweep.
pub fn jvp_x(layer: &LayerSpec, theta: &Tensor, x: &Tensor, delta: &Tensor) -> Result<Tensor> {
    if delta.len() != layer.in_dim() {
        return Err(Error::shape("jvp_x tangent", &[layer.in_dim()], delta.shape()));
    }
    match *layer {
        LayerSpec::Affine { in_dim, out_dim } => {
            let w = &theta.data()[..out_dim * in_dim];
            let mut out = vec![0.0; out_dim];
            for r in 0..out_dim {
                let row = &w[r * in_dim..(r + 1) * in_dim];
                out[r] = row.iter().zip(delta.data()).map(|(wc, dc)| wc * dc).sum();
            }
            Ok(Tensor::raw(vec![out_dim], out))
        }
        LayerSpec::Activation { activation, .. } => Ok(Tensor::raw(
            delta.shape().to_vec(),
            delta
                .data()
                .iter()
                .zip(x.data())
                .map(|(&di, &xi)| di * activation.derivative(xi))
                .collect(),
        )),
    }
}

/// A layered network: the dynamics `{f_t}` plus their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: Vec<Tensor>,
    first_layer_len: usize,
}

impl Network {
    /// Builds a network, validating the dimension chain and parameter sizes.
    pub fn new(layers: Vec<LayerSpec>, params: Vec<Tensor>, first_layer_len: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Argument("network needs at least one layer".into()));
        }
        if params.len() != layers.len() {
            return Err(Error::Argument(format!(
                "expected {} parameter tensors, got {}",
                layers.len(),
                params.len()
            )));
        }
        for (t, window) in layers.windows(2).enumerate() {
            if window[0].out_dim() != window[1].in_dim() {
                return Err(Error::Argument(format!(
                    "layer {} out_dim {} does not chain into layer {} in_dim {}",
                    t,
                    window[0].out_dim(),
                    t + 1,
                    window[1].in_dim()
                )));
            }
        }
        for (t, (layer, theta)) in layers.iter().zip(&params).enumerate() {
            if theta.len() != layer.param_len() {
                return Err(Error::Argument(format!(
                    "layer {} expects {} parameters, got {}",
                    t,
                    layer.param_len(),
                    theta.len()
                )));
            }
        }
        if first_layer_len == 0 || first_layer_len > layers.len() {
            return Err(Error::Argument(format!(
                "first_layer_len must be in 1..={}, got {first_layer_len}",
                layers.len()
            )));
        }
        Ok(Self {
            layers,
            params,
            first_layer_len,
        })
    }

    /// Affine/activation stack over the given dims, e.g. `[10, 32, 32, 2]`.
    /// Weights are uniform in `+-1/sqrt(in_dim)`, biases zero. The composite
    /// first layer is the leading affine plus its activation.
    pub fn random_mlp(dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Argument("mlp needs at least two dims".into()));
        }
        let mut layers = Vec::new();
        let mut params = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            let layer = LayerSpec::Affine { in_dim, out_dim };
            let bound = 1.0 / (in_dim as f64).sqrt();
            let mut theta = sample_uniform(rng, &[layer.param_len()], -bound, bound)?;
            for b in &mut theta.data_mut()[out_dim * in_dim..] {
                *b = 0.0;
            }
            layers.push(layer);
            params.push(theta);
            if i + 2 < dims.len() {
                layers.push(LayerSpec::Activation {
                    dim: out_dim,
                    activation,
                });
                params.push(Tensor::raw(vec![0], vec![]));
            }
        }
        let first_layer_len = 2.min(layers.len());
        Network::new(layers, params, first_layer_len)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.layers.len() {
            return Err(Error::Argument("parameter count mismatch".into()));
        }
        for (layer, theta) in self.layers.iter().zip(&params) {
            if theta.len() != layer.param_len() {
                return Err(Error::Argument("parameter tensor length mismatch".into()));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Number of leading layers forming the composite first layer.
    pub fn first_layer_len(&self) -> usize {
        self.first_layer_len
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Output dimension of the composite first layer.
    pub fn boundary_dim(&self) -> usize {
        self.layers[self.first_layer_len - 1].out_dim()
    }
}

/// All state snapshots of a forward sweep: `states[t][i]` is example `i`
/// after `t` layers, `t = 0..=T`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<Tensor>>,
}

impl Trajectory {
    pub fn batch_size(&self) -> usize {
        self.states[0].len()
    }

    pub fn final_states(&self) -> &[Tensor] {
        &self.states[self.states.len() - 1]
    }
}

/// Runs the dynamics forward over a batch, recording every snapshot.
/// Counts one full forward propagation.
pub fn forward_sweep(net: &Network, x0: &[Tensor], counter: &mut PropCounter) -> Result<Trajectory> {
    for x in x0 {
        if x.len() != net.input_dim() {
            return Err(Error::shape("forward_sweep input", &[net.input_dim()], x.shape()));
        }
    }
    let mut states = Vec::with_capacity(net.depth() + 1);
    states.push(x0.to_vec());
    for (layer, theta) in net.layers().iter().zip(net.params()) {
        let prev = states.last().expect("non-empty states");
        let next = prev
            .iter()
            .map(|x| layer_forward(layer, theta, x))
            .collect::<Result<Vec<_>>>()?;
        states.push(next);
    }
    counter.record_full_forward();
    Ok(Trajectory { states })
}

/// Result of a full backward sweep.
#[derive(Debug, Clone)]
pub struct FullBackward {
    /// `cotangents[t][i]`: the pulled-back vector at state `t` for example
    /// `i`; index `T` holds the seed vectors.
    pub cotangents: Vec<Vec<Tensor>>,
    /// Per-layer parameter cotangents summed over the batch.
    pub theta_grads: Vec<Tensor>,
}

impl FullBackward {
    pub fn input_grads(&self) -> &[Tensor] {
        &self.cotangents[0]
    }

    /// Cotangents at the composite-first-layer boundary.
    pub fn boundary_grads(&self, net: &Network) -> &[Tensor] {
        &self.cotangents[net.first_layer_len()]
    }
}

/// Pulls seed cotangents at the output back through every layer, accumulating
/// parameter cotangents along the way. Counts one full backward propagation.
pub fn vjp_sweep(
    net: &Network,
    traj: &Trajectory,
    seeds: &[Tensor],
    counter: &mut PropCounter,
) -> Result<FullBackward> {
    if traj.states.len() != net.depth() + 1 {
        return Err(Error::Argument(
            "trajectory does not match network depth".into(),
        ));
    }
    if seeds.len() != traj.batch_size() {
        return Err(Error::Argument("seed count != batch size".into()));
    }
    let depth = net.depth();
    let mut cotangents = vec![Vec::new(); depth + 1];
    cotangents[depth] = seeds.to_vec();
    let mut theta_grads: Vec<Tensor> = net
        .layers()
        .iter()
        .map(|l| Tensor::zeros(&[l.param_len()]))
        .collect();
    for t in (0..depth).rev() {
        let layer = &net.layers()[t];
        let theta = &net.params()[t];
        let mut prev = Vec::with_capacity(seeds.len());
        for (i, v) in cotangents[t + 1].iter().enumerate() {
            let x = &traj.states[t][i];
            let g = vjp_theta(layer, theta, x, v)?;
            theta_grads[t] = theta_grads[t].add_scaled(&g, 1.0)?;
            prev.push(vjp_x(layer, theta, x, v)?);
        }
        cotangents[t] = prev;
    }
    counter.record_full_backward();
    Ok(FullBackward {
        cotangents,
        theta_grads,
    })
}

/// Forward pass through the composite first layer only. Counts one
/// first-layer forward. Returns snapshots `0..=first_layer_len`.
pub fn first_layer_forward(
    net: &Network,
    x0: &[Tensor],
    counter: &mut PropCounter,
) -> Result<Vec<Vec<Tensor>>> {
    let mut states = Vec::with_capacity(net.first_layer_len() + 1);
    states.push(x0.to_vec());
    for t in 0..net.first_layer_len() {
        let layer = &net.layers()[t];
        let theta = &net.params()[t];
        let prev = states.last().expect("non-empty");
        let next = prev
            .iter()
            .map(|x| layer_forward(layer, theta, x))
            .collect::<Result<Vec<_>>>()?;
        states.push(next);
    }
    counter.record_first_layer_forward();
    Ok(states)
}

/// Pulls cotangents at the first-layer boundary back to the input. Counts one
/// first-layer backward.
pub fn first_layer_vjp(
    net: &Network,
    prefix_states: &[Vec<Tensor>],
    seeds: &[Tensor],
    counter: &mut PropCounter,
) -> Result<Vec<Tensor>> {
    if prefix_states.len() != net.first_layer_len() + 1 {
        return Err(Error::Argument("prefix states do not match split".into()));
    }
    let mut v = seeds.to_vec();
    for t in (0..net.first_layer_len()).rev() {
        let layer = &net.layers()[t];
        let theta = &net.params()[t];
        v = v
            .iter()
            .enumerate()
            .map(|(i, vi)| vjp_x(layer, theta, &prefix_states[t][i], vi))
            .collect::<Result<Vec<_>>>()?;
    }
    counter.record_first_layer_backward();
    Ok(v)
}

/// Versioned checkpoint: layer specs, flat parameter tensors, and the seed
/// lineage of the run that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layers: Vec<LayerSpec>,
    pub first_layer_len: usize,
    pub params: Vec<Vec<f64>>,
    pub seed_lineage: Vec<u64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Network {
    pub fn to_checkpoint(&self, seed_lineage: Vec<u64>) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            layers: self.layers.clone(),
            first_layer_len: self.first_layer_len,
            params: self.params.iter().map(|t| t.data().to_vec()).collect(),
            seed_lineage,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                ckpt.format_version
            )));
        }
        let params = ckpt
            .layers
            .iter()
            .zip(&ckpt.params)
            .map(|(layer, data)| Tensor::from_vec(vec![layer.param_len()], data.clone()))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Network::new(ckpt.layers.clone(), params, ckpt.first_layer_len)
    }
}
