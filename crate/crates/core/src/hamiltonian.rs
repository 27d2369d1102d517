//! Per-layer Hamiltonians, co-state propagation, and the optimality-condition
//! verifier.
//!
//! For a batch of size `B` the layer Hamiltonian is
//! `H_t(x, p, theta_t) = p . f_t(x, theta_t) - (1/B) R_t(x, theta_t)`.
//! The backward co-state sweep seeded with `p_T = -(1/B) grad loss` is plain
//! back-propagation in these variables: `p_t` equals `-(1/B)` times the loss
//! gradient at state `t`, and the ascent direction of the summed Hamiltonian
//! in `theta` is the exact negation of the descent direction of the batch
//! objective. Both identities are enforced by the test suites at tight
//! tolerances.

use serde::{Deserialize, Serialize};

use crate::adversary::Perturbation;
use crate::dynamics::{
    forward_sweep, jvp_x, layer_forward, vjp_sweep, vjp_theta, LayerSpec, Network, Trajectory,
};
use crate::error::{Error, Result};
use crate::instrumentation::PropCounter;
use crate::numerics::{sample_uniform, Rng, Tensor};

/// Weight regularizer `R_t`. Both supported kinds are independent of the
/// state `x`, so the co-state recursion carries no `grad_x R` term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    None,
    L2Weight { coefficient: f64 },
}

impl Regularizer {
    /// `R_t(theta)`: `(coeff/2) ||theta||^2` or 0.
    pub fn value(&self, theta: &Tensor) -> f64 {
        match *self {
            Regularizer::None => 0.0,
            Regularizer::L2Weight { coefficient } => {
                0.5 * coefficient * theta.data().iter().map(|v| v * v).sum::<f64>()
            }
        }
    }

    /// `grad_theta R_t`.
    pub fn grad_theta(&self, theta: &Tensor) -> Tensor {
        match *self {
            Regularizer::None => Tensor::zeros(&[theta.len()]),
            Regularizer::L2Weight { coefficient } => theta.scale(coefficient),
        }
    }
}

/// Per-example data-fitting loss on the terminal state. Labels are class
/// indices; squared error targets the one-hot encoding of the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFunction {
    SoftmaxCrossEntropy,
    SquaredError,
}

impl LossFunction {
    fn check_label(logits: &Tensor, label: usize) -> Result<()> {
        if label >= logits.len() {
            return Err(Error::Argument(format!(
                "label {label} out of range for {} outputs",
                logits.len()
            )));
        }
        Ok(())
    }

    pub fn value(&self, logits: &Tensor, label: usize) -> Result<f64> {
        Self::check_label(logits, label)?;
        match self {
            LossFunction::SoftmaxCrossEntropy => {
                Ok(log_sum_exp(logits.data()) - logits.data()[label])
            }
            LossFunction::SquaredError => Ok(logits
                .data()
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let t = if k == label { 1.0 } else { 0.0 };
                    (v - t) * (v - t)
                })
                .sum()),
        }
    }

    pub fn grad(&self, logits: &Tensor, label: usize) -> Result<Tensor> {
        Self::check_label(logits, label)?;
        match self {
            LossFunction::SoftmaxCrossEntropy => {
                let mut g = softmax(logits.data());
                g[label] -= 1.0;
                Ok(Tensor::raw(vec![logits.len()], g))
            }
            LossFunction::SquaredError => Ok(Tensor::raw(
                vec![logits.len()],
                logits
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let t = if k == label { 1.0 } else { 0.0 };
                        2.0 * (v - t)
                    })
                    .collect(),
            )),
        }
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|&v| (v - lse).exp()).collect()
}

/// `KL(softmax(z_ref) || softmax(z))`, the consistency loss used by the
/// trade-off trainers.
pub fn kl_consistency(z_ref: &Tensor, z: &Tensor) -> Result<f64> {
    if z_ref.len() != z.len() {
        return Err(Error::shape("kl_consistency", z_ref.shape(), z.shape()));
    }
    let lse_ref = log_sum_exp(z_ref.data());
    let lse = log_sum_exp(z.data());
    Ok(z_ref
        .data()
        .iter()
        .zip(z.data())
        .map(|(&a, &b)| {
            let p = (a - lse_ref).exp();
            p * ((a - lse_ref) - (b - lse))
        })
        .sum())
}

/// Gradient of [`kl_consistency`] with respect to the second (perturbed)
/// logits: `softmax(z) - softmax(z_ref)`.
pub fn kl_grad_perturbed(z_ref: &Tensor, z: &Tensor) -> Result<Tensor> {
    if z_ref.len() != z.len() {
        return Err(Error::shape("kl_grad_perturbed", z_ref.shape(), z.shape()));
    }
    let p = softmax(z_ref.data());
    let q = softmax(z.data());
    Ok(Tensor::raw(
        vec![z.len()],
        q.iter().zip(&p).map(|(qi, pi)| qi - pi).collect(),
    ))
}

/// Gradient of [`kl_consistency`] with respect to the first (reference)
/// logits: `p_j ((log p_j - log q_j) - KL)`.
pub fn kl_grad_reference(z_ref: &Tensor, z: &Tensor) -> Result<Tensor> {
    if z_ref.len() != z.len() {
        return Err(Error::shape("kl_grad_reference", z_ref.shape(), z.shape()));
    }
    let lse_ref = log_sum_exp(z_ref.data());
    let lse = log_sum_exp(z.data());
    let kl = kl_consistency(z_ref, z)?;
    Ok(Tensor::raw(
        vec![z_ref.len()],
        z_ref
            .data()
            .iter()
            .zip(z.data())
            .map(|(&a, &b)| {
                let p = (a - lse_ref).exp();
                p * (((a - lse_ref) - (b - lse)) - kl)
            })
            .collect(),
    ))
}

/// Co-states `p_{i,t}` for `t = 0..=T`, same layout as [`Trajectory`].
#[derive(Debug, Clone)]
pub struct CostateTrajectory {
    pub costates: Vec<Vec<Tensor>>,
}

impl CostateTrajectory {
    pub fn at(&self, t: usize) -> &[Tensor] {
        &self.costates[t]
    }
}

/// `H_t(x, p, theta_t) = p . f_t(x, theta_t) - (1/B) R_t(theta_t)`.
pub fn hamiltonian_value(
    layer: &LayerSpec,
    theta: &Tensor,
    x: &Tensor,
    p: &Tensor,
    reg: &Regularizer,
    batch_size: usize,
) -> Result<f64> {
    let fx = layer_forward(layer, theta, x)?;
    Ok(p.dot(&fx)? - reg.value(theta) / batch_size as f64)
}

/// Terminal co-states `p_{i,T} = -(1/B) grad loss_i(x_{i,T})`.
pub fn terminal_costate(
    loss: &LossFunction,
    x_terminal: &[Tensor],
    labels: &[usize],
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    if x_terminal.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} terminal states vs {} labels",
            x_terminal.len(),
            labels.len()
        )));
    }
    let scale = -1.0 / batch_size as f64;
    x_terminal
        .iter()
        .zip(labels)
        .map(|(x, &y)| Ok(loss.grad(x, y)?.scale(scale)))
        .collect()
}

/// Backward co-state sweep `p_t = (d f_t/d x)^T p_{t+1}` from the terminal
/// condition. The supported regularizers are independent of `x`, so no
/// `grad_x R` correction appears. Counts one full backward propagation.
pub fn backward_sweep(
    net: &Network,
    traj: &Trajectory,
    p_terminal: &[Tensor],
    _reg: &Regularizer,
    counter: &mut PropCounter,
) -> Result<CostateTrajectory> {
    let back = vjp_sweep(net, traj, p_terminal, counter)?;
    Ok(CostateTrajectory {
        costates: back.cotangents,
    })
}

/// `grad_theta sum_i H_t(x_{i,t}, p_{i,t+1}, theta_t)` per layer: the batch
/// sum of parameter cotangents minus the full regularizer gradient (the
/// `1/B` factors cancel against the `B` example slots).
pub fn hamiltonian_theta_grad(
    net: &Network,
    traj: &Trajectory,
    costates: &CostateTrajectory,
    reg: &Regularizer,
    _batch_size: usize,
) -> Result<Vec<Tensor>> {
    if costates.costates.len() != net.depth() + 1 {
        return Err(Error::Argument("costates do not match network depth".into()));
    }
    let mut grads = Vec::with_capacity(net.depth());
    for (t, (layer, theta)) in net.layers().iter().zip(net.params()).enumerate() {
        let mut acc = Tensor::zeros(&[layer.param_len()]);
        for (x, p_next) in traj.states[t].iter().zip(&costates.costates[t + 1]) {
            let g = vjp_theta(layer, theta, x, p_next)?;
            acc = acc.add_scaled(&g, 1.0)?;
        }
        acc = acc.add_scaled(&reg.grad_theta(theta), -1.0)?;
        grads.push(acc);
    }
    Ok(grads)
}

/// Propagates the dynamics linearized around a reference trajectory:
/// `phi_{t+1} = f_t(x*_t, theta'_t) + (d f_t/d x)(x*_t, theta'_t)(phi_t - x*_t)`.
///
/// Verifier-only: exact for affine layers, second-order accurate in
/// `phi_0 - x*_0` for smooth activations.
pub fn linearized_sweep(
    net: &Network,
    traj_star: &Trajectory,
    theta_prime: &[Tensor],
    phi0: &[Tensor],
) -> Result<Trajectory> {
    if theta_prime.len() != net.depth() {
        return Err(Error::Argument("theta' count != depth".into()));
    }
    if phi0.len() != traj_star.batch_size() {
        return Err(Error::Argument("phi0 batch != reference batch".into()));
    }
    let mut states = Vec::with_capacity(net.depth() + 1);
    states.push(phi0.to_vec());
    for (t, layer) in net.layers().iter().enumerate() {
        let theta = &theta_prime[t];
        let prev: &Vec<Tensor> = states.last().expect("non-empty");
        let mut next = Vec::with_capacity(prev.len());
        for (i, phi) in prev.iter().enumerate() {
            let x_star = &traj_star.states[t][i];
            let base = layer_forward(layer, theta, x_star)?;
            let delta = phi.add_scaled(x_star, -1.0)?;
            let correction = jvp_x(layer, theta, x_star, &delta)?;
            next.push(base.add_scaled(&correction, 1.0)?);
        }
        states.push(next);
    }
    Ok(Trajectory { states })
}

/// Sampling parameters for [`verify_pmp`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub samples: usize,
    pub radius: f64,
    pub tolerance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PmpLayerReport {
    pub layer: usize,
    pub violations: usize,
    pub samples: usize,
    pub max_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PmpAdversaryReport {
    pub violations: usize,
    pub samples: usize,
    pub max_gap: f64,
}

/// Diagnostic report of the sampled optimality-condition check. Violation
/// rates near zero at a trained solution are evidence the run satisfies the
/// layerwise maximum principle; this reporter never asserts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PmpReport {
    pub per_layer: Vec<PmpLayerReport>,
    pub adversary: PmpAdversaryReport,
    pub tolerance: f64,
    pub radius: f64,
    pub seed: u64,
}

impl PmpReport {
    pub fn weight_violation_rate(&self) -> f64 {
        let (v, s) = self
            .per_layer
            .iter()
            .fold((0usize, 0usize), |(v, s), l| (v + l.violations, s + l.samples));
        if s == 0 {
            0.0
        } else {
            v as f64 / s as f64
        }
    }
}

/// Checks the layerwise maximality conditions at `(net, eta*)` by sampling.
///
/// Weight side, per layer `t`: draws `theta'` uniformly in the infinity ball
/// of `radius` around `theta*_t` and counts samples where the summed
/// Hamiltonian at `theta*` fails to dominate within `tolerance`. Adversary
/// side: draws feasible `eta` and counts samples where the first-layer
/// Hamiltonian at `eta*` is not minimal within `tolerance`.
pub fn verify_pmp(
    net: &Network,
    x0: &[Tensor],
    labels: &[usize],
    eta_star: &Perturbation,
    loss: &LossFunction,
    reg: &Regularizer,
    cfg: &VerifyConfig,
) -> Result<PmpReport> {
    if cfg.radius < 0.0 {
        return Err(Error::Argument("verify_pmp: negative radius".into()));
    }
    let batch = eta_star.apply(x0)?;
    let batch_size = batch.len();
    let mut scratch = PropCounter::new();
    let traj = forward_sweep(net, &batch, &mut scratch)?;
    let p_terminal = terminal_costate(loss, traj.final_states(), labels, batch_size)?;
    let costates = backward_sweep(net, &traj, &p_terminal, reg, &mut scratch)?;

    let mut rng = Rng::new(cfg.seed);
    let mut per_layer = Vec::with_capacity(net.depth());
    for (t, (layer, theta_star)) in net.layers().iter().zip(net.params()).enumerate() {
        let mut h_star = 0.0;
        for (x, p) in traj.states[t].iter().zip(costates.at(t + 1)) {
            h_star += hamiltonian_value(layer, theta_star, x, p, reg, batch_size)?;
        }
        let mut violations = 0;
        let mut max_gap: f64 = 0.0;
        let samples = if layer.param_len() == 0 { 0 } else { cfg.samples };
        for _ in 0..samples {
            let noise = sample_uniform(&mut rng, &[theta_star.len()], -cfg.radius, cfg.radius)?;
            let theta_prime = theta_star.add_scaled(&noise, 1.0)?;
            let mut h_prime = 0.0;
            for (x, p) in traj.states[t].iter().zip(costates.at(t + 1)) {
                h_prime += hamiltonian_value(layer, &theta_prime, x, p, reg, batch_size)?;
            }
            max_gap = max_gap.max(h_prime - h_star);
            if h_star < h_prime - cfg.tolerance {
                violations += 1;
            }
        }
        per_layer.push(PmpLayerReport {
            layer: t,
            violations,
            samples,
            max_gap,
        });
    }

    // Adversary side: the optimal perturbation minimizes the first-layer
    // Hamiltonian over the feasible ball.
    let first = &net.layers()[0];
    let theta0 = &net.params()[0];
    let mut h_star_adv = 0.0;
    for (x, p) in traj.states[0].iter().zip(costates.at(1)) {
        h_star_adv += hamiltonian_value(first, theta0, x, p, reg, batch_size)?;
    }
    let mut violations = 0;
    let mut max_gap: f64 = 0.0;
    for _ in 0..cfg.samples {
        let mut h_prime = 0.0;
        for (i, p) in costates.at(1).iter().enumerate() {
            let eta = sample_uniform(
                &mut rng,
                &[net.input_dim()],
                -eta_star.epsilon(),
                eta_star.epsilon(),
            )?;
            let x_eta = x0[i].add_scaled(&eta, 1.0)?;
            h_prime += hamiltonian_value(first, theta0, &x_eta, p, reg, batch_size)?;
        }
        max_gap = max_gap.max(h_star_adv - h_prime);
        if h_prime < h_star_adv - cfg.tolerance {
            violations += 1;
        }
    }

    Ok(PmpReport {
        per_layer,
        adversary: PmpAdversaryReport {
            violations,
            samples: cfg.samples,
            max_gap,
        },
        tolerance: cfg.tolerance,
        radius: cfg.radius,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Activation;
    use crate::numerics::{finite_diff_grad, rel_err, FD_STEP};

    fn identity_affine(dim: usize) -> (LayerSpec, Tensor) {
        let layer = LayerSpec::Affine {
            in_dim: dim,
            out_dim: dim,
        };
        let mut theta = Tensor::zeros(&[layer.param_len()]);
        for i in 0..dim {
            theta.data_mut()[i * dim + i] = 1.0;
        }
        (layer, theta)
    }

    #[test]
    fn hamiltonian_is_dot_product_minus_regularizer() {
        let (layer, theta) = identity_affine(2);
        let x = Tensor::vector(vec![1.0, 2.0]);
        let p = Tensor::vector(vec![1.0, 1.0]);
        let h = hamiltonian_value(&layer, &theta, &x, &p, &Regularizer::None, 1).unwrap();
        assert_eq!(h, 3.0);

        // ||I_2||^2 = 2 so the l2 term removes exactly 1.0.
        let reg = Regularizer::L2Weight { coefficient: 1.0 };
        let h = hamiltonian_value(&layer, &theta, &x, &p, &reg, 1).unwrap();
        assert_eq!(h, 2.0);
    }

    #[test]
    fn hamiltonian_matches_scalar_recomputation() {
        let mut rng = Rng::new(17);
        let layer = LayerSpec::Affine {
            in_dim: 3,
            out_dim: 2,
        };
        let theta = sample_uniform(&mut rng, &[layer.param_len()], -1.0, 1.0).unwrap();
        let x = sample_uniform(&mut rng, &[3], -1.0, 1.0).unwrap();
        let p = sample_uniform(&mut rng, &[2], -1.0, 1.0).unwrap();
        let lambda = 0.7;
        let batch = 4;
        let reg = Regularizer::L2Weight { coefficient: lambda };
        let h = hamiltonian_value(&layer, &theta, &x, &p, &reg, batch).unwrap();

        // Independent scalar recomputation.
        let w = &theta.data()[..6];
        let b = &theta.data()[6..];
        let mut dot = 0.0;
        for r in 0..2 {
            let mut y = b[r];
            for c in 0..3 {
                y += w[r * 3 + c] * x.data()[c];
            }
            dot += p.data()[r] * y;
        }
        let norm2: f64 = theta.data().iter().map(|v| v * v).sum();
        let expected = dot - lambda / 2.0 * norm2 / batch as f64;
        assert!((h - expected).abs() <= 1e-12);
    }

    #[test]
    fn hamiltonian_linearity_in_costate() {
        let mut rng = Rng::new(18);
        let layer = LayerSpec::Affine {
            in_dim: 3,
            out_dim: 3,
        };
        let theta = sample_uniform(&mut rng, &[layer.param_len()], -1.0, 1.0).unwrap();
        let x = sample_uniform(&mut rng, &[3], -1.0, 1.0).unwrap();
        let p = sample_uniform(&mut rng, &[3], -1.0, 1.0).unwrap();
        let reg = Regularizer::L2Weight { coefficient: 0.3 };
        let batch = 2;
        for a in [0.5, 2.0, -3.0] {
            let h1 = hamiltonian_value(&layer, &theta, &x, &p.scale(a), &reg, batch).unwrap()
                + reg.value(&theta) / batch as f64;
            let h2 = a
                * (hamiltonian_value(&layer, &theta, &x, &p, &reg, batch).unwrap()
                    + reg.value(&theta) / batch as f64);
            assert!((h1 - h2).abs() <= 1e-12 * h2.abs().max(1.0));
        }
    }

    #[test]
    fn terminal_costate_symmetric_logits() {
        let x = vec![Tensor::vector(vec![0.3, 0.3])];
        let p = terminal_costate(&LossFunction::SoftmaxCrossEntropy, &x, &[0], 2).unwrap();
        assert!((p[0].data()[0] - 0.25).abs() <= 1e-12);
        assert!((p[0].data()[1] + 0.25).abs() <= 1e-12);
    }

    #[test]
    fn terminal_costate_squared_error_at_minimum() {
        let x = vec![Tensor::vector(vec![1.0, 0.0])];
        let p = terminal_costate(&LossFunction::SquaredError, &x, &[0], 1).unwrap();
        assert!(p[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn terminal_costate_rejects_bad_label() {
        let x = vec![Tensor::vector(vec![0.0, 0.0])];
        assert!(terminal_costate(&LossFunction::SoftmaxCrossEntropy, &x, &[2], 1).is_err());
    }

    #[test]
    fn terminal_costate_matches_finite_differences() {
        let mut rng = Rng::new(19);
        for loss in [LossFunction::SoftmaxCrossEntropy, LossFunction::SquaredError] {
            let logits = sample_uniform(&mut rng, &[5], -2.0, 2.0).unwrap();
            let b = 3;
            let p = terminal_costate(&loss, std::slice::from_ref(&logits), &[2], b).unwrap();
            let fd = finite_diff_grad(|z| loss.value(z, 2).unwrap(), &logits, FD_STEP).unwrap();
            let expected = fd.scale(-1.0 / b as f64);
            assert!(rel_err(&p[0], &expected) <= 1e-7);
        }
    }

    #[test]
    fn backward_sweep_identity_net_keeps_terminal() {
        let (l0, t0) = identity_affine(2);
        let (l1, t1) = identity_affine(2);
        let net = Network::new(vec![l0, l1], vec![t0, t1], 1).unwrap();
        let mut c = PropCounter::new();
        let traj = forward_sweep(&net, &[Tensor::vector(vec![1.0, -1.0])], &mut c).unwrap();
        let p_t = vec![Tensor::vector(vec![0.5, 0.25])];
        let costates = backward_sweep(&net, &traj, &p_t, &Regularizer::None, &mut c).unwrap();
        for t in 0..=2 {
            assert_eq!(costates.at(t)[0].data(), &[0.5, 0.25]);
        }
        assert_eq!(c.full_backward, 1);
    }

    #[test]
    fn backward_sweep_single_affine_is_transpose() {
        let layer = LayerSpec::Affine {
            in_dim: 2,
            out_dim: 2,
        };
        let theta = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        let net = Network::new(vec![layer], vec![theta], 1).unwrap();
        let mut c = PropCounter::new();
        let traj = forward_sweep(&net, &[Tensor::vector(vec![1.0, 1.0])], &mut c).unwrap();
        let p1 = vec![Tensor::vector(vec![1.0, -1.0])];
        let costates = backward_sweep(&net, &traj, &p1, &Regularizer::None, &mut c).unwrap();
        // W^T p = [1*1 + 3*(-1), 2*1 + 4*(-1)] = [-2, -2]
        assert_eq!(costates.at(0)[0].data(), &[-2.0, -2.0]);
    }

    #[test]
    fn costates_equal_negative_state_gradients() {
        // Back-propagation identity at batch size 1: p_t == -grad_{x_t} loss(x_T),
        // with the right side from finite differences through the suffix.
        let mut rng = Rng::new(23);
        let net = Network::random_mlp(&[3, 6, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let x0 = sample_uniform(&mut rng, &[3], -1.0, 1.0).unwrap();
        let loss = LossFunction::SoftmaxCrossEntropy;
        let mut c = PropCounter::new();
        let traj = forward_sweep(&net, &[x0], &mut c).unwrap();
        let p_t = terminal_costate(&loss, traj.final_states(), &[1], 1).unwrap();
        let costates = backward_sweep(&net, &traj, &p_t, &Regularizer::None, &mut c).unwrap();

        for t in 0..=net.depth() {
            let suffix_loss = |xq: &Tensor| {
                let mut x = xq.clone();
                for s in t..net.depth() {
                    x = layer_forward(&net.layers()[s], &net.params()[s], &x).unwrap();
                }
                loss.value(&x, 1).unwrap()
            };
            let fd = finite_diff_grad(suffix_loss, &traj.states[t][0], FD_STEP).unwrap();
            let expected = fd.scale(-1.0);
            assert!(
                rel_err(costates.at(t).first().unwrap(), &expected) <= 1e-6,
                "layer {t}: rel err {}",
                rel_err(costates.at(t).first().unwrap(), &expected)
            );
        }
    }

    #[test]
    fn theta_grad_zero_costates_zero_grad() {
        let mut rng = Rng::new(27);
        let net = Network::random_mlp(&[2, 3, 2], Activation::Tanh, &mut rng).unwrap();
        let x0 = vec![sample_uniform(&mut rng, &[2], -1.0, 1.0).unwrap()];
        let mut c = PropCounter::new();
        let traj = forward_sweep(&net, &x0, &mut c).unwrap();
        let zero_seeds = vec![Tensor::zeros(&[2])];
        let costates = backward_sweep(&net, &traj, &zero_seeds, &Regularizer::None, &mut c).unwrap();
        let grads =
            hamiltonian_theta_grad(&net, &traj, &costates, &Regularizer::None, 1).unwrap();
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn theta_grad_single_affine_outer_product() {
        let layer = LayerSpec::Affine {
            in_dim: 1,
            out_dim: 1,
        };
        let net = Network::new(vec![layer], vec![Tensor::vector(vec![1.0, 0.0])], 1).unwrap();
        let mut c = PropCounter::new();
        let traj = forward_sweep(&net, &[Tensor::vector(vec![2.0])], &mut c).unwrap();
        let costates = CostateTrajectory {
            costates: vec![vec![Tensor::zeros(&[1])], vec![Tensor::vector(vec![1.0])]],
        };
        let grads =
            hamiltonian_theta_grad(&net, &traj, &costates, &Regularizer::None, 1).unwrap();
        assert_eq!(grads[0].data(), &[2.0, 1.0]);
    }

    #[test]
    fn linearized_sweep_fixed_point() {
        let mut rng = Rng::new(31);
        let net = Network::random_mlp(&[3, 5, 2], Activation::Softplus, &mut rng).unwrap();
        let x0 = vec![sample_uniform(&mut rng, &[3], -1.0, 1.0).unwrap()];
        let mut c = PropCounter::new();
        let traj = forward_sweep(&net, &x0, &mut c).unwrap();
        let phi = linearized_sweep(&net, &traj, net.params(), &x0).unwrap();
        for t in 0..=net.depth() {
            assert!(rel_err(&phi.states[t][0], &traj.states[t][0]) <= 1e-14);
        }
    }

    #[test]
    fn linearized_sweep_exact_for_affine_net() {
        let mut rng = Rng::new(33);
        let l0 = LayerSpec::Affine {
            in_dim: 2,
            out_dim: 3,
        };
        let l1 = LayerSpec::Affine {
            in_dim: 3,
            out_dim: 2,
        };
        let p0 = sample_uniform(&mut rng, &[l0.param_len()], -1.0, 1.0).unwrap();
        let p1 = sample_uniform(&mut rng, &[l1.param_len()], -1.0, 1.0).unwrap();
        let net = Network::new(vec![l0, l1], vec![p0, p1], 1).unwrap();
        let x0 = vec![sample_uniform(&mut rng, &[2], -1.0, 1.0).unwrap()];
        let mut c = PropCounter::new();
        let traj = forward_sweep(&net, &x0, &mut c).unwrap();
        let phi0 = vec![sample_uniform(&mut rng, &[2], -2.0, 2.0).unwrap()];
        let phi = linearized_sweep(&net, &traj, net.params(), &phi0).unwrap();
        let exact = forward_sweep(&net, &phi0, &mut c).unwrap();
        for t in 0..=2 {
            assert!(rel_err(&phi.states[t][0], &exact.states[t][0]) <= 1e-12);
        }
    }

    #[test]
    fn linearized_error_is_second_order() {
        let mut rng = Rng::new(35);
        let net = Network::random_mlp(&[3, 6, 3], Activation::Tanh, &mut rng).unwrap();
        let x0 = sample_uniform(&mut rng, &[3], -0.5, 0.5).unwrap();
        let mut c = PropCounter::new();
        let traj = forward_sweep(&net, std::slice::from_ref(&x0), &mut c).unwrap();
        let dir = sample_uniform(&mut rng, &[3], -1.0, 1.0).unwrap();
        let dir = dir.scale(1.0 / dir.norm2());

        let err_at = |scale: f64, c: &mut PropCounter| {
            let phi0 = vec![x0.add_scaled(&dir, scale).unwrap()];
            let lin = linearized_sweep(&net, &traj, net.params(), &phi0).unwrap();
            let exact = forward_sweep(&net, &phi0, c).unwrap();
            lin.final_states()[0]
                .add_scaled(&exact.final_states()[0], -1.0)
                .unwrap()
                .norm2()
        };
        let e1 = err_at(1e-3, &mut c);
        let e2 = err_at(5e-4, &mut c);
        let ratio = e1 / e2;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = Rng::new(37);
        let z_ref = sample_uniform(&mut rng, &[4], -1.0, 1.0).unwrap();
        let z = sample_uniform(&mut rng, &[4], -1.0, 1.0).unwrap();
        assert!(kl_consistency(&z_ref, &z_ref).unwrap().abs() <= 1e-15);
        assert!(kl_consistency(&z_ref, &z).unwrap() >= 0.0);

        let g_adv = kl_grad_perturbed(&z_ref, &z).unwrap();
        let fd_adv =
            finite_diff_grad(|q| kl_consistency(&z_ref, q).unwrap(), &z, FD_STEP).unwrap();
        assert!(rel_err(&g_adv, &fd_adv) <= 1e-7);

        let g_ref = kl_grad_reference(&z_ref, &z).unwrap();
        let fd_ref =
            finite_diff_grad(|p| kl_consistency(p, &z).unwrap(), &z_ref, FD_STEP).unwrap();
        assert!(rel_err(&g_ref, &fd_ref) <= 1e-7);
    }

    #[test]
    fn verify_pmp_radius_zero_has_no_violations() {
        let mut rng = Rng::new(39);
        let net = Network::random_mlp(&[2, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let x0 = vec![
            sample_uniform(&mut rng, &[2], -1.0, 1.0).unwrap(),
            sample_uniform(&mut rng, &[2], -1.0, 1.0).unwrap(),
        ];
        let eta = Perturbation::zeros(2, 2, 0.0);
        let report = verify_pmp(
            &net,
            &x0,
            &[0, 1],
            &eta,
            &LossFunction::SoftmaxCrossEntropy,
            &Regularizer::None,
            &VerifyConfig {
                samples: 50,
                radius: 0.0,
                tolerance: 1e-9,
                seed: 7,
            },
        )
        .unwrap();
        assert_eq!(report.weight_violation_rate(), 0.0);
        assert_eq!(report.adversary.violations, 0);
    }

    #[test]
    fn verify_pmp_reports_on_untrained_net() {
        let mut rng = Rng::new(41);
        let net = Network::random_mlp(&[2, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let x0 = vec![sample_uniform(&mut rng, &[2], -1.0, 1.0).unwrap()];
        let eta = Perturbation::zeros(1, 2, 0.1);
        let report = verify_pmp(
            &net,
            &x0,
            &[0],
            &eta,
            &LossFunction::SoftmaxCrossEntropy,
            &Regularizer::None,
            &VerifyConfig {
                samples: 100,
                radius: 0.5,
                tolerance: 1e-9,
                seed: 11,
            },
        )
        .unwrap();
        // Diagnostic contract only: the report exists and is well-formed.
        assert_eq!(report.per_layer.len(), net.depth());
        for l in &report.per_layer {
            assert!(l.violations <= l.samples);
        }
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"per_layer\""));
        assert!(json.contains("\"adversary\""));
    }
}
