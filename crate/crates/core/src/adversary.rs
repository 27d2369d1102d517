//! Perturbation machinery: infinity-ball projection, multi-step input
//! attacks, and the decoupled (slack-variable) adversary update that only
//! propagates through the composite first layer.
//!
//! The slack variable is the loss gradient at the first-layer output. Once it
//! is frozen, an adversary step needs one first-layer forward and one
//! first-layer backward instead of whole-network passes; by the chain rule a
//! step with a freshly computed slack coincides exactly with a full-gradient
//! step.

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    first_layer_forward, first_layer_vjp, forward_sweep, vjp_sweep, Network,
};
use crate::error::{Error, Result};
use crate::hamiltonian::{kl_consistency, kl_grad_perturbed, LossFunction};
use crate::instrumentation::PropCounter;
use crate::numerics::{sample_uniform, Rng, Tensor};

/// Elementwise clamp of a perturbation into `[-epsilon, epsilon]`.
pub fn linf_project(eta: &Tensor, epsilon: f64) -> Result<Tensor> {
    if epsilon < 0.0 {
        return Err(Error::Argument(format!(
            "linf_project: negative epsilon {epsilon}"
        )));
    }
    Ok(Tensor::raw(
        eta.shape().to_vec(),
        eta.data().iter().map(|v| v.clamp(-epsilon, epsilon)).collect(),
    ))
}

/// Zero-preserving sign: -1, 0, or +1.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Ascent direction applied to a raw gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    RawGradient,
    Sign,
}

impl Direction {
    fn apply(self, g: &Tensor) -> Tensor {
        match self {
            Direction::RawGradient => g.clone(),
            Direction::Sign => {
                Tensor::raw(g.shape().to_vec(), g.data().iter().map(|&v| sign(v)).collect())
            }
        }
    }
}

/// Perturbation initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Zero,
    /// Uniform in `[-epsilon, epsilon]` per coordinate.
    Uniform,
}

/// Parameters of a multi-step input attack.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    pub step_size: f64,
    pub epsilon: f64,
    pub direction: Direction,
    pub init: InitKind,
    pub project_each_step: bool,
}

impl AttackConfig {
    /// Sign steps with per-step projection: the configuration used for
    /// training and evaluation.
    pub fn signed(steps: usize, step_size: f64, epsilon: f64) -> Self {
        Self {
            steps,
            step_size,
            epsilon,
            direction: Direction::Sign,
            init: InitKind::Zero,
            project_each_step: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Config {
                field: "epsilon",
                message: format!("must be >= 0, got {}", self.epsilon),
            });
        }
        if self.step_size < 0.0 {
            return Err(Error::Config {
                field: "step_size",
                message: format!("must be >= 0, got {}", self.step_size),
            });
        }
        Ok(())
    }
}

/// Batched input perturbation constrained to the infinity ball of radius
/// `epsilon`. Feasibility is enforced on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    eta: Vec<Tensor>,
    epsilon: f64,
}

impl Perturbation {
    /// Projects the given perturbations into the ball and wraps them.
    pub fn new(eta: Vec<Tensor>, epsilon: f64) -> Result<Self> {
        let eta = eta
            .iter()
            .map(|e| linf_project(e, epsilon))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { eta, epsilon })
    }

    pub fn zeros(batch: usize, dim: usize, epsilon: f64) -> Self {
        Self {
            eta: (0..batch).map(|_| Tensor::zeros(&[dim])).collect(),
            epsilon,
        }
    }

    pub fn uniform(batch: usize, dim: usize, epsilon: f64, rng: &mut Rng) -> Result<Self> {
        let eta = (0..batch)
            .map(|_| sample_uniform(rng, &[dim], -epsilon, epsilon))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { eta, epsilon })
    }

    pub fn init(kind: InitKind, batch: usize, dim: usize, epsilon: f64, rng: &mut Rng) -> Result<Self> {
        match kind {
            InitKind::Zero => Ok(Self::zeros(batch, dim, epsilon)),
            InitKind::Uniform => Self::uniform(batch, dim, epsilon, rng),
        }
    }

    pub fn eta(&self) -> &[Tensor] {
        &self.eta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn batch_size(&self) -> usize {
        self.eta.len()
    }

    /// `x_i + eta_i` per example.
    pub fn apply(&self, x0: &[Tensor]) -> Result<Vec<Tensor>> {
        if x0.len() != self.eta.len() {
            return Err(Error::Argument(format!(
                "perturbation batch {} vs input batch {}",
                self.eta.len(),
                x0.len()
            )));
        }
        x0.iter()
            .zip(&self.eta)
            .map(|(x, e)| x.add_scaled(e, 1.0))
            .collect()
    }

    /// Largest per-example infinity norm.
    pub fn max_norm_inf(&self) -> f64 {
        self.eta.iter().fold(0.0, |m, e| m.max(e.norm_inf()))
    }
}

/// Per-example and batch-aggregated outputs of one full loss pass.
#[derive(Debug, Clone)]
pub struct SlackPass {
    /// The slack variable: loss gradient at the composite-first-layer output
    /// per example; equals `-B` times the co-state at that boundary.
    pub slack: Vec<Tensor>,
    /// Per-layer parameter gradients of the summed (not averaged) loss,
    /// retained so the pass that refreshes the slack also contributes a
    /// weight update.
    pub theta_grads: Vec<Tensor>,
    /// Mean per-example loss of this pass.
    pub mean_loss: f64,
}

/// One full forward + backward at `x + eta`, returning the slack variable and
/// the weight gradients of the same pass.
pub fn compute_slack(
    net: &Network,
    loss: &LossFunction,
    x_plus_eta: &[Tensor],
    labels: &[usize],
    counter: &mut PropCounter,
) -> Result<SlackPass> {
    let traj = forward_sweep(net, x_plus_eta, counter)?;
    let mut total_loss = 0.0;
    let seeds = traj
        .final_states()
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            total_loss += loss.value(z, y)?;
            loss.grad(z, y)
        })
        .collect::<Result<Vec<_>>>()?;
    let back = vjp_sweep(net, &traj, &seeds, counter)?;
    Ok(SlackPass {
        slack: back.boundary_grads(net).to_vec(),
        theta_grads: back.theta_grads,
        mean_loss: total_loss / x_plus_eta.len().max(1) as f64,
    })
}

/// Multi-step projected attack maximizing the classification loss. Each
/// iteration costs one full forward and one full backward propagation.
pub fn pgd_attack(
    net: &Network,
    loss: &LossFunction,
    x0: &[Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut Rng,
    counter: &mut PropCounter,
) -> Result<Perturbation> {
    cfg.validate()?;
    let dim = net.input_dim();
    let mut eta: Vec<Tensor> = Perturbation::init(cfg.init, x0.len(), dim, cfg.epsilon, rng)?
        .eta()
        .to_vec();
    for _ in 0..cfg.steps {
        let x_adv: Vec<Tensor> = x0
            .iter()
            .zip(&eta)
            .map(|(x, e)| x.add_scaled(e, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let traj = forward_sweep(net, &x_adv, counter)?;
        let seeds = traj
            .final_states()
            .iter()
            .zip(labels)
            .map(|(z, &y)| loss.grad(z, y))
            .collect::<Result<Vec<_>>>()?;
        let back = vjp_sweep(net, &traj, &seeds, counter)?;
        for (e, g) in eta.iter_mut().zip(back.input_grads()) {
            let step = cfg.direction.apply(g);
            *e = e.add_scaled(&step, cfg.step_size)?;
            if cfg.project_each_step {
                *e = linf_project(e, cfg.epsilon)?;
            }
        }
    }
    Perturbation::new(eta, cfg.epsilon)
}

/// [`pgd_attack`] over fixed-size chunks of the batch, bounding trajectory
/// memory on large inputs. Per-example updates are independent and the rng
/// is consumed in example order, so the result is identical to the
/// whole-batch attack; the pass counters tick once per chunk instead of
/// once per batch.
#[allow(clippy::too_many_arguments)]
pub fn pgd_attack_chunked(
    net: &Network,
    loss: &LossFunction,
    x0: &[Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut Rng,
    counter: &mut PropCounter,
    chunk: usize,
) -> Result<Perturbation> {
    if chunk == 0 {
        return Err(Error::Argument("chunk must be >= 1".into()));
    }
    let mut eta = Vec::with_capacity(x0.len());
    for (xs, ys) in x0.chunks(chunk).zip(labels.chunks(chunk)) {
        let part = pgd_attack(net, loss, xs, ys, cfg, rng, counter)?;
        eta.extend(part.eta().iter().cloned());
    }
    Perturbation::new(eta, cfg.epsilon)
}

/// `n` adversary updates against a frozen slack variable. Each iteration
/// costs one first-layer forward and one first-layer backward only; the
/// full-propagation counters are untouched.
#[allow(clippy::too_many_arguments)]
pub fn yopo_inner_loop(
    net: &Network,
    x0: &[Tensor],
    eta: &Perturbation,
    slack: &[Tensor],
    steps: usize,
    step_size: f64,
    direction: Direction,
    project_each_step: bool,
    counter: &mut PropCounter,
) -> Result<Perturbation> {
    if steps == 0 {
        return Err(Error::Argument("yopo_inner_loop: steps must be >= 1".into()));
    }
    if slack.len() != x0.len() {
        return Err(Error::Argument("slack batch != input batch".into()));
    }
    let epsilon = eta.epsilon();
    let mut eta: Vec<Tensor> = eta.eta().to_vec();
    for _ in 0..steps {
        let x_adv: Vec<Tensor> = x0
            .iter()
            .zip(&eta)
            .map(|(x, e)| x.add_scaled(e, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let prefix = first_layer_forward(net, &x_adv, counter)?;
        let grads = first_layer_vjp(net, &prefix, slack, counter)?;
        for (e, g) in eta.iter_mut().zip(&grads) {
            let step = direction.apply(g);
            *e = e.add_scaled(&step, step_size)?;
            if project_each_step {
                *e = linf_project(e, epsilon)?;
            }
        }
    }
    Perturbation::new(eta, epsilon)
}

/// Multi-step attack maximizing the consistency loss
/// `KL(softmax f(x) || softmax f(x'))`; returns the adversarial inputs `x'`.
///
/// The clean logits are computed once, folded into the first iteration by
/// concatenating the clean and adversarial halves into a single pass, so the
/// attack costs exactly `steps` full forward/backward propagations.
///
/// `x' = x` is a critical point of the consistency loss, so zero
/// initialization leaves the iterate in place; uniform initialization is
/// what makes this attack move.
pub fn trades_attack(
    net: &Network,
    x0: &[Tensor],
    cfg: &AttackConfig,
    rng: &mut Rng,
    counter: &mut PropCounter,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    if cfg.direction != Direction::Sign {
        return Err(Error::Config {
            field: "direction",
            message: "consistency attack uses sign steps".into(),
        });
    }
    let dim = net.input_dim();
    let init = Perturbation::init(cfg.init, x0.len(), dim, cfg.epsilon, rng)?;
    let mut x_adv = init.apply(x0)?;
    if cfg.steps == 0 {
        return Ok(x_adv);
    }

    let mut clean_logits: Vec<Tensor> = Vec::new();
    for step in 0..cfg.steps {
        let grads: Vec<Tensor> = if step == 0 {
            // Joint pass over [x; x'] primes the clean logits at the cost of
            // a single minibatch propagation.
            let joint: Vec<Tensor> = x0.iter().chain(x_adv.iter()).cloned().collect();
            let traj = forward_sweep(net, &joint, counter)?;
            let outs = traj.final_states();
            clean_logits = outs[..x0.len()].to_vec();
            let mut seeds = vec![Tensor::zeros(&[net.output_dim()]); x0.len()];
            for (i, z_adv) in outs[x0.len()..].iter().enumerate() {
                seeds.push(kl_grad_perturbed(&clean_logits[i], z_adv)?);
            }
            let back = vjp_sweep(net, &traj, &seeds, counter)?;
            back.input_grads()[x0.len()..].to_vec()
        } else {
            let traj = forward_sweep(net, &x_adv, counter)?;
            let seeds = traj
                .final_states()
                .iter()
                .zip(&clean_logits)
                .map(|(z_adv, z_ref)| kl_grad_perturbed(z_ref, z_adv))
                .collect::<Result<Vec<_>>>()?;
            let back = vjp_sweep(net, &traj, &seeds, counter)?;
            back.input_grads().to_vec()
        };
        for (i, g) in grads.iter().enumerate() {
            let step_dir = cfg.direction.apply(g);
            let moved = x_adv[i].add_scaled(&step_dir, cfg.step_size)?;
            // Project the displacement from the clean input back into the ball.
            let eta = moved.add_scaled(&x0[i], -1.0)?;
            x_adv[i] = x0[i].add_scaled(&linf_project(&eta, cfg.epsilon)?, 1.0)?;
        }
    }
    Ok(x_adv)
}

/// Mean consistency loss between clean and adversarial logits; used by the
/// trade-off trainers and their tests.
pub fn mean_kl_consistency(
    net: &Network,
    x0: &[Tensor],
    x_adv: &[Tensor],
    counter: &mut PropCounter,
) -> Result<f64> {
    let joint: Vec<Tensor> = x0.iter().chain(x_adv.iter()).cloned().collect();
    let traj = forward_sweep(net, &joint, counter)?;
    let outs = traj.final_states();
    let mut total = 0.0;
    for i in 0..x0.len() {
        total += kl_consistency(&outs[i], &outs[x0.len() + i])?;
    }
    Ok(total / x0.len().max(1) as f64)
}
