//! Trainers for the min-max objective: natural training, multi-step attack
//! training, the decoupled slack-variable trainers, replay-style training,
//! and the consistency-loss (trade-off) variants, plus momentum SGD and
//! robust evaluation.
//!
//! Propagation accounting per minibatch:
//!   - natural: 1 full forward/backward.
//!   - pgd / trades with `r` attack steps: r + 1.
//!   - yopo / trades_yopo with m rounds of n first-layer steps: m + 1 full
//!     plus m*n first-layer passes. The extra full pass over the headline m
//!     primes the first slack variable.
//!   - free with m replays: m + 1 full plus m first-layer passes.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adversary::{
    pgd_attack, pgd_attack_chunked, trades_attack, yopo_inner_loop, AttackConfig, Direction,
    InitKind, Perturbation,
};
use crate::data::{batches, Dataset};
use crate::dynamics::{forward_sweep, vjp_sweep, Network};
use crate::error::{Error, Result};
use crate::hamiltonian::{
    kl_consistency, kl_grad_perturbed, kl_grad_reference, LossFunction, Regularizer,
};
use crate::instrumentation::{count_report, CountAudit, PropCounter};
use crate::numerics::{Rng, Tensor};

/// Training method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Natural,
    Pgd,
    Yopo,
    Free,
    Trades,
    TradesYopo,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Natural => "natural",
            Method::Pgd => "pgd",
            Method::Yopo => "yopo",
            Method::Free => "free",
            Method::Trades => "trades",
            Method::TradesYopo => "trades_yopo",
        };
        f.write_str(s)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(Method::Natural),
            "pgd" => Ok(Method::Pgd),
            "yopo" => Ok(Method::Yopo),
            "free" => Ok(Method::Free),
            "trades" => Ok(Method::Trades),
            "trades_yopo" | "trades-yopo" => Ok(Method::TradesYopo),
            other => Err(Error::Config {
                field: "method",
                message: format!("unknown method `{other}`"),
            }),
        }
    }
}

/// Full training configuration; echoed verbatim into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// Outer rounds (yopo/free/trades_yopo).
    pub m: Option<usize>,
    /// First-layer steps per round (yopo/trades_yopo).
    pub n: Option<usize>,
    /// Attack steps (pgd/trades).
    pub r: Option<usize>,
    /// Adversary step size.
    pub alpha1: f64,
    /// Learning rate.
    pub alpha2: f64,
    /// `(epoch, multiplier)` pairs; the effective rate at epoch `e` is
    /// `alpha2` times the product of multipliers with epoch <= `e`.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub epsilon: f64,
    /// Consistency-loss balance (trades/trades_yopo).
    pub lambda: f64,
    pub seed: u64,
    /// Apply the weight update once per minibatch (true) or after every
    /// round (false). Only the yopo/free family consults this.
    pub delayed_update: bool,
    pub direction: Direction,
    pub init: InitKind,
    pub project_each_step: bool,
    pub loss: LossFunction,
    /// Steps of the per-epoch robust evaluation attack; 0 skips it.
    pub eval_attack_steps: usize,
    /// Step size for the evaluation attack; defaults to `epsilon / 4`.
    pub eval_attack_step_size: Option<f64>,
}

impl TrainConfig {
    /// Defaults: batch 256, momentum 0.9, weight decay 5e-4, lambda 1,
    /// sign steps with per-step projection and uniform initialization.
    pub fn new(method: Method) -> Self {
        Self {
            method,
            m: None,
            n: None,
            r: None,
            alpha1: 0.01,
            alpha2: 0.1,
            lr_schedule: Vec::new(),
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 256,
            epochs: 1,
            epsilon: 0.3,
            lambda: 1.0,
            seed: 0,
            delayed_update: !matches!(method, Method::Free),
            direction: Direction::Sign,
            init: InitKind::Uniform,
            project_each_step: true,
            loss: LossFunction::SoftmaxCrossEntropy,
            eval_attack_steps: 20,
            eval_attack_step_size: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |field: &'static str, message: String| Err(Error::Config { field, message });
        let need = |field: &'static str, v: Option<usize>| match v {
            Some(x) if x >= 1 => Ok(()),
            Some(x) => cfg_err(field, format!("must be >= 1, got {x}")),
            None => cfg_err(field, format!("required for method {}", self.method)),
        };
        let forbid = |field: &'static str, v: Option<usize>| match v {
            None => Ok(()),
            Some(_) => cfg_err(field, format!("not applicable to method {}", self.method)),
        };
        match self.method {
            Method::Natural => {
                forbid("m", self.m)?;
                forbid("n", self.n)?;
                forbid("r", self.r)?;
            }
            Method::Pgd | Method::Trades => {
                need("r", self.r)?;
                forbid("m", self.m)?;
                forbid("n", self.n)?;
            }
            Method::Yopo | Method::TradesYopo => {
                need("m", self.m)?;
                need("n", self.n)?;
                forbid("r", self.r)?;
            }
            Method::Free => {
                need("m", self.m)?;
                forbid("n", self.n)?;
                forbid("r", self.r)?;
            }
        }
        if self.batch_size == 0 {
            return cfg_err("batch_size", "must be >= 1".into());
        }
        if self.epsilon < 0.0 {
            return cfg_err("epsilon", format!("must be >= 0, got {}", self.epsilon));
        }
        if self.alpha1 < 0.0 {
            return cfg_err("alpha1", format!("must be >= 0, got {}", self.alpha1));
        }
        if self.alpha2 < 0.0 {
            return cfg_err("alpha2", format!("must be >= 0, got {}", self.alpha2));
        }
        if self.momentum < 0.0 || self.momentum >= 1.0 {
            return cfg_err("momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return cfg_err("weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        if self.lambda <= 0.0 {
            return cfg_err("lambda", format!("must be > 0, got {}", self.lambda));
        }
        if !self.lr_schedule.windows(2).all(|w| w[0].0 < w[1].0) {
            return cfg_err("lr_schedule", "epochs must be strictly increasing".into());
        }
        if self.method == Method::Trades && self.direction == Direction::RawGradient {
            return cfg_err("direction", "the consistency attack uses sign steps".into());
        }
        Ok(())
    }

    /// Attack settings used by the multi-step trainers.
    fn attack_config(&self, steps: usize) -> AttackConfig {
        AttackConfig {
            steps,
            step_size: self.alpha1,
            epsilon: self.epsilon,
            direction: self.direction,
            init: self.init,
            project_each_step: self.project_each_step,
        }
    }

    /// The robust-evaluation attack (sign steps, zero init), or `None` when
    /// disabled.
    pub fn eval_attack(&self) -> Option<AttackConfig> {
        if self.eval_attack_steps == 0 {
            return None;
        }
        Some(AttackConfig {
            steps: self.eval_attack_steps,
            step_size: self.eval_attack_step_size.unwrap_or(self.epsilon / 4.0),
            epsilon: self.epsilon,
            direction: Direction::Sign,
            init: InitKind::Zero,
            project_each_step: true,
        })
    }
}

/// Effective learning rate at `epoch` under the multiplicative schedule.
pub fn effective_lr(base: f64, schedule: &[(usize, f64)], epoch: usize) -> f64 {
    base * schedule
        .iter()
        .filter(|(e, _)| *e <= epoch)
        .map(|(_, m)| m)
        .product::<f64>()
}

/// Momentum buffers for [`sgd_update`].
#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(&[p.len()])).collect(),
        }
    }
}

/// `v <- momentum v + grad + weight_decay theta; theta <- theta - lr v`.
pub fn sgd_update(
    params: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut SgdState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Argument("sgd_update: mismatched layer counts".into()));
    }
    for ((theta, grad), vel) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if theta.len() != grad.len() {
            return Err(Error::shape("sgd_update", theta.shape(), grad.shape()));
        }
        for i in 0..theta.len() {
            let g = grad.data()[i] + weight_decay * theta.data()[i];
            let v = momentum * vel.data()[i] + g;
            vel.data_mut()[i] = v;
            theta.data_mut()[i] -= lr * v;
        }
    }
    Ok(())
}

/// Batch-mean loss and its parameter gradients (including the regularizer)
/// in one full forward/backward pass. This is the plain descent route the
/// Hamiltonian-ascent direction is tested against.
pub fn loss_gradients(
    net: &Network,
    loss: &LossFunction,
    reg: &Regularizer,
    x: &[Tensor],
    labels: &[usize],
    counter: &mut PropCounter,
) -> Result<(f64, Vec<Tensor>)> {
    let traj = forward_sweep(net, x, counter)?;
    let b = x.len() as f64;
    let mut total = 0.0;
    let seeds = traj
        .final_states()
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            total += loss.value(z, y)?;
            Ok(loss.grad(z, y)?.scale(1.0 / b))
        })
        .collect::<Result<Vec<_>>>()?;
    let back = vjp_sweep(net, &traj, &seeds, counter)?;
    let grads = back
        .theta_grads
        .iter()
        .zip(net.params())
        .map(|(g, theta)| g.add_scaled(&reg.grad_theta(theta), 1.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((total / b, grads))
}

/// Joint clean/adversarial weight pass for the trade-off objective
/// `loss(f(x), y) + KL(f(x) || f(x')) / lambda`, costing one full
/// forward/backward over the concatenated batch.
fn tradeoff_gradients(
    net: &Network,
    loss: &LossFunction,
    x: &[Tensor],
    x_adv: &[Tensor],
    labels: &[usize],
    lambda: f64,
    counter: &mut PropCounter,
) -> Result<(f64, Vec<Tensor>)> {
    let b = x.len();
    let joint: Vec<Tensor> = x.iter().chain(x_adv.iter()).cloned().collect();
    let traj = forward_sweep(net, &joint, counter)?;
    let outs = traj.final_states();
    let scale = 1.0 / b as f64;
    let mut total = 0.0;
    let mut seeds = Vec::with_capacity(2 * b);
    for i in 0..b {
        let (z_clean, z_adv) = (&outs[i], &outs[b + i]);
        total += loss.value(z_clean, labels[i])? + kl_consistency(z_clean, z_adv)? / lambda;
        let g = loss
            .grad(z_clean, labels[i])?
            .add_scaled(&kl_grad_reference(z_clean, z_adv)?, 1.0 / lambda)?;
        seeds.push(g.scale(scale));
    }
    for i in 0..b {
        let (z_clean, z_adv) = (&outs[i], &outs[b + i]);
        seeds.push(kl_grad_perturbed(z_clean, z_adv)?.scale(scale / lambda));
    }
    let back = vjp_sweep(net, &traj, &seeds, counter)?;
    Ok((total * scale, back.theta_grads))
}

/// One slack pass on the consistency loss: joint forward over clean and
/// perturbed halves, backward seeded on the perturbed half only, returning
/// the consistency-loss gradient at the first-layer boundary.
fn consistency_slack(
    net: &Network,
    x: &[Tensor],
    x_adv: &[Tensor],
    counter: &mut PropCounter,
) -> Result<Vec<Tensor>> {
    let b = x.len();
    let joint: Vec<Tensor> = x.iter().chain(x_adv.iter()).cloned().collect();
    let traj = forward_sweep(net, &joint, counter)?;
    let outs = traj.final_states();
    let mut seeds = vec![Tensor::zeros(&[net.output_dim()]); b];
    for i in 0..b {
        seeds.push(kl_grad_perturbed(&outs[i], &outs[b + i])?);
    }
    let back = vjp_sweep(net, &traj, &seeds, counter)?;
    Ok(back.boundary_grads(net)[b..].to_vec())
}

/// Per-epoch metrics row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub loss: f64,
    /// Cumulative full forward propagations at the end of the epoch.
    pub full_props: u64,
    /// Cumulative first-layer forward propagations.
    pub first_layer_props: u64,
    /// Wall-clock; excluded from determinism guarantees.
    pub wall_ms: f64,
}

/// Everything a training run produces besides the network itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub counter: PropCounter,
    pub audit: CountAudit,
    pub minibatches: u64,
    pub total_wall_ms: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,clean_acc,robust_acc,loss,full_props,first_layer_props,wall_ms";

impl RunReport {
    /// Plot-ready per-epoch metrics (accuracy against cumulative
    /// propagation counts).
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.clean_acc, e.robust_acc, e.loss, e.full_props, e.first_layer_props,
                e.wall_ms
            ));
        }
        out
    }

    /// A copy with every wall-clock field zeroed; two runs of the same
    /// config compare byte-identical on this projection.
    pub fn deterministic(&self) -> RunReport {
        let mut r = self.clone();
        r.total_wall_ms = 0.0;
        r.counter.wall_ms.clear();
        for e in &mut r.epochs {
            e.wall_ms = 0.0;
        }
        r
    }
}

/// Clean and attacked accuracy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalReport {
    pub clean_acc: f64,
    pub robust_acc: f64,
}

fn argmax(t: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in t.data().iter().enumerate() {
        if v > t.data()[best] {
            best = i;
        }
    }
    best
}

// Evaluation proceeds over fixed-size slices so trajectory memory stays
// bounded on large datasets; per-example results are unchanged.
const EVAL_CHUNK: usize = 512;

fn correct_count(
    net: &Network,
    x: &[Tensor],
    labels: &[usize],
    counter: &mut PropCounter,
) -> Result<usize> {
    let mut correct = 0;
    for (xs, ys) in x.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let traj = forward_sweep(net, xs, counter)?;
        correct += traj
            .final_states()
            .iter()
            .zip(ys)
            .filter(|(z, &y)| argmax(z) == y)
            .count();
    }
    Ok(correct)
}

/// Accuracy without perturbation and under the given attack. With no attack
/// (or an empty ball) the robust accuracy equals the clean accuracy.
pub fn evaluate(
    net: &Network,
    ds: &Dataset,
    loss: &LossFunction,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<EvalReport> {
    if ds.is_empty() {
        return Ok(EvalReport {
            clean_acc: 0.0,
            robust_acc: 0.0,
        });
    }
    let mut scratch = PropCounter::new();
    let n = ds.len() as f64;
    let clean_acc = correct_count(net, &ds.inputs, &ds.labels, &mut scratch)? as f64 / n;
    let robust_acc = match attack {
        None => clean_acc,
        Some(cfg) => {
            let mut rng = Rng::new(seed);
            let eta = pgd_attack_chunked(
                net,
                loss,
                &ds.inputs,
                &ds.labels,
                cfg,
                &mut rng,
                &mut scratch,
                EVAL_CHUNK,
            )?;
            let x_adv = eta.apply(&ds.inputs)?;
            correct_count(net, &x_adv, &ds.labels, &mut scratch)? as f64 / n
        }
    };
    Ok(EvalReport {
        clean_acc,
        robust_acc,
    })
}

// Stream labels for deriving independent rng streams from the run seed.
const STREAM_ATTACK: u64 = 0x41_54_54_4b;
const STREAM_EVAL: u64 = 0x45_56_41_4c;

struct MinibatchOutcome {
    mean_loss: f64,
}

fn check_feasible(eta: &Perturbation, epsilon: f64) {
    debug_assert!(
        eta.max_norm_inf() <= epsilon,
        "infeasible perturbation escaped projection"
    );
}

#[allow(clippy::too_many_arguments)]
fn train_minibatch(
    net: &mut Network,
    config: &TrainConfig,
    x: &[Tensor],
    labels: &[usize],
    lr: f64,
    sgd: &mut SgdState,
    attack_rng: &mut Rng,
    counter: &mut PropCounter,
) -> Result<MinibatchOutcome> {
    let b = x.len() as f64;
    // Weight decay is applied by the optimizer, not as a loss regularizer.
    // All loss-side weight passes share one arithmetic: raw per-example
    // seeds through the backward sweep, batch scaling applied to the summed
    // gradients. This keeps the degenerate-ball trainers bit-identical to
    // natural training.
    match config.method {
        Method::Natural => {
            let pass = crate::adversary::compute_slack(net, &config.loss, x, labels, counter)?;
            let grads: Vec<Tensor> = pass.theta_grads.iter().map(|g| g.scale(1.0 / b)).collect();
            sgd_update(net.params_mut(), &grads, lr, config.momentum, config.weight_decay, sgd)?;
            Ok(MinibatchOutcome {
                mean_loss: pass.mean_loss,
            })
        }
        Method::Pgd => {
            let cfg = config.attack_config(config.r.expect("validated"));
            let eta = pgd_attack(net, &config.loss, x, labels, &cfg, attack_rng, counter)?;
            check_feasible(&eta, config.epsilon);
            let x_adv = eta.apply(x)?;
            let pass =
                crate::adversary::compute_slack(net, &config.loss, &x_adv, labels, counter)?;
            let grads: Vec<Tensor> = pass.theta_grads.iter().map(|g| g.scale(1.0 / b)).collect();
            sgd_update(net.params_mut(), &grads, lr, config.momentum, config.weight_decay, sgd)?;
            Ok(MinibatchOutcome {
                mean_loss: pass.mean_loss,
            })
        }
        Method::Yopo => {
            let m = config.m.expect("validated");
            let n = config.n.expect("validated");
            let mut eta = Perturbation::init(
                config.init,
                x.len(),
                net.input_dim(),
                config.epsilon,
                attack_rng,
            )?;
            // Pass 0 primes the slack; its weight gradients are not used.
            let mut pass =
                crate::adversary::compute_slack(net, &config.loss, &eta.apply(x)?, labels, counter)?;
            let mut accumulated: Option<Vec<Tensor>> = None;
            let mut mean_loss = pass.mean_loss;
            for _ in 1..=m {
                eta = yopo_inner_loop(
                    net,
                    x,
                    &eta,
                    &pass.slack,
                    n,
                    config.alpha1,
                    config.direction,
                    config.project_each_step,
                    counter,
                )?;
                check_feasible(&eta, config.epsilon);
                // The pass at the post-update perturbation yields both this
                // round's weight gradient and the next round's slack.
                pass = crate::adversary::compute_slack(
                    net,
                    &config.loss,
                    &eta.apply(x)?,
                    labels,
                    counter,
                )?;
                mean_loss = pass.mean_loss;
                let grad_j: Vec<Tensor> =
                    pass.theta_grads.iter().map(|g| g.scale(1.0 / b)).collect();
                if config.delayed_update {
                    accumulated = Some(match accumulated {
                        None => grad_j,
                        Some(acc) => acc
                            .iter()
                            .zip(&grad_j)
                            .map(|(a, g)| a.add_scaled(g, 1.0))
                            .collect::<Result<Vec<_>>>()?,
                    });
                } else {
                    sgd_update(
                        net.params_mut(),
                        &grad_j,
                        lr,
                        config.momentum,
                        config.weight_decay,
                        sgd,
                    )?;
                }
            }
            if let Some(update) = accumulated {
                sgd_update(
                    net.params_mut(),
                    &update,
                    lr,
                    config.momentum,
                    config.weight_decay,
                    sgd,
                )?;
            }
            Ok(MinibatchOutcome { mean_loss })
        }
        Method::Free => {
            // Replay-style reference loop: one adversary step and one weight
            // contribution per replay, sharing each full pass between them.
            let m = config.m.expect("validated");
            let mut eta = Perturbation::init(
                config.init,
                x.len(),
                net.input_dim(),
                config.epsilon,
                attack_rng,
            )?;
            let mut pass =
                crate::adversary::compute_slack(net, &config.loss, &eta.apply(x)?, labels, counter)?;
            let mut accumulated: Option<Vec<Tensor>> = None;
            let mut mean_loss = pass.mean_loss;
            for _ in 1..=m {
                eta = yopo_inner_loop(
                    net,
                    x,
                    &eta,
                    &pass.slack,
                    1,
                    config.alpha1,
                    config.direction,
                    config.project_each_step,
                    counter,
                )?;
                check_feasible(&eta, config.epsilon);
                pass = crate::adversary::compute_slack(
                    net,
                    &config.loss,
                    &eta.apply(x)?,
                    labels,
                    counter,
                )?;
                mean_loss = pass.mean_loss;
                let grad_j: Vec<Tensor> =
                    pass.theta_grads.iter().map(|g| g.scale(1.0 / b)).collect();
                if config.delayed_update {
                    accumulated = Some(match accumulated {
                        None => grad_j,
                        Some(acc) => acc
                            .iter()
                            .zip(&grad_j)
                            .map(|(a, g)| a.add_scaled(g, 1.0))
                            .collect::<Result<Vec<_>>>()?,
                    });
                } else {
                    sgd_update(
                        net.params_mut(),
                        &grad_j,
                        lr,
                        config.momentum,
                        config.weight_decay,
                        sgd,
                    )?;
                }
            }
            if let Some(update) = accumulated {
                sgd_update(
                    net.params_mut(),
                    &update,
                    lr,
                    config.momentum,
                    config.weight_decay,
                    sgd,
                )?;
            }
            Ok(MinibatchOutcome { mean_loss })
        }
        Method::Trades => {
            let r = config.r.expect("validated");
            let cfg = config.attack_config(r);
            let x_adv = trades_attack(net, x, &cfg, attack_rng, counter)?;
            let (mean_loss, grads) =
                tradeoff_gradients(net, &config.loss, x, &x_adv, labels, config.lambda, counter)?;
            sgd_update(net.params_mut(), &grads, lr, config.momentum, config.weight_decay, sgd)?;
            Ok(MinibatchOutcome { mean_loss })
        }
        Method::TradesYopo => {
            let m = config.m.expect("validated");
            let n = config.n.expect("validated");
            let mut eta = Perturbation::init(
                config.init,
                x.len(),
                net.input_dim(),
                config.epsilon,
                attack_rng,
            )?;
            for _ in 1..=m {
                let slack = consistency_slack(net, x, &eta.apply(x)?, counter)?;
                eta = yopo_inner_loop(
                    net,
                    x,
                    &eta,
                    &slack,
                    n,
                    config.alpha1,
                    config.direction,
                    config.project_each_step,
                    counter,
                )?;
                check_feasible(&eta, config.epsilon);
            }
            // Only the final perturbation feeds the weight update;
            // accumulating the intermediate rounds does not help here.
            let x_adv = eta.apply(x)?;
            let (mean_loss, grads) =
                tradeoff_gradients(net, &config.loss, x, &x_adv, labels, config.lambda, counter)?;
            sgd_update(net.params_mut(), &grads, lr, config.momentum, config.weight_decay, sgd)?;
            Ok(MinibatchOutcome { mean_loss })
        }
    }
}

/// Trains a network from `net_init` under `config`. Per-epoch accuracies are
/// measured on `eval_ds` when given, otherwise on the training set; the
/// evaluation passes use a scratch counter so the reported counts stay
/// auditable against the per-minibatch closed forms.
pub fn train(
    config: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: Option<&Dataset>,
    net_init: &Network,
) -> Result<(Network, RunReport)> {
    config.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Argument("empty training dataset".into()));
    }
    if train_ds.input_dim() != net_init.input_dim() {
        return Err(Error::shape(
            "train dataset vs network",
            &[net_init.input_dim()],
            &[train_ds.input_dim()],
        ));
    }
    let started = Instant::now();
    let mut net = net_init.clone();
    let mut sgd = SgdState::zeros_like(net.params());
    let mut counter = PropCounter::new();
    let master = Rng::new(config.seed);
    let eval_set = eval_ds.unwrap_or(train_ds);
    let eval_attack = config.eval_attack();

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut minibatches = 0u64;
    for epoch in 0..config.epochs {
        let epoch_started = Instant::now();
        let lr = effective_lr(config.alpha2, &config.lr_schedule, epoch);
        let mut loss_sum = 0.0;
        let mut batches_seen = 0u64;
        for (mb, indices) in batches(train_ds, config.batch_size, config.seed, epoch)?
            .iter()
            .enumerate()
        {
            let (x, y) = train_ds.select(indices);
            let mut attack_rng = master.derive_path(&[STREAM_ATTACK, epoch as u64, mb as u64]);
            let outcome =
                train_minibatch(&mut net, config, &x, &y, lr, &mut sgd, &mut attack_rng, &mut counter)?;
            loss_sum += outcome.mean_loss;
            batches_seen += 1;
        }
        minibatches += batches_seen;
        let train_ms = epoch_started.elapsed().as_secs_f64() * 1e3;
        counter.add_wall_ms("train", train_ms);

        let eval_started = Instant::now();
        let eval_seed = master.derive_path(&[STREAM_EVAL, epoch as u64]).next_u64();
        let eval = evaluate(&net, eval_set, &config.loss, eval_attack.as_ref(), eval_seed)?;
        counter.add_wall_ms("eval", eval_started.elapsed().as_secs_f64() * 1e3);

        epochs.push(EpochMetrics {
            epoch,
            clean_acc: eval.clean_acc,
            robust_acc: eval.robust_acc,
            loss: loss_sum / batches_seen.max(1) as f64,
            full_props: counter.full_forward,
            first_layer_props: counter.first_layer_forward,
            wall_ms: epoch_started.elapsed().as_secs_f64() * 1e3,
        });
    }

    let audit = count_report(&counter, config, minibatches);
    let report = RunReport {
        config: config.clone(),
        seed: config.seed,
        epochs,
        counter: counter.snapshot(),
        audit,
        minibatches,
        total_wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticKind, SyntheticSpec};
    use crate::dynamics::Activation;

    #[test]
    fn sgd_plain_step() {
        let mut params = vec![Tensor::vector(vec![5.0, -3.0])];
        let grads = vec![Tensor::vector(vec![10.0, -6.0])];
        let mut state = SgdState::zeros_like(&params);
        sgd_update(&mut params, &grads, 0.1, 0.0, 0.0, &mut state).unwrap();
        assert!((params[0].data()[0] - 4.0).abs() <= 1e-15);
        assert!((params[0].data()[1] + 2.4).abs() <= 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_identity() {
        let mut params = vec![Tensor::vector(vec![2.0, 3.0])];
        let grads = vec![Tensor::zeros(&[2])];
        let mut state = SgdState::zeros_like(&params);
        sgd_update(&mut params, &grads, 0.5, 0.0, 0.0, &mut state).unwrap();
        assert_eq!(params[0].data(), &[2.0, 3.0]);
    }

    #[test]
    fn sgd_momentum_recursion() {
        // Two steps at momentum 0.9, lr 1, constant gradient g:
        // theta_2 = theta_0 - g - 1.9 g.
        let g = 0.75;
        let mut params = vec![Tensor::vector(vec![1.0])];
        let grads = vec![Tensor::vector(vec![g])];
        let mut state = SgdState::zeros_like(&params);
        sgd_update(&mut params, &grads, 1.0, 0.9, 0.0, &mut state).unwrap();
        sgd_update(&mut params, &grads, 1.0, 0.9, 0.0, &mut state).unwrap();
        let expected = 1.0 - g - 1.9 * g;
        assert!((params[0].data()[0] - expected).abs() <= 1e-12);
    }

    #[test]
    fn lr_schedule_is_cumulative_product() {
        let schedule = vec![(2, 0.1), (5, 0.5)];
        assert_eq!(effective_lr(1.0, &schedule, 0), 1.0);
        assert_eq!(effective_lr(1.0, &schedule, 2), 0.1);
        assert_eq!(effective_lr(1.0, &schedule, 4), 0.1);
        assert!((effective_lr(1.0, &schedule, 5) - 0.05).abs() <= 1e-15);
    }

    #[test]
    fn config_validation_rejects_mismatched_params() {
        let mut cfg = TrainConfig::new(Method::Pgd);
        cfg.r = Some(5);
        cfg.n = Some(3);
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "n"),
            other => panic!("expected config error, got {other:?}"),
        }

        let cfg = TrainConfig::new(Method::Yopo);
        assert!(cfg.validate().is_err(), "missing m/n must fail");

        let mut cfg = TrainConfig::new(Method::Natural);
        cfg.r = Some(1);
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::new(Method::Trades);
        cfg.r = Some(3);
        cfg.direction = Direction::RawGradient;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "direction"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::TwoGaussians,
            dim: 3,
            examples: 24,
            margin: 2.0,
            noise: 0.4,
            seed,
        })
        .unwrap()
    }

    fn tiny_net(seed: u64) -> Network {
        let mut rng = Rng::new(seed);
        Network::random_mlp(&[3, 6, 2], Activation::Tanh, &mut rng).unwrap()
    }

    fn desk_config(method: Method) -> TrainConfig {
        let mut cfg = TrainConfig::new(method);
        cfg.batch_size = 8;
        cfg.epochs = 2;
        cfg.alpha1 = 0.05;
        cfg.alpha2 = 0.05;
        cfg.epsilon = 0.1;
        cfg.seed = 7;
        cfg.eval_attack_steps = 2;
        cfg
    }

    #[test]
    fn empty_ball_pgd_equals_natural_bit_exactly() {
        let ds = tiny_dataset(1);
        let net0 = tiny_net(2);

        let natural = desk_config(Method::Natural);
        let mut pgd = desk_config(Method::Pgd);
        pgd.r = Some(4);
        pgd.epsilon = 0.0;
        let mut natural = natural;
        natural.epsilon = 0.0;

        let (net_a, rep_a) = train(&natural, &ds, None, &net0).unwrap();
        let (net_b, rep_b) = train(&pgd, &ds, None, &net0).unwrap();
        assert_eq!(net_a.params(), net_b.params());
        for (ea, eb) in rep_a.epochs.iter().zip(&rep_b.epochs) {
            assert_eq!(ea.clean_acc, eb.clean_acc);
            assert_eq!(ea.robust_acc, eb.robust_acc);
            assert_eq!(ea.loss, eb.loss);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset(3);
        let net0 = tiny_net(4);
        let mut cfg = desk_config(Method::Yopo);
        cfg.m = Some(3);
        cfg.n = Some(2);
        let (net_a, rep_a) = train(&cfg, &ds, None, &net0).unwrap();
        let (net_b, rep_b) = train(&cfg, &ds, None, &net0).unwrap();
        assert_eq!(net_a.params(), net_b.params());
        let csv_a = rep_a.deterministic().metrics_csv();
        let csv_b = rep_b.deterministic().metrics_csv();
        assert_eq!(csv_a, csv_b);
        let json_a = serde_json::to_string(&rep_a.deterministic()).unwrap();
        let json_b = serde_json::to_string(&rep_b.deterministic()).unwrap();
        assert_eq!(json_a, json_b);
    }

    #[test]
    fn counters_match_closed_forms_for_each_method() {
        let ds = tiny_dataset(5);
        let net0 = tiny_net(6);
        let cases: Vec<TrainConfig> = vec![
            desk_config(Method::Natural),
            {
                let mut c = desk_config(Method::Pgd);
                c.r = Some(3);
                c
            },
            {
                let mut c = desk_config(Method::Yopo);
                c.m = Some(4);
                c.n = Some(2);
                c
            },
            {
                let mut c = desk_config(Method::Free);
                c.m = Some(3);
                c
            },
            {
                let mut c = desk_config(Method::Trades);
                c.r = Some(2);
                c
            },
            {
                let mut c = desk_config(Method::TradesYopo);
                c.m = Some(2);
                c.n = Some(3);
                c
            },
        ];
        for cfg in cases {
            let (_, report) = train(&cfg, &ds, None, &net0).unwrap();
            assert!(
                report.audit.all_pass,
                "method {}: {:?}",
                cfg.method, report.audit
            );
        }
    }

    #[test]
    fn free_equals_yopo_m_1_without_delayed_update() {
        let ds = tiny_dataset(7);
        let net0 = tiny_net(8);
        let mut free = desk_config(Method::Free);
        free.m = Some(3);
        free.delayed_update = false;
        let mut yopo = desk_config(Method::Yopo);
        yopo.m = Some(3);
        yopo.n = Some(1);
        yopo.delayed_update = false;

        let (net_f, _) = train(&free, &ds, None, &net0).unwrap();
        let (net_y, _) = train(&yopo, &ds, None, &net0).unwrap();
        for (a, b) in net_f.params().iter().zip(net_y.params()) {
            let diff = a.add_scaled(b, -1.0).unwrap().norm_inf();
            assert!(diff <= 1e-12, "diff {diff}");
        }
    }

    #[test]
    fn evaluate_without_attack_reports_equal_accuracies() {
        let ds = tiny_dataset(9);
        let net = tiny_net(10);
        let report = evaluate(&net, &ds, &LossFunction::SoftmaxCrossEntropy, None, 1).unwrap();
        assert_eq!(report.clean_acc, report.robust_acc);

        let cfg = AttackConfig::signed(5, 0.0, 0.0);
        let report2 =
            evaluate(&net, &ds, &LossFunction::SoftmaxCrossEntropy, Some(&cfg), 1).unwrap();
        assert_eq!(report2.clean_acc, report2.robust_acc);
    }

    #[test]
    fn attacked_accuracy_never_exceeds_clean_on_trained_net() {
        let ds = tiny_dataset(11);
        let net0 = tiny_net(12);
        let mut cfg = desk_config(Method::Pgd);
        cfg.r = Some(3);
        let (net, _) = train(&cfg, &ds, None, &net0).unwrap();
        let attack = AttackConfig::signed(10, 0.05, 0.2);
        let report =
            evaluate(&net, &ds, &LossFunction::SoftmaxCrossEntropy, Some(&attack), 3).unwrap();
        assert!(report.robust_acc <= report.clean_acc + 1e-12);
    }

    #[test]
    fn metrics_csv_has_documented_header() {
        let ds = tiny_dataset(13);
        let net0 = tiny_net(14);
        let cfg = desk_config(Method::Natural);
        let (_, report) = train(&cfg, &ds, None, &net0).unwrap();
        let csv = report.metrics_csv();
        assert!(csv.starts_with(METRICS_CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + cfg.epochs);
    }
}
