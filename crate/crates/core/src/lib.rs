//! Adversarial training of layerwise networks as a discrete-time
//! differential game.
//!
//! The network is treated as a dynamical system `x_{t+1} = f_t(x_t, theta_t)`
//! whose weights minimize the training objective while a norm-bounded input
//! perturbation maximizes it. Backward co-state propagation exposes the fact
//! that the adversary couples only to the first layer, which is what the
//! decoupled trainers exploit: freeze the loss gradient at the first-layer
//! boundary (the slack variable) and run cheap first-layer-only adversary
//! updates between full passes.
//!
//! Modules:
//! - [`numerics`]: dense f64 tensors, seeded rng, finite-difference oracle.
//! - [`dynamics`]: layers, forward sweep, vector-Jacobian products.
//! - [`hamiltonian`]: per-layer Hamiltonians, co-state sweeps, the
//!   optimality-condition verifier.
//! - [`adversary`]: projections, multi-step attacks, slack-variable updates.
//! - [`training`]: the trainers, momentum SGD, robust evaluation.
//! - [`data`]: IDX container handling, synthetic datasets, batching.
//! - [`instrumentation`]: exact propagation counting and audits.

pub mod adversary;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod hamiltonian;
pub mod instrumentation;
pub mod numerics;
pub mod training;

pub use adversary::{AttackConfig, Direction, InitKind, Perturbation};
pub use data::{Dataset, SyntheticKind, SyntheticSpec};
pub use dynamics::{Activation, Checkpoint, LayerSpec, Network, Trajectory};
pub use error::{Error, Result};
pub use hamiltonian::{
    CostateTrajectory, LossFunction, PmpReport, Regularizer, VerifyConfig,
};
pub use instrumentation::{CountAudit, PropCounter};
pub use numerics::{Rng, Tensor};
pub use training::{EvalReport, Method, RunReport, TrainConfig};

#[cfg(test)]
mod tests {
    fn assert_send_sync<T: Send + Sync>() {}

    // Read-only sharing across threads is part of the module contracts;
    // counters and rngs stay single-writer by &mut discipline.
    #[test]
    fn core_types_are_send_and_sync() {
        assert_send_sync::<crate::Tensor>();
        assert_send_sync::<crate::Rng>();
        assert_send_sync::<crate::Network>();
        assert_send_sync::<crate::Dataset>();
        assert_send_sync::<crate::Perturbation>();
        assert_send_sync::<crate::PropCounter>();
        assert_send_sync::<crate::TrainConfig>();
    }
}
