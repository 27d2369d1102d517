//! Shared fixtures for the propagation benchmarks.

use yopo_core::data::{gen_synthetic, Dataset, SyntheticKind, SyntheticSpec};
use yopo_core::dynamics::{Activation, Network};
use yopo_core::numerics::Rng;

/// The benchmark network: a deeper MLP so the first-layer/whole-network cost
/// ratio is visible.
pub fn bench_network() -> Network {
    let mut rng = Rng::new(0xBE);
    Network::random_mlp(&[32, 128, 128, 128, 10], Activation::Tanh, &mut rng).unwrap()
}

/// A deterministic input batch matching [`bench_network`].
pub fn bench_batch(examples: usize) -> Dataset {
    let mut ds = gen_synthetic(&SyntheticSpec {
        kind: SyntheticKind::TwoGaussians,
        dim: 32,
        examples,
        margin: 2.0,
        noise: 0.5,
        seed: 0xDA,
    })
    .unwrap();
    // Spread the two-class labels over the 10 outputs so the loss path is
    // exercised realistically.
    for (i, y) in ds.labels.iter_mut().enumerate() {
        *y = (*y + i) % 10;
    }
    ds.num_classes = 10;
    ds
}
