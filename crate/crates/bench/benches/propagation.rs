//! Wall-time companions to the propagation-count audits: whole-network vs
//! first-layer passes, and attack generation at equal adversary access
//! (10 full-gradient steps vs 5 rounds of 2 decoupled steps).

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use yopo_bench::{bench_batch, bench_network};
use yopo_core::adversary::{
    compute_slack, pgd_attack, yopo_inner_loop, AttackConfig, Direction, InitKind, Perturbation,
};
use yopo_core::dynamics::{first_layer_forward, first_layer_vjp, forward_sweep, vjp_sweep};
use yopo_core::hamiltonian::LossFunction;
use yopo_core::instrumentation::PropCounter;
use yopo_core::numerics::Rng;

fn sweeps(c: &mut Criterion) {
    let net = bench_network();
    let ds = bench_batch(64);
    let loss = LossFunction::SoftmaxCrossEntropy;

    c.bench_function("full_forward_64", |b| {
        b.iter(|| {
            let mut counter = PropCounter::new();
            black_box(forward_sweep(&net, &ds.inputs, &mut counter).unwrap());
        })
    });

    c.bench_function("full_forward_backward_64", |b| {
        b.iter(|| {
            let mut counter = PropCounter::new();
            let traj = forward_sweep(&net, &ds.inputs, &mut counter).unwrap();
            let seeds: Vec<_> = traj
                .final_states()
                .iter()
                .zip(&ds.labels)
                .map(|(z, &y)| loss.grad(z, y).unwrap())
                .collect();
            black_box(vjp_sweep(&net, &traj, &seeds, &mut counter).unwrap());
        })
    });

    c.bench_function("first_layer_forward_backward_64", |b| {
        let seeds: Vec<_> = (0..ds.len())
            .map(|_| yopo_core::Tensor::zeros(&[net.boundary_dim()]))
            .collect();
        b.iter(|| {
            let mut counter = PropCounter::new();
            let prefix = first_layer_forward(&net, &ds.inputs, &mut counter).unwrap();
            black_box(first_layer_vjp(&net, &prefix, &seeds, &mut counter).unwrap());
        })
    });
}

fn attacks(c: &mut Criterion) {
    let net = bench_network();
    let ds = bench_batch(64);
    let loss = LossFunction::SoftmaxCrossEntropy;
    let epsilon = 0.1;

    c.bench_function("attack_full_gradient_10_steps", |b| {
        let cfg = AttackConfig {
            steps: 10,
            step_size: epsilon / 4.0,
            epsilon,
            direction: Direction::Sign,
            init: InitKind::Zero,
            project_each_step: true,
        };
        b.iter(|| {
            let mut rng = Rng::new(1);
            let mut counter = PropCounter::new();
            black_box(
                pgd_attack(&net, &loss, &ds.inputs, &ds.labels, &cfg, &mut rng, &mut counter)
                    .unwrap(),
            );
        })
    });

    // Same 10 adversary updates, but only 5 full passes: the decoupled
    // schedule refreshes the slack every 2 first-layer steps.
    c.bench_function("attack_decoupled_5x2", |b| {
        b.iter(|| {
            let mut counter = PropCounter::new();
            let mut eta = Perturbation::zeros(ds.len(), net.input_dim(), epsilon);
            for _ in 0..5 {
                let x_adv = eta.apply(&ds.inputs).unwrap();
                let pass = compute_slack(&net, &loss, &x_adv, &ds.labels, &mut counter).unwrap();
                eta = yopo_inner_loop(
                    &net,
                    &ds.inputs,
                    &eta,
                    &pass.slack,
                    2,
                    epsilon / 4.0,
                    Direction::Sign,
                    true,
                    &mut counter,
                )
                .unwrap();
            }
            black_box(eta);
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = sweeps, attacks
}
criterion_main!(benches);
