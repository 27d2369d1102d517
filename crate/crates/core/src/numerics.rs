//! Dense f64 arrays, seeded randomness, and the central-difference gradient
//! oracle used by the verification suites.
//!
//! Everything here is value-semantic and deterministic: an [`Rng`] is a pure
//! function of its seed and call sequence, so any computation that threads one
//! reproduces bit-exactly on a given platform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense array of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating the shape/length invariant and finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::from_vec", &shape, &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "constructing tensor",
                coordinate: i,
            });
        }
        Ok(Self { shape, data })
    }

    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// 1-D tensor over the given values.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    // Internal constructor for values already known to be well-formed.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Dot product; lengths must match.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape("dot", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &Tensor, scale: f64) -> Result<Tensor> {
        if self.len() != other.len() {
            return Err(Error::shape("add_scaled", self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(Tensor::raw(self.shape.clone(), data))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|v| v * s).collect())
    }

    /// Max-absolute-value norm; 0 for empty tensors.
    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Relative error `max|a-b| / max(1, max|b|)` between two same-length tensors.
///
/// The `max(1, ·)` floor keeps the measure meaningful near zero.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_err on mismatched lengths");
    let diff = a
        .data
        .iter()
        .zip(&b.data)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / b.norm_inf().max(1.0)
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic pseudo-random generator (SplitMix64).
///
/// The generator and its stream-splitting rule are fixed: the same seed and
/// the same call sequence produce the same outputs on every platform. Child
/// streams are derived with [`Rng::derive`], a pure function of the current
/// state and a label, so independent parts of a computation (shuffling,
/// attack initialization, weight init) can draw from non-interfering streams.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: mix64(seed ^ GOLDEN_GAMMA),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Child stream labelled by `label`; does not advance this generator.
    pub fn derive(&self, label: u64) -> Rng {
        Rng {
            state: mix64(self.state ^ mix64(label.wrapping_add(GOLDEN_GAMMA))),
        }
    }

    /// Child stream addressed by a label path, e.g. `(epoch, minibatch)`.
    pub fn derive_path(&self, path: &[u64]) -> Rng {
        path.iter().fold(self.clone(), |rng, &label| rng.derive(label))
    }

    /// Standard normal via Box-Muller (two uniforms per pair of outputs).
    pub fn next_normal(&mut self) -> f64 {
        // Reject u1 == 0 so the log stays finite.
        let mut u1 = self.next_f64();
        while u1 == 0.0 {
            u1 = self.next_f64();
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// I.i.d. uniform tensor on `[lo, hi]`; errors when `lo > hi`.
pub fn sample_uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    if lo > hi {
        return Err(Error::Argument(format!(
            "sample_uniform: lo ({lo}) > hi ({hi})"
        )));
    }
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| lo + rng.next_f64() * (hi - lo)).collect();
    Ok(Tensor::raw(shape.to_vec(), data))
}

/// Central-difference gradient of a scalar function at `x`.
///
/// Coordinate `k` is `(f(x + h e_k) - f(x - h e_k)) / 2h`. This is the
/// independent oracle every analytic gradient in the crate is checked
/// against; it deliberately shares no code with the back-propagation path.
#[allow(clippy::needless_range_loop)] // k is the probed coordinate
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    if h <= 0.0 {
        return Err(Error::Argument(format!("finite_diff_grad: h ({h}) <= 0")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let f_plus = f(&probe);
        probe.data_mut()[k] = orig - h;
        let f_minus = f(&probe);
        probe.data_mut()[k] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFinite {
                context: "finite-difference probe",
                coordinate: k,
            });
        }
        grad[k] = (f_plus - f_minus) / (2.0 * h);
    }
    Ok(Tensor::raw(x.shape().to_vec(), grad))
}

/// Default step for [`finite_diff_grad`]: the 64-bit central-difference
/// sweet spot used by all verification tests.
pub const FD_STEP: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn finite_diff_square() {
        let f = |t: &Tensor| t.data()[0] * t.data()[0];
        let g = finite_diff_grad(f, &Tensor::vector(vec![3.0]), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() <= 1e-9, "got {}", g.data()[0]);
    }

    #[test]
    fn finite_diff_constant() {
        let f = |_: &Tensor| 4.25;
        let g = finite_diff_grad(f, &Tensor::vector(vec![1.0, -2.0, 0.5]), 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_rejects_nonfinite_probe() {
        // ln goes NaN when the probe on coordinate 1 dips below zero.
        let f = |t: &Tensor| t.data()[1].ln();
        let err = finite_diff_grad(f, &Tensor::vector(vec![1.0, 5e-6]), 1e-5).unwrap_err();
        match err {
            Error::NonFinite { coordinate, .. } => assert_eq!(coordinate, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn finite_diff_matches_hand_derived_composite() {
        // 1-D affine + softplus against a squared target:
        //   s(x)  = softplus(w x + b)
        //   l(x)  = (s(x) - t)^2
        //   l'(x) = 2 (s(x) - t) sigmoid(w x + b) w
        let (w, b, t) = (1.7, -0.4, 0.9);
        let softplus = |z: f64| z.max(0.0) + (-z.abs()).exp().ln_1p();
        let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
        let loss = |x: &Tensor| {
            let s = softplus(w * x.data()[0] + b);
            (s - t) * (s - t)
        };
        for x0 in [-2.0, -0.3, 0.0, 0.8, 3.5] {
            let fd = finite_diff_grad(loss, &Tensor::vector(vec![x0]), FD_STEP).unwrap();
            let z = w * x0 + b;
            let exact = 2.0 * (softplus(z) - t) * sigmoid(z) * w;
            assert!(
                (fd.data()[0] - exact).abs() <= 1e-9 * exact.abs().max(1.0),
                "x0 {x0}: fd {} vs exact {exact}",
                fd.data()[0]
            );
        }
    }

    #[test]
    fn finite_diff_matches_backprop_on_two_layer_net() {
        use crate::dynamics::{forward_sweep, layer_forward, vjp_sweep, Activation, Network};
        use crate::hamiltonian::LossFunction;
        use crate::instrumentation::PropCounter;

        let mut rng = Rng::new(7);
        let net = Network::random_mlp(&[3, 5, 2], Activation::Softplus, &mut rng).unwrap();
        let x = sample_uniform(&mut rng, &[3], -1.0, 1.0).unwrap();
        let loss = LossFunction::SoftmaxCrossEntropy;

        let mut counter = PropCounter::new();
        let traj = forward_sweep(&net, std::slice::from_ref(&x), &mut counter).unwrap();
        let seeds = vec![loss.grad(&traj.final_states()[0], 0).unwrap()];
        let back = vjp_sweep(&net, &traj, &seeds, &mut counter).unwrap();

        let f = |xq: &Tensor| {
            let mut z = xq.clone();
            for (l, th) in net.layers().iter().zip(net.params()) {
                z = layer_forward(l, th, &z).unwrap();
            }
            loss.value(&z, 0).unwrap()
        };
        let fd = finite_diff_grad(f, &x, FD_STEP).unwrap();
        assert!(rel_err(&fd, &back.input_grads()[0]) <= 1e-5);
    }

    #[test]
    fn uniform_degenerate_interval_is_zero() {
        let mut rng = Rng::new(1);
        let t = sample_uniform(&mut rng, &[5], 0.0, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_rejects_inverted_bounds() {
        let mut rng = Rng::new(1);
        assert!(matches!(
            sample_uniform(&mut rng, &[2], 1.0, -1.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn uniform_reseeding_reproduces_stream() {
        let mut rng = Rng::new(42);
        let a = sample_uniform(&mut rng, &[4], -0.3, 0.3).unwrap();
        let b = sample_uniform(&mut rng, &[4], -0.3, 0.3).unwrap();
        assert_ne!(a.data(), b.data());
        let mut rng2 = Rng::new(42);
        let a2 = sample_uniform(&mut rng2, &[4], -0.3, 0.3).unwrap();
        assert_eq!(a.data(), a2.data());
    }

    #[test]
    fn uniform_statistics_in_bounds() {
        let mut rng = Rng::new(42);
        let t = sample_uniform(&mut rng, &[10_000], -1.0, 1.0).unwrap();
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!(t.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn derive_is_pure_and_distinct() {
        let rng = Rng::new(7);
        let mut a = rng.derive(1);
        let mut a2 = rng.derive(1);
        let mut b = rng.derive(2);
        assert_eq!(a.next_u64(), a2.next_u64());
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn quadratic_form_gradient_matches_closed_form() {
        // q(x) = x^T A x has gradient (A + A^T) x.
        let mut rng = Rng::new(9);
        for _ in 0..10 {
            let n = 4;
            let a = sample_uniform(&mut rng, &[n * n], -1.0, 1.0).unwrap();
            let x = sample_uniform(&mut rng, &[n], -10.0, 10.0).unwrap();
            let q = |t: &Tensor| {
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        acc += t.data()[i] * a.data()[i * n + j] * t.data()[j];
                    }
                }
                acc
            };
            let fd = finite_diff_grad(q, &x, FD_STEP).unwrap();
            let mut exact = vec![0.0; n];
            for (i, e) in exact.iter_mut().enumerate() {
                for j in 0..n {
                    *e += (a.data()[i * n + j] + a.data()[j * n + i]) * x.data()[j];
                }
            }
            let exact = Tensor::vector(exact);
            assert!(rel_err(&fd, &exact) <= 1e-8, "rel err {}", rel_err(&fd, &exact));
        }
    }

    proptest! {
        #[test]
        fn uniform_respects_bounds(seed in 0u64..1000, lo in -5.0f64..0.0, width in 0.0f64..5.0) {
            let mut rng = Rng::new(seed);
            let hi = lo + width;
            let t = sample_uniform(&mut rng, &[64], lo, hi).unwrap();
            prop_assert!(t.data().iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn rng_is_pure_function_of_seed(seed in 0u64..10_000) {
            let mut a = Rng::new(seed);
            let mut b = Rng::new(seed);
            for _ in 0..16 {
                prop_assert_eq!(a.next_u64(), b.next_u64());
            }
        }
    }
}
