//! Layers shared by the source, relay and destination networks.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

/// Lower bound added to the GDN offset `β`, so every denominator is at
/// least `sqrt(GDN_EPS)`.
pub const GDN_EPS: f64 = 1e-6;

fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

/// Convolution with "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let bound = fan_in.sqrt().recip();
        let weight = store.insert(
            format!("{name}.weight"),
            uniform_tensor(rng, &[c_out, c_in, kernel, kernel], bound),
        );
        let bias = store.insert(format!("{name}.bias"), uniform_tensor(rng, &[c_out], bound));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Generalized divisive normalization across channels:
/// `y_i = x_i / sqrt(β_i + Σ_j γ_ij·x_j²)`, or the product for the inverse.
///
/// `β = β_r² + GDN_EPS` and `γ = γ_r²` keep both non-negative.
#[derive(Clone, Debug)]
pub struct Gdn {
    beta: ParamId,
    gamma: ParamId,
    inverse: bool,
}

impl Gdn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, inverse: bool) -> Self {
        let beta = store.insert(format!("{name}.beta"), Tensor::full(&[channels], 1.0));
        let mut gamma = Tensor::full(&[channels, channels, 1, 1], 0.01);
        for c in 0..channels {
            gamma.data_mut()[c * channels + c] = 0.1f64.sqrt();
        }
        let gamma = store.insert(format!("{name}.gamma"), gamma);
        Self {
            beta,
            gamma,
            inverse,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let beta_r = g.param(store, self.beta);
        let gamma_r = g.param(store, self.gamma);
        let beta_sq = g.square(beta_r);
        let beta = g.add_scalar(beta_sq, GDN_EPS);
        let gamma = g.square(gamma_r);
        let x2 = g.square(x);
        let energy = g.conv2d(x2, gamma, Some(beta), 1, 0);
        let norm = g.sqrt(energy);
        if self.inverse {
            g.mul(x, norm)
        } else {
            g.div(x, norm)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        let bound = (d_in as f64).sqrt().recip();
        let weight = store.insert(format!("{name}.weight"), uniform_tensor(rng, &[d_out, d_in], bound));
        let bias = store.insert(format!("{name}.bias"), uniform_tensor(rng, &[d_out], bound));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// SNR-conditioned channel attention.
///
/// Spatially pooled features are concatenated with the three link SNRs (dB)
/// and mapped by a two-layer perceptron to one sigmoid gate per channel.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
    channels: usize,
}

impl ChannelAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Self {
        let hidden = (channels / 4).max(8);
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), channels + 3, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, channels),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Gates in (0, 1), shape `[N, C]`; `snr` is `[N, 3]`.
    pub fn gates(&self, g: &mut Graph, store: &ParamStore, x: Var, snr: Var) -> Var {
        let pooled = g.global_avg_pool(x);
        let input = g.concat(&[pooled, snr]);
        let h = self.fc1.forward(g, store, input);
        let h = g.gelu(h);
        let logits = self.fc2.forward(g, store, h);
        g.sigmoid(logits)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, snr: Var) -> Var {
        let gates = self.gates(g, store, x, snr);
        g.mul_channel(x, gates)
    }
}

/// Two convolutions with (I)GDN and an optional identity shortcut:
/// `act(x + gdn(conv(act(gdn(conv(x))))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv,
    gdn1: Gdn,
    conv2: Conv,
    gdn2: Gdn,
    residual: bool,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        kernel: usize,
        inverse_gdn: bool,
        residual: bool,
    ) -> Self {
        Self {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), channels, channels, kernel, 1),
            gdn1: Gdn::new(store, &format!("{name}.gdn1"), channels, inverse_gdn),
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), channels, channels, kernel, 1),
            gdn2: Gdn::new(store, &format!("{name}.gdn2"), channels, inverse_gdn),
            residual,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.conv1.forward(g, store, x);
        let h = self.gdn1.forward(g, store, h);
        let h = g.gelu(h);
        let h = self.conv2.forward(g, store, h);
        let h = self.gdn2.forward(g, store, h);
        let h = if self.residual { g.add(h, x) } else { h };
        g.gelu(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(g: &mut Graph, shape: &[usize], scale: f64) -> Var {
        let n: usize = shape.iter().product();
        g.constant(Tensor::from_vec(
            shape,
            (0..n).map(|i| ((i * 31 % 23) as f64 - 11.0) * scale).collect(),
        ))
    }

    #[test]
    fn gdn_output_is_finite_for_large_and_zero_inputs() {
        let mut store = ParamStore::new();
        let gdn = Gdn::new(&mut store, "gdn", 4, false);
        let igdn = Gdn::new(&mut store, "igdn", 4, true);
        // worst case for the denominator: β_r = 0 and γ_r = 0
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        for scale in [0.0, 1e-3, 1.0, 1e6] {
            let mut g = Graph::new();
            let x = input(&mut g, &[2, 4, 3, 3], scale);
            let y = gdn.forward(&mut g, &store, x);
            let z = igdn.forward(&mut g, &store, x);
            assert!(g.value(y).is_finite() && g.value(z).is_finite(), "scale {scale}");
            let bound = g.value(x).data().iter().map(|v| v.abs()).fold(0.0, f64::max) / GDN_EPS.sqrt();
            assert!(g.value(y).data().iter().all(|v| v.abs() <= bound * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn gdn_then_igdn_with_diagonal_gamma_is_identity() {
        let mut store = ParamStore::new();
        let gdn = Gdn::new(&mut store, "gdn", 3, false);
        let mut g = Graph::new();
        let x = input(&mut g, &[1, 3, 2, 2], 0.1);
        let y = gdn.forward(&mut g, &store, x);
        // y·sqrt(β+γx²) recovers x
        let v = g.value(y).data().to_vec();
        let xs = g.value(x).data().to_vec();
        for c in 0..3 {
            for p in 0..4 {
                let i = c * 4 + p;
                let others: f64 = (0..3).map(|j| if j == c { 0.1 } else { 1e-4 } * xs[j * 4 + p].powi(2)).sum();
                let denom = (1.0 + GDN_EPS + others).sqrt();
                assert!((v[i] * denom - xs[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_preserves_shape_and_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ca = ChannelAttention::new(&mut store, &mut rng, "ca", 6);
        let run = |snr: [f64; 3]| {
            let mut g = Graph::new();
            let x = input(&mut g, &[2, 6, 4, 4], 0.2);
            let s = g.constant(Tensor::from_vec(&[2, 3], [snr, snr].concat()));
            let gates = ca.gates(&mut g, &store, x, s);
            let y = ca.forward(&mut g, &store, x, s);
            assert_eq!(g.shape(y), g.shape(x));
            g.value(gates).clone()
        };
        let a = run([12.0, 5.0, 5.0]);
        assert_eq!(a, run([12.0, 5.0, 5.0]));
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_ne!(a, run([40.0, 0.0, 8.0]));
    }
}
