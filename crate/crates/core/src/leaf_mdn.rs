//! Fully connected networks with hand-written backpropagation. Used both as
//! the per-leaf single-Gaussian module and as the shared trunk of the
//! baseline mixture density network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounds applied to the raw log-scale output before exponentiation.
pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    #[default]
    Relu,
    Tanh,
}

impl HiddenActivation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            HiddenActivation::Relu => x.max(0.0),
            HiddenActivation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            HiddenActivation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            HiddenActivation::Tanh => 1.0 - a * a,
        }
    }
}

/// `depth` counts affine layers, so `depth = 2` is one hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub depth: usize,
    pub width: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub hidden_activation: HiddenActivation,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::FormulaDomain(format!(
                "MLP depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.width == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("MLP dimensions must be positive".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth);
        let mut fan_in = self.in_dim;
        for layer in 0..self.depth {
            let fan_out = if layer + 1 == self.depth {
                self.out_dim
            } else {
                self.width
            };
            dims.push((fan_in, fan_out));
            fan_in = fan_out;
        }
        dims
    }
}

/// Weight count `W·(in + out) + W²·(L − 2)`; biases are not counted.
pub fn mlp_param_count(config: &MlpConfig) -> Result<usize> {
    if config.depth < 2 {
        return Err(Error::FormulaDomain(format!(
            "parameter count needs depth >= 2, got {}",
            config.depth
        )));
    }
    let w = config.width;
    Ok(w * (config.in_dim + config.out_dim) + w * w * (config.depth - 2))
}

/// One affine layer; `weights` is row-major `rows × cols` (`out × in`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn n_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    #[inline]
    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.cols)
                .zip(&self.biases)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden_activation: HiddenActivation,
    pub layers: Vec<Dense>,
}

/// Layer inputs and pre-activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// `inputs[k]` is the input of layer `k`; the final entry is the output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("trace has an output")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradient {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<DenseGradient>,
    pub x: Vec<f64>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &MlpConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    rows: fan_out,
                    cols: fan_in,
                    weights: (0..fan_in * fan_out)
                        .map(|_| rng.gen_range(-s..=s))
                        .collect(),
                    biases: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            hidden_activation: config.hidden_activation,
            layers,
        })
    }

    pub fn zeros(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| Dense {
                rows: fan_out,
                cols: fan_in,
                weights: vec![0.0; fan_in * fan_out],
                biases: vec![0.0; fan_out],
            })
            .collect();
        Ok(Self {
            hidden_activation: config.hidden_activation,
            layers,
        })
    }

    /// Checks that layer shapes chain and all values are finite.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::FormulaDomain("MLP needs at least two layers".into()));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.weights.len() != layer.rows * layer.cols || layer.biases.len() != layer.rows {
                return Err(Error::Config(format!("layer {k} has inconsistent shape")));
            }
            if k > 0 && self.layers[k - 1].rows != layer.cols {
                return Err(Error::DimensionMismatch {
                    context: "MLP layer chain",
                    expected: self.layers[k - 1].rows,
                    actual: layer.cols,
                });
            }
            if layer
                .weights
                .iter()
                .chain(&layer.biases)
                .any(|v| !v.is_finite())
            {
                return Err(Error::Config(format!("layer {k} has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> MlpConfig {
        MlpConfig {
            depth: self.layers.len(),
            width: self.layers[0].rows,
            in_dim: self.in_dim(),
            out_dim: self.out_dim(),
            hidden_activation: self.hidden_activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    /// Layer by layer: weights, then biases.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
    }

    pub fn read_flat(&mut self, flat: &[f64]) {
        debug_assert_eq!(flat.len(), self.n_params());
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = layer.biases.len();
            layer.biases.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                context: "MLP input",
                expected: self.in_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut current = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&current, &mut next);
            if k < last {
                for v in next.iter_mut() {
                    *v = self.hidden_activation.apply(*v);
                }
            }
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<MlpTrace> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.rows);
            layer.forward_into(&inputs[k], &mut z);
            let a = if k < last {
                z.iter().map(|&v| self.hidden_activation.apply(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            inputs.push(a);
        }
        Ok(MlpTrace { inputs, pre })
    }

    /// Adds the gradient of `upstream · output` into `grad` (layout of
    /// [`MlpParams::write_flat`]) and returns the gradient w.r.t. the input.
    pub fn accumulate_backward(
        &self,
        trace: &MlpTrace,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.out_dim() {
            return Err(Error::DimensionMismatch {
                context: "MLP upstream",
                expected: self.out_dim(),
                actual: upstream.len(),
            });
        }
        if grad.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                context: "MLP gradient buffer",
                expected: self.n_params(),
                actual: grad.len(),
            });
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            offsets.push(offset);
            offset += layer.n_params();
        }

        let last = self.layers.len() - 1;
        let mut delta = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if k < last {
                for ((d, &z), &a) in delta
                    .iter_mut()
                    .zip(&trace.pre[k])
                    .zip(&trace.inputs[k + 1])
                {
                    *d *= self.hidden_activation.derivative(z, a);
                }
            }
            let input = &trace.inputs[k];
            let base = offsets[k];
            let (gw, gb) = grad[base..base + layer.n_params()].split_at_mut(layer.weights.len());
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, &v) in gw[r * layer.cols..(r + 1) * layer.cols]
                    .iter_mut()
                    .zip(input)
                {
                    *g += d * v;
                }
                gb[r] += d;
            }
            let mut below = vec![0.0; layer.cols];
            for (row, &d) in layer.weights.chunks_exact(layer.cols).zip(&delta) {
                if d == 0.0 {
                    continue;
                }
                for (b, &w) in below.iter_mut().zip(row) {
                    *b += d * w;
                }
            }
            delta = below;
        }
        Ok(delta)
    }

    /// Gradients of `upstream · forward(x)` w.r.t. weights, biases and `x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<MlpGradients> {
        let trace = self.forward_trace(x)?;
        let mut flat = vec![0.0; self.n_params()];
        let grad_x = self.accumulate_backward(&trace, upstream, &mut flat)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            let nw = layer.weights.len();
            let nb = layer.biases.len();
            layers.push(DenseGradient {
                weights: flat[offset..offset + nw].to_vec(),
                biases: flat[offset + nw..offset + nw + nb].to_vec(),
            });
            offset += nw + nb;
        }
        Ok(MlpGradients { layers, x: grad_x })
    }
}

/// One Gaussian: mean, unclamped raw log-scale and the resulting std-dev.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: f64,
    pub log_sigma_raw: f64,
    pub sigma: f64,
}

impl GaussianParams {
    pub fn from_raw(mu: f64, log_sigma_raw: f64) -> Self {
        Self {
            mu,
            log_sigma_raw,
            sigma: sigma_from_raw(log_sigma_raw),
        }
    }
}

/// `exp(clamp(raw, -7, 7))`.
#[inline]
pub fn sigma_from_raw(raw: f64) -> f64 {
    raw.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX).exp()
}

/// d sigma / d raw divided by sigma: 1 inside the clamp, 0 outside.
#[inline]
pub fn log_sigma_slope(raw: f64) -> f64 {
    if raw > LOG_SIGMA_MIN && raw < LOG_SIGMA_MAX {
        1.0
    } else {
        0.0
    }
}

/// Single Gaussian from a two-output network fed time-invariant features.
pub fn leaf_forward(params: &MlpParams, x_invariant: &[f64]) -> Result<GaussianParams> {
    let out = params.forward(x_invariant)?;
    if out.len() != 2 {
        return Err(Error::DimensionMismatch {
            context: "leaf output",
            expected: 2,
            actual: out.len(),
        });
    }
    Ok(GaussianParams::from_raw(out[0], out[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{extrapolated_diff_gradient, finite_diff_gradient, max_relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(rows: usize, cols: usize, weights: Vec<f64>, biases: Vec<f64>) -> Dense {
        Dense {
            rows,
            cols,
            weights,
            biases,
        }
    }

    fn two_output(mu: f64, raw: f64) -> MlpParams {
        MlpParams {
            hidden_activation: HiddenActivation::Relu,
            layers: vec![
                dense(1, 1, vec![0.0], vec![0.0]),
                dense(2, 1, vec![0.0, 0.0], vec![mu, raw]),
            ],
        }
    }

    #[test]
    fn forward_examples() {
        let config = MlpConfig {
            depth: 3,
            width: 5,
            in_dim: 3,
            out_dim: 2,
            hidden_activation: HiddenActivation::Relu,
        };
        let zeros = MlpParams::zeros(&config).unwrap();
        assert_eq!(zeros.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        // 2-2-2 by hand: h = relu([1 -1; 2 0.5]·[1, 2] + [0.5, -1]) = relu([-0.5, 2]) = [0, 2]
        // out = [0.5 1; -1 3]·[0, 2] + [0.1, 0.2] = [2.1, 6.2]
        let net = MlpParams {
            hidden_activation: HiddenActivation::Relu,
            layers: vec![
                dense(2, 2, vec![1.0, -1.0, 2.0, 0.5], vec![0.5, -1.0]),
                dense(2, 2, vec![0.5, 1.0, -1.0, 3.0], vec![0.1, 0.2]),
            ],
        };
        let out = net.forward(&[1.0, 2.0]).unwrap();
        assert!((out[0] - 2.1).abs() < 1e-15 && (out[1] - 6.2).abs() < 1e-14);

        let identity = MlpParams {
            hidden_activation: HiddenActivation::Relu,
            layers: vec![
                dense(
                    3,
                    3,
                    vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
                    vec![0.0; 3],
                ),
                dense(
                    3,
                    3,
                    vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
                    vec![0.0; 3],
                ),
            ],
        };
        assert_eq!(
            identity.forward(&[0.5, 2.0, 0.0]).unwrap(),
            vec![0.5, 2.0, 0.0]
        );
        assert!(identity.forward(&[1.0]).is_err());
    }

    #[test]
    fn leaf_forward_examples() {
        let g = leaf_forward(&two_output(0.3, 0.0), &[1.0]).unwrap();
        assert_eq!((g.mu, g.sigma), (0.3, 1.0));
        let g = leaf_forward(&two_output(0.0, -9.0), &[1.0]).unwrap();
        assert_eq!(g.sigma, (-7f64).exp());
        assert_eq!(g.log_sigma_raw, -9.0);
        let g = leaf_forward(&two_output(1.5, 0.5), &[1.0]).unwrap();
        assert_eq!(g.mu, 1.5);
        assert!((g.sigma - 0.5f64.exp()).abs() < 1e-15);
        assert!((g.sigma - 1.648721).abs() < 1e-6);
    }

    #[test]
    fn backward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = MlpConfig {
            depth: 2,
            width: 6,
            in_dim: 3,
            out_dim: 2,
            hidden_activation: HiddenActivation::Tanh,
        };
        let net = MlpParams::init(&config, &mut rng).unwrap();
        let g = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g
            .layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|&v| v == 0.0)));
        assert!(g.x.iter().all(|&v| v == 0.0));

        // all hidden units active: the output layer's weight gradient is the
        // outer product of upstream and the hidden activations
        let net = MlpParams {
            hidden_activation: HiddenActivation::Relu,
            layers: vec![
                dense(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]),
                dense(2, 2, vec![0.3, -0.2, 0.7, 0.1], vec![0.0, 0.0]),
            ],
        };
        let x = [0.5, 2.0];
        let up = [1.5, -0.5];
        let g = net.backward(&x, &up).unwrap();
        assert_eq!(g.layers[1].weights, vec![0.75, 3.0, -0.25, -1.0]);
        assert_eq!(g.layers[1].biases, vec![1.5, -0.5]);
        assert!(net.backward(&x, &[1.0]).is_err());
    }

    /// Smooth networks get the extrapolated oracle; relu keeps a tiny plain
    /// stencil so it rarely straddles a kink.
    fn numeric_gradient(
        f: impl FnMut(&[f64]) -> f64,
        p: &[f64],
        activation: HiddenActivation,
    ) -> Vec<f64> {
        match activation {
            HiddenActivation::Tanh => extrapolated_diff_gradient(f, p, 1e-3).unwrap(),
            HiddenActivation::Relu => finite_diff_gradient(f, p, 1e-6).unwrap(),
        }
    }

    fn check_backward(seed: u64, config: MlpConfig) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = MlpParams::init(&config, &mut rng).unwrap();
        // non-zero biases keep relu units away from the kink
        let mut flat = Vec::new();
        net.write_flat(&mut flat);
        for v in flat.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        net.read_flat(&flat);
        let x: Vec<f64> = (0..config.in_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let up: Vec<f64> = (0..config.out_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let objective = |n: &MlpParams, x: &[f64]| -> f64 {
            n.forward(x)
                .unwrap()
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = net.backward(&x, &up).unwrap();
        let analytic: Vec<f64> = g
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect();
        let act = config.hidden_activation;
        let numeric = numeric_gradient(
            |p| {
                let mut n = net.clone();
                n.read_flat(p);
                objective(&n, &x)
            },
            &flat,
            act,
        );
        let numeric_x = numeric_gradient(|p| objective(&net, p), &x, act);
        max_relative_error(&analytic, &numeric, 1e-8)
            .max(max_relative_error(&g.x, &numeric_x, 1e-8))
    }

    #[test]
    fn backward_matches_finite_differences_4_50_2() {
        for activation in [HiddenActivation::Relu, HiddenActivation::Tanh] {
            let config = MlpConfig {
                depth: 2,
                width: 50,
                in_dim: 4,
                out_dim: 2,
                hidden_activation: activation,
            };
            let err = check_backward(17, config);
            assert!(err <= 1e-6, "{activation:?}: {err}");
        }
    }

    #[test]
    fn backward_matches_finite_differences_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..100 {
            let config = MlpConfig {
                depth: rng.gen_range(2..=3),
                width: rng.gen_range(1..=50),
                in_dim: rng.gen_range(1..=6),
                out_dim: rng.gen_range(1..=4),
                hidden_activation: HiddenActivation::Tanh,
            };
            let err = check_backward(seed, config);
            assert!(err <= 1e-6, "{config:?}: {err}");
        }
    }

    #[test]
    fn param_counts() {
        let c = |depth, width, in_dim, out_dim| MlpConfig {
            depth,
            width,
            in_dim,
            out_dim,
            hidden_activation: HiddenActivation::Relu,
        };
        assert_eq!(mlp_param_count(&c(3, 100, 30, 2)).unwrap(), 13_200);
        assert_eq!(mlp_param_count(&c(2, 50, 4, 2)).unwrap(), 300);
        assert_eq!(mlp_param_count(&c(2, 1, 1, 1)).unwrap(), 2);
        assert!(matches!(
            mlp_param_count(&c(1, 5, 3, 2)),
            Err(Error::FormulaDomain(_))
        ));

        // the formula counts exactly the weight entries of an initialized net
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = c(4, 7, 3, 2);
        let net = MlpParams::init(&cfg, &mut rng).unwrap();
        let weights: usize = net.layers.iter().map(|l| l.weights.len()).sum();
        assert_eq!(weights, mlp_param_count(&cfg).unwrap());
    }

    #[test]
    fn serialization_round_trip_preserves_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let config = MlpConfig {
            depth: 3,
            width: 13,
            in_dim: 4,
            out_dim: 2,
            hidden_activation: HiddenActivation::Relu,
        };
        let net = MlpParams::init(&config, &mut rng).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: MlpParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, net);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = net.forward(&x).unwrap();
            let b = back.forward(&x).unwrap();
            assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    proptest! {
        #[test]
        fn sigma_is_always_positive(raw in proptest::num::f64::ANY) {
            prop_assume!(!raw.is_nan());
            let s = sigma_from_raw(raw);
            prop_assert!(s > 0.0 && s.is_finite());
        }
    }
}
