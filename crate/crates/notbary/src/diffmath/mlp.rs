use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Activation applied after a linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus,
    Linear,
}

/// One dense layer: `x @ weight + bias`, weight is `in x out` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A fully connected network with rectifier hidden layers.
///
/// Hidden activations are fixed to the rectifier; the output is linear by
/// default, with softplus available where positivity is needed (conditional
/// scale heads).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub output_activation: Activation,
    input_dim: usize,
    output_dim: usize,
}

/// Node ids of one network's parameters inside a graph, in layer order.
pub struct MlpBinding {
    pub layer_ids: Vec<(NodeId, NodeId)>,
}

impl MlpParams {
    /// He-style initialization: weights `N(0, 2/fan_in)`, zero biases.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        output_activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &width in hidden.iter().chain(std::iter::once(&output_dim)) {
            let std = (2.0 / prev as f64).sqrt();
            let mut w = Tensor::zeros(&[prev, width]);
            for v in w.data_mut().iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = std * z;
            }
            layers.push(Layer { weight: w, bias: Tensor::zeros(&[width]) });
            prev = width;
        }
        MlpParams { layers, output_activation, input_dim, output_dim }
    }

    /// All-zero network of the same architecture; useful in tests.
    pub fn zeros(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &width in hidden.iter().chain(std::iter::once(&output_dim)) {
            layers.push(Layer {
                weight: Tensor::zeros(&[prev, width]),
                bias: Tensor::zeros(&[width]),
            });
            prev = width;
        }
        MlpParams { layers, output_activation: Activation::Linear, input_dim, output_dim }
    }

    /// A single linear layer computing `x @ weight + bias` exactly.
    pub fn linear(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (input_dim, output_dim) = match weight.shape() {
            [i, o] => (*i, *o),
            other => {
                return Err(Error::ShapeMismatch {
                    context: "MlpParams::linear",
                    detail: format!("weight must be 2-D, got {other:?}"),
                })
            }
        };
        if bias.shape() != [output_dim] {
            return Err(Error::ShapeMismatch {
                context: "MlpParams::linear",
                detail: format!("bias {:?} vs output dim {output_dim}", bias.shape()),
            });
        }
        Ok(MlpParams {
            layers: vec![Layer { weight, bias }],
            output_activation: Activation::Linear,
            input_dim,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Layer widths as `(in, out)` pairs, for manifests.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.weight.shape()[0], l.weight.shape()[1])).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.all_finite() && l.bias.all_finite())
    }

    /// Registers every parameter tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> MlpBinding {
        let layer_ids = self
            .layers
            .iter()
            .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
            .collect();
        MlpBinding { layer_ids }
    }

    /// Forward pass through bound parameters; `x` is an `n x input_dim` node.
    pub fn forward(&self, g: &mut Graph, binding: &MlpBinding, x: NodeId) -> Result<NodeId> {
        if g.value(x).cols() != self.input_dim {
            return Err(Error::ShapeMismatch {
                context: "MlpParams::forward",
                detail: format!(
                    "input width {} != network input {}",
                    g.value(x).cols(),
                    self.input_dim
                ),
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (idx, (w, b)) in binding.layer_ids.iter().enumerate() {
            h = g.matmul(h, *w)?;
            h = g.add_row(h, *b)?;
            if idx < last {
                h = g.relu(h);
            } else if self.output_activation == Activation::Softplus {
                h = g.softplus(h);
            }
        }
        Ok(h)
    }

    /// Plain evaluation without a graph. Uses the same tensor kernels as the
    /// graph ops, so values agree bitwise with [`MlpParams::forward`].
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim {
            return Err(Error::ShapeMismatch {
                context: "MlpParams::eval",
                detail: format!("input width {} != network input {}", x.cols(), self.input_dim),
            });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?.add_row(&layer.bias)?;
            if idx < last {
                h = h.relu();
            } else if self.output_activation == Activation::Softplus {
                h = h.softplus();
            }
        }
        Ok(h)
    }

    /// Parameter tensors in a fixed order (weight, bias per layer).
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Gradients for this network's binding after a backward pass, in
    /// [`MlpParams::param_tensors`] order.
    pub fn collect_grads(&self, g: &Graph, binding: &MlpBinding) -> Vec<Tensor> {
        binding
            .layer_ids
            .iter()
            .flat_map(|(w, b)| [g.grad(*w), g.grad(*b)])
            .collect()
    }
}

/// Spec-level entry point: forward a batch through an MLP inside a fresh
/// binding, returning the output node.
pub fn mlp_forward(params: &MlpParams, g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let binding = params.bind(g);
    params.forward(g, &binding, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    /// Hand-rolled forward pass used as an independent oracle.
    fn naive_forward(params: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = params.layers.len() - 1;
        for (idx, layer) in params.layers.iter().enumerate() {
            let (din, dout) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let mut out = vec![0.0; dout];
            for j in 0..dout {
                let mut acc = layer.bias.data()[j];
                for i in 0..din {
                    acc += h[i] * layer.weight.data()[i * dout + j];
                }
                out[j] = acc;
            }
            if idx < last {
                for v in out.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_network_maps_everything_to_zero() {
        let params = MlpParams::zeros(3, &[8], 2);
        let x = Tensor::matrix(4, 3, vec![1.0; 12]).unwrap();
        let y = params.eval(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer_passes_through() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.0]);
        let params = MlpParams::linear(w, b).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let y = params.eval(&x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut r = rng(11);
        let params = MlpParams::init(2, &[16], 1, Activation::Linear, &mut r);
        for trial in 0..10 {
            let x = vec![trial as f64 * 0.37 - 1.5, (trial as f64).sin()];
            let xt = Tensor::matrix(1, 2, x.clone()).unwrap();
            let got = params.eval(&xt).unwrap();
            let want = naive_forward(&params, &x);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let params = MlpParams::zeros(3, &[4], 2);
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(params.eval(&x).is_err());
        let mut g = Graph::new();
        let xn = g.constant(x);
        assert!(mlp_forward(&params, &mut g, xn).is_err());
    }

    #[test]
    fn graph_forward_equals_plain_eval_bitwise() {
        let mut r = rng(5);
        let params = MlpParams::init(3, &[7, 5], 2, Activation::Softplus, &mut r);
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64) * 0.31 - 1.0).collect()).unwrap();
        let plain = params.eval(&x).unwrap();
        let mut g = Graph::new();
        let xn = g.constant(x);
        let out = mlp_forward(&params, &mut g, xn).unwrap();
        assert_eq!(g.value(out).data(), plain.data());
    }

    /// Smallest |pre-activation| over all rectifier units; finite
    /// differences are unreliable when a unit sits within the probe step of
    /// its kink, so test inputs are redrawn until clear of it.
    fn min_kink_gap(params: &MlpParams, x: &Tensor) -> f64 {
        let mut h = x.clone();
        let mut gap = f64::INFINITY;
        let last = params.layers.len() - 1;
        for (idx, layer) in params.layers.iter().enumerate() {
            h = h.matmul(&layer.weight).unwrap().add_row(&layer.bias).unwrap();
            if idx < last {
                for v in h.data() {
                    gap = gap.min(v.abs());
                }
                h = h.relu();
            }
        }
        gap
    }

    #[test]
    fn random_mlps_pass_gradient_checks() {
        // 100 random configurations, widths in [1, 32], depths in [1, 3].
        let mut r = rng(42);
        for trial in 0..100 {
            let depth = 1 + (trial % 3);
            let hidden: Vec<usize> = (0..depth).map(|_| 1 + r.random_range(0..32)).collect();
            let din = 1 + r.random_range(0..4);
            let params = MlpParams::init(din, &hidden, 1, Activation::Linear, &mut r);
            let mut x = Tensor::zeros(&[2, din]);
            loop {
                for v in x.data_mut().iter_mut() {
                    *v = r.sample::<f64, _>(StandardNormal);
                }
                if min_kink_gap(&params, &x) > 1e-3 {
                    break;
                }
            }

            // flatten all params into one probe tensor for the FD oracle
            let flat: Vec<f64> = params
                .param_tensors()
                .iter()
                .flat_map(|t| t.data().iter().copied())
                .collect();
            let flat = Tensor::from_vec(flat);

            // loss: mean over rows of 0.5 * ||net(x) - anchor||^2
            let anchor = Tensor::matrix(2, 1, vec![0.3, -0.8]).unwrap();

            let eval_with = |flat: &Tensor| -> f64 {
                let mut p = params.clone();
                let mut offset = 0;
                for t in p.param_tensors_mut() {
                    let len = t.len();
                    t.data_mut().copy_from_slice(&flat.data()[offset..offset + len]);
                    offset += len;
                }
                let y = p.eval(&x).unwrap();
                let n = y.rows();
                (0..n)
                    .map(|i| {
                        let diff = y.data()[i] - anchor.data()[i];
                        0.5 * diff * diff
                    })
                    .sum::<f64>()
                    / n as f64
            };

            let numeric = finite_diff_grad(eval_with, &flat, 1e-5);

            let mut g = Graph::new();
            let binding = params.bind(&mut g);
            let xn = g.constant(x.clone());
            let y = params.forward(&mut g, &binding, xn).unwrap();
            let rows = g.half_sq_dist_rows(y, &anchor).unwrap();
            let root = g.mean(rows);
            g.backward(root).unwrap();

            let analytic: Vec<f64> = params
                .collect_grads(&g, &binding)
                .iter()
                .flat_map(|t| t.data().iter().copied())
                .collect();

            let mut max_rel = 0.0f64;
            for (a, n) in analytic.iter().zip(numeric.data()) {
                let rel = (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs());
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel <= 1e-4, "trial {trial}: max relative error {max_rel}");
        }
    }
}
