use rand::Rng;

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Train mode normalizes with batch statistics and updates the running
/// estimates; eval mode uses the running estimates only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

/// One block: `x W + b`, optional batch normalization, then the activation.
/// `weight` is stored `[in_dim, out_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub batchnorm: Option<BatchNorm>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Feed-forward network of [`Layer`] blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpNet {
    layers: Vec<Layer>,
    mode: Mode,
}

/// Nodes produced by recording a network on a graph.
pub struct Recorded {
    pub output: Var,
    /// Parameter leaves in [`MlpNet::parameters`] order.
    pub params: Vec<Var>,
}

impl MlpNet {
    /// Builds a network through `dims = [in, h1, ..., out]`. Hidden blocks are
    /// linear → batchnorm (when enabled) → ReLU; the final block is linear
    /// with identity activation. Weights are Kaiming-uniform over the fan-in,
    /// biases start at zero.
    pub fn new(dims: &[usize], batchnorm: bool, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "a network needs input and output widths");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let hidden = i + 2 < dims.len();
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(Layer {
                weight: Tensor::matrix(fan_in, fan_out, data).expect("consistent dims"),
                bias: Tensor::zeros(&[fan_out]),
                batchnorm: (hidden && batchnorm).then(|| BatchNorm::new(fan_out)),
                activation: if hidden {
                    Activation::Relu
                } else {
                    Activation::Identity
                },
            });
        }
        MlpNet {
            layers,
            mode: Mode::Train,
        }
    }

    pub fn from_layers(layers: Vec<Layer>, mode: Mode) -> Result<Self, TensorError> {
        if layers.is_empty() {
            return Err(TensorError::shape("MlpNet", "no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.len() != l.out_dim() {
                return Err(TensorError::shape(
                    "MlpNet",
                    format!("layer {i}: bias does not match weight columns"),
                ));
            }
            if let Some(bn) = &l.batchnorm {
                let n = l.out_dim();
                if bn.gamma.len() != n
                    || bn.beta.len() != n
                    || bn.running_mean.len() != n
                    || bn.running_var.len() != n
                {
                    return Err(TensorError::shape(
                        "MlpNet",
                        format!("layer {i}: batchnorm width differs from {n}"),
                    ));
                }
                if bn.running_var.iter().any(|&v| !(v > 0.0)) {
                    return Err(TensorError::shape(
                        "MlpNet",
                        format!("layer {i}: running variance must be positive"),
                    ));
                }
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(TensorError::shape(
                    "MlpNet",
                    format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        pair[0].out_dim(),
                        i + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        Ok(MlpNet { layers, mode })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// `[in, h1, ..., out]`
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| l.batchnorm.is_some())
    }

    /// Trainable tensors: per layer `weight, bias[, gamma, beta]`.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(bn) = &l.batchnorm {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(bn) = &mut l.batchnorm {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn parameter_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(format!("{prefix}.layer{i}.weight"));
            out.push(format!("{prefix}.layer{i}.bias"));
            if l.batchnorm.is_some() {
                out.push(format!("{prefix}.layer{i}.gamma"));
                out.push(format!("{prefix}.layer{i}.beta"));
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<(), TensorError> {
        let (_, w) = input.dims2("mlp_forward")?;
        if w != self.in_dim() {
            return Err(TensorError::shape(
                "mlp_forward",
                format!("input width {w}, network expects {}", self.in_dim()),
            ));
        }
        Ok(())
    }

    /// Eval-mode forward pass without recording: running statistics are used
    /// regardless of [`MlpNet::mode`], and nothing is mutated.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, TensorError> {
        self.check_input(input)?;
        let mut h = input.clone();
        for l in &self.layers {
            let mut out = h.matmul(&l.weight)?;
            let n = l.out_dim();
            let rows = out.rows();
            let bias = l.bias.data();
            match &l.batchnorm {
                Some(bn) => {
                    let scale: Vec<f64> = (0..n)
                        .map(|j| bn.gamma.data()[j] / (bn.running_var[j] + bn.eps).sqrt())
                        .collect();
                    for i in 0..rows {
                        let r = out.row_mut(i);
                        for j in 0..n {
                            r[j] = (r[j] + bias[j] - bn.running_mean[j]) * scale[j]
                                + bn.beta.data()[j];
                        }
                    }
                }
                None => {
                    for i in 0..rows {
                        for (v, &b) in out.row_mut(i).iter_mut().zip(bias) {
                            *v += b;
                        }
                    }
                }
            }
            if l.activation == Activation::Relu {
                out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        Ok(h)
    }

    /// Forward pass in the network's current mode. In train mode the
    /// batchnorm running statistics are updated.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let rec = self.record(&mut g, x, false)?;
        Ok(g.value(rec.output).clone())
    }

    /// Records the forward pass on `graph`. With `trainable == false` the
    /// parameters enter as constants, so gradients still flow to the input
    /// but not to the weights.
    pub fn record(
        &mut self,
        graph: &mut Graph,
        input: Var,
        trainable: bool,
    ) -> Result<Recorded, TensorError> {
        self.check_input(graph.value(input))?;
        let mode = self.mode;
        let mut params = Vec::new();
        let mut leaf = |g: &mut Graph, t: &Tensor| {
            let v = if trainable {
                g.variable(t.clone())
            } else {
                g.constant(t.clone())
            };
            params.push(v);
            v
        };
        let mut h = input;
        for l in &mut self.layers {
            let w = leaf(graph, &l.weight);
            let b = leaf(graph, &l.bias);
            let lin = graph.matmul(h, w)?;
            h = graph.add_bias(lin, b)?;
            if let Some(bn) = &mut l.batchnorm {
                let gamma = leaf(graph, &bn.gamma);
                let beta = leaf(graph, &bn.beta);
                h = match mode {
                    Mode::Train => {
                        let (out, stats) = graph.batch_norm_train(h, gamma, beta, bn.eps)?;
                        let m = bn.momentum;
                        for j in 0..stats.mean.len() {
                            bn.running_mean[j] = (1.0 - m) * bn.running_mean[j] + m * stats.mean[j];
                            bn.running_var[j] =
                                (1.0 - m) * bn.running_var[j] + m * stats.var_unbiased[j];
                        }
                        out
                    }
                    Mode::Eval => graph.batch_norm_eval(
                        h,
                        gamma,
                        beta,
                        &bn.running_mean,
                        &bn.running_var,
                        bn.eps,
                    )?,
                };
            }
            if l.activation == Activation::Relu {
                h = graph.relu(h);
            }
        }
        Ok(Recorded { output: h, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand::rngs::StdRng {
        rand::rngs::StdRng::seed_from_u64(7)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Layer {
            weight: Tensor::identity(3),
            bias: Tensor::zeros(&[3]),
            batchnorm: None,
            activation: Activation::Identity,
        };
        let net = MlpNet::from_layers(vec![layer], Mode::Eval).unwrap();
        let v = Tensor::matrix(1, 3, vec![0.5, -2.0, 7.0]).unwrap();
        assert_eq!(net.predict(&v).unwrap(), v);
    }

    #[test]
    fn zero_last_layer_gives_zero_output() {
        let mut net = MlpNet::new(&[4, 6, 3], true, &mut rng());
        let last = net.layers_mut().last_mut().unwrap();
        last.weight = Tensor::zeros(&[6, 3]);
        last.bias = Tensor::zeros(&[3]);
        let x = Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 2.0, 1.0]).unwrap();
        assert!(net.predict(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chaining_is_checked() {
        let a = MlpNet::new(&[3, 4], false, &mut rng()).layers()[0].clone();
        let b = MlpNet::new(&[5, 2], false, &mut rng()).layers()[0].clone();
        assert!(MlpNet::from_layers(vec![a, b], Mode::Eval).is_err());
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let net = MlpNet::new(&[3, 2], false, &mut rng());
        let x = Tensor::zeros(&[1, 4]);
        assert!(matches!(net.predict(&x), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn single_row_train_batchnorm_is_degenerate() {
        let mut net = MlpNet::new(&[3, 4, 2], true, &mut rng());
        let x = Tensor::zeros(&[1, 3]);
        assert_eq!(
            net.forward(&x).err(),
            Some(TensorError::DegenerateBatch { rows: 1 })
        );
        net.set_mode(Mode::Eval);
        assert!(net.forward(&x).is_ok());
    }

    #[test]
    fn eval_forward_matches_predict() {
        let mut net = MlpNet::new(&[3, 5, 2], true, &mut rng());
        let x = Tensor::matrix(4, 3, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        net.forward(&x).unwrap();
        net.set_mode(Mode::Eval);
        let a = net.forward(&x).unwrap();
        let b = net.predict(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
