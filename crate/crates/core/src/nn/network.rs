use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{infer_shapes, Layer, LayerConfig};
use super::linalg::{gemm, View};
use super::ops::{sigmoid, ConvGeometry, PoolGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Training objective, averaged over every output element of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MeanSquaredError,
    BinaryLogLoss,
}

const LOG_CLAMP: f64 = 1e-15;

impl LossKind {
    pub fn value(&self, outputs: &[f64], targets: &[f64]) -> f64 {
        assert_eq!(outputs.len(), targets.len());
        let n = outputs.len() as f64;
        let sum: f64 = match self {
            LossKind::MeanSquaredError => outputs
                .iter()
                .zip(targets)
                .map(|(y, t)| (y - t) * (y - t))
                .sum(),
            LossKind::BinaryLogLoss => outputs
                .iter()
                .zip(targets)
                .map(|(&y, &t)| {
                    let y = y.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                    -(t * y.ln() + (1.0 - t) * (1.0 - y).ln())
                })
                .sum(),
        };
        sum / n
    }

    /// Writes `∂loss/∂output` into `grad`.
    fn output_gradient(&self, outputs: &[f64], targets: &[f64], grad: &mut [f64]) {
        let n = outputs.len() as f64;
        for ((g, &y), &t) in grad.iter_mut().zip(outputs).zip(targets) {
            *g = match self {
                LossKind::MeanSquaredError => 2.0 * (y - t) / n,
                LossKind::BinaryLogLoss => {
                    let yc = y.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                    (yc - t) / (yc * (1.0 - yc) * n)
                }
            };
        }
    }
}

/// Gradient of one parametric layer, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub weights: Tensor,
    pub biases: Tensor,
}

/// `∂loss/∂θ` for every layer (`None` for parameter-free layers), plus the
/// gradient with respect to the network input when it was requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGradient>>,
    pub input: Option<Tensor>,
}

impl Gradients {
    pub fn zeros_like(network: &Network) -> Self {
        Gradients {
            layers: network
                .layers
                .iter()
                .map(|l| {
                    l.params().map(|(w, b)| ParamGradient {
                        weights: Tensor::zeros(w.shape()),
                        biases: Tensor::zeros(b.shape()),
                    })
                })
                .collect(),
            input: None,
        }
    }
}

/// A linear stack of layers applied to `[height, width, channels]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
}

impl Network {
    /// Assembles a network from layers that already carry parameters.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let configs: Vec<LayerConfig> = layers.iter().map(Layer::config).collect();
        let shapes = infer_shapes(&input_shape, &configs)?;
        let mut current = &input_shape;
        for (i, (layer, config)) in layers.iter().zip(&configs).enumerate() {
            if let (Some((w, b)), Some((ws, bs))) = (layer.params(), config.parameter_shapes(current)) {
                if w.shape() != ws.as_slice() || b.shape() != bs.as_slice() {
                    return Err(Error::Dimension(format!(
                        "layer {i} ({config}) has parameters {:?}/{:?}, expected {ws:?}/{bs:?}",
                        w.shape(),
                        b.shape()
                    )));
                }
            }
            current = &shapes[i];
        }
        if shapes.is_empty() {
            return Err(Error::Dimension("a network needs at least one layer".into()));
        }
        Ok(Network {
            input_shape,
            layers,
            shapes,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn initialize(input_shape: &[usize], configs: &[LayerConfig], seed: u64) -> Result<Self> {
        let shapes = infer_shapes(input_shape, configs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(configs.len());
        let mut current = input_shape.to_vec();
        for (config, out_shape) in configs.iter().zip(&shapes) {
            let params = config.parameter_shapes(&current).map(|(ws, bs)| {
                let (fan_in, fan_out) = match *config {
                    LayerConfig::Convolution {
                        filters,
                        height,
                        width,
                        ..
                    } => (height * width * ws[3], filters * height * width),
                    _ => (ws[0], ws[1]),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Tensor::from_fn(&ws, |_| rng.random_range(-limit..limit));
                (weights, Tensor::zeros(&bs))
            });
            layers.push(Layer::from_config(*config, params)?);
            current = out_shape.clone();
        }
        Network::from_layers(input_shape.to_vec(), layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty network")
    }

    /// Output shape of every layer.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn configs(&self) -> Vec<LayerConfig> {
        self.layers.iter().map(Layer::config).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    fn shape_in(&self, layer: usize) -> &[usize] {
        if layer == 0 {
            &self.input_shape
        } else {
            &self.shapes[layer - 1]
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        let out = self.forward_batch(input.data(), 1)?;
        Tensor::new(self.output_shape().to_vec(), out)
    }

    /// Evaluates `batch` samples stored back to back; returns the outputs
    /// back to back.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut acts = self.forward_trace(inputs, batch)?;
        Ok(acts.pop().expect("non-empty trace"))
    }

    /// Activations of every layer; element 0 is the input.
    fn forward_trace(&self, inputs: &[f64], batch: usize) -> Result<Vec<Vec<f64>>> {
        if batch == 0 || inputs.len() != batch * self.input_len() {
            return Err(Error::Dimension(format!(
                "batch of {batch} needs {} input values, got {}",
                batch * self.input_len(),
                inputs.len()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.to_vec());
        let mut cols = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = acts.last().expect("trace starts with input");
            let in_len: usize = self.shape_in(i).iter().product();
            let out_len: usize = self.shapes[i].iter().product();
            let out = match layer {
                Layer::Convolution {
                    padding,
                    filters,
                    biases,
                } => {
                    let s = filters.shape();
                    let geo = ConvGeometry::new(self.shape_in(i), s[0], s[1], s[2], *padding)?;
                    let mut out = vec![0.0; batch * out_len];
                    for (x, y) in input.chunks_exact(in_len).zip(out.chunks_exact_mut(out_len)) {
                        geo.forward(x, filters.data(), biases.data(), &mut cols, y);
                    }
                    out
                }
                Layer::MaxPool { height, width } => {
                    let geo = PoolGeometry::new(self.shape_in(i), *height, *width)?;
                    let mut out = vec![0.0; batch * out_len];
                    for (x, y) in input.chunks_exact(in_len).zip(out.chunks_exact_mut(out_len)) {
                        geo.forward(x, y);
                    }
                    out
                }
                Layer::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
                Layer::Sigmoid => input.iter().map(|&v| sigmoid(v)).collect(),
                Layer::Flatten => input.clone(),
                Layer::Dense { weights, biases } => {
                    let mut out = Vec::with_capacity(batch * out_len);
                    for _ in 0..batch {
                        out.extend_from_slice(biases.data());
                    }
                    gemm(
                        View::new(input, batch, in_len),
                        View::new(weights.data(), in_len, out_len),
                        &mut out,
                        true,
                    );
                    out
                }
            };
            acts.push(out);
        }
        Ok(acts)
    }

    /// Backpropagates `loss` over a batch, overwriting `grads`. When
    /// `grads.input` is `Some`, it is replaced with the input gradient.
    /// Returns the loss value of the batch.
    pub fn compute_gradients(
        &self,
        inputs: &[f64],
        targets: &[f64],
        batch: usize,
        loss: LossKind,
        grads: &mut Gradients,
    ) -> Result<f64> {
        if targets.len() != batch * self.output_len() {
            return Err(Error::Dimension(format!(
                "batch of {batch} needs {} target values, got {}",
                batch * self.output_len(),
                targets.len()
            )));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Dimension("gradient buffer does not match network".into()));
        }
        let want_input = grads.input.is_some();
        let acts = self.forward_trace(inputs, batch)?;
        let output = acts.last().expect("non-empty trace");
        let value = loss.value(output, targets);

        let mut delta = vec![0.0; output.len()];
        let mut top = self.layers.len();
        if loss == LossKind::BinaryLogLoss && matches!(self.layers.last(), Some(Layer::Sigmoid)) {
            // log-loss through a sigmoid collapses to (y - t) / n at the logit
            let n = output.len() as f64;
            for ((d, y), t) in delta.iter_mut().zip(output).zip(targets) {
                *d = (y - t) / n;
            }
            top -= 1;
        } else {
            loss.output_gradient(output, targets, &mut delta);
        }

        let mut cols = Vec::new();
        for i in (0..top).rev() {
            let need_dx = i > 0 || want_input;
            let input = &acts[i];
            let output = &acts[i + 1];
            let in_len: usize = self.shape_in(i).iter().product();
            let out_len: usize = self.shapes[i].iter().product();
            let next = match &self.layers[i] {
                Layer::Convolution {
                    padding,
                    filters,
                    ..
                } => {
                    let s = filters.shape();
                    let geo = ConvGeometry::new(self.shape_in(i), s[0], s[1], s[2], *padding)?;
                    let g = grads.layers[i].as_mut().expect("conv gradient slot");
                    g.weights.data_mut().fill(0.0);
                    g.biases.data_mut().fill(0.0);
                    let mut dx = if need_dx { vec![0.0; batch * in_len] } else { Vec::new() };
                    for b in 0..batch {
                        let dinput = need_dx.then(|| &mut dx[b * in_len..(b + 1) * in_len]);
                        geo.backward(
                            &input[b * in_len..(b + 1) * in_len],
                            &delta[b * out_len..(b + 1) * out_len],
                            filters.data(),
                            g.weights.data_mut(),
                            g.biases.data_mut(),
                            dinput,
                            &mut cols,
                        );
                    }
                    dx
                }
                Layer::MaxPool { height, width } => {
                    let geo = PoolGeometry::new(self.shape_in(i), *height, *width)?;
                    let mut dx = vec![0.0; batch * in_len];
                    for b in 0..batch {
                        geo.backward(
                            &input[b * in_len..(b + 1) * in_len],
                            &delta[b * out_len..(b + 1) * out_len],
                            &mut dx[b * in_len..(b + 1) * in_len],
                        );
                    }
                    dx
                }
                Layer::Relu => input
                    .iter()
                    .zip(&delta)
                    .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                    .collect(),
                Layer::Sigmoid => output
                    .iter()
                    .zip(&delta)
                    .map(|(&y, &d)| d * y * (1.0 - y))
                    .collect(),
                Layer::Flatten => std::mem::take(&mut delta),
                Layer::Dense { weights, .. } => {
                    let g = grads.layers[i].as_mut().expect("dense gradient slot");
                    gemm(
                        View::transposed(input, in_len, batch),
                        View::new(&delta, batch, out_len),
                        g.weights.data_mut(),
                        false,
                    );
                    let db = g.biases.data_mut();
                    db.fill(0.0);
                    for row in delta.chunks_exact(out_len) {
                        for (acc, d) in db.iter_mut().zip(row) {
                            *acc += d;
                        }
                    }
                    if need_dx {
                        let mut dx = vec![0.0; batch * in_len];
                        gemm(
                            View::new(&delta, batch, out_len),
                            View::transposed(weights.data(), out_len, in_len),
                            &mut dx,
                            false,
                        );
                        dx
                    } else {
                        Vec::new()
                    }
                }
            };
            delta = next;
        }
        if want_input {
            let mut shape = vec![batch];
            shape.extend_from_slice(&self.input_shape);
            if batch == 1 {
                shape.remove(0);
            }
            grads.input = Some(Tensor::new(shape, delta)?);
        }
        Ok(value)
    }
}

/// Gradients of `loss` for a single sample, including the input gradient.
pub fn backward(network: &Network, loss: LossKind, input: &Tensor, target: &Tensor) -> Result<Gradients> {
    if input.shape() != network.input_shape() {
        return Err(Error::Dimension(format!(
            "network expects input {:?}, got {:?}",
            network.input_shape(),
            input.shape()
        )));
    }
    let mut grads = Gradients::zeros_like(network);
    grads.input = Some(Tensor::scalar(0.0));
    network.compute_gradients(input.data(), target.data(), 1, loss, &mut grads)?;
    Ok(grads)
}

/// `param ← param − learning_rate · grad`.
pub fn sgd_update(param: &mut Tensor, grad: &Tensor, learning_rate: f64) -> Result<()> {
    check_rate(learning_rate)?;
    if param.shape() != grad.shape() {
        return Err(Error::Dimension(format!(
            "parameter {:?} and gradient {:?} differ",
            param.shape(),
            grad.shape()
        )));
    }
    if let Some(i) = grad.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient {} at index {i}",
            grad.data()[i]
        )));
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= learning_rate * g;
    }
    Ok(())
}

/// One plain SGD step over every parameter. Nothing is updated when any
/// gradient value is non-finite.
pub fn sgd_step(network: &mut Network, grads: &Gradients, learning_rate: f64) -> Result<()> {
    check_rate(learning_rate)?;
    if grads.layers.len() != network.layers.len() {
        return Err(Error::Dimension("gradient buffer does not match network".into()));
    }
    for (i, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        for (name, t) in [("weights", &g.weights), ("biases", &g.biases)] {
            if let Some(j) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient {} in layer {i} ({}) {name}[{j}]",
                    t.data()[j],
                    network.layers[i].config()
                )));
            }
        }
    }
    for (layer, g) in network.layers.iter_mut().zip(&grads.layers) {
        if let (Some((w, b)), Some(g)) = (layer.params_mut(), g) {
            sgd_update(w, &g.weights, learning_rate)?;
            sgd_update(b, &g.biases, learning_rate)?;
        }
    }
    Ok(())
}

fn check_rate(learning_rate: f64) -> Result<()> {
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(Error::Argument(format!(
            "learning rate must be finite and non-negative, got {learning_rate}"
        )));
    }
    Ok(())
}
