use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One layer of the network. Channel and input counts are inferred from the
/// shape flowing into the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Stride-1 "same" convolution with an odd square kernel.
    Conv2d { out_channels: usize, kernel: usize },
    Relu,
    /// 2x2 window, stride 2.
    MaxPool2d,
    Dense { outputs: usize },
    Sigmoid,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d => "maxpool2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Sigmoid => "sigmoid",
        }
    }

    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let err = |message: String| Error::Config { layer: index, message };
        match *self {
            LayerSpec::Conv2d { out_channels, kernel } => {
                if kernel == 0 || kernel % 2 == 0 {
                    return Err(err(format!("conv2d kernel must be odd, got {kernel}")));
                }
                if out_channels == 0 {
                    return Err(err("conv2d needs at least one output channel".into()));
                }
                match input {
                    [_, h, w] => Ok(vec![out_channels, *h, *w]),
                    _ => Err(err(format!("conv2d expects [C, H, W] input, got {input:?}"))),
                }
            }
            LayerSpec::MaxPool2d => match input {
                [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(err(format!(
                    "maxpool2d expects [C, H, W] input with even H and W, got {input:?}"
                ))),
            },
            LayerSpec::Dense { outputs } => {
                if outputs == 0 {
                    return Err(err("dense layer needs at least one output".into()));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
        }
    }

    /// (weight length, bias length) for an input of the given shape.
    fn param_sizes(&self, input: &[usize]) -> (usize, usize) {
        match *self {
            LayerSpec::Conv2d { out_channels, kernel } => {
                (out_channels * input[0] * kernel * kernel, out_channels)
            }
            LayerSpec::Dense { outputs } => (outputs * input.iter().product::<usize>(), outputs),
            _ => (0, 0),
        }
    }

    fn fan_in(&self, input: &[usize]) -> usize {
        match *self {
            LayerSpec::Conv2d { kernel, .. } => input[0] * kernel * kernel,
            _ => input.iter().product(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    spec: LayerSpec,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    fn has_params(&self) -> bool {
        matches!(self.spec, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    fn conv_geom(&self) -> ConvGeom {
        let LayerSpec::Conv2d { out_channels, kernel } = self.spec else {
            unreachable!("conv_geom on {}", self.spec.name())
        };
        ConvGeom {
            c_in: self.in_shape[0],
            c_out: out_channels,
            h: self.in_shape[1],
            w: self.in_shape[2],
            k: kernel,
        }
    }

    fn dense_dims(&self) -> (usize, usize) {
        (self.in_shape.iter().product(), self.out_shape[0])
    }

    /// Output values plus max-pool switches when applicable.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Option<Vec<u32>>) {
        match self.spec {
            LayerSpec::Conv2d { .. } => {
                (kernels::conv2d_forward(&self.conv_geom(), x, &self.weight, &self.bias), None)
            }
            LayerSpec::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), None),
            LayerSpec::MaxPool2d => {
                let s = &self.in_shape;
                let (y, sw) = kernels::maxpool_forward(s[0], s[1], s[2], x);
                (y, Some(sw))
            }
            LayerSpec::Dense { .. } => {
                let (i, o) = self.dense_dims();
                (kernels::dense_forward(i, o, x, &self.weight, &self.bias), None)
            }
            LayerSpec::Sigmoid => (x.iter().map(|&v| kernels::sigmoid(v)).collect(), None),
        }
    }
}

/// How the backward pass treats relu layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackwardMode {
    /// Ordinary chain rule.
    Standard,
    /// Deconvnet rules: relu is applied to the backward signal instead of
    /// gating by the sign of the forward input. Pooling routes through the
    /// recorded switches and convolutions are transposed, as in `Standard`.
    Deconvnet,
}

/// A feed-forward stack of layers with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Network {
    /// Builds a network with He-normal weights and zero biases.
    pub fn new(input_shape: Vec<usize>, specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeroed(input_shape, specs)?;
        for layer in &mut net.layers {
            if !layer.has_params() {
                continue;
            }
            let std = (2.0 / layer.spec.fan_in(&layer.in_shape) as f64).sqrt();
            for w in &mut layer.weight {
                let z: f64 = StandardNormal.sample(rng);
                *w = z * std;
            }
        }
        Ok(net)
    }

    /// Builds a network with all parameters zero.
    pub fn zeroed(input_shape: Vec<usize>, specs: &[LayerSpec]) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config {
                layer: 0,
                message: format!("invalid input shape {input_shape:?}"),
            });
        }
        let mut shape = input_shape.clone();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let out = spec.output_shape(i, &shape)?;
            let (nw, nb) = spec.param_sizes(&shape);
            layers.push(Layer {
                spec: *spec,
                in_shape: shape,
                out_shape: out.clone(),
                weight: vec![0.0; nw],
                bias: vec![0.0; nb],
            });
            shape = out;
        }
        Ok(Self { input_shape, layers })
    }

    /// Builds a network from explicit parameter blobs, in the order returned
    /// by [`Network::parameters`].
    pub fn with_parameters(input_shape: Vec<usize>, specs: &[LayerSpec], params: Vec<Vec<f64>>) -> Result<Self> {
        let mut net = Self::zeroed(input_shape, specs)?;
        let expected = net.parameters().len();
        if params.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} parameter tensors, got {}",
                params.len()
            )));
        }
        let mut it = params.into_iter();
        for (i, layer) in net.layers.iter_mut().enumerate() {
            if !layer.has_params() {
                continue;
            }
            let (w, b) = (it.next().unwrap(), it.next().unwrap());
            if w.len() != layer.weight.len() || b.len() != layer.bias.len() {
                return Err(Error::Config {
                    layer: i,
                    message: format!(
                        "parameter sizes ({}, {}) do not match expected ({}, {})",
                        w.len(),
                        b.len(),
                        layer.weight.len(),
                        layer.bias.len()
                    ),
                });
            }
            layer.weight = w;
            layer.bias = b;
        }
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map(|l| l.out_shape.as_slice())
            .unwrap_or(&self.input_shape)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Weight and bias slices of every parametrized layer, in layer order.
    pub fn parameters(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .filter(|l| l.has_params())
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .filter(|l| l.has_params())
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// The first `n` layers as a standalone network.
    pub fn prefix(&self, n: usize) -> Network {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers[..n.min(self.layers.len())].to_vec(),
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::Config {
                layer: 0,
                message: format!(
                    "input shape {:?} does not match network input {:?}",
                    input.shape(),
                    self.input_shape
                ),
            });
        }
        Ok(())
    }

    /// Forward pass recording everything the backward pass needs.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tape<'_>)> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut switches = Vec::with_capacity(self.layers.len());
        activations.push(input.data().to_vec());
        for layer in &self.layers {
            let (y, sw) = layer.forward(activations.last().unwrap());
            activations.push(y);
            switches.push(sw);
        }
        let output = Tensor::from_parts(self.output_shape().to_vec(), activations.last().unwrap().clone());
        Ok((
            output,
            Tape {
                net: self,
                activations,
                switches,
            },
        ))
    }

    /// Forward pass without recording a tape.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.data().to_vec();
        for layer in &self.layers {
            x = layer.forward(&x).0;
        }
        Ok(Tensor::from_parts(self.output_shape().to_vec(), x))
    }
}

/// Per-parameter gradients aligned with [`Network::parameters`].
pub type ParamGrads = Vec<Vec<f64>>;

/// Recorded forward pass: every layer's input and output, plus max-pool
/// switch locations.
#[derive(Debug, Clone)]
pub struct Tape<'n> {
    net: &'n Network,
    /// `activations[i]` is the input of layer `i`; the last entry is the output.
    activations: Vec<Vec<f64>>,
    switches: Vec<Option<Vec<u32>>>,
}

impl<'n> Tape<'n> {
    pub fn network(&self) -> &'n Network {
        self.net
    }

    pub fn input(&self) -> Tensor {
        Tensor::from_parts(self.net.input_shape.clone(), self.activations[0].clone())
    }

    pub fn output(&self) -> Tensor {
        Tensor::from_parts(
            self.net.output_shape().to_vec(),
            self.activations.last().unwrap().clone(),
        )
    }

    /// Input activation of layer `index`.
    pub fn layer_input(&self, index: usize) -> &[f64] {
        &self.activations[index]
    }

    /// Max-pool switches (flat input indices) of layer `index`, if it pools.
    pub fn switches(&self, index: usize) -> Option<&[u32]> {
        self.switches.get(index).and_then(|s| s.as_deref())
    }

    /// Identifies the linear region of the input space this forward pass lies
    /// in: two tapes with equal keys share every relu gate and pool switch.
    pub fn linear_region_key(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, layer) in self.net.layers.iter().enumerate() {
            match layer.spec {
                LayerSpec::Relu => {
                    for chunk in self.activations[i].chunks(64) {
                        let bits = chunk
                            .iter()
                            .enumerate()
                            .fold(0u64, |acc, (j, &v)| acc | (((v > 0.0) as u64) << j));
                        bits.hash(&mut h);
                    }
                }
                LayerSpec::MaxPool2d => self.switches[i].hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn check_seed(&self, seed: &Tensor) -> Result<()> {
        if seed.shape() != self.net.output_shape() {
            return Err(Error::Contract(format!(
                "seed shape {:?} does not match tape output {:?}",
                seed.shape(),
                self.net.output_shape()
            )));
        }
        Ok(())
    }

    /// Gradient of `seed · output` with respect to the input.
    pub fn backward(&self, seed: &Tensor, mode: BackwardMode) -> Result<Tensor> {
        self.check_seed(seed)?;
        let (gx, _) = self.run_backward(seed.data().to_vec(), mode, false, true);
        Ok(Tensor::from_parts(self.net.input_shape.clone(), gx.expect("input gradient requested")))
    }

    /// Standard-mode parameter gradients of `seed · output`.
    pub fn backward_params(&self, seed: &Tensor) -> Result<ParamGrads> {
        self.check_seed(seed)?;
        let (_, grads) = self.run_backward(seed.data().to_vec(), BackwardMode::Standard, true, false);
        Ok(grads)
    }

    fn run_backward(
        &self,
        mut g: Vec<f64>,
        mode: BackwardMode,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Vec<f64>>, ParamGrads) {
        let layers = &self.net.layers;
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        // Earliest layer whose input gradient is still needed.
        let stop = if want_input {
            0
        } else {
            layers.iter().position(|l| l.has_params()).unwrap_or(layers.len())
        };
        for i in (0..layers.len()).rev() {
            let layer = &layers[i];
            let x = &self.activations[i];
            let y = &self.activations[i + 1];
            if want_params && layer.has_params() {
                grads.push(match layer.spec {
                    LayerSpec::Conv2d { .. } => kernels::conv2d_backward_params(&layer.conv_geom(), x, &g),
                    _ => {
                        let (ni, no) = layer.dense_dims();
                        kernels::dense_backward_params(ni, no, x, &g)
                    }
                });
            }
            if i == stop && !want_input {
                break;
            }
            g = match layer.spec {
                LayerSpec::Conv2d { .. } => kernels::conv2d_backward_input(&layer.conv_geom(), &g, &layer.weight),
                LayerSpec::Dense { .. } => {
                    let (ni, no) = layer.dense_dims();
                    kernels::dense_backward_input(ni, no, &g, &layer.weight)
                }
                LayerSpec::Relu => match mode {
                    BackwardMode::Standard => x
                        .iter()
                        .zip(&g)
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                    BackwardMode::Deconvnet => g.iter().map(|&gv| gv.max(0.0)).collect(),
                },
                LayerSpec::MaxPool2d => {
                    let sw = self.switches[i].as_ref().expect("pool layer records switches");
                    kernels::maxpool_backward(x.len(), sw, &g)
                }
                LayerSpec::Sigmoid => y.iter().zip(&g).map(|(&yv, &gv)| gv * yv * (1.0 - yv)).collect(),
            };
        }
        grads.reverse();
        let flat = grads.into_iter().flat_map(|(w, b)| [w, b]).collect();
        (want_input.then_some(g), flat)
    }
}

/// Central finite-difference approximation of the standard input gradient
/// of `seed · network(image)`.
pub fn finite_difference_gradient(network: &Network, image: &Tensor, seed: &Tensor, step: f64) -> Result<Tensor> {
    if !(step > 0.0) {
        return Err(Error::Param(format!("finite-difference step must be > 0, got {step}")));
    }
    if seed.shape() != network.output_shape() {
        return Err(Error::Contract(format!(
            "seed shape {:?} does not match network output {:?}",
            seed.shape(),
            network.output_shape()
        )));
    }
    let mut probe = image.clone();
    let mut grad = Vec::with_capacity(image.len());
    for i in 0..image.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = network.infer(&probe)?.dot(seed);
        probe.data_mut()[i] = orig - step;
        let minus = network.infer(&probe)?.dot(seed);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(Tensor::from_parts(image.shape().to_vec(), grad))
}
