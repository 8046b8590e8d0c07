//! Linear-chain networks: layers, named parameters, trainable flags and the
//! forward pass.

mod profile;

pub use profile::{build_backbone, ArchProfile, HeadKind};

use glob::Pattern;
use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Rate of the dropout layer in the grafted head.
pub const HEAD_DROPOUT: f64 = 0.3;
/// Width of the pointwise projection in the grafted head.
pub const HEAD_UNITS: usize = 128;
/// Filters and kernel size of the grafted head's convolution.
pub const HEAD_CONV_FILTERS: usize = 5;
pub const HEAD_CONV_KERNEL: usize = 5;

/// What a layer computes, with its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    Relu,
    PointwiseDense {
        units: usize,
    },
    GlobalAvgPool,
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        units: usize,
    },
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }

    /// Parameter names owned by this layer, in declaration order.
    pub fn param_names(&self) -> Vec<String> {
        match self.kind {
            LayerKind::Conv { .. } | LayerKind::PointwiseDense { .. } | LayerKind::Dense { .. } => {
                vec![kernel_name(&self.name), bias_name(&self.name)]
            }
            _ => Vec::new(),
        }
    }
}

pub fn kernel_name(layer: &str) -> String {
    format!("{layer}/kernel")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}/bias")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor<f32>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A recorded training-mode forward pass.
pub struct TrainPass {
    pub tape: Tape<f32>,
    pub output: Var,
}

/// Ordered layers over a fixed `H x W x C` input, with named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    /// Per-image output shape of each layer, aligned with `layers`.
    shapes: Vec<Vec<usize>>,
    params: IndexMap<String, Parameter>,
}

impl Network {
    pub fn new(input_shape: [usize; 3]) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::InvalidProfile(format!(
                "input shape {input_shape:?} has a zero extent"
            )));
        }
        Ok(Network {
            input_shape,
            layers: Vec::new(),
            shapes: Vec::new(),
            params: IndexMap::new(),
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-image output shape of every layer, predicted at build time.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes
            .last()
            .cloned()
            .unwrap_or_else(|| self.input_shape.to_vec())
    }

    pub fn params(&self) -> &IndexMap<String, Parameter> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Appends a layer after checking its shape against the current output,
    /// drawing Glorot-uniform weights and zero biases from `rng`.
    pub fn push<R: Rng + ?Sized>(&mut self, layer: LayerSpec, rng: &mut R) -> Result<()> {
        if self.layer_index(&layer.name).is_some() {
            return Err(Error::InvalidProfile(format!(
                "duplicate layer name `{}`",
                layer.name
            )));
        }
        let input = self.output_shape();
        let (output, weights) = infer(&layer, &input)?;
        if let Some(kernel_shape) = weights {
            let (fan_in, fan_out) = fans(&kernel_shape);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let len: usize = kernel_shape.iter().product();
            let data = (0..len)
                .map(|_| rng.gen_range(-limit..limit) as f32)
                .collect();
            let units = *kernel_shape.last().expect("kernel rank >= 2");
            self.params.insert(
                kernel_name(&layer.name),
                Parameter {
                    value: Tensor::new(kernel_shape, data)?,
                    trainable: true,
                },
            );
            self.params.insert(
                bias_name(&layer.name),
                Parameter {
                    value: Tensor::zeros(vec![units]),
                    trainable: true,
                },
            );
        }
        self.layers.push(layer);
        self.shapes.push(output);
        Ok(())
    }

    /// Drops every layer from `index` on, with its parameters.
    pub(crate) fn truncate(&mut self, index: usize) {
        for layer in self.layers.drain(index..) {
            for name in layer.param_names() {
                self.params.shift_remove(&name);
            }
        }
        self.shapes.truncate(index);
    }

    /// Sets the trainable flag on every parameter whose name matches the
    /// glob `pattern`; returns how many matched.
    pub fn set_trainable(&mut self, pattern: &str, trainable: bool) -> Result<usize> {
        let pattern = Pattern::new(pattern)
            .map_err(|e| Error::InvalidConfig(format!("bad parameter pattern `{pattern}`: {e}")))?;
        let mut count = 0;
        for (name, param) in self.params.iter_mut() {
            if pattern.matches(name) {
                param.trainable = trainable;
                count += 1;
            }
        }
        Ok(count)
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    fn check_batch(&self, batch: &Tensor<f32>) -> Result<()> {
        if batch.rank() != 4 || batch.shape()[1..] != self.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "batch {:?} does not match network input B x {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Runs the whole network on a `B x H x W x C` batch. Training mode
    /// applies dropout and returns the recorded tape; eval mode records
    /// nothing.
    pub fn forward(
        &self,
        batch: &Tensor<f32>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<f32>, Option<TrainPass>)> {
        match mode {
            Mode::Eval => Ok((self.forward_eval(batch)?, None)),
            Mode::Train => {
                let pass = self.forward_train(batch, rng)?;
                let output = pass.tape.value(pass.output)?.clone();
                Ok((output, Some(pass)))
            }
        }
    }

    pub fn forward_train<R: Rng + ?Sized>(&self, batch: &Tensor<f32>, rng: &mut R) -> Result<TrainPass> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let mut x = tape.constant(batch.clone());
        let b = batch.shape()[0];
        for layer in &self.layers {
            x = match layer.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let (w, bias) = self.record_params(&mut tape, &layer.name);
                    tape.conv2d(x, w, bias, stride, pad)?
                }
                LayerKind::PointwiseDense { .. } | LayerKind::Dense { .. } => {
                    let (w, bias) = self.record_params(&mut tape, &layer.name);
                    tape.dense(x, w, bias)?
                }
                LayerKind::MaxPool { size, stride } => tape.maxpool2d(x, size, stride)?,
                LayerKind::Relu => tape.relu(x)?,
                LayerKind::GlobalAvgPool => tape.global_avg_pool(x)?,
                LayerKind::Dropout { rate } => tape.dropout(x, rate, rng)?,
                LayerKind::Flatten => {
                    let len = tape.value(x)?.len() / b;
                    tape.reshape(x, vec![b, len])?
                }
                LayerKind::Softmax => tape.softmax(x)?,
            };
        }
        Ok(TrainPass { tape, output: x })
    }

    fn record_params(&self, tape: &mut Tape<f32>, layer: &str) -> (Var, Var) {
        let mut record = |name: String| {
            let p = &self.params[&name];
            tape.param(name, p.value.clone(), p.trainable)
        };
        let w = record(kernel_name(layer));
        let b = record(bias_name(layer));
        (w, b)
    }

    /// Inference: dropout inert, no tape.
    pub fn forward_eval(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.activations(batch, self.layers.len())
    }

    /// Eval-mode output of the first `depth` layers.
    pub fn activations(&self, batch: &Tensor<f32>, depth: usize) -> Result<Tensor<f32>> {
        self.check_batch(batch)?;
        let b = batch.shape()[0];
        let mut x = batch.clone();
        for layer in &self.layers[..depth.min(self.layers.len())] {
            x = match layer.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let (w, bias) = self.weights(&layer.name);
                    ops::conv2d(&x, w, bias, stride, pad)?
                }
                LayerKind::PointwiseDense { .. } | LayerKind::Dense { .. } => {
                    let (w, bias) = self.weights(&layer.name);
                    ops::pointwise_dense(&x, w, bias)?
                }
                LayerKind::MaxPool { size, stride } => ops::maxpool2d(&x, size, stride)?.0,
                LayerKind::Relu => ops::relu(&x),
                LayerKind::GlobalAvgPool => ops::global_avg_pool(&x)?,
                LayerKind::Dropout { .. } => x,
                LayerKind::Flatten => {
                    let len = x.len() / b;
                    x.reshape(vec![b, len])?
                }
                LayerKind::Softmax => ops::softmax(&x),
            };
        }
        Ok(x)
    }

    fn weights(&self, layer: &str) -> (&Tensor<f32>, &Tensor<f32>) {
        (
            &self.params[&kernel_name(layer)].value,
            &self.params[&bias_name(layer)].value,
        )
    }
}

/// Output shape of `layer` on a per-image `input`, plus the kernel shape if
/// the layer owns parameters.
fn infer(layer: &LayerSpec, input: &[usize]) -> Result<(Vec<usize>, Option<Vec<usize>>)> {
    let spatial = |what: &str| -> Result<[usize; 3]> {
        <[usize; 3]>::try_from(input).map_err(|_| {
            Error::ShapeMismatch(format!(
                "layer `{}` ({what}) needs an H x W x C input, got {input:?}",
                layer.name
            ))
        })
    };
    let too_small = |e: Error| match e {
        Error::InvalidHyperparameter(detail) => Error::ShapeMismatch(format!(
            "layer `{}` cannot apply to {input:?}: {detail}",
            layer.name
        )),
        other => other,
    };
    match layer.kind {
        LayerKind::Conv {
            filters,
            kernel,
            stride,
            pad,
        } => {
            let [h, w, c] = spatial("conv")?;
            if filters == 0 {
                return Err(Error::InvalidHyperparameter(format!(
                    "layer `{}` has zero filters",
                    layer.name
                )));
            }
            let oh = ops::window_extent(h, kernel, stride, pad).map_err(too_small)?;
            let ow = ops::window_extent(w, kernel, stride, pad).map_err(too_small)?;
            Ok((vec![oh, ow, filters], Some(vec![kernel, kernel, c, filters])))
        }
        LayerKind::MaxPool { size, stride } => {
            let [h, w, c] = spatial("max pool")?;
            if h < size || w < size {
                return Err(Error::ShapeMismatch(format!(
                    "layer `{}`: pool window {size} larger than {h}x{w}",
                    layer.name
                )));
            }
            let oh = ops::window_extent(h, size, stride, 0)?;
            let ow = ops::window_extent(w, size, stride, 0)?;
            Ok((vec![oh, ow, c], None))
        }
        LayerKind::Relu | LayerKind::Softmax => Ok((input.to_vec(), None)),
        LayerKind::Dropout { rate } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidRate(rate));
            }
            Ok((input.to_vec(), None))
        }
        LayerKind::PointwiseDense { units } | LayerKind::Dense { units } => {
            if units == 0 {
                return Err(Error::InvalidHyperparameter(format!(
                    "layer `{}` has zero units",
                    layer.name
                )));
            }
            if matches!(layer.kind, LayerKind::Dense { .. }) && input.len() != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "dense layer `{}` needs a flat input, got {input:?}",
                    layer.name
                )));
            }
            let cin = *input.last().expect("rank >= 1");
            let mut out = input.to_vec();
            *out.last_mut().expect("rank >= 1") = units;
            Ok((out, Some(vec![cin, units])))
        }
        LayerKind::GlobalAvgPool => {
            let [_, _, c] = spatial("global average pool")?;
            Ok((vec![c], None))
        }
        LayerKind::Flatten => Ok((vec![input.iter().product()], None)),
    }
}

/// Glorot fans: receptive field times channels for convolutions.
fn fans(kernel_shape: &[usize]) -> (usize, usize) {
    match *kernel_shape {
        [k1, k2, cin, cout] => (k1 * k2 * cin, k1 * k2 * cout),
        [cin, cout] => (cin, cout),
        _ => unreachable!("kernels are rank 2 or 4"),
    }
}
