//! VGG-style convolutional classifier with exact reverse-mode gradients.
//!
//! Architecture: for every entry of `conv_filters` a 3x3 same-padded,
//! stride-1 convolution with ReLU followed by 2x2 max pooling (floor
//! division of the spatial extents), then flatten, an optional ReLU dense
//! layer of `hidden_units`, and a linear output layer feeding softmax.
//!
//! Parameters are stored as one flat vector. The flattening order is layer
//! order, kernel before bias, each tensor row-major:
//! conv kernels are `(3, 3, in_channels, filters)`, dense weights are
//! `(inputs, outputs)`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::Dataset;
use crate::tensor::{glorot_uniform, SeededRng, Tensor, TensorError};

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;

/// Samples per work unit. Chunk results are reduced in chunk order, so
/// results do not depend on the number of worker threads.
const CHUNK: usize = 16;

const PARAM_MAGIC: &[u8; 8] = b"SPNPARM1";

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input {height}x{width} does not survive {pools} pooling stages")]
    InputTooSmall {
        height: usize,
        width: usize,
        pools: usize,
    },
    #[error("batch shape {got:?} does not match network input {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch or dataset")]
    Empty,
    #[error("non-finite value in layer {layer} (sample {sample})")]
    NonFinite { layer: String, sample: usize },
    #[error("parameter vector length {got} does not match P = {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("parameter file: {0}")]
    ParamFile(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    /// (height, width, channels)
    pub input_shape: (usize, usize, usize),
    pub conv_filters: Vec<usize>,
    /// Units of the ReLU dense layer; 0 omits the layer.
    pub hidden_units: usize,
    pub class_count: usize,
    pub master_seed: u64,
}

impl NetworkSpec {
    pub fn mnist(master_seed: u64) -> Self {
        Self {
            input_shape: (28, 28, 1),
            conv_filters: vec![32, 64, 64],
            hidden_units: 64,
            class_count: 10,
            master_seed,
        }
    }

    pub fn cifar(class_count: usize, master_seed: u64) -> Self {
        Self {
            input_shape: (32, 32, 3),
            conv_filters: vec![32, 64, 64],
            hidden_units: 64,
            class_count,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(NetworkError::InvalidSpec(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        if self.conv_filters.contains(&0) {
            return Err(NetworkError::InvalidSpec(
                "conv filter counts must be positive".into(),
            ));
        }
        if self.class_count < 2 {
            return Err(NetworkError::InvalidSpec(format!(
                "class_count must be at least 2, got {}",
                self.class_count
            )));
        }
        let (mut ph, mut pw) = (h, w);
        for _ in &self.conv_filters {
            ph /= POOL;
            pw /= POOL;
        }
        if ph == 0 || pw == 0 {
            return Err(NetworkError::InputTooSmall {
                height: h,
                width: w,
                pools: self.conv_filters.len(),
            });
        }
        Ok(())
    }

    /// Length of the flattened feature vector entering the dense block.
    pub fn flatten_size(&self) -> Result<usize, NetworkError> {
        self.validate()?;
        let (mut h, mut w, mut c) = self.input_shape;
        for &f in &self.conv_filters {
            h /= POOL;
            w /= POOL;
            c = f;
        }
        Ok(h * w * c)
    }

    /// Canonical text form, hashed into parameter files.
    pub fn canonical(&self) -> String {
        let (h, w, c) = self.input_shape;
        let filters: Vec<String> = self.conv_filters.iter().map(|f| f.to_string()).collect();
        format!(
            "input={h}x{w}x{c};conv={};hidden={};classes={};seed={}",
            filters.join(","),
            self.hidden_units,
            self.class_count,
            self.master_seed
        )
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }
}

/// Closed-form trainable parameter count.
pub fn parameter_count(spec: &NetworkSpec) -> Result<usize, NetworkError> {
    spec.validate()?;
    let mut total = 0;
    let mut channels = spec.input_shape.2;
    for &f in &spec.conv_filters {
        total += KERNEL * KERNEL * channels * f + f;
        channels = f;
    }
    let mut width = spec.flatten_size()?;
    if spec.hidden_units > 0 {
        total += width * spec.hidden_units + spec.hidden_units;
        width = spec.hidden_units;
    }
    total += width * spec.class_count + spec.class_count;
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum LayerKind {
    Conv {
        height: usize,
        width: usize,
        in_channels: usize,
        filters: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        relu: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    name: String,
    kind: LayerKind,
    kernel: ParamSlot,
    bias: ParamSlot,
}

impl Layer {
    fn output_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv {
                height,
                width,
                filters,
                ..
            } => (height / POOL) * (width / POOL) * filters,
            LayerKind::Dense { outputs, .. } => outputs,
        }
    }
}

/// One labeled mini-batch; images are `(n, H, W, C)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self, NetworkError> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(NetworkError::ShapeMismatch {
                expected: vec![labels.len(), 0, 0, 0],
                got: images.shape().to_vec(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Borrowed sample source: contiguous images plus an optional index order.
#[derive(Clone, Copy)]
pub(crate) struct Samples<'a> {
    images: &'a [f64],
    labels: &'a [usize],
    sample_len: usize,
    order: Option<&'a [usize]>,
}

impl<'a> Samples<'a> {
    pub(crate) fn from_dataset(ds: &'a Dataset, order: Option<&'a [usize]>) -> Self {
        let shape = ds.images.shape();
        Self {
            images: ds.images.values(),
            labels: &ds.labels,
            sample_len: shape[1..].iter().product(),
            order,
        }
    }

    fn from_batch(batch: &'a Batch) -> Self {
        Self {
            images: batch.images.values(),
            labels: &batch.labels,
            sample_len: batch.images.shape()[1..].iter().product(),
            order: None,
        }
    }

    fn len(&self) -> usize {
        self.order.map_or(self.labels.len(), |o| o.len())
    }

    fn get(&self, i: usize) -> (&'a [f64], usize) {
        let idx = self.order.map_or(i, |o| o[i]);
        (
            &self.images[idx * self.sample_len..(idx + 1) * self.sample_len],
            self.labels[idx],
        )
    }
}

/// Activations cached during one sample's forward pass.
struct Trace {
    /// `acts[l]` is the input to layer `l`; the last entry holds the logits.
    acts: Vec<Vec<f64>>,
    /// ReLU output before pooling, per conv layer (empty for dense layers).
    relu: Vec<Vec<f64>>,
    /// Flat index into `relu[l]` of each pooled maximum.
    argmax: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

impl Network {
    /// Builds the network with Glorot-uniform kernels (one child seed per
    /// layer index) and zero biases.
    pub fn build(spec: &NetworkSpec) -> Result<Self, NetworkError> {
        spec.validate()?;
        let layers = plan_layers(spec)?;
        let total = layers.last().map_or(0, |l| l.bias.offset + l.bias.len());
        let mut params = vec![0.0; total];
        for (index, layer) in layers.iter().enumerate() {
            let (fan_in, fan_out) = match layer.kind {
                LayerKind::Conv {
                    in_channels,
                    filters,
                    ..
                } => (KERNEL * KERNEL * in_channels, KERNEL * KERNEL * filters),
                LayerKind::Dense {
                    inputs, outputs, ..
                } => (inputs, outputs),
            };
            let mut rng = SeededRng::new(SeededRng::derive_child(spec.master_seed, index as u64));
            let kernel = glorot_uniform(fan_in, fan_out, &layer.kernel.shape, &mut rng)?;
            params[layer.kernel.range()].copy_from_slice(kernel.values());
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// P, the number of trainable parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<(), NetworkError> {
        if values.len() != self.params.len() {
            return Err(NetworkError::ParamLength {
                expected: self.params.len(),
                got: values.len(),
            });
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    /// Parameter slots in flattening order.
    pub fn slots(&self) -> Vec<ParamSlot> {
        self.layers
            .iter()
            .flat_map(|l| [l.kernel.clone(), l.bias.clone()])
            .collect()
    }

    /// Named parameter tensors in flattening order.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        self.slots()
            .into_iter()
            .map(|s| {
                let t = Tensor::from_vec(&s.shape, self.params[s.range()].to_vec())
                    .expect("slot shapes are valid");
                (s.name, t)
            })
            .collect()
    }

    fn input_len(&self) -> usize {
        let (h, w, c) = self.spec.input_shape;
        h * w * c
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), NetworkError> {
        let (h, w, c) = self.spec.input_shape;
        let expected = vec![batch.len(), h, w, c];
        if batch.images.shape() != expected.as_slice() {
            return Err(NetworkError::ShapeMismatch {
                expected,
                got: batch.images.shape().to_vec(),
            });
        }
        if batch.is_empty() {
            return Err(NetworkError::Empty);
        }
        Ok(())
    }

    pub(crate) fn check_dataset(&self, ds: &Dataset) -> Result<(), NetworkError> {
        let (h, w, c) = self.spec.input_shape;
        let shape = ds.images.shape();
        if shape[1..] != [h, w, c] {
            return Err(NetworkError::ShapeMismatch {
                expected: vec![shape[0], h, w, c],
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<(), NetworkError> {
        if label >= self.spec.class_count {
            return Err(NetworkError::LabelOutOfRange {
                label,
                classes: self.spec.class_count,
            });
        }
        Ok(())
    }

    fn forward_sample(&self, image: &[f64], sample: usize) -> Result<Trace, NetworkError> {
        debug_assert_eq!(image.len(), self.input_len());
        let mut trace = Trace {
            acts: Vec::with_capacity(self.layers.len() + 1),
            relu: Vec::with_capacity(self.layers.len()),
            argmax: Vec::with_capacity(self.layers.len()),
        };
        trace.acts.push(image.to_vec());
        for layer in &self.layers {
            let input = trace.acts.last().expect("input pushed");
            let kernel = &self.params[layer.kernel.range()];
            let bias = &self.params[layer.bias.range()];
            let (out, relu, argmax) = match layer.kind {
                LayerKind::Conv {
                    height,
                    width,
                    in_channels,
                    filters,
                } => {
                    let relu =
                        conv_forward(input, kernel, bias, height, width, in_channels, filters);
                    let (pooled, argmax) = max_pool(&relu, height, width, filters);
                    (pooled, relu, argmax)
                }
                LayerKind::Dense {
                    inputs,
                    outputs,
                    relu,
                } => {
                    let mut z = dense_forward(input, kernel, bias, inputs, outputs);
                    if relu {
                        z.iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                    (z, Vec::new(), Vec::new())
                }
            };
            if out.iter().any(|v| !v.is_finite()) {
                return Err(NetworkError::NonFinite {
                    layer: layer.name.clone(),
                    sample,
                });
            }
            trace.acts.push(out);
            trace.relu.push(relu);
            trace.argmax.push(argmax);
        }
        Ok(trace)
    }

    /// Accumulates the gradient of `-log p(label)` into `grad`; returns the loss.
    fn backward_sample(&self, trace: &Trace, label: usize, grad: &mut [f64]) -> f64 {
        let logits = trace.acts.last().expect("logits present");
        let (log_probs, probs) = log_softmax(logits);
        let loss = -log_probs[label];
        let mut delta: Vec<f64> = probs;
        delta[label] -= 1.0;

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.acts[l];
            let need_input_grad = l > 0;
            let kernel = &self.params[layer.kernel.range()];
            match layer.kind {
                LayerKind::Dense {
                    inputs,
                    outputs,
                    relu,
                } => {
                    if relu {
                        let out = &trace.acts[l + 1];
                        for (d, &o) in delta.iter_mut().zip(out) {
                            if o <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    let gb = &mut grad[layer.bias.range()];
                    for (g, d) in gb.iter_mut().zip(&delta) {
                        *g += d;
                    }
                    let gk = &mut grad[layer.kernel.range()];
                    let mut next = if need_input_grad {
                        vec![0.0; inputs]
                    } else {
                        Vec::new()
                    };
                    for i in 0..inputs {
                        let x = input[i];
                        let wrow = &kernel[i * outputs..(i + 1) * outputs];
                        let grow = &mut gk[i * outputs..(i + 1) * outputs];
                        let mut s = 0.0;
                        for o in 0..outputs {
                            grow[o] += x * delta[o];
                            s += wrow[o] * delta[o];
                        }
                        if need_input_grad {
                            next[i] = s;
                        }
                    }
                    delta = next;
                }
                LayerKind::Conv {
                    height,
                    width,
                    in_channels,
                    filters,
                } => {
                    let relu = &trace.relu[l];
                    let mut d_pre = vec![0.0; relu.len()];
                    for (&pos, &d) in trace.argmax[l].iter().zip(&delta) {
                        d_pre[pos] += d;
                    }
                    for (d, &r) in d_pre.iter_mut().zip(relu) {
                        if r <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    delta = conv_backward(
                        input,
                        kernel,
                        &d_pre,
                        grad,
                        layer,
                        (height, width, in_channels, filters),
                        need_input_grad,
                    );
                }
            }
        }
        loss
    }

    /// Sum of losses and gradients over a range of samples.
    fn accumulate(
        &self,
        samples: Samples<'_>,
        range: std::ops::Range<usize>,
    ) -> Result<(f64, Vec<f64>), NetworkError> {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for i in range {
            let (image, label) = samples.get(i);
            self.check_label(label)?;
            let trace = self.forward_sample(image, i)?;
            loss += self.backward_sample(&trace, label, &mut grad);
        }
        Ok((loss, grad))
    }

    pub(crate) fn loss_and_gradient_samples(
        &self,
        samples: Samples<'_>,
    ) -> Result<(f64, Tensor), NetworkError> {
        let n = samples.len();
        if n == 0 {
            return Err(NetworkError::Empty);
        }
        let chunks: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| self.accumulate(samples, c * CHUNK..((c + 1) * CHUNK).min(n)))
            .collect::<Result<_, _>>()?;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.params.len()];
        for (l, g) in &chunks {
            loss += l;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        let scale = 1.0 / n as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(NetworkError::NonFinite {
                layer: "loss".into(),
                sample: 0,
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NetworkError::NonFinite {
                layer: "gradient".into(),
                sample: 0,
            });
        }
        let p = grad.len();
        Ok((loss, Tensor::from_vec(&[p], grad)?))
    }

    /// Mean categorical cross-entropy over the batch and its exact gradient
    /// with respect to the flat parameter vector.
    pub fn loss_and_gradient(&self, batch: &Batch) -> Result<(f64, Tensor), NetworkError> {
        self.check_batch(batch)?;
        self.loss_and_gradient_samples(Samples::from_batch(batch))
    }

    /// Mean loss only; skips the backward pass.
    pub fn loss(&self, batch: &Batch) -> Result<f64, NetworkError> {
        self.check_batch(batch)?;
        Ok(self.evaluate_samples(Samples::from_batch(batch))?.0)
    }

    /// Class probabilities, shape `(n, M)`.
    pub fn forward(&self, batch: &Batch) -> Result<Tensor, NetworkError> {
        self.check_batch(batch)?;
        let samples = Samples::from_batch(batch);
        let m = self.spec.class_count;
        let rows: Vec<Vec<f64>> = (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let trace = self.forward_sample(samples.get(i).0, i)?;
                Ok(log_softmax(trace.acts.last().expect("logits")).1)
            })
            .collect::<Result<_, NetworkError>>()?;
        Ok(Tensor::from_vec(&[batch.len(), m], rows.concat())?)
    }

    pub(crate) fn evaluate_samples(
        &self,
        samples: Samples<'_>,
    ) -> Result<(f64, f64), NetworkError> {
        let n = samples.len();
        if n == 0 {
            return Err(NetworkError::Empty);
        }
        let chunks: Vec<(f64, usize)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut loss = 0.0;
                let mut correct = 0;
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let (image, label) = samples.get(i);
                    self.check_label(label)?;
                    let trace = self.forward_sample(image, i)?;
                    let logits = trace.acts.last().expect("logits");
                    let (log_probs, _) = log_softmax(logits);
                    loss -= log_probs[label];
                    if argmax(logits) == label {
                        correct += 1;
                    }
                }
                Ok((loss, correct))
            })
            .collect::<Result<_, NetworkError>>()?;
        let (loss, correct) = chunks
            .iter()
            .fold((0.0, 0), |(l, c), &(cl, cc)| (l + cl, c + cc));
        let loss = loss / n as f64;
        if !loss.is_finite() {
            return Err(NetworkError::NonFinite {
                layer: "loss".into(),
                sample: 0,
            });
        }
        Ok((loss, correct as f64 / n as f64))
    }

    /// Mean loss and accuracy over the whole dataset.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<(f64, f64), NetworkError> {
        self.check_dataset(dataset)?;
        self.evaluate_samples(Samples::from_dataset(dataset, None))
    }

    /// Mean loss and accuracy over the listed dataset rows.
    pub fn evaluate_indices(
        &self,
        dataset: &Dataset,
        indices: &[usize],
    ) -> Result<(f64, f64), NetworkError> {
        self.check_dataset(dataset)?;
        self.evaluate_samples(Samples::from_dataset(dataset, Some(indices)))
    }

    /// Loss and gradient over the listed dataset rows.
    pub fn loss_and_gradient_indices(
        &self,
        dataset: &Dataset,
        indices: &[usize],
    ) -> Result<(f64, Tensor), NetworkError> {
        self.check_dataset(dataset)?;
        self.loss_and_gradient_samples(Samples::from_dataset(dataset, Some(indices)))
    }

    /// Writes the header (magic, spec hash, P) and the little-endian
    /// parameter vector.
    pub fn save_parameters(&self, path: &Path) -> Result<(), NetworkError> {
        let mut out = Vec::with_capacity(24 + 8 * self.params.len());
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&self.spec.hash().to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    /// Loads parameters written by [`Network::save_parameters`] into a
    /// network built from `spec`; the spec hash must match.
    pub fn load_parameters(spec: &NetworkSpec, path: &Path) -> Result<Self, NetworkError> {
        let mut net = Self::build(spec)?;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 24 || &bytes[..8] != PARAM_MAGIC {
            return Err(NetworkError::ParamFile("bad magic".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
        if word(8) != spec.hash() {
            return Err(NetworkError::ParamFile("spec hash mismatch".into()));
        }
        let p = word(16) as usize;
        if p != net.params.len() || bytes.len() != 24 + 8 * p {
            return Err(NetworkError::ParamFile(format!(
                "expected {} parameters, header says {p} in {} bytes",
                net.params.len(),
                bytes.len()
            )));
        }
        for (i, v) in net.params.iter_mut().enumerate() {
            *v = f64::from_bits(word(24 + 8 * i));
            if !v.is_finite() {
                return Err(NetworkError::ParamFile(format!("non-finite parameter {i}")));
            }
        }
        Ok(net)
    }
}

pub fn build_network(spec: &NetworkSpec) -> Result<Network, NetworkError> {
    Network::build(spec)
}

fn plan_layers(spec: &NetworkSpec) -> Result<Vec<Layer>, NetworkError> {
    let mut layers = Vec::new();
    let mut offset = 0;
    let mut slot = |name: String, shape: Vec<usize>| {
        let s = ParamSlot {
            name,
            shape,
            offset,
        };
        offset += s.len();
        s
    };
    let (mut h, mut w, mut c) = spec.input_shape;
    for (i, &f) in spec.conv_filters.iter().enumerate() {
        let name = format!("conv{}", i + 1);
        layers.push(Layer {
            kernel: slot(format!("{name}.kernel"), vec![KERNEL, KERNEL, c, f]),
            bias: slot(format!("{name}.bias"), vec![f]),
            name,
            kind: LayerKind::Conv {
                height: h,
                width: w,
                in_channels: c,
                filters: f,
            },
        });
        h /= POOL;
        w /= POOL;
        c = f;
    }
    let mut width = h * w * c;
    if spec.hidden_units > 0 {
        let name = "dense1".to_string();
        layers.push(Layer {
            kernel: slot(format!("{name}.kernel"), vec![width, spec.hidden_units]),
            bias: slot(format!("{name}.bias"), vec![spec.hidden_units]),
            name,
            kind: LayerKind::Dense {
                inputs: width,
                outputs: spec.hidden_units,
                relu: true,
            },
        });
        width = spec.hidden_units;
    }
    let name = "output".to_string();
    layers.push(Layer {
        kernel: slot(format!("{name}.kernel"), vec![width, spec.class_count]),
        bias: slot(format!("{name}.bias"), vec![spec.class_count]),
        name,
        kind: LayerKind::Dense {
            inputs: width,
            outputs: spec.class_count,
            relu: false,
        },
    });
    debug_assert!(layers.iter().all(|l| l.output_len() > 0));
    Ok(layers)
}

/// Same-padded 3x3 convolution followed by ReLU. Layout HWC.
fn conv_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    height: usize,
    width: usize,
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; height * width * cout];
    for y in 0..height {
        for x in 0..width {
            let o = &mut out[(y * width + x) * cout..(y * width + x + 1) * cout];
            o.copy_from_slice(bias);
            for ky in 0..KERNEL {
                let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < height) else {
                    continue;
                };
                for kx in 0..KERNEL {
                    let Some(ix) = (x + kx).checked_sub(1).filter(|&v| v < width) else {
                        continue;
                    };
                    let inp = &input[(iy * width + ix) * cin..(iy * width + ix + 1) * cin];
                    let kbase = (ky * KERNEL + kx) * cin * cout;
                    for (ci, &a) in inp.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let krow = &kernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (acc, &k) in o.iter_mut().zip(krow) {
                            *acc += a * k;
                        }
                    }
                }
            }
            o.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    out
}

/// 2x2 stride-2 max pooling with floor division; ties go to the first
/// position in row-major window order.
fn max_pool(input: &[f64], height: usize, width: usize, channels: usize) -> (Vec<f64>, Vec<usize>) {
    let (ph, pw) = (height / POOL, width / POOL);
    let mut out = vec![0.0; ph * pw * channels];
    let mut arg = vec![0; ph * pw * channels];
    for py in 0..ph {
        for px in 0..pw {
            for c in 0..channels {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..POOL {
                    for dx in 0..POOL {
                        let idx = ((py * POOL + dy) * width + px * POOL + dx) * channels + c;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (py * pw + px) * channels + c;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg)
}

fn conv_backward(
    input: &[f64],
    kernel: &[f64],
    d_pre: &[f64],
    grad: &mut [f64],
    layer: &Layer,
    (height, width, cin, cout): (usize, usize, usize, usize),
    need_input_grad: bool,
) -> Vec<f64> {
    let mut d_in = if need_input_grad {
        vec![0.0; height * width * cin]
    } else {
        Vec::new()
    };
    {
        let gb = &mut grad[layer.bias.range()];
        for pos in 0..height * width {
            for (g, d) in gb.iter_mut().zip(&d_pre[pos * cout..(pos + 1) * cout]) {
                *g += d;
            }
        }
    }
    let gk = &mut grad[layer.kernel.range()];
    for y in 0..height {
        for x in 0..width {
            let g = &d_pre[(y * width + x) * cout..(y * width + x + 1) * cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..KERNEL {
                let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < height) else {
                    continue;
                };
                for kx in 0..KERNEL {
                    let Some(ix) = (x + kx).checked_sub(1).filter(|&v| v < width) else {
                        continue;
                    };
                    let ibase = (iy * width + ix) * cin;
                    let kbase = (ky * KERNEL + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = input[ibase + ci];
                        let krow = &kernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let grow = &mut gk[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let mut s = 0.0;
                        for co in 0..cout {
                            grow[co] += a * g[co];
                            s += krow[co] * g[co];
                        }
                        if need_input_grad {
                            d_in[ibase + ci] += s;
                        }
                    }
                }
            }
        }
    }
    d_in
}

fn dense_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    inputs: usize,
    outputs: usize,
) -> Vec<f64> {
    let mut z = bias.to_vec();
    for i in 0..inputs {
        let x = input[i];
        if x == 0.0 {
            continue;
        }
        for (acc, &w) in z.iter_mut().zip(&kernel[i * outputs..(i + 1) * outputs]) {
            *acc += x * w;
        }
    }
    z
}

/// Returns (log-probabilities, probabilities) via log-sum-exp.
fn log_softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let log_probs: Vec<f64> = logits.iter().map(|z| z - lse).collect();
    let probs = log_probs.iter().map(|v| v.exp()).collect();
    (log_probs, probs)
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One probed coordinate of a finite-difference audit.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbedCoordinate {
    pub index: usize,
    pub slot: String,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(1, |analytic|)`
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub probes: Vec<ProbedCoordinate>,
    pub max_relative_error: f64,
}

impl GradientCheck {
    /// Worst probe per parameter slot, in slot order of first appearance.
    pub fn worst_per_slot(&self) -> Vec<&ProbedCoordinate> {
        let mut worst: Vec<&ProbedCoordinate> = Vec::new();
        for p in &self.probes {
            match worst.iter_mut().find(|w| w.slot == p.slot) {
                Some(w) if w.relative_error < p.relative_error => *w = p,
                Some(_) => {}
                None => worst.push(p),
            }
        }
        worst
    }
}

/// Compares `analytic` against central differences of the loss with step
/// `h` at the given coordinates. The numeric side uses forward passes only.
pub fn gradient_check_against(
    net: &Network,
    batch: &Batch,
    analytic: &[f64],
    coordinates: &[usize],
    h: f64,
) -> Result<GradientCheck, NetworkError> {
    if analytic.len() != net.parameter_count() {
        return Err(NetworkError::ParamLength {
            expected: net.parameter_count(),
            got: analytic.len(),
        });
    }
    let slots = net.slots();
    let mut probe_net = net.clone();
    let mut probes = Vec::with_capacity(coordinates.len());
    for &index in coordinates {
        let original = net.params[index];
        probe_net.params[index] = original + h;
        let plus = probe_net.loss(batch)?;
        probe_net.params[index] = original - h;
        let minus = probe_net.loss(batch)?;
        probe_net.params[index] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[index];
        let slot = slots
            .iter()
            .find(|s| s.range().contains(&index))
            .map(|s| s.name.clone())
            .ok_or(NetworkError::ParamLength {
                expected: net.parameter_count(),
                got: index + 1,
            })?;
        probes.push(ProbedCoordinate {
            index,
            slot,
            analytic: a,
            numeric,
            relative_error: (a - numeric).abs() / a.abs().max(1.0),
        });
    }
    let max_relative_error = probes.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    Ok(GradientCheck {
        probes,
        max_relative_error,
    })
}

pub fn gradient_check(
    net: &Network,
    batch: &Batch,
    coordinates: &[usize],
    h: f64,
) -> Result<GradientCheck, NetworkError> {
    let (_, grad) = net.loss_and_gradient(batch)?;
    gradient_check_against(net, batch, grad.values(), coordinates, h)
}
