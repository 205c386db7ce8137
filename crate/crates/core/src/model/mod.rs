//! A small convolutional/dense network with per-class logistic outputs.
//!
//! Tensors are flattened channel-major (`c, row, col`). Convolutions use no
//! padding. Dense layers read the flattened output of the previous layer.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use train::{
    load_samples, read_history, train, train_samples, train_samples_with, write_history,
    EpochRecord, Hyperparams, LrDecay, Sample, TrainOutcome,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{DatasetError, NUM_CLASSES};
use crate::pipeline::{InputTensor, PipelineError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {0} does not chain onto the previous layer's output")]
    ShapeChainMismatch(usize),
    #[error("the last layer must be linear with {NUM_CLASSES} outputs")]
    InvalidHead,
    #[error("input shape {got:?} does not match the model's {expected:?}")]
    InputShapeMismatch { expected: Shape, got: Shape },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot freeze {k} layers of a {layers}-layer model; the head must stay trainable")]
    FreezeAll { k: usize, layers: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// `(channels, height, width)` of an activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// A flat vector of `n` features.
    pub fn flat(n: usize) -> Self {
        Self::new(n, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<(usize, usize, usize)> for Shape {
    fn from((c, h, w): (usize, usize, usize)) -> Self {
        Self::new(c, h, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv {
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
    pub frozen: bool,
}

impl LayerSpec {
    pub fn conv(
        kernel: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        activation: Activation,
    ) -> Self {
        Self {
            kind: LayerKind::Conv {
                kernel_h: kernel.0,
                kernel_w: kernel.1,
                in_channels,
                out_channels,
                stride,
            },
            activation,
            frozen: false,
        }
    }

    pub fn dense(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense { inputs, outputs },
            activation,
            frozen: false,
        }
    }

    pub fn weight_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                ..
            } => kernel_h * kernel_w * in_channels * out_channels,
            LayerKind::Dense { inputs, outputs } => inputs * outputs,
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv { out_channels, .. } => out_channels,
            LayerKind::Dense { outputs, .. } => outputs,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv {
                kernel_h,
                kernel_w,
                in_channels,
                ..
            } => kernel_h * kernel_w * in_channels,
            LayerKind::Dense { inputs, .. } => inputs,
        }
    }

    /// Output shape for `input`, or `None` when the layer cannot consume it.
    pub fn output_shape(&self, input: Shape) -> Option<Shape> {
        match self.kind {
            LayerKind::Conv {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                stride,
            } => {
                if stride == 0
                    || kernel_h == 0
                    || kernel_w == 0
                    || out_channels == 0
                    || in_channels != input.channels
                    || kernel_h > input.height
                    || kernel_w > input.width
                {
                    return None;
                }
                Some(Shape::new(
                    out_channels,
                    (input.height - kernel_h) / stride + 1,
                    (input.width - kernel_w) / stride + 1,
                ))
            }
            LayerKind::Dense { inputs, outputs } => {
                (inputs == input.len() && outputs > 0).then(|| Shape::flat(outputs))
            }
        }
    }
}

/// conv(3x3, C->8, stride 1, ReLU) -> conv(3x3, 8->16, stride 2, ReLU)
/// -> dense(flatten->64, ReLU) -> dense(64->14).
pub fn default_architecture(input: Shape) -> Vec<LayerSpec> {
    let conv1 = LayerSpec::conv((3, 3), input.channels, 8, 1, Activation::Relu);
    let conv2 = LayerSpec::conv((3, 3), 8, 16, 2, Activation::Relu);
    let flat = conv1
        .output_shape(input)
        .and_then(|s| conv2.output_shape(s))
        .map_or(0, |s| s.len());
    vec![
        conv1,
        conv2,
        LayerSpec::dense(flat, 64, Activation::Relu),
        LayerSpec::dense(64, NUM_CLASSES, Activation::Identity),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Conv: `[out][in][kh][kw]`; dense: `[out][in]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    input_shape: Shape,
    output_shape: Shape,
}

impl Layer {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        self.output_shape
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.output_shape.len(), 0.0);
        match self.spec.kind {
            LayerKind::Dense { inputs, .. } => {
                for (o, (row, b)) in self.weights.chunks_exact(inputs).zip(&self.bias).enumerate() {
                    out[o] = b + dot(row, input);
                }
            }
            LayerKind::Conv {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                stride,
            } => {
                let (ih, iw) = (self.input_shape.height, self.input_shape.width);
                let (oh, ow) = (self.output_shape.height, self.output_shape.width);
                for o in 0..out_channels {
                    let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
                    plane.fill(self.bias[o]);
                    for c in 0..in_channels {
                        let src = &input[c * ih * iw..(c + 1) * ih * iw];
                        for ky in 0..kernel_h {
                            for kx in 0..kernel_w {
                                let w = self.weights
                                    [((o * in_channels + c) * kernel_h + ky) * kernel_w + kx];
                                for y in 0..oh {
                                    let src_row = &src[(y * stride + ky) * iw + kx..];
                                    let dst_row = &mut plane[y * ow..(y + 1) * ow];
                                    if stride == 1 {
                                        for (d, s) in dst_row.iter_mut().zip(&src_row[..ow]) {
                                            *d += w * s;
                                        }
                                    } else {
                                        for (x, d) in dst_row.iter_mut().enumerate() {
                                            *d += w * src_row[x * stride];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients for `grad_out` (gradient w.r.t. the
    /// pre-activation) into `dw`/`db`, and writes the input gradient into
    /// `grad_in` when requested.
    fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        params: Option<(&mut [f64], &mut [f64])>,
        grad_in: Option<&mut Vec<f64>>,
    ) {
        match self.spec.kind {
            LayerKind::Dense { inputs, .. } => {
                if let Some((dw, db)) = params {
                    for (o, &g) in grad_out.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        db[o] += g;
                        for (d, x) in dw[o * inputs..(o + 1) * inputs].iter_mut().zip(input) {
                            *d += g * x;
                        }
                    }
                }
                if let Some(gin) = grad_in {
                    gin.clear();
                    gin.resize(inputs, 0.0);
                    for (row, &g) in self.weights.chunks_exact(inputs).zip(grad_out) {
                        if g == 0.0 {
                            continue;
                        }
                        for (d, w) in gin.iter_mut().zip(row) {
                            *d += g * w;
                        }
                    }
                }
            }
            LayerKind::Conv {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                stride,
            } => {
                let (ih, iw) = (self.input_shape.height, self.input_shape.width);
                let (oh, ow) = (self.output_shape.height, self.output_shape.width);
                let mut params = params;
                let mut grad_in = grad_in;
                if let Some(gin) = grad_in.as_deref_mut() {
                    gin.clear();
                    gin.resize(self.input_shape.len(), 0.0);
                }
                for o in 0..out_channels {
                    let g_plane = &grad_out[o * oh * ow..(o + 1) * oh * ow];
                    if let Some((_, db)) = params.as_mut() {
                        db[o] += g_plane.iter().sum::<f64>();
                    }
                    for c in 0..in_channels {
                        let src = &input[c * ih * iw..(c + 1) * ih * iw];
                        for ky in 0..kernel_h {
                            for kx in 0..kernel_w {
                                let widx = ((o * in_channels + c) * kernel_h + ky) * kernel_w + kx;
                                let w = self.weights[widx];
                                let mut acc = 0.0;
                                for y in 0..oh {
                                    let off = (y * stride + ky) * iw + kx;
                                    let g_row = &g_plane[y * ow..(y + 1) * ow];
                                    if stride == 1 {
                                        acc += dot(g_row, &src[off..off + ow]);
                                        if let Some(gin) = grad_in.as_deref_mut() {
                                            let base = c * ih * iw + off;
                                            for (d, g) in gin[base..base + ow].iter_mut().zip(g_row)
                                            {
                                                *d += g * w;
                                            }
                                        }
                                    } else {
                                        for (x, &g) in g_row.iter().enumerate() {
                                            acc += g * src[off + x * stride];
                                        }
                                        if let Some(gin) = grad_in.as_deref_mut() {
                                            let base = c * ih * iw + off;
                                            for (x, &g) in g_row.iter().enumerate() {
                                                gin[base + x * stride] += g * w;
                                            }
                                        }
                                    }
                                }
                                if let Some((dw, _)) = params.as_mut() {
                                    dw[widx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn logistic(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    // keep saturated logits strictly inside (0, 1)
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// An ordered stack of layers with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Shape,
    pub layers: Vec<Layer>,
    pub seed: u64,
}

/// Checks that `specs` chain from `input` and end in a 14-wide linear head,
/// returning each layer's `(input, output)` shapes.
fn chain_shapes(input: Shape, specs: &[LayerSpec]) -> Result<Vec<(Shape, Shape)>> {
    let mut shapes = Vec::with_capacity(specs.len());
    let mut current = input;
    for (i, spec) in specs.iter().enumerate() {
        let out = spec
            .output_shape(current)
            .ok_or(ModelError::ShapeChainMismatch(i))?;
        shapes.push((current, out));
        current = out;
    }
    match specs.last() {
        Some(last)
            if last.activation == Activation::Identity
                && matches!(last.kind, LayerKind::Dense { outputs, .. } if outputs == NUM_CLASSES) =>
        {
            Ok(shapes)
        }
        _ => Err(ModelError::InvalidHead),
    }
}

/// Draws weights from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` and zeroes biases,
/// deterministically from `seed`.
pub fn init_model(input: Shape, specs: &[LayerSpec], seed: u64) -> Result<Model> {
    let shapes = chain_shapes(input, specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = specs
        .iter()
        .zip(shapes)
        .map(|(spec, (input_shape, output_shape))| {
            let bound = 1.0 / (spec.fan_in() as f64).sqrt();
            let weights = (0..spec.weight_len())
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Layer {
                spec: *spec,
                weights,
                bias: vec![0.0; spec.bias_len()],
                input_shape,
                output_shape,
            }
        })
        .collect();
    Ok(Model {
        input_shape: input,
        layers,
        seed,
    })
}

/// Parameter arrays shaped like a model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `(weights, bias)` per layer; all zeros for frozen layers.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    /// Loss of the batch the gradients were computed on.
    pub loss: f64,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
            loss: 0.0,
        }
    }
}

struct Trace {
    /// Input to each layer, plus the final logits at the end.
    activations: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

impl Model {
    /// Rebuilds a model from stored parts, checking every array size.
    pub fn from_parts(input: Shape, layers: Vec<(LayerSpec, Vec<f64>, Vec<f64>)>, seed: u64) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|(s, _, _)| *s).collect();
        let shapes = chain_shapes(input, &specs)?;
        let layers = layers
            .into_iter()
            .zip(shapes)
            .enumerate()
            .map(|(i, ((spec, weights, bias), (input_shape, output_shape)))| {
                if weights.len() != spec.weight_len() || bias.len() != spec.bias_len() {
                    return Err(ModelError::ShapeMismatch(format!(
                        "layer {i} parameter arrays have the wrong length"
                    )));
                }
                Ok(Layer {
                    spec,
                    weights,
                    bias,
                    input_shape,
                    output_shape,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input_shape: input,
            layers,
            seed,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Sets every weight and bias to zero.
    pub fn zeroed(mut self) -> Self {
        for layer in &mut self.layers {
            layer.weights.fill(0.0);
            layer.bias.fill(0.0);
        }
        self
    }

    fn check_input(&self, tensor: &InputTensor) -> Result<()> {
        let got = Shape::from(tensor.shape());
        if got != self.input_shape {
            return Err(ModelError::InputShapeMismatch {
                expected: self.input_shape,
                got,
            });
        }
        Ok(())
    }

    fn trace(&self, input: &[f64]) -> Trace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(input.to_vec());
        for layer in &self.layers {
            let mut z = Vec::new();
            layer.forward(activations.last().expect("input pushed"), &mut z);
            let a = match layer.spec.activation {
                Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
                Activation::Identity => z.clone(),
            };
            pre.push(z);
            activations.push(a);
        }
        Trace { activations, pre }
    }

    /// Logits for one flattened input.
    pub fn logits_flat(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_shape.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "flat input has {} values, model expects {}",
                input.len(),
                self.input_shape.len()
            )));
        }
        Ok(self.trace(input).activations.pop().expect("logits"))
    }

    /// Per-class probabilities for one flattened input.
    pub fn predict_flat(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits_flat(input)?.into_iter().map(logistic).collect())
    }

    /// Loss and gradients for a batch of flattened inputs.
    pub fn backward_flat(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Gradients> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} inputs for {} target rows",
                inputs.len(),
                targets.len()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        // lowest layer index whose parameters receive gradients
        let first_trainable = self.layers.iter().position(|l| !l.spec.frozen);
        let scale = 1.0 / (inputs.len() * NUM_CLASSES) as f64;
        let mut total_loss = 0.0;
        let mut g = Vec::new();
        let mut g_next = Vec::new();
        for (input, target) in inputs.iter().zip(targets) {
            if input.len() != self.input_shape.len() || target.len() != NUM_CLASSES {
                return Err(ModelError::ShapeMismatch("batch row has the wrong width".into()));
            }
            let trace = self.trace(input);
            let logits = trace.activations.last().expect("logits");
            g.clear();
            for (&z, &y) in logits.iter().zip(target) {
                let p = logistic(z);
                total_loss += bce(p, y);
                // d(bce)/dz = p - y while p is inside the clamp range
                let inside = (P_CLAMP..=1.0 - P_CLAMP).contains(&p);
                g.push(if inside { (p - y) * scale } else { 0.0 });
            }
            let Some(first) = first_trainable else {
                continue;
            };
            for (idx, layer) in self.layers.iter().enumerate().rev() {
                if layer.spec.activation == Activation::Relu {
                    for (gv, z) in g.iter_mut().zip(&trace.pre[idx]) {
                        if *z <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                let params = (!layer.spec.frozen).then(|| {
                    let (w, b) = &mut grads.layers[idx];
                    (w.as_mut_slice(), b.as_mut_slice())
                });
                let need_input_grad = idx > first;
                layer.backward(
                    &trace.activations[idx],
                    &g,
                    params,
                    need_input_grad.then_some(&mut g_next),
                );
                if !need_input_grad {
                    break;
                }
                std::mem::swap(&mut g, &mut g_next);
            }
        }
        grads.loss = total_loss * scale;
        Ok(grads)
    }
}

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` inside the loss.
pub const P_CLAMP: f64 = 1e-12;

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn flatten_batch(model: &Model, batch: &[InputTensor]) -> Result<Vec<Vec<f64>>> {
    batch
        .iter()
        .map(|t| {
            model.check_input(t)?;
            Ok(t.flatten())
        })
        .collect()
}

/// Per-class probabilities (`batch x 14`) from independent logistic outputs.
pub fn forward(model: &Model, batch: &[InputTensor]) -> Result<Vec<Vec<f64>>> {
    flatten_batch(model, batch)?
        .iter()
        .map(|x| model.predict_flat(x))
        .collect()
}

/// Mean binary cross-entropy over batch and classes, with probabilities
/// clamped to `[1e-12, 1 - 1e-12]`.
pub fn loss(probabilities: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if probabilities.len() != targets.len() || probabilities.is_empty() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} probability rows for {} target rows",
            probabilities.len(),
            targets.len()
        )));
    }
    let width = probabilities[0].len();
    let mut total = 0.0;
    for (p_row, y_row) in probabilities.iter().zip(targets) {
        if p_row.len() != width || y_row.len() != width || width == 0 {
            return Err(ModelError::ShapeMismatch("ragged probability rows".into()));
        }
        total += p_row.iter().zip(y_row).map(|(&p, &y)| bce(p, y)).sum::<f64>();
    }
    Ok(total / (probabilities.len() * width) as f64)
}

/// Gradients of [`loss`] (applied to [`forward`]) w.r.t. every trainable array.
/// Frozen layers get all-zero gradients.
pub fn backward(model: &Model, batch: &[InputTensor], targets: &[Vec<f64>]) -> Result<Gradients> {
    let inputs = flatten_batch(model, batch)?;
    model.backward_flat(&inputs, targets)
}

/// Momentum velocities, one per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        Self {
            velocity: Gradients::zeros_like(model).layers,
        }
    }
}

/// One SGD-with-momentum update: `v <- momentum * v - lr * g; w <- w + v`.
/// Frozen layers are left untouched and keep zero velocity.
pub fn sgdm_step(
    model: &mut Model,
    state: &mut OptimizerState,
    grads: &Gradients,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    let n = model.layers.len();
    if state.velocity.len() != n || grads.layers.len() != n {
        return Err(ModelError::ShapeMismatch(
            "optimizer state or gradients do not match the model".into(),
        ));
    }
    for ((layer, (vw, vb)), (gw, gb)) in model
        .layers
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(&grads.layers)
    {
        if vw.len() != layer.weights.len()
            || gw.len() != layer.weights.len()
            || vb.len() != layer.bias.len()
            || gb.len() != layer.bias.len()
        {
            return Err(ModelError::ShapeMismatch("parameter array sizes differ".into()));
        }
        if layer.spec.frozen {
            vw.fill(0.0);
            vb.fill(0.0);
            continue;
        }
        for ((w, v), g) in layer.weights.iter_mut().zip(vw.iter_mut()).zip(gw) {
            *v = momentum * *v - learning_rate * g;
            *w += *v;
        }
        for ((w, v), g) in layer.bias.iter_mut().zip(vb.iter_mut()).zip(gb) {
            *v = momentum * *v - learning_rate * g;
            *w += *v;
        }
    }
    Ok(())
}

/// Flags the first `k` layers frozen and the rest trainable.
pub fn freeze_first(mut model: Model, k: usize) -> Result<Model> {
    if k >= model.layers.len() {
        return Err(ModelError::FreezeAll {
            k,
            layers: model.layers.len(),
        });
    }
    for (i, layer) in model.layers.iter_mut().enumerate() {
        layer.spec.frozen = i < k;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Image;

    fn tiny_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv((3, 3), 1, 2, 1, Activation::Relu),
            LayerSpec::dense(2 * 2 * 2, 5, Activation::Relu),
            LayerSpec::dense(5, NUM_CLASSES, Activation::Identity),
        ]
    }

    fn tensor(c: usize, h: usize, w: usize, seed: u64) -> InputTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        InputTensor {
            layout: if c == 1 {
                crate::pipeline::InputMode::Raw
            } else {
                crate::pipeline::InputMode::Wavelet
            },
            channels: (0..c)
                .map(|_| Image::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        }
    }

    #[test]
    fn default_architecture_shapes() {
        let specs = default_architecture(Shape::new(2, 64, 64));
        let m = init_model(Shape::new(2, 64, 64), &specs, 1).unwrap();
        assert_eq!(m.layers[0].output_shape(), Shape::new(8, 62, 62));
        assert_eq!(m.layers[1].output_shape(), Shape::new(16, 30, 30));
        assert_eq!(m.layers[2].spec.kind, LayerKind::Dense { inputs: 14400, outputs: 64 });
        assert_eq!(m.layers[3].output_shape(), Shape::flat(14));
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let input = Shape::new(1, 4, 4);
        let a = init_model(input, &tiny_specs(), 9).unwrap();
        let b = init_model(input, &tiny_specs(), 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_model(input, &tiny_specs(), 10).unwrap());
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_std_matches_uniform_moment() {
        let specs = vec![
            LayerSpec::dense(100, 20, Activation::Relu),
            LayerSpec::dense(20, NUM_CLASSES, Activation::Identity),
        ];
        let m = init_model(Shape::flat(100), &specs, 3).unwrap();
        let w = &m.layers[0].weights;
        assert_eq!(w.len(), 2000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let expected = (1.0 / 10.0) / 3f64.sqrt();
        assert!((std - expected).abs() < 0.2 * expected, "std {std}");
    }

    #[test]
    fn chain_errors() {
        let bad = vec![
            LayerSpec::conv((3, 3), 2, 4, 1, Activation::Relu),
            LayerSpec::dense(10, NUM_CLASSES, Activation::Identity),
        ];
        assert!(matches!(
            init_model(Shape::new(1, 8, 8), &bad, 0),
            Err(ModelError::ShapeChainMismatch(0))
        ));
        let bad = vec![
            LayerSpec::conv((3, 3), 1, 4, 1, Activation::Relu),
            LayerSpec::dense(10, NUM_CLASSES, Activation::Identity),
        ];
        assert!(matches!(
            init_model(Shape::new(1, 8, 8), &bad, 0),
            Err(ModelError::ShapeChainMismatch(1))
        ));
        let relu_head = vec![LayerSpec::dense(4, NUM_CLASSES, Activation::Relu)];
        assert!(matches!(
            init_model(Shape::flat(4), &relu_head, 0),
            Err(ModelError::InvalidHead)
        ));
    }

    #[test]
    fn zero_model_gives_half() {
        let m = init_model(Shape::new(1, 4, 4), &tiny_specs(), 1).unwrap().zeroed();
        let probs = forward(&m, &[tensor(1, 4, 4, 0), tensor(1, 4, 4, 1)]).unwrap();
        assert!(probs.iter().flatten().all(|&p| p == 0.5));
    }

    #[test]
    fn relu_inside_forward() {
        // one hidden unit with pre-activation -1 and one with 2, read out by
        // unit weights into the first two logits
        let specs = vec![
            LayerSpec::dense(1, 2, Activation::Relu),
            LayerSpec::dense(2, NUM_CLASSES, Activation::Identity),
        ];
        let mut m = init_model(Shape::flat(1), &specs, 0).unwrap().zeroed();
        m.layers[0].weights = vec![-1.0, 2.0];
        m.layers[1].weights[0] = 1.0; // logit 0 <- hidden 0
        m.layers[1].weights[3] = 1.0; // logit 1 <- hidden 1
        let logits = m.logits_flat(&[1.0]).unwrap();
        assert_eq!(logits[0], 0.0);
        assert_eq!(logits[1], 2.0);
    }

    #[test]
    fn dense_golden_fixture() {
        let specs = vec![LayerSpec::dense(2, NUM_CLASSES, Activation::Identity)];
        let mut m = init_model(Shape::flat(2), &specs, 0).unwrap();
        for o in 0..NUM_CLASSES {
            m.layers[0].weights[2 * o] = 0.1 * (o as f64 - 6.0);
            m.layers[0].weights[2 * o + 1] = -0.05 * o as f64;
            m.layers[0].bias[o] = 0.02 * o as f64 - 0.1;
        }
        let x = [0.7, -1.3];
        // hand computation: z = W x + b, p = 1 / (1 + e^-z)
        let expected: Vec<f64> = (0..NUM_CLASSES)
            .map(|o| {
                let z = 0.1 * (o as f64 - 6.0) * 0.7 + (-0.05 * o as f64) * -1.3 + 0.02 * o as f64 - 0.1;
                1.0 / (1.0 + (-z).exp())
            })
            .collect();
        // frozen values for a few classes
        assert!((expected[0] - 0.3728522336868044).abs() < 1e-12);
        assert!((expected[13] - 0.8168275594809488).abs() < 1e-12);
        let got = m.predict_flat(&x).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = init_model(Shape::new(1, 4, 4), &tiny_specs(), 1).unwrap();
        assert!(matches!(
            forward(&m, &[tensor(2, 4, 4, 0)]),
            Err(ModelError::InputShapeMismatch { .. })
        ));
    }

    #[test]
    fn loss_examples() {
        let half = vec![vec![0.5; 14]; 3];
        let y: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..14).map(|j| ((i + j) % 2) as f64).collect())
            .collect();
        assert!((loss(&half, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let perfect: Vec<Vec<f64>> = y
            .iter()
            .map(|r| r.iter().map(|&t| if t == 1.0 { 1.0 } else { 0.0 }).collect())
            .collect();
        assert!(loss(&perfect, &y).unwrap() < 1e-9);

        let l = loss(&[vec![0.9, 0.2]], &[vec![1.0, 0.0]]).unwrap();
        // (-ln 0.9 - ln 0.8) / 2, evaluated independently
        assert!((l - 0.164252033486018).abs() < 1e-12);
        assert!((l - (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0).abs() < 1e-15);

        assert!(loss(&[vec![0.5; 2]], &[vec![1.0; 3]]).is_err());
        assert!(loss(&[vec![0.5; 2]], &[]).is_err());
    }

    fn targets(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..NUM_CLASSES).map(|_| rng.random_range(0..2) as f64).collect())
            .collect()
    }

    fn batch_loss(m: &Model, batch: &[InputTensor], y: &[Vec<f64>]) -> f64 {
        loss(&forward(m, batch).unwrap(), y).unwrap()
    }

    fn param_mut(m: &mut Model, layer: usize, which: usize, i: usize) -> &mut f64 {
        if which == 0 {
            &mut m.layers[layer].weights[i]
        } else {
            &mut m.layers[layer].bias[i]
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let specs = vec![
            LayerSpec::conv((2, 2), 2, 3, 2, Activation::Relu),
            LayerSpec::conv((2, 2), 3, 2, 1, Activation::Relu),
            LayerSpec::dense(2 * 2 * 2, 6, Activation::Relu),
            LayerSpec::dense(6, NUM_CLASSES, Activation::Identity),
        ];
        let input = Shape::new(2, 6, 6);
        let mut m = init_model(input, &specs, 5).unwrap();
        for layer in &mut m.layers {
            for (i, b) in layer.bias.iter_mut().enumerate() {
                *b = 0.05 * (i as f64 + 1.0);
            }
        }
        let batch: Vec<InputTensor> = (0..3).map(|s| tensor(2, 6, 6, 100 + s)).collect();
        let y = targets(3, 8);
        let grads = backward(&m, &batch, &y).unwrap();
        assert!((grads.loss - batch_loss(&m, &batch, &y)).abs() < 1e-14);
        let h = 1e-5;
        for li in 0..m.layers.len() {
            for which in 0..2 {
                let n = if which == 0 { m.layers[li].weights.len() } else { m.layers[li].bias.len() };
                for i in 0..n {
                    let mut plus = m.clone();
                    let mut minus = m.clone();
                    *param_mut(&mut plus, li, which, i) += h;
                    *param_mut(&mut minus, li, which, i) -= h;
                    let fd = (batch_loss(&plus, &batch, &y) - batch_loss(&minus, &batch, &y)) / (2.0 * h);
                    let an = if which == 0 { grads.layers[li].0[i] } else { grads.layers[li].1[i] };
                    let ok = (fd - an).abs() <= 1e-7 || (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs());
                    assert!(ok, "layer {li} array {which} index {i}: fd {fd} analytic {an}");
                }
            }
        }
    }

    #[test]
    fn frozen_layer_gets_zero_gradient() {
        let input = Shape::new(1, 4, 4);
        let m = freeze_first(init_model(input, &tiny_specs(), 2).unwrap(), 1).unwrap();
        let g = backward(&m, &[tensor(1, 4, 4, 3)], &targets(1, 4)).unwrap();
        assert!(g.layers[0].0.iter().chain(&g.layers[0].1).all(|&v| v == 0.0));
        assert!(g.layers[1].0.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_input_gives_zero_first_layer_weight_gradient() {
        let input = Shape::new(1, 4, 4);
        let m = init_model(input, &tiny_specs(), 2).unwrap();
        let zeros = InputTensor {
            layout: crate::pipeline::InputMode::Raw,
            channels: vec![Image::zeros(4, 4)],
        };
        let g = backward(&m, &[zeros], &targets(1, 4)).unwrap();
        assert!(g.layers[0].0.iter().all(|&v| v == 0.0));
    }

    fn single_weight_model(w: f64) -> Model {
        let specs = vec![LayerSpec::dense(1, NUM_CLASSES, Activation::Identity)];
        let mut m = init_model(Shape::flat(1), &specs, 0).unwrap().zeroed();
        m.layers[0].weights[0] = w;
        m
    }

    #[test]
    fn sgdm_two_step_recursion() {
        let mut m = single_weight_model(1.0);
        let mut state = OptimizerState::new(&m);
        let mut g = Gradients::zeros_like(&m);
        g.layers[0].0[0] = 0.5;
        sgdm_step(&mut m, &mut state, &g, 0.1, 0.9).unwrap();
        assert!((state.velocity[0].0[0] + 0.05).abs() < 1e-15);
        assert!((m.layers[0].weights[0] - 0.95).abs() < 1e-15);
        sgdm_step(&mut m, &mut state, &g, 0.1, 0.9).unwrap();
        assert!((state.velocity[0].0[0] + 0.095).abs() < 1e-15);
        assert!((m.layers[0].weights[0] - 0.855).abs() < 1e-15);
    }

    #[test]
    fn sgdm_without_momentum_is_gradient_descent() {
        let mut m = single_weight_model(2.0);
        let mut state = OptimizerState::new(&m);
        let mut g = Gradients::zeros_like(&m);
        g.layers[0].0[0] = -3.0;
        for _ in 0..3 {
            let before = m.layers[0].weights[0];
            sgdm_step(&mut m, &mut state, &g, 0.01, 0.0).unwrap();
            assert!((m.layers[0].weights[0] - (before + 0.03)).abs() < 1e-15);
        }
    }

    #[test]
    fn sgdm_leaves_frozen_layers_alone() {
        let input = Shape::new(1, 4, 4);
        let mut m = freeze_first(init_model(input, &tiny_specs(), 2).unwrap(), 2).unwrap();
        let before = m.clone();
        let mut state = OptimizerState::new(&m);
        let y = targets(2, 1);
        let batch = [tensor(1, 4, 4, 1), tensor(1, 4, 4, 2)];
        for _ in 0..20 {
            let g = backward(&m, &batch, &y).unwrap();
            sgdm_step(&mut m, &mut state, &g, 0.1, 0.9).unwrap();
        }
        for i in 0..2 {
            assert_eq!(m.layers[i].weights, before.layers[i].weights);
            assert_eq!(m.layers[i].bias, before.layers[i].bias);
            assert!(state.velocity[i].0.iter().all(|&v| v == 0.0));
        }
        assert_ne!(m.layers[2].weights, before.layers[2].weights);
    }

    #[test]
    fn sgdm_shape_errors() {
        let mut m = single_weight_model(1.0);
        let other = init_model(Shape::new(1, 4, 4), &tiny_specs(), 0).unwrap();
        let mut state = OptimizerState::new(&other);
        let g = Gradients::zeros_like(&m);
        assert!(matches!(
            sgdm_step(&mut m, &mut state, &g, 0.1, 0.9),
            Err(ModelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn freeze_first_cases() {
        let m = init_model(Shape::new(1, 4, 4), &tiny_specs(), 0).unwrap();
        let none = freeze_first(m.clone(), 0).unwrap();
        assert!(none.layers.iter().all(|l| !l.spec.frozen));
        let one = freeze_first(m.clone(), 1).unwrap();
        let flags: Vec<bool> = one.layers.iter().map(|l| l.spec.frozen).collect();
        assert_eq!(flags, vec![true, false, false]);
        assert!(matches!(
            freeze_first(m, 3),
            Err(ModelError::FreezeAll { k: 3, layers: 3 })
        ));
    }

    #[test]
    fn probabilities_stay_open_interval() {
        let mut m = single_weight_model(1e6);
        m.layers[0].weights[1] = -1e6;
        let p = m.predict_flat(&[1.0]).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
