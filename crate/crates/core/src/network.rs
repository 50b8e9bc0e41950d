//! Attention-pooled multiple-instance classifier.
//!
//! Frames pass through `L` ReLU layers (inverted dropout after each
//! activation while training). Two linear heads read the last hidden layer:
//! a classifier whose sigmoid gives per-frame class probabilities, and an
//! attention head whose softmax over frames (per class) weights those
//! probabilities into one clip-level probability per class.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::io::{eof_aware, read_magic, read_u32};
use crate::seed;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PLLNET01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub hidden: usize,
    pub classes: usize,
    pub embed_dim: usize,
}

impl ModelShape {
    /// Width of the representation the heads read.
    pub fn head_input(&self) -> usize {
        if self.layers == 0 {
            self.embed_dim
        } else {
            self.hidden
        }
    }
}

/// A fully connected layer computing `x · weight + bias` for row vectors `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..=limit)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// All trainable weights of the classifier. Gradients use the same type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMILParams {
    pub hidden: Vec<Dense>,
    pub classifier: Dense,
    pub attention: Dense,
}

impl AttentionMILParams {
    pub fn zeros(shape: ModelShape) -> Self {
        let mut fan_in = shape.embed_dim;
        let mut hidden = Vec::with_capacity(shape.layers);
        for _ in 0..shape.layers {
            hidden.push(Dense::zeros(fan_in, shape.hidden));
            fan_in = shape.hidden;
        }
        Self {
            hidden,
            classifier: Dense::zeros(fan_in, shape.classes),
            attention: Dense::zeros(fan_in, shape.classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape())
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            layers: self.hidden.len(),
            hidden: self.hidden.first().map_or(0, |d| d.weight.ncols()),
            classes: self.classifier.weight.ncols(),
            embed_dim: self
                .hidden
                .first()
                .map_or(self.classifier.weight.nrows(), |d| d.weight.nrows()),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().map(|(_, t)| t.len()).sum()
    }

    /// `(name, values)` for every tensor, in declaration order.
    pub fn tensors(&self) -> impl Iterator<Item = (String, &[f64])> {
        let hidden = self.hidden.iter().enumerate().flat_map(|(i, d)| {
            [
                (format!("hidden{i}.weight"), slice(&d.weight)),
                (
                    format!("hidden{i}.bias"),
                    d.bias.as_slice().expect("contiguous"),
                ),
            ]
        });
        hidden.chain([
            (
                "classifier.weight".to_owned(),
                slice(&self.classifier.weight),
            ),
            (
                "classifier.bias".to_owned(),
                self.classifier.bias.as_slice().expect("contiguous"),
            ),
            ("attention.weight".to_owned(), slice(&self.attention.weight)),
            (
                "attention.bias".to_owned(),
                self.attention.bias.as_slice().expect("contiguous"),
            ),
        ])
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 4);
        for d in &mut self.hidden {
            out.push(d.weight.as_slice_mut().expect("contiguous"));
            out.push(d.bias.as_slice_mut().expect("contiguous"));
        }
        for d in [&mut self.classifier, &mut self.attention] {
            out.push(d.weight.as_slice_mut().expect("contiguous"));
            out.push(d.bias.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b.1).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.tensors()
            .zip(other.tensors())
            .all(|(a, b)| a.1.len() == b.1.len())
            && self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are contiguous")
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(
    embed_dim: usize,
    num_classes: usize,
    layers: usize,
    hidden: usize,
    seed_value: u64,
) -> Result<AttentionMILParams> {
    if embed_dim == 0 || num_classes == 0 || (layers > 0 && hidden == 0) {
        return Err(Error::InvalidArgument(format!(
            "invalid model dims D={embed_dim} C={num_classes} L={layers} H={hidden}"
        )));
    }
    let mut rng = seed::rng(seed::derive(seed_value, &[seed::TAG_INIT]));
    let mut fan_in = embed_dim;
    let mut hidden_layers = Vec::with_capacity(layers);
    for _ in 0..layers {
        hidden_layers.push(Dense::glorot(fan_in, hidden, &mut rng));
        fan_in = hidden;
    }
    Ok(AttentionMILParams {
        hidden: hidden_layers,
        classifier: Dense::glorot(fan_in, num_classes, &mut rng),
        attention: Dense::glorot(fan_in, num_classes, &mut rng),
    })
}

/// Dropout noise for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub dropout_rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(dropout_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidFraction(dropout_rate, "[0, 1)"));
        }
        Ok(Self { dropout_rate, seed })
    }

    pub fn off() -> Self {
        Self {
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub clip_probs: Array1<f64>,
    pub instance_probs: Array2<f64>,
    pub attention_weights: Array2<f64>,
    input: Array2<f64>,
    pre_activations: Vec<Array2<f64>>,
    /// Per hidden layer: 0 or 1/(1-rate) per unit, `None` when dropout was off.
    dropout_masks: Vec<Option<Array2<f64>>>,
    outputs: Vec<Array2<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_input(params: &AttentionMILParams, sequence: &EmbeddingSequence) -> Result<()> {
    let d = params.shape().embed_dim;
    if sequence.embed_dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "clip {:?} has D={} but the model expects D={d}",
            sequence.clip_id(),
            sequence.embed_dim()
        )));
    }
    Ok(())
}

pub fn forward(
    params: &AttentionMILParams,
    sequence: &EmbeddingSequence,
    noise: &NoiseSpec,
    training: bool,
) -> Result<ForwardTrace> {
    check_input(params, sequence)?;
    Ok(forward_frames(
        params,
        sequence.frames().mapv(f64::from),
        noise,
        training,
    ))
}

pub(crate) fn forward_frames(
    params: &AttentionMILParams,
    input: Array2<f64>,
    noise: &NoiseSpec,
    training: bool,
) -> ForwardTrace {
    let use_dropout = training && noise.dropout_rate > 0.0;
    let keep = 1.0 - noise.dropout_rate;
    let mut rng = seed::rng(noise.seed);

    let mut pre_activations = Vec::with_capacity(params.hidden.len());
    let mut dropout_masks = Vec::with_capacity(params.hidden.len());
    let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(params.hidden.len());
    for layer in &params.hidden {
        let x = outputs.last().unwrap_or(&input).view();
        let pre = layer.apply(&x);
        let mut out = pre.mapv(|v| v.max(0.0));
        let mask = use_dropout.then(|| {
            let mask = Array2::from_shape_fn(out.dim(), |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            out *= &mask;
            mask
        });
        pre_activations.push(pre);
        dropout_masks.push(mask);
        outputs.push(out);
    }

    let h = outputs.last().unwrap_or(&input).view();
    let instance_probs = params.classifier.apply(&h).mapv(sigmoid);
    let mut attention_weights = params.attention.apply(&h);
    for mut col in attention_weights.axis_iter_mut(Axis(1)) {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    let clip_probs = (&attention_weights * &instance_probs).sum_axis(Axis(0));

    ForwardTrace {
        clip_probs,
        instance_probs,
        attention_weights,
        input,
        pre_activations,
        dropout_masks,
        outputs,
    }
}

/// Reverse-mode gradient of a loss with respect to all parameters, given the
/// loss gradient with respect to `trace.clip_probs`. Dropout masks stored in
/// the trace are reused, so a stochastic pass is differentiated as realized.
pub fn backward(
    params: &AttentionMILParams,
    trace: &ForwardTrace,
    clip_grad: &Array1<f64>,
) -> Result<AttentionMILParams> {
    let shape = params.shape();
    let consistent = trace.pre_activations.len() == shape.layers
        && trace.input.ncols() == shape.embed_dim
        && trace.instance_probs.ncols() == shape.classes
        && clip_grad.len() == shape.classes
        && trace.outputs.iter().all(|o| o.ncols() == shape.hidden);
    if !consistent {
        return Err(Error::ShapeMismatch(format!(
            "trace does not match model shape {shape:?} or upstream gradient of length {}",
            clip_grad.len()
        )));
    }

    let p = &trace.instance_probs;
    let w = &trace.attention_weights;
    // d clip_c / d logit_tc through the sigmoid and the softmax.
    let mut d_cls = Array2::zeros(p.dim());
    let mut d_att = Array2::zeros(p.dim());
    Zip::from(d_cls.rows_mut())
        .and(d_att.rows_mut())
        .and(p.rows())
        .and(w.rows())
        .for_each(|mut dc, mut da, p_t, w_t| {
            for c in 0..p_t.len() {
                let gw = clip_grad[c] * w_t[c];
                dc[c] = gw * p_t[c] * (1.0 - p_t[c]);
                da[c] = gw * (p_t[c] - trace.clip_probs[c]);
            }
        });

    let h = trace.outputs.last().unwrap_or(&trace.input);
    // Assigning into fresh zeros keeps every tensor in standard layout.
    let mut grad = params.zeros_like();
    grad.classifier.weight.assign(&h.t().dot(&d_cls));
    grad.classifier.bias.assign(&d_cls.sum_axis(Axis(0)));
    grad.attention.weight.assign(&h.t().dot(&d_att));
    grad.attention.bias.assign(&d_att.sum_axis(Axis(0)));

    if shape.layers == 0 {
        return Ok(grad);
    }
    let mut d_h =
        d_cls.dot(&params.classifier.weight.t()) + d_att.dot(&params.attention.weight.t());
    for l in (0..shape.layers).rev() {
        if let Some(mask) = &trace.dropout_masks[l] {
            d_h *= mask;
        }
        Zip::from(&mut d_h)
            .and(&trace.pre_activations[l])
            .for_each(|g, &pre| {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            });
        let x = if l == 0 {
            &trace.input
        } else {
            &trace.outputs[l - 1]
        };
        grad.hidden[l].weight.assign(&x.t().dot(&d_h));
        grad.hidden[l].bias.assign(&d_h.sum_axis(Axis(0)));
        if l > 0 {
            d_h = d_h.dot(&params.hidden[l].weight.t());
        }
    }
    Ok(grad)
}

/// Inference-mode clip probabilities.
pub fn predict(params: &AttentionMILParams, sequence: &EmbeddingSequence) -> Result<Array1<f64>> {
    Ok(forward(params, sequence, &NoiseSpec::off(), false)?.clip_probs)
}

pub(crate) fn write_shape(w: &mut impl Write, shape: ModelShape) -> Result<()> {
    for v in [shape.layers, shape.hidden, shape.classes, shape.embed_dim] {
        w.write_u32::<LittleEndian>(
            u32::try_from(v)
                .map_err(|_| Error::InvalidArgument(format!("dimension {v} exceeds u32")))?,
        )?;
    }
    Ok(())
}

pub(crate) fn read_shape(r: &mut impl Read) -> Result<ModelShape> {
    Ok(ModelShape {
        layers: read_u32(r)? as usize,
        hidden: read_u32(r)? as usize,
        classes: read_u32(r)? as usize,
        embed_dim: read_u32(r)? as usize,
    })
}

/// Checkpoint: magic `PLLNET01`, u32 (L, H, C, D), then every tensor as f32
/// in declaration order.
pub fn write_checkpoint(w: &mut impl Write, params: &AttentionMILParams) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_shape(w, params.shape())?;
    for (_, t) in params.tensors() {
        for v in t {
            w.write_f32::<LittleEndian>(*v as f32)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<AttentionMILParams> {
    read_magic(r, CHECKPOINT_MAGIC)?;
    let shape = read_shape(r)?;
    let mut params = AttentionMILParams::zeros(shape);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from(r.read_f32::<LittleEndian>().map_err(eof_aware)?);
        }
    }
    Ok(params)
}
