//! Convolutional Pole-Image encoder.
//!
//! Four 3×3 stride-2 convolutions (1→16→32→64→128 channels, zero padding 1,
//! each followed by a rectifier), global average pooling, one fully
//! connected layer to `emb_dim`, and L2 normalization. Everything runs in
//! `f64` with hand-written backward passes so that gradients can be checked
//! against finite differences.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;

use crate::error::{Error, Result};
use crate::rng::{purpose, SplitMix64};
use layers::ConvShape;

pub use adam::AdamState;
pub use gradcheck::{grad_check, GradCheckReport};

pub const CONV_CHANNELS: [usize; 5] = [1, 16, 32, 64, 128];
pub const DEFAULT_EMB_DIM: usize = 128;
pub const DEFAULT_INPUT_SHAPE: (usize, usize) = (80, 360);

const TENSOR_NAMES: [&str; 10] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "conv4.weight",
    "conv4.bias",
    "fc.weight",
    "fc.bias",
];
const FC_WEIGHT: usize = 8;
const FC_BIAS: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { name: name.into(), shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Unit-norm descriptor (all zeros in the degenerate case of a zero
/// pre-normalization vector).
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_degenerate(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub input_shape: (usize, usize),
    pub emb_dim: usize,
    /// Fixed order: conv1..conv4 weight/bias pairs, then fc weight/bias.
    pub tensors: Vec<Tensor>,
}

fn tensor_shapes(emb_dim: usize) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for l in 0..4 {
        let (ci, co) = (CONV_CHANNELS[l], CONV_CHANNELS[l + 1]);
        shapes.push(vec![co, ci, 3, 3]);
        shapes.push(vec![co]);
    }
    shapes.push(vec![emb_dim, CONV_CHANNELS[4]]);
    shapes.push(vec![emb_dim]);
    shapes
}

impl EncoderParams {
    /// He-normal weights (σ = sqrt(2 / fan_in)), zero biases.
    pub fn init(input_shape: (usize, usize), emb_dim: usize, seed: u64) -> Result<Self> {
        if input_shape.0 == 0 || input_shape.1 == 0 || emb_dim == 0 {
            return Err(Error::Shape("input shape and emb_dim must be positive".into()));
        }
        let mut rng = SplitMix64::stream(seed, purpose::INIT, 0);
        let tensors = TENSOR_NAMES
            .iter()
            .zip(tensor_shapes(emb_dim))
            .map(|(name, shape)| {
                let mut t = Tensor::zeros(*name, shape);
                if t.shape.len() > 1 {
                    let fan_in: usize = t.shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    for v in &mut t.data {
                        *v = std * rng.normal();
                    }
                }
                t
            })
            .collect();
        Ok(Self { input_shape, emb_dim, tensors })
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.name.clone(), t.shape.clone())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks names and shapes against the architecture.
    pub fn validate(&self) -> Result<()> {
        let shapes = tensor_shapes(self.emb_dim);
        if self.tensors.len() != shapes.len() {
            return Err(Error::Shape(format!("expected {} tensors, found {}", shapes.len(), self.tensors.len())));
        }
        for ((t, name), shape) in self.tensors.iter().zip(TENSOR_NAMES).zip(shapes) {
            if t.name != name || t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tensor `{}` {:?} does not match `{name}` {shape:?}", t.name, t.shape)));
            }
            if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("tensor `{name}` has a non-finite value at {i}")));
            }
        }
        Ok(())
    }

    /// Cheap fingerprint of shapes and values, used to tie a forward cache to
    /// the parameters that produced it.
    fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::mix64(self.emb_dim as u64 ^ ((self.input_shape.0 as u64) << 32) ^ self.input_shape.1 as u64);
        for t in &self.tensors {
            for &v in &t.data {
                h = crate::rng::mix64(h ^ v.to_bits());
            }
        }
        h
    }

    fn conv_shapes(&self) -> [ConvShape; 4] {
        let (mut h, mut w) = self.input_shape;
        std::array::from_fn(|l| {
            let s = ConvShape { c_in: CONV_CHANNELS[l], h_in: h, w_in: w, c_out: CONV_CHANNELS[l + 1] };
            h = s.h_out();
            w = s.w_out();
            s
        })
    }

    /// Spatial size after each convolution stage.
    pub fn stage_shapes(&self) -> [(usize, usize); 4] {
        self.conv_shapes().map(|s| (s.h_out(), s.w_out()))
    }

    fn check_input(&self, img: &[f64], index: usize) -> Result<()> {
        let (h, w) = self.input_shape;
        if img.len() != h * w {
            return Err(Error::Shape(format!(
                "image {index} has {} pixels, encoder expects {h}x{w} = {}",
                img.len(),
                h * w
            )));
        }
        Ok(())
    }
}

/// Activations of one batch item kept for the backward pass.
#[derive(Debug, Clone)]
struct ItemCache {
    cols: [Vec<f64>; 4],
    acts: [Vec<f64>; 4],
    pooled: Vec<f64>,
    pre_norm: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    items: Vec<ItemCache>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn forward_item(params: &EncoderParams, shapes: &[ConvShape; 4], img: &[f64]) -> ItemCache {
    let mut cols: [Vec<f64>; 4] = Default::default();
    let mut acts: [Vec<f64>; 4] = Default::default();
    for (l, s) in shapes.iter().enumerate() {
        let input: &[f64] = if l == 0 { img } else { &acts[l - 1] };
        let mut col = vec![0.0; s.patch_len() * s.out_pixels()];
        let mut out = vec![0.0; s.out_len()];
        layers::conv_forward(input, s, &params.tensors[2 * l].data, &params.tensors[2 * l + 1].data, &mut col, &mut out);
        layers::relu_inplace(&mut out);
        cols[l] = col;
        acts[l] = out;
    }
    let last = &shapes[3];
    let pooled = layers::gap_forward(&acts[3], last.c_out, last.out_pixels());
    let pre_norm = layers::linear_forward(&pooled, &params.tensors[FC_WEIGHT].data, &params.tensors[FC_BIAS].data);
    ItemCache { cols, acts, pooled, pre_norm }
}

/// Encodes a batch and keeps the activations needed by [`backward`].
pub fn forward(params: &EncoderParams, batch: &[&[f64]]) -> Result<(Vec<Descriptor>, ForwardCache)> {
    for (i, img) in batch.iter().enumerate() {
        params.check_input(img, i)?;
    }
    let shapes = params.conv_shapes();
    let items: Vec<ItemCache> = batch.iter().map(|img| forward_item(params, &shapes, img)).collect();
    let descriptors = items.iter().map(|c| Descriptor(layers::l2_normalize(&c.pre_norm).0)).collect();
    Ok((descriptors, ForwardCache { fingerprint: params.fingerprint(), items }))
}

/// Inference-only forward pass; does not retain activations.
pub fn embed(params: &EncoderParams, batch: &[&[f64]]) -> Result<Vec<Descriptor>> {
    for (i, img) in batch.iter().enumerate() {
        params.check_input(img, i)?;
    }
    let shapes = params.conv_shapes();
    Ok(batch
        .iter()
        .map(|img| Descriptor(layers::l2_normalize(&forward_item(params, &shapes, img).pre_norm).0))
        .collect())
}

/// Gradients of a scalar loss with respect to every parameter, given its
/// gradient with respect to each descriptor of the cached batch. Items are
/// accumulated in batch order.
pub fn backward(params: &EncoderParams, cache: &ForwardCache, grad_desc: &[Vec<f64>]) -> Result<Vec<Tensor>> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::Contract("forward cache was produced with different parameters".into()));
    }
    if grad_desc.len() != cache.items.len() {
        return Err(Error::Contract(format!(
            "{} descriptor gradients for a cached batch of {}",
            grad_desc.len(),
            cache.items.len()
        )));
    }
    if let Some(g) = grad_desc.iter().find(|g| g.len() != params.emb_dim) {
        return Err(Error::Contract(format!("descriptor gradient of length {} (emb_dim {})", g.len(), params.emb_dim)));
    }
    let shapes = params.conv_shapes();
    let mut grads = params.zeros_like();
    let mut scratch = Vec::new();
    for (item, g) in cache.items.iter().zip(grad_desc) {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let dy = layers::l2_normalize_backward(&item.pre_norm, g);
        let (fc_w, fc_b) = grads.split_at_mut(FC_BIAS);
        let d_pooled = layers::linear_backward(
            &item.pooled,
            &params.tensors[FC_WEIGHT].data,
            &dy,
            &mut fc_w[FC_WEIGHT].data,
            &mut fc_b[0].data,
        );
        let mut d_act = layers::gap_backward(&d_pooled, shapes[3].out_pixels());
        for l in (0..4).rev() {
            layers::relu_backward_inplace(&item.acts[l], &mut d_act);
            let (w_part, b_part) = grads.split_at_mut(2 * l + 1);
            let d_weight = &mut w_part[2 * l].data;
            let d_bias = &mut b_part[0].data;
            if l > 0 {
                let mut d_in = vec![0.0; shapes[l].in_len()];
                layers::conv_backward(
                    &d_act,
                    &shapes[l],
                    &params.tensors[2 * l].data,
                    &item.cols[l],
                    d_weight,
                    d_bias,
                    Some(&mut d_in),
                    &mut scratch,
                );
                d_act = d_in;
            } else {
                layers::conv_backward(
                    &d_act,
                    &shapes[l],
                    &params.tensors[2 * l].data,
                    &item.cols[l],
                    d_weight,
                    d_bias,
                    None,
                    &mut scratch,
                );
            }
        }
    }
    Ok(grads)
}

/// Concatenates all tensor values in canonical order.
pub fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
}

/// Inverse of [`flatten`] for tensors of known shape.
pub fn unflatten_into(flat: &[f64], tensors: &mut [Tensor]) {
    let mut off = 0;
    for t in tensors {
        let n = t.data.len();
        t.data.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    assert_eq!(off, flat.len(), "unflatten: length mismatch");
}
