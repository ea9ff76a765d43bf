//! Encoder architecture description plus the forward/backward engine. A spec
//! is a validated chain of layers; a state binds a spec to one flat
//! parameter vector and can run batches forward (train or inference mode)
//! and push embedding gradients back to parameter gradients.

mod layers;

use crate::params::{ParamLayout, ParameterVector, Segment};
use crate::rng::{sample_normal, stream_rng};
use crate::tensor::Tensor;
use crate::{math, CoreError, Result};
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

pub use layers::{BN_EPS, BN_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// One layer of the encoder. Input extents are inferred by chaining shapes,
/// so a spec only states what each layer adds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        out_features: usize,
    },
    BatchNorm,
    Relu,
    Pool {
        kind: PoolKind,
        window: usize,
        stride: usize,
    },
    Flatten,
}

/// Whether a forward pass uses per-batch statistics (training) or running
/// statistics (inspection / evaluation) in batch-norm layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Inference,
}

/// Validated encoder architecture with derived per-layer shapes and the
/// parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    embedding_dim: usize,
    /// Shape after each layer, excluding the batch dimension.
    layer_shapes: Vec<Vec<usize>>,
    layout: Arc<ParamLayout>,
    /// Segment indices (into the layout) owned by each layer.
    layer_segments: Vec<Vec<usize>>,
}

impl EncoderSpec {
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>, embedding_dim: usize) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(CoreError::InvalidConfig("embedding_dim must be positive".into()));
        }
        let mut shape: Vec<usize> = input_shape.to_vec();
        let mut layer_shapes = Vec::with_capacity(layers.len());
        let mut segments: Vec<Segment> = Vec::new();
        let mut layer_segments = Vec::with_capacity(layers.len());
        let mut offset = 0usize;
        let mut push = |segments: &mut Vec<Segment>,
                        offset: &mut usize,
                        name: String,
                        len: usize,
                        trainable: bool,
                        batch_norm: bool|
         -> usize {
            segments.push(Segment {
                name,
                offset: *offset,
                len,
                trainable,
                batch_norm,
            });
            *offset += len;
            segments.len() - 1
        };
        for (i, layer) in layers.iter().enumerate() {
            let mut own = Vec::new();
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 {
                        return Err(CoreError::InvalidConfig(alloc::format!(
                            "layer {i}: conv needs a H,W,C input, got {shape:?}"
                        )));
                    }
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(CoreError::InvalidConfig(alloc::format!(
                            "layer {i}: conv hyperparameters must be positive"
                        )));
                    }
                    let (h, w, c) = (shape[0], shape[1], shape[2]);
                    let oh = conv_extent(h, *kernel, *stride, *padding)
                        .ok_or_else(|| CoreError::InvalidConfig(alloc::format!("layer {i}: conv collapses height")))?;
                    let ow = conv_extent(w, *kernel, *stride, *padding)
                        .ok_or_else(|| CoreError::InvalidConfig(alloc::format!("layer {i}: conv collapses width")))?;
                    own.push(push(
                        &mut segments,
                        &mut offset,
                        alloc::format!("conv{i}.weight"),
                        kernel * kernel * c * out_channels,
                        true,
                        false,
                    ));
                    own.push(push(
                        &mut segments,
                        &mut offset,
                        alloc::format!("conv{i}.bias"),
                        *out_channels,
                        true,
                        false,
                    ));
                    shape = vec![oh, ow, *out_channels];
                }
                LayerSpec::Dense { out_features } => {
                    if shape.len() != 1 {
                        return Err(CoreError::InvalidConfig(alloc::format!(
                            "layer {i}: dense needs a flat input, got {shape:?}"
                        )));
                    }
                    if *out_features == 0 {
                        return Err(CoreError::InvalidConfig(alloc::format!(
                            "layer {i}: dense out_features must be positive"
                        )));
                    }
                    own.push(push(
                        &mut segments,
                        &mut offset,
                        alloc::format!("dense{i}.weight"),
                        shape[0] * out_features,
                        true,
                        false,
                    ));
                    own.push(push(
                        &mut segments,
                        &mut offset,
                        alloc::format!("dense{i}.bias"),
                        *out_features,
                        true,
                        false,
                    ));
                    shape = vec![*out_features];
                }
                LayerSpec::BatchNorm => {
                    let features = *shape.last().unwrap();
                    for (suffix, trainable) in [
                        ("gamma", true),
                        ("beta", true),
                        ("running_mean", false),
                        ("running_var", false),
                    ] {
                        own.push(push(
                            &mut segments,
                            &mut offset,
                            alloc::format!("bn{i}.{suffix}"),
                            features,
                            trainable,
                            true,
                        ));
                    }
                }
                LayerSpec::Relu => {}
                LayerSpec::Pool { window, stride, .. } => {
                    if shape.len() != 3 {
                        return Err(CoreError::InvalidConfig(alloc::format!(
                            "layer {i}: pool needs a H,W,C input, got {shape:?}"
                        )));
                    }
                    if *window == 0 || *stride == 0 || shape[0] < *window || shape[1] < *window {
                        return Err(CoreError::InvalidConfig(alloc::format!(
                            "layer {i}: pool window does not fit"
                        )));
                    }
                    let oh = (shape[0] - window) / stride + 1;
                    let ow = (shape[1] - window) / stride + 1;
                    shape = vec![oh, ow, shape[2]];
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                }
            }
            layer_shapes.push(shape.clone());
            layer_segments.push(own);
        }
        if shape != [embedding_dim] {
            return Err(CoreError::InvalidConfig(alloc::format!(
                "final layer output {shape:?} does not match embedding_dim {embedding_dim}"
            )));
        }
        Ok(Self {
            input_shape,
            layers,
            embedding_dim,
            layer_shapes,
            layout: Arc::new(ParamLayout::new(segments)?),
            layer_segments,
        })
    }

    /// The stock desk-scale encoder: two strided conv+BN+relu blocks and a
    /// dense projection to the embedding.
    pub fn desk_default(channels: usize, embedding_dim: usize) -> Result<Self> {
        Self::new(
            [16, 16, channels],
            vec![
                LayerSpec::Conv {
                    out_channels: 8,
                    kernel: 3,
                    stride: 2,
                    padding: 0,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 0,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    out_features: embedding_dim,
                },
            ],
            embedding_dim,
        )
    }

    /// A flatten + identity-capable dense map, mostly for tests and raw-vector
    /// probes.
    pub fn flat_dense(input_shape: [usize; 3], embedding_dim: usize) -> Result<Self> {
        Self::new(
            input_shape,
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    out_features: embedding_dim,
                },
            ],
            embedding_dim,
        )
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    /// Stable hash of the architecture, embedded in checkpoint headers.
    pub fn spec_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for d in self.input_shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&(self.embedding_dim as u64).to_le_bytes());
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    bytes.push(1);
                    for v in [*out_channels, *kernel, *stride, *padding] {
                        bytes.extend_from_slice(&(v as u64).to_le_bytes());
                    }
                }
                LayerSpec::Dense { out_features } => {
                    bytes.push(2);
                    bytes.extend_from_slice(&(*out_features as u64).to_le_bytes());
                }
                LayerSpec::BatchNorm => bytes.push(3),
                LayerSpec::Relu => bytes.push(4),
                LayerSpec::Pool {
                    kind,
                    window,
                    stride,
                } => {
                    bytes.push(5);
                    bytes.push(match kind {
                        PoolKind::Max => 0,
                        PoolKind::Avg => 1,
                    });
                    for v in [*window, *stride] {
                        bytes.extend_from_slice(&(v as u64).to_le_bytes());
                    }
                }
                LayerSpec::Flatten => bytes.push(6),
            }
        }
        crate::params::fnv1a64(&bytes)
    }

    /// Fresh parameters: He-style weights, zero biases, identity batch norm.
    pub fn init_params(&self, seed: u64, tags: &[u64]) -> ParameterVector {
        let mut rng = stream_rng(seed, tags);
        let mut params = ParameterVector::zeros(self.layout.clone());
        for (li, layer) in self.layers.iter().enumerate() {
            let segs = &self.layer_segments[li];
            match layer {
                LayerSpec::Conv { kernel, .. } => {
                    let seg = self.layout.segments()[segs[0]].clone();
                    let fan_in = {
                        let in_c = if li == 0 {
                            self.input_shape[2]
                        } else {
                            *self.shape_before(li).last().unwrap()
                        };
                        kernel * kernel * in_c
                    };
                    let scale = math::sqrt(2.0 / fan_in as f64);
                    for v in params.segment_mut(&seg) {
                        *v = sample_normal(&mut rng) * scale;
                    }
                }
                LayerSpec::Dense { .. } => {
                    let seg = self.layout.segments()[segs[0]].clone();
                    let fan_in = self.shape_before(li)[0];
                    let scale = math::sqrt(2.0 / fan_in as f64);
                    for v in params.segment_mut(&seg) {
                        *v = sample_normal(&mut rng) * scale;
                    }
                }
                LayerSpec::BatchNorm => {
                    let gamma = self.layout.segments()[segs[0]].clone();
                    for v in params.segment_mut(&gamma) {
                        *v = 1.0;
                    }
                    let var = self.layout.segments()[segs[3]].clone();
                    for v in params.segment_mut(&var) {
                        *v = 1.0;
                    }
                }
                _ => {}
            }
        }
        params
    }

    fn shape_before(&self, layer_idx: usize) -> Vec<usize> {
        if layer_idx == 0 {
            self.input_shape.to_vec()
        } else {
            self.layer_shapes[layer_idx - 1].clone()
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() != 4
            || shape[1] != self.input_shape[0]
            || shape[2] != self.input_shape[1]
            || shape[3] != self.input_shape[2]
        {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "batch {shape:?} vs input {:?}",
                self.input_shape
            )));
        }
        Ok(shape[0])
    }
}

fn conv_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = input + 2 * padding;
    if span < kernel {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

enum LayerCache {
    Conv { input: Tensor },
    Dense { input: Tensor },
    BatchNorm { cache: layers::BnCache },
    Relu { input: Tensor },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    AvgPool { input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
}

/// Pending running-statistics update for one batch-norm layer.
pub struct BnUpdate {
    mean_segment: usize,
    var_segment: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Everything `backward` needs, plus batch-norm running updates to commit
/// after the step. Produced by one training-mode forward pass.
pub struct ForwardTrace {
    caches: Vec<LayerCache>,
    bn_updates: Vec<BnUpdate>,
}

/// An encoder spec bound to concrete parameters.
#[derive(Debug, Clone)]
pub struct EncoderState {
    spec: Arc<EncoderSpec>,
    params: ParameterVector,
    /// When set, batch-norm statistics and affine terms are excluded from
    /// updates and normalization runs on running statistics even in training.
    pub bn_frozen: bool,
}

impl EncoderState {
    pub fn new(spec: Arc<EncoderSpec>, params: ParameterVector) -> Result<Self> {
        if params.layout() != spec.layout() && **params.layout() != **spec.layout() {
            return Err(CoreError::LayoutMismatch);
        }
        Ok(Self {
            spec,
            params,
            bn_frozen: false,
        })
    }

    pub fn init(spec: Arc<EncoderSpec>, seed: u64, tags: &[u64]) -> Self {
        let params = spec.init_params(seed, tags);
        Self {
            spec,
            params,
            bn_frozen: false,
        }
    }

    pub fn spec(&self) -> &Arc<EncoderSpec> {
        &self.spec
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterVector {
        self.params
    }

    fn seg(&self, layer_idx: usize, nth: usize) -> &Segment {
        &self.spec.layout.segments()[self.spec.layer_segments[layer_idx][nth]]
    }

    /// Inference-mode embeddings for a batch: [B, embedding_dim].
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let (emb, _) = self.forward_phase(batch, Phase::Inference)?;
        Ok(emb)
    }

    /// Training-mode forward returning the trace for `backward` and the
    /// batch-norm updates for `commit_bn`.
    pub fn forward_train(&self, batch: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        self.forward_phase(batch, Phase::Train)
    }

    fn forward_phase(&self, batch: &Tensor, phase: Phase) -> Result<(Tensor, ForwardTrace)> {
        self.spec.check_batch(batch)?;
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        let mut bn_updates = Vec::new();
        for (li, layer) in self.spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { kernel, stride, padding, out_channels } => {
                    let d = self.conv_dims(li, *kernel, *stride, *padding, *out_channels, &x);
                    let weight = self.params.segment(self.seg(li, 0));
                    let bias = self.params.segment(self.seg(li, 1));
                    let out = layers::conv_forward(&x, weight, bias, &d);
                    caches.push(LayerCache::Conv { input: x });
                    x = out;
                }
                LayerSpec::Dense { out_features } => {
                    let weight = self.params.segment(self.seg(li, 0));
                    let bias = self.params.segment(self.seg(li, 1));
                    let out = layers::dense_forward(&x, weight, bias, *out_features);
                    caches.push(LayerCache::Dense { input: x });
                    x = out;
                }
                LayerSpec::BatchNorm => {
                    let gamma = self.params.segment(self.seg(li, 0));
                    let beta = self.params.segment(self.seg(li, 1));
                    let r_mean = self.params.segment(self.seg(li, 2));
                    let r_var = self.params.segment(self.seg(li, 3));
                    let use_batch = phase == Phase::Train && !self.bn_frozen;
                    let fwd = layers::bn_forward(&x, gamma, beta, r_mean, r_var, use_batch);
                    if let (Some(mean), Some(var)) = (fwd.batch_mean, fwd.batch_var) {
                        bn_updates.push(BnUpdate {
                            mean_segment: self.spec.layer_segments[li][2],
                            var_segment: self.spec.layer_segments[li][3],
                            mean,
                            var,
                        });
                    }
                    caches.push(LayerCache::BatchNorm { cache: fwd.cache });
                    x = fwd.output;
                }
                LayerSpec::Relu => {
                    let out = layers::relu_forward(&x);
                    caches.push(LayerCache::Relu { input: x });
                    x = out;
                }
                LayerSpec::Pool { kind, window, stride } => {
                    let d = self.pool_dims(*window, *stride, &x);
                    match kind {
                        PoolKind::Max => {
                            let (out, argmax) = layers::max_pool_forward(&x, &d);
                            caches.push(LayerCache::MaxPool {
                                input_shape: x.shape().to_vec(),
                                argmax,
                            });
                            x = out;
                        }
                        PoolKind::Avg => {
                            let out = layers::avg_pool_forward(&x, &d);
                            caches.push(LayerCache::AvgPool {
                                input_shape: x.shape().to_vec(),
                            });
                            x = out;
                        }
                    }
                }
                LayerSpec::Flatten => {
                    let shape = x.shape().to_vec();
                    let flat = x.reshaped(&[shape[0], shape.iter().skip(1).product()])?;
                    caches.push(LayerCache::Flatten { input_shape: shape });
                    x = flat;
                }
            }
        }
        if !x.all_finite() {
            return Err(CoreError::NonFinite("encoder activations".into()));
        }
        Ok((x, ForwardTrace { caches, bn_updates }))
    }

    /// Push embedding gradients back to a parameter-shaped gradient vector.
    /// With `bn_frozen`, batch-norm affine gradients are zeroed.
    pub fn backward(&self, trace: &ForwardTrace, grad_emb: &Tensor) -> Result<ParameterVector> {
        let mut grads = ParameterVector::zeros(self.spec.layout.clone());
        let mut dy = grad_emb.clone();
        for (li, layer) in self.spec.layers.iter().enumerate().rev() {
            match (layer, &trace.caches[li]) {
                (
                    LayerSpec::Conv { kernel, stride, padding, out_channels },
                    LayerCache::Conv { input },
                ) => {
                    let d = self.conv_dims(li, *kernel, *stride, *padding, *out_channels, input);
                    let w_seg = self.seg(li, 0).clone();
                    let b_seg = self.seg(li, 1).clone();
                    let weight = self.params.segment(&w_seg).to_vec();
                    let (mut gw, mut gb) = (vec![0.0; w_seg.len], vec![0.0; b_seg.len]);
                    dy = layers::conv_backward(input, &weight, &dy, &d, &mut gw, &mut gb);
                    grads.segment_mut(&w_seg).copy_from_slice(&gw);
                    grads.segment_mut(&b_seg).copy_from_slice(&gb);
                }
                (LayerSpec::Dense { .. }, LayerCache::Dense { input }) => {
                    let w_seg = self.seg(li, 0).clone();
                    let b_seg = self.seg(li, 1).clone();
                    let weight = self.params.segment(&w_seg).to_vec();
                    let (mut gw, mut gb) = (vec![0.0; w_seg.len], vec![0.0; b_seg.len]);
                    dy = layers::dense_backward(input, &weight, &dy, &mut gw, &mut gb);
                    grads.segment_mut(&w_seg).copy_from_slice(&gw);
                    grads.segment_mut(&b_seg).copy_from_slice(&gb);
                }
                (LayerSpec::BatchNorm, LayerCache::BatchNorm { cache }) => {
                    let g_seg = self.seg(li, 0).clone();
                    let b_seg = self.seg(li, 1).clone();
                    let gamma = self.params.segment(&g_seg).to_vec();
                    let (mut gg, mut gb) = (vec![0.0; g_seg.len], vec![0.0; b_seg.len]);
                    dy = layers::bn_backward(cache, &gamma, &dy, &mut gg, &mut gb);
                    if !self.bn_frozen {
                        grads.segment_mut(&g_seg).copy_from_slice(&gg);
                        grads.segment_mut(&b_seg).copy_from_slice(&gb);
                    }
                }
                (LayerSpec::Relu, LayerCache::Relu { input }) => {
                    dy = layers::relu_backward(input, &dy);
                }
                (
                    LayerSpec::Pool { kind: PoolKind::Max, .. },
                    LayerCache::MaxPool { input_shape, argmax },
                ) => {
                    dy = layers::max_pool_backward(input_shape, argmax, &dy);
                }
                (
                    LayerSpec::Pool { kind: PoolKind::Avg, window, stride },
                    LayerCache::AvgPool { input_shape },
                ) => {
                    let probe = Tensor::zeros(input_shape);
                    let d = self.pool_dims(*window, *stride, &probe);
                    dy = layers::avg_pool_backward(input_shape, &d, &dy);
                }
                (LayerSpec::Flatten, LayerCache::Flatten { input_shape }) => {
                    dy = dy.reshaped(input_shape)?;
                }
                _ => return Err(CoreError::ShapeMismatch("trace does not match spec".into())),
            }
        }
        if !grads.all_finite() {
            return Err(CoreError::NonFinite("parameter gradients".into()));
        }
        Ok(grads)
    }

    /// Fold a trace's batch statistics into the running statistics.
    pub fn commit_bn(&mut self, trace: &ForwardTrace) {
        if self.bn_frozen {
            return;
        }
        for upd in &trace.bn_updates {
            let mean_seg = self.spec.layout.segments()[upd.mean_segment].clone();
            let var_seg = self.spec.layout.segments()[upd.var_segment].clone();
            for (r, &m) in self.params.segment_mut(&mean_seg).iter_mut().zip(&upd.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, &v) in self.params.segment_mut(&var_seg).iter_mut().zip(&upd.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    fn conv_dims(
        &self,
        li: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        out_channels: usize,
        input: &Tensor,
    ) -> layers::ConvDims {
        let out_shape = &self.spec.layer_shapes[li];
        layers::ConvDims {
            kernel,
            stride,
            padding,
            in_h: input.shape()[1],
            in_w: input.shape()[2],
            in_c: input.shape()[3],
            out_h: out_shape[0],
            out_w: out_shape[1],
            out_c: out_channels,
        }
    }

    fn pool_dims(&self, window: usize, stride: usize, input: &Tensor) -> layers::PoolDims {
        layers::PoolDims {
            window,
            stride,
            in_h: input.shape()[1],
            in_w: input.shape()[2],
            channels: input.shape()[3],
            out_h: (input.shape()[1] - window) / stride + 1,
            out_w: (input.shape()[2] - window) / stride + 1,
        }
    }
}
