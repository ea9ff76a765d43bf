//! Per-layer forward and backward math on raw slices. Everything here takes
//! explicit shapes and writes gradients with plain accumulation loops so the
//! finite-difference tests pin each formula independently.

use crate::math;
use crate::tensor::Tensor;
use alloc::vec;
use alloc::vec::Vec;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn dense_forward(input: &Tensor, weight: &[f64], bias: &[f64], out_features: usize) -> Tensor {
    let batch = input.shape()[0];
    let in_features = input.shape()[1];
    let mut out = Tensor::zeros(&[batch, out_features]);
    for b in 0..batch {
        let row = input.row(b);
        let o_base = b * out_features;
        for (i, &x) in row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let w_base = i * out_features;
            for o in 0..out_features {
                out.data_mut()[o_base + o] += x * weight[w_base + o];
            }
        }
        for o in 0..out_features {
            out.data_mut()[o_base + o] += bias[o];
        }
    }
    let _ = in_features;
    out
}

/// Returns grad wrt input and writes dW/db into the provided slices.
pub fn dense_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Tensor {
    let batch = input.shape()[0];
    let in_features = input.shape()[1];
    let out_features = grad_out.shape()[1];
    let mut grad_in = Tensor::zeros(&[batch, in_features]);
    for b in 0..batch {
        let x = input.row(b);
        let dy = grad_out.row(b);
        for o in 0..out_features {
            grad_bias[o] += dy[o];
        }
        for i in 0..in_features {
            let w_base = i * out_features;
            let mut acc = 0.0;
            for o in 0..out_features {
                grad_weight[w_base + o] += x[i] * dy[o];
                acc += weight[w_base + o] * dy[o];
            }
            grad_in.data_mut()[b * in_features + i] = acc;
        }
    }
    grad_in
}

pub struct ConvDims {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
}

impl ConvDims {
    /// Weight offset for [kh, kw, ci, co].
    #[inline]
    fn widx(&self, kh: usize, kw: usize, ci: usize, co: usize) -> usize {
        ((kh * self.kernel + kw) * self.in_c + ci) * self.out_c + co
    }
}

pub fn conv_forward(input: &Tensor, weight: &[f64], bias: &[f64], d: &ConvDims) -> Tensor {
    let batch = input.shape()[0];
    let mut out = Tensor::zeros(&[batch, d.out_h, d.out_w, d.out_c]);
    for b in 0..batch {
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                let out_base = out.idx4(b, oh, ow, 0);
                out.data_mut()[out_base..out_base + d.out_c].copy_from_slice(bias);
                for kh in 0..d.kernel {
                    let ih = oh * d.stride + kh;
                    if ih < d.padding || ih - d.padding >= d.in_h {
                        continue;
                    }
                    for kw in 0..d.kernel {
                        let iw = ow * d.stride + kw;
                        if iw < d.padding || iw - d.padding >= d.in_w {
                            continue;
                        }
                        let in_base = input.idx4(b, ih - d.padding, iw - d.padding, 0);
                        for ci in 0..d.in_c {
                            let x = input.data()[in_base + ci];
                            if x == 0.0 {
                                continue;
                            }
                            let w_base = d.widx(kh, kw, ci, 0);
                            for co in 0..d.out_c {
                                out.data_mut()[out_base + co] += x * weight[w_base + co];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    d: &ConvDims,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Tensor {
    let batch = input.shape()[0];
    let mut grad_in = Tensor::zeros(&[batch, d.in_h, d.in_w, d.in_c]);
    for b in 0..batch {
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                let out_base = grad_out.idx4(b, oh, ow, 0);
                let dy = &grad_out.data()[out_base..out_base + d.out_c];
                for co in 0..d.out_c {
                    grad_bias[co] += dy[co];
                }
                for kh in 0..d.kernel {
                    let ih = oh * d.stride + kh;
                    if ih < d.padding || ih - d.padding >= d.in_h {
                        continue;
                    }
                    for kw in 0..d.kernel {
                        let iw = ow * d.stride + kw;
                        if iw < d.padding || iw - d.padding >= d.in_w {
                            continue;
                        }
                        let in_base = input.idx4(b, ih - d.padding, iw - d.padding, 0);
                        for ci in 0..d.in_c {
                            let x = input.data()[in_base + ci];
                            let w_base = d.widx(kh, kw, ci, 0);
                            let mut acc = 0.0;
                            for co in 0..d.out_c {
                                grad_weight[w_base + co] += x * dy[co];
                                acc += weight[w_base + co] * dy[co];
                            }
                            grad_in.data_mut()[in_base + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Layout of one batch-norm application: which flat indices belong to each
/// normalized feature. Rank-4 inputs normalize per channel over B*H*W,
/// rank-2 per column over B.
pub struct BnView {
    pub features: usize,
    pub per_feature: usize,
}

pub fn bn_view(shape: &[usize]) -> BnView {
    let features = *shape.last().unwrap();
    let per_feature: usize = shape.iter().product::<usize>() / features;
    BnView {
        features,
        per_feature,
    }
}

pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    /// True when normalization used batch statistics (grad needs the full
    /// mean/variance chain); false for running-statistics mode.
    pub batch_stats: bool,
}

pub struct BnForward {
    pub output: Tensor,
    pub cache: BnCache,
    /// Batch mean/var for the running-statistics update (train mode only).
    pub batch_mean: Option<Vec<f64>>,
    pub batch_var: Option<Vec<f64>>,
}

pub fn bn_forward(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    use_batch_stats: bool,
) -> BnForward {
    let view = bn_view(input.shape());
    let c = view.features;
    let m = view.per_feature;
    let (mean, var) = if use_batch_stats {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, &x) in input.data().iter().enumerate() {
            mean[i % c] += x;
        }
        for v in &mut mean {
            *v /= m as f64;
        }
        for (i, &x) in input.data().iter().enumerate() {
            let d = x - mean[i % c];
            var[i % c] += d * d;
        }
        for v in &mut var {
            *v /= m as f64;
        }
        (mean, var)
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + BN_EPS)).collect();
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for (i, &x) in input.data().iter().enumerate() {
        let ch = i % c;
        let h = (x - mean[ch]) * inv_std[ch];
        xhat.data_mut()[i] = h;
        out.data_mut()[i] = gamma[ch] * h + beta[ch];
    }
    BnForward {
        output: out,
        cache: BnCache {
            xhat,
            inv_std,
            batch_stats: use_batch_stats,
        },
        batch_mean: use_batch_stats.then_some(mean),
        batch_var: use_batch_stats.then_some(var),
    }
}

pub fn bn_backward(
    cache: &BnCache,
    gamma: &[f64],
    grad_out: &Tensor,
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) -> Tensor {
    let view = bn_view(grad_out.shape());
    let c = view.features;
    let m = view.per_feature as f64;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (i, &dy) in grad_out.data().iter().enumerate() {
        let ch = i % c;
        sum_dy[ch] += dy;
        sum_dy_xhat[ch] += dy * cache.xhat.data()[i];
    }
    for ch in 0..c {
        grad_beta[ch] += sum_dy[ch];
        grad_gamma[ch] += sum_dy_xhat[ch];
    }
    let mut grad_in = Tensor::zeros(grad_out.shape());
    if cache.batch_stats {
        for (i, &dy) in grad_out.data().iter().enumerate() {
            let ch = i % c;
            let term = dy - sum_dy[ch] / m - cache.xhat.data()[i] * sum_dy_xhat[ch] / m;
            grad_in.data_mut()[i] = gamma[ch] * cache.inv_std[ch] * term;
        }
    } else {
        for (i, &dy) in grad_out.data().iter().enumerate() {
            let ch = i % c;
            grad_in.data_mut()[i] = gamma[ch] * cache.inv_std[ch] * dy;
        }
    }
    grad_in
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut grad_in = grad_out.clone();
    for (g, &x) in grad_in.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    grad_in
}

pub struct PoolDims {
    pub window: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn max_pool_forward(input: &Tensor, d: &PoolDims) -> (Tensor, Vec<usize>) {
    let batch = input.shape()[0];
    let mut out = Tensor::zeros(&[batch, d.out_h, d.out_w, d.channels]);
    let mut argmax = vec![0usize; out.len()];
    for b in 0..batch {
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                for c in 0..d.channels {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for kh in 0..d.window {
                        for kw in 0..d.window {
                            let idx = input.idx4(b, oh * d.stride + kh, ow * d.stride + kw, c);
                            let v = input.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let o = out.idx4(b, oh, ow, c);
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut grad_in = Tensor::zeros(input_shape);
    for (o, &dy) in grad_out.data().iter().enumerate() {
        grad_in.data_mut()[argmax[o]] += dy;
    }
    grad_in
}

pub fn avg_pool_forward(input: &Tensor, d: &PoolDims) -> Tensor {
    let batch = input.shape()[0];
    let mut out = Tensor::zeros(&[batch, d.out_h, d.out_w, d.channels]);
    let scale = 1.0 / (d.window * d.window) as f64;
    for b in 0..batch {
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                for c in 0..d.channels {
                    let mut acc = 0.0;
                    for kh in 0..d.window {
                        for kw in 0..d.window {
                            acc += input.data()
                                [input.idx4(b, oh * d.stride + kh, ow * d.stride + kw, c)];
                        }
                    }
                    let o = out.idx4(b, oh, ow, c);
                    out.data_mut()[o] = acc * scale;
                }
            }
        }
    }
    out
}

pub fn avg_pool_backward(input_shape: &[usize], d: &PoolDims, grad_out: &Tensor) -> Tensor {
    let mut grad_in = Tensor::zeros(input_shape);
    let batch = input_shape[0];
    let scale = 1.0 / (d.window * d.window) as f64;
    for b in 0..batch {
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                for c in 0..d.channels {
                    let dy = grad_out.data()[grad_out.idx4(b, oh, ow, c)] * scale;
                    for kh in 0..d.window {
                        for kw in 0..d.window {
                            let idx =
                                grad_in.idx4(b, oh * d.stride + kh, ow * d.stride + kw, c);
                            grad_in.data_mut()[idx] += dy;
                        }
                    }
                }
            }
        }
    }
    grad_in
}
