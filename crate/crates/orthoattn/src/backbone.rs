//! Desk-scale residual networks with pluggable channel attention.
//!
//! Basic blocks (two 3x3 convolutions) mirror the depth-34 layout;
//! bottleneck blocks (1x1, 3x3, 1x1 with expansion 4) mirror the
//! depth-50 layout. Attention sits after the final convolution's norm
//! ("standard") or after the 3x3 where the channel width is reduced
//! ("mod", bottlenecks only). All layers carry manual backward passes.

use crate::attention::{AttentionBlock, AttnCache};
use crate::error::{Error, Result};
use crate::filterbank::{self, BankKind, FilterBank};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionPlacement {
    None,
    Standard,
    Mod,
}

fn default_reduction() -> usize {
    16
}
fn default_group_size() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub placement: AttentionPlacement,
    pub squeeze: BankKind,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default)]
    pub filters_learnable: bool,
    /// Mod placement only: scale the 3x3 output before its activation
    /// instead of after it.
    #[serde(default)]
    pub mod_before_activation: bool,
    /// Explicit DCT frequency pairs; defaults to the zigzag list clamped
    /// to each attended feature's grid.
    #[serde(default)]
    pub dct_freqs: Option<Vec<(u32, u32)>>,
}

impl AttentionConfig {
    pub fn none() -> AttentionConfig {
        AttentionConfig {
            placement: AttentionPlacement::None,
            squeeze: BankKind::Gap,
            reduction: default_reduction(),
            group_size: 1,
            filters_learnable: false,
            mod_before_activation: false,
            dct_freqs: None,
        }
    }

    pub fn with_squeeze(placement: AttentionPlacement, squeeze: BankKind) -> AttentionConfig {
        AttentionConfig {
            placement,
            squeeze,
            ..AttentionConfig::none()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub out_channels: usize,
    pub blocks: usize,
    /// Stride of the stage's first block.
    pub stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub class_count: usize,
    pub stem_channels: usize,
    pub block_kind: BlockKind,
    pub stages: Vec<StageSpec>,
    pub attention: AttentionConfig,
}

/// One resolved residual block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub mid_channels: usize,
    pub stride: usize,
    pub attention: AttentionPlacement,
    pub squeeze_kind: BankKind,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        let expected_mid = match self.kind {
            BlockKind::Basic => self.out_channels,
            BlockKind::Bottleneck => self.out_channels / 4,
        };
        if self.kind == BlockKind::Bottleneck && self.out_channels % 4 != 0 {
            return Err(Error::InvalidSpec(format!(
                "bottleneck out_channels {} not divisible by expansion 4",
                self.out_channels
            )));
        }
        if self.mid_channels != expected_mid {
            return Err(Error::InvalidSpec(format!(
                "mid_channels {} inconsistent with {:?} block of width {}",
                self.mid_channels, self.kind, self.out_channels
            )));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::InvalidSpec(format!("stride {} not in {{1,2}}", self.stride)));
        }
        if self.attention == AttentionPlacement::Mod && self.kind == BlockKind::Basic {
            // Basic blocks already attend after their final 3x3.
            return Err(Error::InvalidSpec(
                "mod placement is only defined for bottleneck blocks".into(),
            ));
        }
        Ok(())
    }

    /// Channel count seen by this block's attention.
    pub fn attended_channels(&self) -> Option<usize> {
        match self.attention {
            AttentionPlacement::None => None,
            AttentionPlacement::Standard => Some(self.out_channels),
            AttentionPlacement::Mod => Some(self.mid_channels),
        }
    }

    /// Learnable scalars the attention MLP adds (hidden width
    /// `max(1, C/r)`, two bias-free matrices).
    pub fn attention_params(&self, reduction: usize) -> usize {
        match self.attended_channels() {
            None => 0,
            Some(c) => {
                let hidden = (c / reduction).max(1);
                2 * c * hidden
            }
        }
    }
}

/// Named desk-scale preset: basic blocks, stages [2,2,2], widths
/// [8,16,32], 32x32 inputs.
pub fn tiny34(input_channels: usize, class_count: usize, attention: AttentionConfig) -> NetworkSpec {
    NetworkSpec {
        input_channels,
        input_height: 32,
        input_width: 32,
        class_count,
        stem_channels: 8,
        block_kind: BlockKind::Basic,
        stages: vec![
            StageSpec { out_channels: 8, blocks: 2, stride: 1 },
            StageSpec { out_channels: 16, blocks: 2, stride: 2 },
            StageSpec { out_channels: 32, blocks: 2, stride: 2 },
        ],
        attention,
    }
}

/// Named desk-scale preset: bottleneck blocks, stages [2,2,2], widths
/// [16,32,64], 32x32 inputs.
pub fn tiny50(input_channels: usize, class_count: usize, attention: AttentionConfig) -> NetworkSpec {
    NetworkSpec {
        input_channels,
        input_height: 32,
        input_width: 32,
        class_count,
        stem_channels: 8,
        block_kind: BlockKind::Bottleneck,
        stages: vec![
            StageSpec { out_channels: 16, blocks: 2, stride: 1 },
            StageSpec { out_channels: 32, blocks: 2, stride: 2 },
            StageSpec { out_channels: 64, blocks: 2, stride: 2 },
        ],
        attention,
    }
}

impl NetworkSpec {
    /// Resolved per-block specs in network order, with the feature
    /// height/width each block emits.
    pub fn resolve_blocks(&self) -> Result<Vec<(BlockSpec, usize, usize)>> {
        let mut out = Vec::new();
        let mut in_ch = self.stem_channels;
        let (mut h, mut w) = (self.input_height, self.input_width);
        for stage in &self.stages {
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                let spec = BlockSpec {
                    kind: self.block_kind,
                    in_channels: in_ch,
                    out_channels: stage.out_channels,
                    mid_channels: match self.block_kind {
                        BlockKind::Basic => stage.out_channels,
                        BlockKind::Bottleneck => stage.out_channels / 4,
                    },
                    stride,
                    attention: self.attention.placement,
                    squeeze_kind: self.attention.squeeze,
                };
                spec.validate()?;
                // Every conv here is 3x3 pad 1 or 1x1 pad 0, so spatial
                // size only changes with the stride.
                h = conv_out_dim(h, 3, stride, 1);
                w = conv_out_dim(w, 3, stride, 1);
                out.push((spec, h, w));
                in_ch = stage.out_channels;
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<NetworkSpec> {
        Ok(serde_json::from_str(json)?)
    }
}

pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn nchw(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        [c, h, w] => Ok((1, *c, *h, *w)),
        other => Err(Error::ShapeMismatch(format!(
            "expected (N,C,H,W) or (C,H,W), got {other:?}"
        ))),
    }
}

fn pad_nchw(x: &Tensor, n: usize, c: usize, h: usize, w: usize, pad: usize) -> Tensor {
    if pad == 0 {
        return x.clone();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[n, c, hp, wp]).expect("padded shape");
    for b in 0..n {
        for ch in 0..c {
            for row in 0..h {
                let src = ((b * c + ch) * h + row) * w;
                let dst = ((b * c + ch) * hp + row + pad) * wp + pad;
                out.data_mut()[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
            }
        }
    }
    out
}

/// Cross-correlation with zero padding. `x` is `(N,Cin,H,W)` or
/// `(Cin,H,W)`; `weights` is `(Cout,Cin,kh,kw)`. The 3-D form returns a
/// 3-D result.
pub fn conv2d(x: &Tensor, weights: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, cin, h, w) = nchw(x)?;
    let wsh = weights.shape();
    if wsh.len() != 4 || wsh[1] != cin {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?} vs input channels {cin}",
            wsh
        )));
    }
    let (cout, kh, kw) = (wsh[0], wsh[2], wsh[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
        return Err(Error::ShapeMismatch(format!(
            "kernel {kh}x{kw} stride {stride} too large for {h}x{w} pad {pad}"
        )));
    }
    let hout = conv_out_dim(h, kh, stride, pad);
    let wout = conv_out_dim(w, kw, stride, pad);
    let xp = pad_nchw(x, n, cin, h, w, pad);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[n, cout, hout, wout])?;
    let od = out.data_mut();
    let xd = xp.data();
    let wd = weights.data();
    for b in 0..n {
        for co in 0..cout {
            for ci in 0..cin {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wd[((co * cin + ci) * kh + ki) * kw + kj];
                        for oh in 0..hout {
                            let xrow_base = ((b * cin + ci) * hp + oh * stride + ki) * wp;
                            let orow_base = ((b * cout + co) * hout + oh) * wout;
                            let orow = &mut od[orow_base..orow_base + wout];
                            if stride == 1 {
                                let xrow = &xd[xrow_base + kj..xrow_base + kj + wout];
                                for (o, &xv) in orow.iter_mut().zip(xrow) {
                                    *o += wv * xv;
                                }
                            } else {
                                let xrow = &xd[xrow_base + kj..];
                                for (o, xv) in
                                    orow.iter_mut().zip(xrow.iter().step_by(stride))
                                {
                                    *o += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if x.shape().len() == 3 {
        out.reshape(&[cout, hout, wout])
    } else {
        Ok(out)
    }
}

/// Gradients of [`conv2d`]: returns `(d_input, d_weights)` given the
/// upstream gradient `d_out`.
pub fn conv2d_backward(
    x: &Tensor,
    weights: &Tensor,
    stride: usize,
    pad: usize,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, cin, h, w) = nchw(x)?;
    let wsh = weights.shape();
    let (cout, kh, kw) = (wsh[0], wsh[2], wsh[3]);
    let hout = conv_out_dim(h, kh, stride, pad);
    let wout = conv_out_dim(w, kw, stride, pad);
    let (dn, dcout, dh, dw_) = nchw(d_out)?;
    if (dn, dcout, dh, dw_) != (n, cout, hout, wout) {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} vs expected ({n},{cout},{hout},{wout})",
            d_out.shape()
        )));
    }
    let xp = pad_nchw(x, n, cin, h, w, pad);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut d_xp = Tensor::zeros(&[n, cin, hp, wp])?;
    let mut d_w = Tensor::zeros_like(weights);
    let xd = xp.data();
    let wd = weights.data();
    let dyd = d_out.data();
    for b in 0..n {
        for co in 0..cout {
            for ci in 0..cin {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let widx = ((co * cin + ci) * kh + ki) * kw + kj;
                        let wv = wd[widx];
                        let mut acc = 0.0;
                        for oh in 0..hout {
                            let xrow_base = ((b * cin + ci) * hp + oh * stride + ki) * wp;
                            let dyrow_base = ((b * cout + co) * hout + oh) * wout;
                            let dyrow = &dyd[dyrow_base..dyrow_base + wout];
                            if stride == 1 {
                                let xrow = &xd[xrow_base + kj..xrow_base + kj + wout];
                                for (&dy, &xv) in dyrow.iter().zip(xrow) {
                                    acc += dy * xv;
                                }
                                let dxrow =
                                    &mut d_xp.data_mut()[xrow_base + kj..xrow_base + kj + wout];
                                for (dx, &dy) in dxrow.iter_mut().zip(dyrow) {
                                    *dx += wv * dy;
                                }
                            } else {
                                for (ow, &dy) in dyrow.iter().enumerate() {
                                    let xi = xrow_base + ow * stride + kj;
                                    acc += dy * xd[xi];
                                    d_xp.data_mut()[xi] += wv * dy;
                                }
                            }
                        }
                        d_w.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    // Crop the padding back off.
    let mut d_x = Tensor::zeros(&[n, cin, h, w])?;
    for b in 0..n {
        for ch in 0..cin {
            for row in 0..h {
                let src = ((b * cin + ch) * hp + row + pad) * wp + pad;
                let dst = ((b * cin + ch) * h + row) * w;
                d_x.data_mut()[dst..dst + w].copy_from_slice(&d_xp.data()[src..src + w]);
            }
        }
    }
    let d_x = if x.shape().len() == 3 {
        d_x.reshape(&[cin, h, w])?
    } else {
        d_x
    };
    Ok((d_x, d_w))
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// A learnable tensor with its gradient and momentum buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub vel: Tensor,
    /// Weight decay applies (convs and linear weights; norm parameters
    /// and banks are excluded).
    pub decay: bool,
}

impl Param {
    pub fn new(value: Tensor, decay: bool) -> Param {
        let grad = Tensor::zeros_like(&value);
        let vel = Tensor::zeros_like(&value);
        Param { value, grad, vel, decay }
    }
}

/// Borrowed view of one parameter for optimizer/checkpoint traversals.
pub struct ParamView<'a> {
    pub value: &'a mut Tensor,
    pub grad: &'a mut Tensor,
    pub vel: &'a mut Tensor,
    pub decay: bool,
    pub is_bank: bool,
}

#[derive(Debug, Clone)]
struct Conv2dLayer {
    w: Param,
    stride: usize,
    pad: usize,
}

impl Conv2dLayer {
    fn init(rng: &mut Rng, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Result<Conv2dLayer> {
        // He initialization for ReLU stacks.
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let mut w = Tensor::randn(rng, &[out_ch, in_ch, k, k])?;
        w.scale(std);
        Ok(Conv2dLayer {
            w: Param::new(w, true),
            stride,
            pad,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.w.value, self.stride, self.pad)
    }

    fn backward(&mut self, x: &Tensor, d_out: &Tensor) -> Result<Tensor> {
        let (d_x, d_w) = conv2d_backward(x, &self.w.value, self.stride, self.pad, d_out)?;
        self.w.grad.axpy(1.0, &d_w)?;
        Ok(d_x)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: Param,
    beta: Param,
    running_mean: Tensor,
    running_var: Tensor,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    fn init(channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: Param::new(Tensor::full(&[channels], 1.0)?, false),
            beta: Param::new(Tensor::zeros(&[channels])?, false),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], 1.0)?,
        })
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn batch_stats(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = nchw(x)?;
        let m = (n * h * w) as f64;
        let hw = h * w;
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for &v in &x.data()[base..base + hw] {
                    sum += v;
                }
            }
            let mean = sum / m;
            let mut sq = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for &v in &x.data()[base..base + hw] {
                    let d = v - mean;
                    sq += d * d;
                }
            }
            means[ch] = mean;
            vars[ch] = sq / m;
        }
        Ok((means, vars))
    }

    fn normalize(&self, x: &Tensor, means: &[f64], vars: &[f64]) -> Result<(Tensor, BnCache)> {
        let (n, c, h, w) = nchw(x)?;
        let hw = h * w;
        let inv_std: Vec<f64> = vars.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut x_hat = Tensor::zeros_like(x);
        let mut y = Tensor::zeros_like(x);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (g, be) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                for i in base..base + hw {
                    let xh = (x.data()[i] - means[ch]) * inv_std[ch];
                    x_hat.data_mut()[i] = xh;
                    y.data_mut()[i] = g * xh + be;
                }
            }
        }
        Ok((y, BnCache { x_hat, inv_std }))
    }

    /// Training-mode forward: batch statistics, running stats updated.
    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let (means, vars) = self.batch_stats(x)?;
        for ch in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * means[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * vars[ch];
        }
        self.normalize(x, &means, &vars)
    }

    /// Batch statistics without touching the running estimates (used by
    /// finite-difference probes).
    fn forward_batch_stats(&self, x: &Tensor) -> Result<Tensor> {
        let (means, vars) = self.batch_stats(x)?;
        Ok(self.normalize(x, &means, &vars)?.0)
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let means = self.running_mean.data().to_vec();
        let vars = self.running_var.data().to_vec();
        Ok(self.normalize(x, &means, &vars)?.0)
    }

    fn backward(&mut self, cache: &BnCache, d_y: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = nchw(d_y)?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut d_x = Tensor::zeros_like(d_y);
        for ch in 0..c {
            let g = self.gamma.value.data()[ch];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    sum_dy += d_y.data()[i];
                    sum_dy_xhat += d_y.data()[i] * cache.x_hat.data()[i];
                }
            }
            self.beta.grad.data_mut()[ch] += sum_dy;
            self.gamma.grad.data_mut()[ch] += sum_dy_xhat;
            let scale = g * cache.inv_std[ch] / m;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    d_x.data_mut()[i] = scale
                        * (m * d_y.data()[i]
                            - sum_dy
                            - cache.x_hat.data()[i] * sum_dy_xhat);
                }
            }
        }
        Ok(d_x)
    }
}

fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// ReLU subgradient is 0 at exactly 0; the mask comes from the cached
/// output being strictly positive.
fn relu_backward(d_y: &Tensor, out: &Tensor) -> Tensor {
    let mut d_x = d_y.clone();
    for (dv, &ov) in d_x.data_mut().iter_mut().zip(out.data()) {
        if ov <= 0.0 {
            *dv = 0.0;
        }
    }
    d_x
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    out.axpy(1.0, b)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Attention wrapper (batched, with gradient/momentum buffers)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct AttnUnit {
    pub block: AttentionBlock,
    pub g_w1: Tensor,
    pub g_w2: Tensor,
    pub g_bank: Tensor,
    pub v_w1: Tensor,
    pub v_w2: Tensor,
    pub v_bank: Tensor,
}

impl AttnUnit {
    fn new(block: AttentionBlock) -> AttnUnit {
        let g_w1 = Tensor::zeros_like(block.w1());
        let g_w2 = Tensor::zeros_like(block.w2());
        let g_bank = Tensor::zeros_like(block.bank().kernel());
        AttnUnit {
            v_w1: g_w1.clone(),
            v_w2: g_w2.clone(),
            v_bank: g_bank.clone(),
            g_w1,
            g_w2,
            g_bank,
            block,
        }
    }

    fn forward_batch(&self, x: &Tensor) -> Result<(Tensor, Vec<AttnCache>)> {
        let (n, c, h, w) = nchw(x)?;
        let chw = c * h * w;
        let mut out = Tensor::zeros_like(x);
        let mut caches = Vec::with_capacity(n);
        for b in 0..n {
            let sample = Tensor::from_vec(&[c, h, w], x.data()[b * chw..(b + 1) * chw].to_vec())?;
            let (y, _, cache) = self.block.forward_with_cache(&sample)?;
            out.data_mut()[b * chw..(b + 1) * chw].copy_from_slice(y.data());
            caches.push(cache);
        }
        Ok((out, caches))
    }

    fn backward_batch(&mut self, caches: &[AttnCache], d_y: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = nchw(d_y)?;
        let chw = c * h * w;
        let mut d_x = Tensor::zeros_like(d_y);
        for b in 0..n {
            let dy =
                Tensor::from_vec(&[c, h, w], d_y.data()[b * chw..(b + 1) * chw].to_vec())?;
            let bundle = self.block.backward_from_cache(&caches[b], &dy)?;
            d_x.data_mut()[b * chw..(b + 1) * chw].copy_from_slice(bundle.d_input.data());
            self.g_w1.axpy(1.0, &bundle.d_w1)?;
            self.g_w2.axpy(1.0, &bundle.d_w2)?;
            if let Some(db) = bundle.d_bank {
                self.g_bank.axpy(1.0, &db)?;
            }
        }
        Ok(d_x)
    }
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    spec: BlockSpec,
    convs: Vec<Conv2dLayer>,
    bns: Vec<BatchNorm>,
    shortcut: Option<(Conv2dLayer, BatchNorm)>,
    attn: Option<AttnUnit>,
    mod_before_activation: bool,
    /// Feature height/width this block emits (and its attention attends).
    out_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct BlockTape {
    x_in: Tensor,
    conv_ins: Vec<Tensor>,
    bn_caches: Vec<BnCache>,
    relu_outs: Vec<Tensor>,
    attn_caches: Option<Vec<AttnCache>>,
    shortcut_bn: Option<BnCache>,
    out: Tensor,
}

/// Build one residual block, constructing its squeeze bank at the
/// feature dimensions the attention will actually see.
pub fn build_block(
    spec: &BlockSpec,
    out_hw: (usize, usize),
    attention: &AttentionConfig,
    rng: &mut Rng,
) -> Result<ResidualBlock> {
    spec.validate()?;
    let (convs, bns): (Vec<Conv2dLayer>, Vec<BatchNorm>) = match spec.kind {
        BlockKind::Basic => {
            let c1 = Conv2dLayer::init(
                &mut rng.split("conv0"),
                spec.in_channels,
                spec.mid_channels,
                3,
                spec.stride,
                1,
            )?;
            let c2 = Conv2dLayer::init(
                &mut rng.split("conv1"),
                spec.mid_channels,
                spec.out_channels,
                3,
                1,
                1,
            )?;
            (
                vec![c1, c2],
                vec![
                    BatchNorm::init(spec.mid_channels)?,
                    BatchNorm::init(spec.out_channels)?,
                ],
            )
        }
        BlockKind::Bottleneck => {
            let c1 = Conv2dLayer::init(
                &mut rng.split("conv0"),
                spec.in_channels,
                spec.mid_channels,
                1,
                1,
                0,
            )?;
            let c2 = Conv2dLayer::init(
                &mut rng.split("conv1"),
                spec.mid_channels,
                spec.mid_channels,
                3,
                spec.stride,
                1,
            )?;
            let c3 = Conv2dLayer::init(
                &mut rng.split("conv2"),
                spec.mid_channels,
                spec.out_channels,
                1,
                1,
                0,
            )?;
            (
                vec![c1, c2, c3],
                vec![
                    BatchNorm::init(spec.mid_channels)?,
                    BatchNorm::init(spec.mid_channels)?,
                    BatchNorm::init(spec.out_channels)?,
                ],
            )
        }
    };
    let shortcut = if spec.stride != 1 || spec.in_channels != spec.out_channels {
        let conv = Conv2dLayer::init(
            &mut rng.split("shortcut"),
            spec.in_channels,
            spec.out_channels,
            1,
            spec.stride,
            0,
        )?;
        Some((conv, BatchNorm::init(spec.out_channels)?))
    } else {
        None
    };
    let attn = match spec.attended_channels() {
        None => None,
        Some(c) => {
            let (h, w) = out_hw;
            let bank = build_bank_for(
                spec.squeeze_kind,
                c,
                h,
                w,
                attention,
                rng.split("bank").seed(),
            )?;
            let block = AttentionBlock::new(
                bank,
                attention.reduction,
                attention.filters_learnable,
                &mut rng.split("attn"),
            )?;
            Some(AttnUnit::new(block))
        }
    };
    Ok(ResidualBlock {
        spec: spec.clone(),
        convs,
        bns,
        shortcut,
        attn,
        mod_before_activation: attention.mod_before_activation,
        out_hw,
    })
}

fn build_bank_for(
    kind: BankKind,
    c: usize,
    h: usize,
    w: usize,
    attention: &AttentionConfig,
    seed: u64,
) -> Result<FilterBank> {
    let g = attention.group_size;
    match kind {
        BankKind::Ortho => filterbank::build_ortho_grouped(c, h, w, g, seed),
        BankKind::Random => filterbank::build_random_grouped(c, h, w, g, seed),
        BankKind::Gap => {
            if g != 1 {
                return Err(Error::InvalidSpec("gap banks take group_size 1".into()));
            }
            filterbank::build_gap(c, h, w)
        }
        BankKind::Dct => {
            if g != 1 {
                return Err(Error::InvalidSpec("dct banks take group_size 1".into()));
            }
            let freqs = match &attention.dct_freqs {
                Some(f) => f.clone(),
                // Default zigzag list clamped to this feature's grid.
                None => filterbank::zigzag_freqs(h.min(7), w.min(7), 16),
            };
            filterbank::build_dct(c, h, w, &freqs)
        }
    }
}

impl ResidualBlock {
    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn attention_block(&self) -> Option<&AttentionBlock> {
        self.attn.as_ref().map(|u| &u.block)
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BlockTape)> {
        let mut conv_ins = Vec::new();
        let mut bn_caches = Vec::new();
        let mut relu_outs = Vec::new();
        let mut attn_caches = None;

        let n_convs = self.convs.len();
        let mut h = x.clone();
        for i in 0..n_convs {
            conv_ins.push(h.clone());
            let conv_out = self.convs[i].forward(&h)?;
            let (bn_out, bn_cache) = self.bns[i].forward_train(&conv_out)?;
            bn_caches.push(bn_cache);
            h = bn_out;
            let last = i == n_convs - 1;
            let mod_here = self.spec.attention == AttentionPlacement::Mod && i == 1;
            if mod_here && self.mod_before_activation {
                let (scaled, caches) = self.attn.as_ref().unwrap().forward_batch(&h)?;
                attn_caches = Some(caches);
                h = scaled;
            }
            if !last {
                h = relu(&h);
                relu_outs.push(h.clone());
            }
            if mod_here && !self.mod_before_activation {
                let (scaled, caches) = self.attn.as_ref().unwrap().forward_batch(&h)?;
                attn_caches = Some(caches);
                h = scaled;
            }
        }
        if self.spec.attention == AttentionPlacement::Standard {
            let (scaled, caches) = self.attn.as_ref().unwrap().forward_batch(&h)?;
            attn_caches = Some(caches);
            h = scaled;
        }

        let (sc, shortcut_bn) = match &mut self.shortcut {
            Some((conv, bn)) => {
                let c = conv.forward(x)?;
                let (b, cache) = bn.forward_train(&c)?;
                (b, Some(cache))
            }
            None => (x.clone(), None),
        };
        let out = relu(&add(&h, &sc)?);
        let tape = BlockTape {
            x_in: x.clone(),
            conv_ins,
            bn_caches,
            relu_outs,
            attn_caches,
            shortcut_bn,
            out: out.clone(),
        };
        Ok((out, tape))
    }

    fn forward_infer(&self, x: &Tensor, batch_stats: bool) -> Result<Tensor> {
        let bn = |bn: &BatchNorm, t: &Tensor| -> Result<Tensor> {
            if batch_stats {
                bn.forward_batch_stats(t)
            } else {
                bn.forward_eval(t)
            }
        };
        let n_convs = self.convs.len();
        let mut h = x.clone();
        for i in 0..n_convs {
            let conv_out = self.convs[i].forward(&h)?;
            h = bn(&self.bns[i], &conv_out)?;
            let last = i == n_convs - 1;
            let mod_here = self.spec.attention == AttentionPlacement::Mod && i == 1;
            if mod_here && self.mod_before_activation {
                h = self.attn.as_ref().unwrap().forward_batch(&h)?.0;
            }
            if !last {
                h = relu(&h);
            }
            if mod_here && !self.mod_before_activation {
                h = self.attn.as_ref().unwrap().forward_batch(&h)?.0;
            }
        }
        if self.spec.attention == AttentionPlacement::Standard {
            h = self.attn.as_ref().unwrap().forward_batch(&h)?.0;
        }
        let sc = match &self.shortcut {
            Some((conv, bnorm)) => bn(bnorm, &conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok(relu(&add(&h, &sc)?))
    }

    fn backward(&mut self, tape: &BlockTape, d_out: &Tensor) -> Result<Tensor> {
        // Through the final ReLU; the sum splits into main and shortcut.
        let d_add = relu_backward(d_out, &tape.out);

        // Shortcut branch.
        let d_sc_in = match &mut self.shortcut {
            Some((conv, bn)) => {
                let d_bn = bn.backward(tape.shortcut_bn.as_ref().unwrap(), &d_add)?;
                conv.backward(&tape.x_in, &d_bn)?
            }
            None => d_add.clone(),
        };

        // Main branch, walked backwards.
        let mut d_h = d_add;
        if self.spec.attention == AttentionPlacement::Standard {
            let unit = self.attn.as_mut().unwrap();
            d_h = unit.backward_batch(tape.attn_caches.as_ref().unwrap(), &d_h)?;
        }
        let n_convs = self.convs.len();
        for i in (0..n_convs).rev() {
            let last = i == n_convs - 1;
            let mod_here = self.spec.attention == AttentionPlacement::Mod && i == 1;
            if mod_here && !self.mod_before_activation {
                let unit = self.attn.as_mut().unwrap();
                d_h = unit.backward_batch(tape.attn_caches.as_ref().unwrap(), &d_h)?;
            }
            if !last {
                d_h = relu_backward(&d_h, &tape.relu_outs[i]);
            }
            if mod_here && self.mod_before_activation {
                let unit = self.attn.as_mut().unwrap();
                d_h = unit.backward_batch(tape.attn_caches.as_ref().unwrap(), &d_h)?;
            }
            d_h = self.bns[i].backward(&tape.bn_caches[i], &d_h)?;
            d_h = self.convs[i].backward(&tape.conv_ins[i], &d_h)?;
        }

        add(&d_h, &d_sc_in)
    }
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    seed: u64,
    stem: Conv2dLayer,
    stem_bn: BatchNorm,
    blocks: Vec<ResidualBlock>,
    fc_w: Param,
    fc_b: Param,
}

#[derive(Debug, Clone)]
pub struct NetTape {
    stem_in: Tensor,
    stem_bn_cache: BnCache,
    stem_relu_out: Tensor,
    block_tapes: Vec<BlockTape>,
    pooled: Tensor,
    feature_hw: (usize, usize),
}

impl Network {
    /// Build a network from its spec. All initialization randomness is
    /// derived from `seed`, so equal (spec, seed) pairs build bitwise
    /// identical networks.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Network> {
        if spec.class_count < 2 {
            return Err(Error::InvalidSpec("need at least two classes".into()));
        }
        if spec.stages.is_empty() {
            return Err(Error::InvalidSpec("need at least one stage".into()));
        }
        let root = Rng::from_seed(seed);
        let stem = Conv2dLayer::init(
            &mut root.split("stem"),
            spec.input_channels,
            spec.stem_channels,
            3,
            1,
            1,
        )?;
        let stem_bn = BatchNorm::init(spec.stem_channels)?;
        let resolved = spec.resolve_blocks()?;
        let mut blocks = Vec::with_capacity(resolved.len());
        for (i, (bspec, h, w)) in resolved.iter().enumerate() {
            let mut rng = root.split(&format!("block-{i}"));
            blocks.push(build_block(bspec, (*h, *w), &spec.attention, &mut rng)?);
        }
        let final_ch = spec.stages.last().unwrap().out_channels;
        let mut fc_rng = root.split("fc");
        let bound = 1.0 / (final_ch as f64).sqrt();
        let fc_w = Tensor::from_vec(
            &[spec.class_count, final_ch],
            (0..spec.class_count * final_ch)
                .map(|_| fc_rng.uniform(-bound, bound))
                .collect(),
        )?;
        let fc_b = Tensor::zeros(&[spec.class_count])?;
        Ok(Network {
            spec: spec.clone(),
            seed,
            stem,
            stem_bn,
            blocks,
            fc_w: Param::new(fc_w, true),
            fc_b: Param::new(fc_b, false),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = nchw(x)?;
        if c != self.spec.input_channels
            || h != self.spec.input_height
            || w != self.spec.input_width
        {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} vs configured ({}, {}, {})",
                x.shape(),
                self.spec.input_channels,
                self.spec.input_height,
                self.spec.input_width
            )));
        }
        Ok((n, c, h, w))
    }

    /// Training forward: batch-stat normalization, running stats updated,
    /// tape captured for [`Network::backward`]. Returns `(N, classes)`
    /// logits.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, NetTape)> {
        let (n, ..) = self.check_input(x)?;
        let stem_out = self.stem.forward(x)?;
        let (bn_out, stem_bn_cache) = self.stem_bn.forward_train(&stem_out)?;
        let mut h = relu(&bn_out);
        let stem_relu_out = h.clone();
        let mut block_tapes = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (out, tape) = block.forward_train(&h)?;
            block_tapes.push(tape);
            h = out;
        }
        let (pooled, feature_hw) = global_avg_pool(&h)?;
        let logits = self.classify(&pooled, n)?;
        let tape = NetTape {
            stem_in: x.clone(),
            stem_bn_cache,
            stem_relu_out,
            block_tapes,
            pooled,
            feature_hw,
        };
        Ok((logits, tape))
    }

    fn forward_infer(&self, x: &Tensor, batch_stats: bool) -> Result<Tensor> {
        let (n, ..) = self.check_input(x)?;
        let stem_out = self.stem.forward(x)?;
        let bn_out = if batch_stats {
            self.stem_bn.forward_batch_stats(&stem_out)?
        } else {
            self.stem_bn.forward_eval(&stem_out)?
        };
        let mut h = relu(&bn_out);
        for block in &self.blocks {
            h = block.forward_infer(&h, batch_stats)?;
        }
        let (pooled, _) = global_avg_pool(&h)?;
        self.classify(&pooled, n)
    }

    /// Inference with running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_infer(x, false)
    }

    /// Inference with batch statistics and no mutation; used by the
    /// network gradient check so probes see the training-mode function.
    pub fn forward_eval_with_batch_stats(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_infer(x, true)
    }

    fn classify(&self, pooled: &Tensor, n: usize) -> Result<Tensor> {
        let c = pooled.shape()[1];
        let k = self.spec.class_count;
        let mut logits = Tensor::zeros(&[n, k])?;
        for b in 0..n {
            let xrow = &pooled.data()[b * c..(b + 1) * c];
            for kk in 0..k {
                let wrow = &self.fc_w.value.data()[kk * c..(kk + 1) * c];
                let mut acc = self.fc_b.value.data()[kk];
                for (wv, xv) in wrow.iter().zip(xrow) {
                    acc += wv * xv;
                }
                logits.data_mut()[b * k + kk] = acc;
            }
        }
        Ok(logits)
    }

    /// Backward from `(N, classes)` logit gradients; fills every
    /// learnable parameter's `.grad`.
    pub fn backward(&mut self, tape: &NetTape, d_logits: &Tensor) -> Result<()> {
        let n = d_logits.shape()[0];
        let c = tape.pooled.shape()[1];
        let k = self.spec.class_count;

        // Classifier.
        let mut d_pooled = Tensor::zeros(&[n, c])?;
        for b in 0..n {
            let xrow = &tape.pooled.data()[b * c..(b + 1) * c];
            for kk in 0..k {
                let dl = d_logits.data()[b * k + kk];
                self.fc_b.grad.data_mut()[kk] += dl;
                let wgrad = &mut self.fc_w.grad.data_mut()[kk * c..(kk + 1) * c];
                for (gw, xv) in wgrad.iter_mut().zip(xrow) {
                    *gw += dl * xv;
                }
                let wrow = &self.fc_w.value.data()[kk * c..(kk + 1) * c];
                let drow = &mut d_pooled.data_mut()[b * c..(b + 1) * c];
                for (dv, wv) in drow.iter_mut().zip(wrow) {
                    *dv += dl * wv;
                }
            }
        }

        // Un-pool.
        let (fh, fw) = tape.feature_hw;
        let hw = fh * fw;
        let inv = 1.0 / hw as f64;
        let mut d_feat = Tensor::zeros(&[n, c, fh, fw])?;
        for b in 0..n {
            for ch in 0..c {
                let dv = d_pooled.data()[b * c + ch] * inv;
                let base = (b * c + ch) * hw;
                for v in &mut d_feat.data_mut()[base..base + hw] {
                    *v = dv;
                }
            }
        }

        // Blocks in reverse.
        let mut d_h = d_feat;
        for (block, tape) in self
            .blocks
            .iter_mut()
            .zip(&tape.block_tapes)
            .rev()
        {
            d_h = block.backward(tape, &d_h)?;
        }

        // Stem.
        let d_relu = relu_backward(&d_h, &tape.stem_relu_out);
        let d_bn = self.stem_bn.backward(&tape.stem_bn_cache, &d_relu)?;
        self.stem.backward(&tape.stem_in, &d_bn)?;
        Ok(())
    }

    /// Visit every learnable parameter in declaration order. Frozen banks
    /// are not visited (they are buffers, not parameters).
    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView)) {
        let visit_param = |p: &mut Param, f: &mut dyn FnMut(ParamView)| {
            f(ParamView {
                value: &mut p.value,
                grad: &mut p.grad,
                vel: &mut p.vel,
                decay: p.decay,
                is_bank: false,
            })
        };
        visit_param(&mut self.stem.w, f);
        visit_param(&mut self.stem_bn.gamma, f);
        visit_param(&mut self.stem_bn.beta, f);
        for block in &mut self.blocks {
            for conv in &mut block.convs {
                visit_param(&mut conv.w, f);
            }
            for bn in &mut block.bns {
                visit_param(&mut bn.gamma, f);
                visit_param(&mut bn.beta, f);
            }
            if let Some((conv, bn)) = &mut block.shortcut {
                visit_param(&mut conv.w, f);
                visit_param(&mut bn.gamma, f);
                visit_param(&mut bn.beta, f);
            }
            if let Some(unit) = &mut block.attn {
                let learnable = unit.block.filters_learnable();
                f(ParamView {
                    value: unit.block.w1_mut(),
                    grad: &mut unit.g_w1,
                    vel: &mut unit.v_w1,
                    decay: true,
                    is_bank: false,
                });
                // Split borrows: w2 then bank.
                let (g_w2, v_w2) = (&mut unit.g_w2, &mut unit.v_w2);
                f(ParamView {
                    value: unit.block.w2_mut(),
                    grad: g_w2,
                    vel: v_w2,
                    decay: true,
                    is_bank: false,
                });
                if learnable {
                    f(ParamView {
                        value: unit.block.bank_mut().kernel_mut(),
                        grad: &mut unit.g_bank,
                        vel: &mut unit.v_bank,
                        decay: false,
                        is_bank: true,
                    });
                }
            }
        }
        visit_param(&mut self.fc_w, f);
        visit_param(&mut self.fc_b, f);
    }

    /// Visit the full model state (parameter values, bank kernels whether
    /// learnable or frozen, batch-norm running statistics) in a stable
    /// declaration order. Checkpoints serialize exactly this sequence.
    pub fn visit_model_state(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.stem.w.value);
        f(&mut self.stem_bn.gamma.value);
        f(&mut self.stem_bn.beta.value);
        f(&mut self.stem_bn.running_mean);
        f(&mut self.stem_bn.running_var);
        for block in &mut self.blocks {
            for conv in &mut block.convs {
                f(&mut conv.w.value);
            }
            for bn in &mut block.bns {
                f(&mut bn.gamma.value);
                f(&mut bn.beta.value);
                f(&mut bn.running_mean);
                f(&mut bn.running_var);
            }
            if let Some((conv, bn)) = &mut block.shortcut {
                f(&mut conv.w.value);
                f(&mut bn.gamma.value);
                f(&mut bn.beta.value);
                f(&mut bn.running_mean);
                f(&mut bn.running_var);
            }
            if let Some(unit) = &mut block.attn {
                f(unit.block.w1_mut());
                f(unit.block.w2_mut());
                f(unit.block.bank_mut().kernel_mut());
            }
        }
        f(&mut self.fc_w.value);
        f(&mut self.fc_b.value);
    }

    /// Visit optimizer state (momentum buffers of learnable parameters)
    /// in the same order as [`Network::visit_params`].
    pub fn visit_opt_state(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.visit_params(&mut |p| f(p.vel));
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(0.0));
    }

    /// Exact learnable scalar count. Frozen banks are excluded; learnable
    /// banks are counted.
    pub fn count_params(&mut self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |p| total += p.value.len());
        total
    }

    /// Bank payloads (kernels) of every attention block, concatenated in
    /// network order; used by the frozen-filter contract tests.
    pub fn bank_snapshot(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for block in &self.blocks {
            if let Some(unit) = &block.attn {
                out.extend_from_slice(unit.block.bank().kernel().data());
            }
        }
        out
    }
}

fn global_avg_pool(x: &Tensor) -> Result<(Tensor, (usize, usize))> {
    let (n, c, h, w) = nchw(x)?;
    let hw = h * w;
    let inv = 1.0 / hw as f64;
    let mut out = Tensor::zeros(&[n, c])?;
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let mut acc = 0.0;
            for &v in &x.data()[base..base + hw] {
                acc += v;
            }
            out.data_mut()[b * c + ch] = acc * inv;
        }
    }
    Ok((out, (h, w)))
}
