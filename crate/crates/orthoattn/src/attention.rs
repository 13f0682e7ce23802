//! The channel attention block: squeeze, excitation MLP, channel scaling,
//! and exact analytic gradients for every learnable part.
//!
//! The squeeze projects each channel's spatial values onto that channel's
//! bank filter. Excitation is a bias-free two-layer MLP (ReLU then
//! sigmoid). The block scales each input channel by its attention
//! coefficient; the residual add belongs to the backbone block.

use crate::error::{Error, Result};
use crate::filterbank::{validate_permutation, FilterBank};
use crate::rng::Rng;
use crate::tensor::{dot_slices, Tensor};

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Project each channel onto its filter: `Z_c = <K_c, X_c>`.
///
/// Requires a bank with `group_size == 1`; see [`squeeze_grouped`] for
/// filters spanning several channels.
pub fn squeeze(bank: &FilterBank, x: &Tensor) -> Result<Vec<f64>> {
    if bank.group_size() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "squeeze wants group_size 1, bank has {}",
            bank.group_size()
        )));
    }
    squeeze_grouped(bank, x, 1)
}

/// Grouped squeeze: output channel `c` is the inner product of its filter
/// with the `group_size*h*w` values of the contiguous channel group that
/// `c` belongs to.
pub fn squeeze_grouped(bank: &FilterBank, x: &Tensor, group_size: usize) -> Result<Vec<f64>> {
    let (c, h, w) = (bank.channels(), bank.height(), bank.width());
    if group_size != bank.group_size() {
        return Err(Error::ShapeMismatch(format!(
            "group size {group_size} does not match bank group size {}",
            bank.group_size()
        )));
    }
    if x.shape() != [c, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} vs bank ({c},{h},{w})",
            x.shape()
        )));
    }
    if c % group_size != 0 {
        return Err(Error::ShapeMismatch(format!(
            "group size {group_size} does not divide {c} channels"
        )));
    }
    let d = bank.filter_dim();
    let xd = x.data();
    let mut z = Vec::with_capacity(c);
    for ch in 0..c {
        let group = ch / group_size;
        let slice = &xd[group * d..(group + 1) * d];
        z.push(dot_slices(bank.filter(ch), slice));
    }
    Ok(z)
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttnCache {
    x: Tensor,
    z: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
    a: Vec<f64>,
}

impl AttnCache {
    pub fn attention(&self) -> &[f64] {
        &self.a
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub d_input: Tensor,
    pub d_w1: Tensor,
    pub d_w2: Tensor,
    /// Present only when the block's filters are learnable.
    pub d_bank: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct AttentionBlock {
    bank: FilterBank,
    w1: Tensor, // (hidden, C)
    w2: Tensor, // (C, hidden)
    r: usize,
    filters_learnable: bool,
    cache: Option<AttnCache>,
}

impl AttentionBlock {
    /// Build a block around `bank` with reduction ratio `r`. Hidden width
    /// is `max(1, C/r)`; both weight matrices are bias-free and drawn
    /// uniformly from `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(
        bank: FilterBank,
        r: usize,
        filters_learnable: bool,
        rng: &mut Rng,
    ) -> Result<AttentionBlock> {
        if r == 0 {
            return Err(Error::InvalidSpec("reduction ratio must be >= 1".into()));
        }
        let c = bank.channels();
        let hidden = (c / r).max(1);
        let w1 = uniform_fan_in(rng, hidden, c)?;
        let w2 = uniform_fan_in(rng, c, hidden)?;
        Ok(AttentionBlock {
            bank,
            w1,
            w2,
            r,
            filters_learnable,
            cache: None,
        })
    }

    /// Wrap explicit weights (tests and permuted twins).
    pub fn from_parts(
        bank: FilterBank,
        w1: Tensor,
        w2: Tensor,
        r: usize,
        filters_learnable: bool,
    ) -> Result<AttentionBlock> {
        let c = bank.channels();
        let hidden = w1.shape()[0];
        if w1.shape() != [hidden, c] || w2.shape() != [c, hidden] {
            return Err(Error::ShapeMismatch(format!(
                "w1 {:?} / w2 {:?} inconsistent with {c} channels",
                w1.shape(),
                w2.shape()
            )));
        }
        Ok(AttentionBlock {
            bank,
            w1,
            w2,
            r,
            filters_learnable,
            cache: None,
        })
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }
    pub fn bank_mut(&mut self) -> &mut FilterBank {
        &mut self.bank
    }
    pub fn w1(&self) -> &Tensor {
        &self.w1
    }
    pub fn w2(&self) -> &Tensor {
        &self.w2
    }
    pub fn w1_mut(&mut self) -> &mut Tensor {
        &mut self.w1
    }
    pub fn w2_mut(&mut self) -> &mut Tensor {
        &mut self.w2
    }
    pub fn reduction(&self) -> usize {
        self.r
    }
    pub fn hidden_width(&self) -> usize {
        self.w1.shape()[0]
    }
    pub fn filters_learnable(&self) -> bool {
        self.filters_learnable
    }
    pub fn set_filters_learnable(&mut self, learnable: bool) {
        self.filters_learnable = learnable;
    }

    /// Learnable parameter count: the two MLP matrices, plus the kernel
    /// when filters are learnable.
    pub fn param_count(&self) -> usize {
        let mlp = self.w1.len() + self.w2.len();
        if self.filters_learnable {
            mlp + self.bank.kernel().len()
        } else {
            mlp
        }
    }

    /// The excitation map `sigma(W2 relu(W1 z))` as a pure function.
    pub fn excite(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.excite_parts(z)?.2)
    }

    fn excite_parts(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let c = self.bank.channels();
        if z.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "squeeze vector length {} vs {c} channels",
                z.len()
            )));
        }
        let h_pre = crate::tensor::matvec(&self.w1, z)?;
        // ReLU with subgradient 0 at exactly zero.
        let h_act: Vec<f64> = h_pre.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let s = crate::tensor::matvec(&self.w2, &h_act)?;
        let a = s.iter().map(|&v| sigmoid(v)).collect();
        Ok((h_pre, h_act, a))
    }

    /// Stateless forward: returns the scaled feature, the attention
    /// vector, and the cache needed for a later backward.
    pub fn forward_with_cache(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>, AttnCache)> {
        let z = squeeze_grouped(&self.bank, x, self.bank.group_size())?;
        let (h_pre, h_act, a) = self.excite_parts(&z)?;
        let (c, hw) = (self.bank.channels(), self.bank.height() * self.bank.width());
        let mut y = x.clone();
        for ch in 0..c {
            for v in &mut y.data_mut()[ch * hw..(ch + 1) * hw] {
                *v *= a[ch];
            }
        }
        let cache = AttnCache {
            x: x.clone(),
            z,
            h_pre,
            h_act,
            a: a.clone(),
        };
        Ok((y, a, cache))
    }

    /// Forward pass that records the cache on the block.
    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let (y, a, cache) = self.forward_with_cache(x)?;
        self.cache = Some(cache);
        Ok((y, a))
    }

    /// Backward through the cached forward.
    pub fn backward(&mut self, d_y: &Tensor) -> Result<GradBundle> {
        let cache = self.cache.take().ok_or(Error::NoCachedForward)?;
        let bundle = self.backward_from_cache(&cache, d_y);
        self.cache = Some(cache);
        bundle
    }

    /// Exact chain rule through scale -> excitation -> squeeze.
    pub fn backward_from_cache(&self, cache: &AttnCache, d_y: &Tensor) -> Result<GradBundle> {
        let (c, h, w) = (self.bank.channels(), self.bank.height(), self.bank.width());
        if d_y.shape() != [c, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {:?} vs ({c},{h},{w})",
                d_y.shape()
            )));
        }
        let hw = h * w;
        let hidden = self.hidden_width();
        let xd = cache.x.data();
        let dyd = d_y.data();

        // dL/da_c = sum_hw dY * X; direct input term a_c * dY.
        let mut d_a = vec![0.0; c];
        let mut d_input = Tensor::zeros_like(&cache.x);
        for ch in 0..c {
            let xs = &xd[ch * hw..(ch + 1) * hw];
            let dys = &dyd[ch * hw..(ch + 1) * hw];
            d_a[ch] = dot_slices(dys, xs);
            for (di, &dy) in d_input.data_mut()[ch * hw..(ch + 1) * hw]
                .iter_mut()
                .zip(dys)
            {
                *di = cache.a[ch] * dy;
            }
        }

        // Through the sigmoid: ds = da * a * (1 - a).
        let d_s: Vec<f64> = (0..c)
            .map(|ch| d_a[ch] * cache.a[ch] * (1.0 - cache.a[ch]))
            .collect();

        // W2 (C x hidden): dW2[c][k] = ds_c * h_act[k]; dh_act = W2^T ds.
        let mut d_w2 = Tensor::zeros_like(&self.w2);
        let mut d_h_act = vec![0.0; hidden];
        for ch in 0..c {
            let w2_row = &self.w2.data()[ch * hidden..(ch + 1) * hidden];
            let d_row = &mut d_w2.data_mut()[ch * hidden..(ch + 1) * hidden];
            for k in 0..hidden {
                d_row[k] = d_s[ch] * cache.h_act[k];
                d_h_act[k] += w2_row[k] * d_s[ch];
            }
        }

        // ReLU kink: subgradient 0 at exactly zero.
        let d_h_pre: Vec<f64> = (0..hidden)
            .map(|k| if cache.h_pre[k] > 0.0 { d_h_act[k] } else { 0.0 })
            .collect();

        // W1 (hidden x C): dW1[k][c] = dh_pre[k] * z_c; dz = W1^T dh_pre.
        let mut d_w1 = Tensor::zeros_like(&self.w1);
        let mut d_z = vec![0.0; c];
        for k in 0..hidden {
            let w1_row = &self.w1.data()[k * c..(k + 1) * c];
            let d_row = &mut d_w1.data_mut()[k * c..(k + 1) * c];
            for ch in 0..c {
                d_row[ch] = d_h_pre[k] * cache.z[ch];
                d_z[ch] += w1_row[ch] * d_h_pre[k];
            }
        }

        // Through the squeeze: channel c's filter feeds back into its
        // whole channel group.
        let g = self.bank.group_size();
        let d = self.bank.filter_dim();
        let mut d_bank = self
            .filters_learnable
            .then(|| Tensor::zeros_like(self.bank.kernel()));
        for ch in 0..c {
            let group = ch / g;
            let filt = self.bank.filter(ch);
            let di = &mut d_input.data_mut()[group * d..(group + 1) * d];
            for (dv, &kv) in di.iter_mut().zip(filt) {
                *dv += d_z[ch] * kv;
            }
            if let Some(db) = d_bank.as_mut() {
                let xs = &xd[group * d..(group + 1) * d];
                let row = &mut db.data_mut()[ch * d..(ch + 1) * d];
                for (rv, &xv) in row.iter_mut().zip(xs) {
                    *rv = d_z[ch] * xv;
                }
            }
        }

        Ok(GradBundle {
            d_input,
            d_w1,
            d_w2,
            d_bank,
        })
    }

    /// The permuted-parameter twin: `out.forward(permute(x))` equals
    /// `permute(self.forward(x))` because W1 columns, W2 rows, and the
    /// bank's channel axis are permuted together.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<AttentionBlock> {
        let mut out = self.permute_channels_fixed_bank(perm)?;
        out.bank = self.bank.permute_channels(perm)?;
        Ok(out)
    }

    /// Permute only the learnable parameters, leaving the bank's filters
    /// where they are. For channel-distinct constant filters this twin is
    /// NOT equivalent under permutation, which is the point.
    pub fn permute_channels_fixed_bank(&self, perm: &[usize]) -> Result<AttentionBlock> {
        let c = self.bank.channels();
        validate_permutation(perm, c)?;
        let hidden = self.hidden_width();
        let mut w1 = Tensor::zeros_like(&self.w1);
        for k in 0..hidden {
            for (dst, &src) in perm.iter().enumerate() {
                w1.data_mut()[k * c + dst] = self.w1.data()[k * c + src];
            }
        }
        let mut w2 = Tensor::zeros_like(&self.w2);
        for (dst, &src) in perm.iter().enumerate() {
            w2.data_mut()[dst * hidden..(dst + 1) * hidden]
                .copy_from_slice(&self.w2.data()[src * hidden..(src + 1) * hidden]);
        }
        Ok(AttentionBlock {
            bank: self.bank.clone(),
            w1,
            w2,
            r: self.r,
            filters_learnable: self.filters_learnable,
            cache: None,
        })
    }

    /// Smallest |pre-activation| of the excitation on `x`; gradient
    /// checks use this to stay away from the ReLU kink.
    pub fn min_abs_preactivation(&self, x: &Tensor) -> Result<f64> {
        let z = squeeze_grouped(&self.bank, x, self.bank.group_size())?;
        let (h_pre, _, _) = self.excite_parts(&z)?;
        Ok(h_pre.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }
}

fn uniform_fan_in(rng: &mut Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    Tensor::from_vec(&[rows, cols], data)
}

/// Permute a `(C, H, W)` tensor along the channel axis:
/// `out[c] = x[perm[c]]`.
pub fn permute_feature(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected (C,H,W), got {shape:?}"
        )));
    }
    validate_permutation(perm, shape[0])?;
    let hw = shape[1] * shape[2];
    let mut out = Tensor::zeros_like(x);
    for (dst, &src) in perm.iter().enumerate() {
        out.data_mut()[dst * hw..(dst + 1) * hw]
            .copy_from_slice(&x.data()[src * hw..(src + 1) * hw]);
    }
    Ok(out)
}
