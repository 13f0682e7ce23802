//! Finite-difference gradient checking.
//!
//! Central differences with a scale-floored relative error. Runners for
//! the attention block and the toy networks double as the CLI `gradcheck`
//! subcommand's engine.

use crate::attention::AttentionBlock;
use crate::backbone::{Network, NetworkSpec};
use crate::error::Result;
use crate::filterbank;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::ce_label_smoothing_batch;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Central finite differences of a scalar function at `point`.
pub fn fd_grad<F>(mut f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = point.to_vec();
    let mut grads = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = f(&work);
        work[i] = orig - eps;
        let minus = f(&work);
        work[i] = orig;
        grads.push((plus - minus) / (2.0 * eps));
    }
    grads
}

/// Relative error with a floor on the denominator so near-zero
/// components are compared absolutely at the floor's scale.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0_f64, f64::max)
}

/// Scale floor used when comparing gradients: components below this
/// magnitude are held to absolute accuracy `tol * floor`.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// One attention-block gradient check: analytic backward vs central
/// differences on the loss `L = <G, y>` for a fixed random `G`.
///
/// Returns the max floored relative error over input, w1, w2, and (when
/// learnable) bank gradients. Inputs are redrawn while any excitation
/// pre-activation sits within `10*eps` of the ReLU kink, so the
/// differences never straddle it.
pub fn check_attention_instance(
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    group_size: usize,
    filters_learnable: bool,
    seed: u64,
    eps: f64,
) -> Result<f64> {
    let rng = Rng::from_seed(seed);
    let bank = filterbank::build_ortho_grouped(c, h, w, group_size, rng.split("bank").seed())?;
    let mut block =
        AttentionBlock::new(bank, r, filters_learnable, &mut rng.split("weights"))?;
    let mut data_rng = rng.split("input");
    let x = loop {
        let x = Tensor::randn(&mut data_rng, &[c, h, w])?;
        if block.min_abs_preactivation(&x)? > 10.0 * eps {
            break x;
        }
    };
    let g = Tensor::randn(&mut rng.split("loss"), &[c, h, w])?;

    let (_, _) = block.forward(&x)?;
    let bundle = block.backward(&g)?;

    let loss_at = |blk: &AttentionBlock, input: &Tensor| -> f64 {
        let (y, _, _) = blk.forward_with_cache(input).expect("forward");
        y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    };

    let mut worst = 0.0_f64;

    let numeric_x = fd_grad(
        |p| {
            let xt = Tensor::from_vec(&[c, h, w], p.to_vec()).unwrap();
            loss_at(&block, &xt)
        },
        x.data(),
        eps,
    );
    worst = worst.max(max_rel_err(bundle.d_input.data(), &numeric_x, REL_ERR_FLOOR));

    let base_w1 = block.w1().data().to_vec();
    let numeric_w1 = fd_grad(
        |p| {
            let mut blk = block.clone();
            blk.w1_mut().data_mut().copy_from_slice(p);
            loss_at(&blk, &x)
        },
        &base_w1,
        eps,
    );
    worst = worst.max(max_rel_err(bundle.d_w1.data(), &numeric_w1, REL_ERR_FLOOR));

    let base_w2 = block.w2().data().to_vec();
    let numeric_w2 = fd_grad(
        |p| {
            let mut blk = block.clone();
            blk.w2_mut().data_mut().copy_from_slice(p);
            loss_at(&blk, &x)
        },
        &base_w2,
        eps,
    );
    worst = worst.max(max_rel_err(bundle.d_w2.data(), &numeric_w2, REL_ERR_FLOOR));

    if filters_learnable {
        let d_bank = bundle.d_bank.as_ref().expect("learnable bank gradient");
        let base_k = block.bank().kernel().data().to_vec();
        let numeric_k = fd_grad(
            |p| {
                let mut blk = block.clone();
                blk.bank_mut().kernel_mut().data_mut().copy_from_slice(p);
                loss_at(&blk, &x)
            },
            &base_k,
            eps,
        );
        worst = worst.max(max_rel_err(d_bank.data(), &numeric_k, REL_ERR_FLOOR));
    }

    Ok(worst)
}

/// Full-network gradient check: every learnable parameter of `spec`
/// against central differences of the smoothed cross-entropy loss on a
/// fixed random batch.
pub fn check_network(spec: &NetworkSpec, seed: u64, eps: f64) -> Result<f64> {
    check_network_with_fault(spec, seed, eps, false)
}

/// Same check with an optional injected fault: comparing the negated
/// analytic gradients must fail, proving the harness can reject a wrong
/// backward pass.
pub fn check_network_with_fault(
    spec: &NetworkSpec,
    seed: u64,
    eps: f64,
    negate_analytic: bool,
) -> Result<f64> {
    let mut net = Network::build(spec, seed)?;
    let mut rng = Rng::from_seed(seed ^ 0x9E37);
    let batch = 2;
    let x = Tensor::randn(
        &mut rng,
        &[batch, spec.input_channels, spec.input_height, spec.input_width],
    )?;
    let targets: Vec<usize> = (0..batch).map(|i| i % spec.class_count).collect();
    let smoothing = 0.1;

    net.zero_grads();
    let (logits, tape) = net.forward_train(&x)?;
    let (_, d_logits) = ce_label_smoothing_batch(&logits, &targets, smoothing)?;
    net.backward(&tape, &d_logits)?;

    // Snapshot analytic grads and parameter values.
    let sign = if negate_analytic { -1.0 } else { 1.0 };
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    net.visit_params(&mut |p| {
        analytic.push(p.grad.data().iter().map(|&g| sign * g).collect());
        values.push(p.value.data().to_vec());
    });

    let mut worst = 0.0_f64;
    for pi in 0..values.len() {
        let mut numeric = vec![0.0; values[pi].len()];
        for k in 0..values[pi].len() {
            let orig = values[pi][k];
            for (sign, slot) in [(1.0, 0usize), (-1.0, 1usize)] {
                let mut probe = net.clone();
                let mut idx = 0;
                probe.visit_params(&mut |p| {
                    if idx == pi {
                        p.value.data_mut()[k] = orig + sign * eps;
                    }
                    idx += 1;
                });
                let logits = probe.forward_eval_with_batch_stats(&x)?;
                let (loss, _) = ce_label_smoothing_batch(&logits, &targets, smoothing)?;
                if slot == 0 {
                    numeric[k] = loss;
                } else {
                    numeric[k] = (numeric[k] - loss) / (2.0 * eps);
                }
            }
        }
        worst = worst.max(max_rel_err(&analytic[pi], &numeric, REL_ERR_FLOOR));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_grad_matches_quadratic() {
        // f(x, y) = x^2 + 2xy: df/dx = 2x + 2y, df/dy = 2x.
        let f = |v: &[f64]| v[0] * v[0] + 2.0 * v[0] * v[1];
        let g = fd_grad(f, &[1.0, 2.0], 1e-6);
        assert!((g[0] - 6.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_uses_floor_for_tiny_components() {
        assert!(rel_err(0.0, 1e-12, 1e-3) < 1e-8);
        assert!(rel_err(1.0, 1.1, 1e-3) > 0.05);
    }
}
