//! Training: SGD with momentum, cosine warm restarts aligned to a
//! ten-epoch cadence, label smoothing, filter fine-tuning windows, full
//! determinism from one seed, checkpointing, and the squeeze-kind
//! comparator.

use crate::backbone::{Network, NetworkSpec};
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::filterbank::BankKind;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;
use crate::wire;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    CosineWarmRestarts,
    Constant,
}

/// Epoch windows during which squeeze filters receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FilterLearning {
    #[default]
    Frozen,
    /// Learn during the last `k` epochs.
    FinetunedLast { k: usize },
    /// Learn on every epoch divisible by five, plus the last `k`.
    FinetunedMod5PlusLast { k: usize },
    /// Learn during the first `k` epochs.
    FinetunedFirst { k: usize },
}

fn d_lr() -> f64 {
    0.05
}
fn d_momentum() -> f64 {
    0.9
}
fn d_weight_decay() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    32
}
fn d_smoothing() -> f64 {
    0.1
}
fn d_restart_period() -> usize {
    10
}
fn d_restart_decay() -> f64 {
    0.1
}
fn d_filter_lr_multiplier() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "d_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub schedule: Schedule,
    /// Cosine cycle length in epochs; the base learning rate rescales at
    /// the start of every cycle.
    #[serde(default = "d_restart_period")]
    pub restart_period: usize,
    /// Multiplicative factor applied to the base learning rate at each
    /// restart. 0.1 reads "scales by 10%" as times-0.1; set 0.9 for the
    /// reduce-by-10% reading.
    #[serde(default = "d_restart_decay")]
    pub restart_decay: f64,
    #[serde(default)]
    pub filter_learning: FilterLearning,
    #[serde(default = "d_filter_lr_multiplier")]
    pub filter_lr_multiplier: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: d_lr(),
            momentum: d_momentum(),
            weight_decay: d_weight_decay(),
            batch_size: d_batch(),
            epochs: 1,
            label_smoothing: d_smoothing(),
            schedule: Schedule::default(),
            restart_period: d_restart_period(),
            restart_decay: d_restart_decay(),
            filter_learning: FilterLearning::default(),
            filter_lr_multiplier: d_filter_lr_multiplier(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) && self.label_smoothing != 1.0 {
            return Err(Error::InvalidConfig(
                "label smoothing must be in [0,1]".into(),
            ));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.restart_period < 1 {
            return Err(Error::InvalidConfig("restart period must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// One SGD-with-momentum update:
/// `v <- momentum*v + g + weight_decay*p; p <- p - lr_t*v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    vel: &mut Tensor,
    lr_t: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != vel.shape() {
        return Err(Error::ShapeMismatch(format!(
            "sgd_step shapes {:?}/{:?}/{:?}",
            param.shape(),
            grad.shape(),
            vel.shape()
        )));
    }
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(vel.data_mut())
    {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr_t * *v;
    }
    Ok(())
}

/// Learning rate at `(epoch, step)`. Cosine cycles span
/// `restart_period` epochs, decaying from the cycle's base rate to zero;
/// each cycle's base rate is the previous one times `restart_decay`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::CosineWarmRestarts => {
            let cycle = epoch / cfg.restart_period;
            let base = cfg.lr * cfg.restart_decay.powi(cycle as i32);
            let t = (epoch % cfg.restart_period) as f64
                + if steps_per_epoch == 0 {
                    0.0
                } else {
                    step as f64 / steps_per_epoch as f64
                };
            base * 0.5 * (1.0 + (std::f64::consts::PI * t / cfg.restart_period as f64).cos())
        }
    }
}

/// Whether squeeze filters receive updates in `epoch`.
pub fn filter_learning_active(cfg: &TrainConfig, epoch: usize) -> bool {
    match cfg.filter_learning {
        FilterLearning::Frozen => false,
        FilterLearning::FinetunedLast { k } => epoch + k >= cfg.epochs,
        FilterLearning::FinetunedMod5PlusLast { k } => {
            epoch % 5 == 0 || epoch + k >= cfg.epochs
        }
        FilterLearning::FinetunedFirst { k } => epoch < k,
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Cross-entropy against the smoothed target
/// `(1-eps)*onehot + eps/classes`; returns the loss and its exact logit
/// gradient `softmax - smoothed_target`.
pub fn ce_label_smoothing(logits: &[f64], target: usize, eps: f64) -> (f64, Vec<f64>) {
    let k = logits.len();
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sum_exp: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum_exp.ln();
    let uniform = eps / k as f64;
    let mut loss = 0.0;
    let mut d = Vec::with_capacity(k);
    for (i, &l) in logits.iter().enumerate() {
        let q = if i == target { 1.0 - eps + uniform } else { uniform };
        let logp = l - lse;
        loss -= q * logp;
        d.push((l - lse).exp() - q);
    }
    (loss, d)
}

/// Batch-mean smoothed cross-entropy over `(N, K)` logits.
pub fn ce_label_smoothing_batch(
    logits: &Tensor,
    targets: &[usize],
    eps: f64,
) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs {} targets",
            shape,
            targets.len()
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let mut d = Tensor::zeros_like(logits);
    for b in 0..n {
        let (loss, row) = ce_label_smoothing(&logits.data()[b * k..(b + 1) * k], targets[b], eps);
        total += loss * inv;
        for (dst, src) in d.data_mut()[b * k..(b + 1) * k].iter_mut().zip(row) {
            *dst = src * inv;
        }
    }
    Ok((total, d))
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub lr: f64,
    /// Wall-clock seconds; reported in logs only, never in the CSV, so
    /// metric files stay bitwise reproducible.
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
}

impl Metrics {
    /// Long-format CSV: `epoch,split,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        for e in &self.epochs {
            out.push_str(&format!("{},train,loss,{}\n", e.epoch, e.train_loss));
            out.push_str(&format!("{},train,acc,{}\n", e.epoch, e.train_acc));
            out.push_str(&format!("{},train,lr,{}\n", e.epoch, e.lr));
            if let Some(v) = e.val_top1 {
                out.push_str(&format!("{},val,top1,{}\n", e.epoch, v));
            }
            if let Some(v) = e.val_top5 {
                out.push_str(&format!("{},val,top5,{}\n", e.epoch, v));
            }
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::from(
            "epoch  train_loss  train_acc  val_top1  val_top5  lr\n",
        );
        for e in &self.epochs {
            let fmt_opt = |v: Option<f64>| match v {
                Some(x) => format!("{x:.4}"),
                None => "-".into(),
            };
            out.push_str(&format!(
                "{:<6} {:<11.4} {:<10.4} {:<9} {:<9} {:.5}\n",
                e.epoch,
                e.train_loss,
                e.train_acc,
                fmt_opt(e.val_top1),
                fmt_opt(e.val_top5),
                e.lr
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn rank_of_target(logits: &[f64], target: usize) -> usize {
    let t = logits[target];
    logits.iter().filter(|&&v| v > t).count()
}

/// Top-1 and top-k accuracy in inference mode (running statistics);
/// `k = min(5, classes)`.
pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<(f64, f64)> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty evaluation set".into()));
    }
    let k5 = dataset.class_count.min(5);
    let (c, h, w) = (dataset.channels(), dataset.height(), dataset.width());
    let chw = c * h * w;
    let mut top1 = 0usize;
    let mut topk = 0usize;
    let eval_batch = 64usize;
    let mut start = 0;
    while start < n {
        let end = (start + eval_batch).min(n);
        let m = end - start;
        let xb = Tensor::from_vec(
            &[m, c, h, w],
            dataset.images.data()[start * chw..end * chw].to_vec(),
        )?;
        let logits = net.forward_eval(&xb)?;
        let kcls = dataset.class_count;
        for b in 0..m {
            let row = &logits.data()[b * kcls..(b + 1) * kcls];
            let rank = rank_of_target(row, dataset.labels[start + b]);
            if rank < 1 {
                top1 += 1;
            }
            if rank < k5 {
                topk += 1;
            }
        }
        start = end;
    }
    Ok((top1 as f64 / n as f64, topk as f64 / n as f64))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

fn apply_sgd(net: &mut Network, cfg: &TrainConfig, lr_t: f64, bank_active: bool) {
    net.visit_params(&mut |p| {
        if p.is_bank {
            if bank_active {
                sgd_step(
                    p.value,
                    p.grad,
                    p.vel,
                    lr_t * p_filter_lr(cfg),
                    cfg.momentum,
                    0.0,
                )
                .expect("bank shapes");
            }
        } else {
            let wd = if p.decay { cfg.weight_decay } else { 0.0 };
            sgd_step(p.value, p.grad, p.vel, lr_t, cfg.momentum, wd).expect("param shapes");
        }
    });
}

fn p_filter_lr(cfg: &TrainConfig) -> f64 {
    cfg.filter_lr_multiplier
}

/// Train `net` from scratch for `cfg.epochs` epochs. Batch order and
/// augmentation are pure functions of `(cfg.seed, epoch)`, so identical
/// configurations reproduce identical metrics and parameters bitwise.
pub fn train(
    net: &mut Network,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
) -> Result<Metrics> {
    cfg.validate()?;
    let mut metrics = Metrics::default();
    train_epochs(net, cfg, train_set, val_set, 0, cfg.epochs, &mut metrics)?;
    Ok(metrics)
}

/// Continue training between the half-open epoch range
/// `[from_epoch, to_epoch)`, appending per-epoch rows to `metrics`.
pub fn train_epochs(
    net: &mut Network,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    from_epoch: usize,
    to_epoch: usize,
    metrics: &mut Metrics,
) -> Result<()> {
    let n = train_set.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    if train_set.class_count != net.spec().class_count {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes, network {}",
            train_set.class_count,
            net.spec().class_count
        )));
    }
    let (c, h, w) = (train_set.channels(), train_set.height(), train_set.width());
    let chw = c * h * w;
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    for epoch in from_epoch..to_epoch {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        Rng::from_seed(derive_seed(cfg.seed, &format!("order-{epoch}"))).shuffle(&mut order);
        let mut aug_rng = Rng::from_seed(derive_seed(cfg.seed, &format!("aug-{epoch}")));
        let bank_active = filter_learning_active(cfg, epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr_t = lr_at(cfg, epoch, step, steps_per_epoch);
            let m = chunk.len();
            let mut xb = Tensor::zeros(&[m, c, h, w])?;
            let mut targets = Vec::with_capacity(m);
            for (bi, &idx) in chunk.iter().enumerate() {
                let img = augment(&mut aug_rng, &train_set.image(idx));
                xb.data_mut()[bi * chw..(bi + 1) * chw].copy_from_slice(img.data());
                targets.push(train_set.labels[idx]);
            }
            net.zero_grads();
            let (logits, tape) = net.forward_train(&xb)?;
            let (loss, d_logits) =
                ce_label_smoothing_batch(&logits, &targets, cfg.label_smoothing)?;
            net.backward(&tape, &d_logits)?;
            apply_sgd(net, cfg, lr_t, bank_active);
            loss_sum += loss * m as f64;
            let kcls = net.spec().class_count;
            for (b, &t) in targets.iter().enumerate() {
                if rank_of_target(&logits.data()[b * kcls..(b + 1) * kcls], t) < 1 {
                    correct += 1;
                }
            }
        }
        let (val_top1, val_top5) = match val_set {
            Some(v) => {
                let (t1, t5) = evaluate(net, v)?;
                (Some(t1), Some(t5))
            }
            None => (None, None),
        };
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_top1,
            val_top5,
            lr: lr_at(cfg, epoch, 0, steps_per_epoch),
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        eprintln!(
            "epoch {:>3}: loss {:.4} acc {:.4}{} ({:.2}s)",
            row.epoch,
            row.train_loss,
            row.train_acc,
            match row.val_top1 {
                Some(v) => format!(" val {v:.4}"),
                None => String::new(),
            },
            row.wall_secs
        );
        metrics.epochs.push(row);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints (OCK1)
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"OCK1";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CkptHeader {
    schema_version: u32,
    spec: NetworkSpec,
    config: TrainConfig,
    net_seed: u64,
    epochs_done: usize,
    model_scalars: usize,
    opt_scalars: usize,
}

pub struct Checkpoint {
    pub net: Network,
    pub config: TrainConfig,
    pub epochs_done: usize,
}

pub fn checkpoint_to_bytes(net: &mut Network, cfg: &TrainConfig, epochs_done: usize) -> Vec<u8> {
    let mut model = Vec::new();
    net.visit_model_state(&mut |t| model.extend_from_slice(t.data()));
    let mut opt = Vec::new();
    net.visit_opt_state(&mut |t| opt.extend_from_slice(t.data()));
    let header = CkptHeader {
        schema_version: 1,
        spec: net.spec().clone(),
        config: cfg.clone(),
        net_seed: net.seed(),
        epochs_done,
        model_scalars: model.len(),
        opt_scalars: opt.len(),
    };
    let header_json = serde_json::to_vec(&header).expect("header json");
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    wire::push_u32(&mut buf, CKPT_VERSION);
    wire::push_u32(&mut buf, header_json.len() as u32);
    buf.extend_from_slice(&header_json);
    for v in model.into_iter().chain(opt) {
        wire::push_f64(&mut buf, v);
    }
    let crc = wire::crc32(&buf);
    wire::push_u32(&mut buf, crc);
    buf
}

pub fn save_checkpoint(
    path: &Path,
    net: &mut Network,
    cfg: &TrainConfig,
    epochs_done: usize,
) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(net, cfg, epochs_done))?;
    Ok(())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = wire::ByteReader::new(bytes);
    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(Error::BadMagic {
            expected: "OCK1".into(),
        });
    }
    let version = r.read_u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::BadVersion {
            expected: CKPT_VERSION,
            got: version,
        });
    }
    let header_len = r.read_u32("header length")? as usize;
    let header_bytes = r.take(header_len, "header")?;
    let header: CkptHeader = serde_json::from_slice(header_bytes)?;
    let payload = header.model_scalars + header.opt_scalars;
    if r.remaining() != payload * 8 + 4 {
        return Err(Error::Truncated(format!(
            "payload wants {} bytes plus CRC, {} left",
            payload * 8,
            r.remaining()
        )));
    }
    let stored = u32::from_le_bytes([
        bytes[bytes.len() - 4],
        bytes[bytes.len() - 3],
        bytes[bytes.len() - 2],
        bytes[bytes.len() - 1],
    ]);
    let computed = wire::crc32(&bytes[..bytes.len() - 4]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut net = Network::build(&header.spec, header.net_seed)?;
    let mut fill_err = None;
    let mut reader = r;
    net.visit_model_state(&mut |t| {
        if fill_err.is_some() {
            return;
        }
        for v in t.data_mut() {
            match reader.read_f64("model state") {
                Ok(x) => *v = x,
                Err(e) => {
                    fill_err = Some(e);
                    return;
                }
            }
        }
    });
    net.visit_opt_state(&mut |t| {
        if fill_err.is_some() {
            return;
        }
        for v in t.data_mut() {
            match reader.read_f64("optimizer state") {
                Ok(x) => *v = x,
                Err(e) => {
                    fill_err = Some(e);
                    return;
                }
            }
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    Ok(Checkpoint {
        net,
        config: header.config,
        epochs_done: header.epochs_done,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Resume a checkpointed run to `config.epochs`; continues the exact
/// stream the uninterrupted run would have produced.
pub fn resume_training(
    ckpt: &mut Checkpoint,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
) -> Result<Metrics> {
    let mut metrics = Metrics::default();
    let cfg = ckpt.config.clone();
    train_epochs(
        &mut ckpt.net,
        &cfg,
        train_set,
        val_set,
        ckpt.epochs_done,
        cfg.epochs,
        &mut metrics,
    )?;
    ckpt.epochs_done = cfg.epochs;
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Squeeze-kind comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub kind: BankKind,
    pub n_seeds: usize,
    pub mean_t1: f64,
    pub sd_t1: f64,
}

/// Train `base_spec` once per (kind, seed) cell and aggregate final
/// accuracy per kind. Batch order depends only on the seed, so every
/// kind sees identical data order for a given seed. The final metric is
/// validation top-1 when a validation set is given, else train accuracy.
pub fn compare_squeeze(
    base_spec: &NetworkSpec,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    kinds: &[BankKind],
    seeds: &[u64],
) -> Result<Vec<CompareRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut finals = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut spec = base_spec.clone();
            spec.attention.squeeze = kind;
            let mut net = Network::build(&spec, derive_seed(seed, "net"))?;
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            let metrics = train(&mut net, &run_cfg, train_set, val_set)?;
            let last = metrics.last().expect("at least one epoch");
            finals.push(last.val_top1.unwrap_or(last.train_acc));
        }
        let n = finals.len() as f64;
        let mean = finals.iter().sum::<f64>() / n;
        let sd = if finals.len() > 1 {
            (finals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(CompareRow {
            kind,
            n_seeds: finals.len(),
            mean_t1: mean,
            sd_t1: sd,
        });
    }
    Ok(rows)
}

pub fn comparison_table(rows: &[CompareRow]) -> String {
    let mut out = String::from("kind,n_seeds,mean_t1,sd_t1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.kind.name(),
            r.n_seeds,
            r.mean_t1,
            r.sd_t1
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Raw-pixel linear baseline
// ---------------------------------------------------------------------------

pub const LINEAR_BASELINE_EPOCHS: usize = 50;
/// Small enough that fifty epochs learn the class signal without also
/// memorizing the training noise; the oracle stays in the 0.85-0.95
/// band instead of saturating.
pub const LINEAR_BASELINE_LR: f64 = 0.01;
pub const LINEAR_BASELINE_BATCH: usize = 32;

/// Softmax regression on raw pixels, plain SGD, no augmentation.
/// Returns final train accuracy: the floor any credible network must
/// clear on the synthetic task.
pub fn linear_baseline_accuracy(train_set: &Dataset, seed: u64) -> Result<f64> {
    let n = train_set.len();
    let d = train_set.channels() * train_set.height() * train_set.width();
    let k = train_set.class_count;
    let mut wmat = vec![0.0; k * d];
    let mut bias = vec![0.0; k];
    let logits_of = |wmat: &[f64], bias: &[f64], img: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|kk| {
                let mut acc = bias[kk];
                for (wv, xv) in wmat[kk * d..(kk + 1) * d].iter().zip(img) {
                    acc += wv * xv;
                }
                acc
            })
            .collect()
    };
    for epoch in 0..LINEAR_BASELINE_EPOCHS {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::from_seed(derive_seed(seed, &format!("linear-{epoch}"))).shuffle(&mut order);
        for chunk in order.chunks(LINEAR_BASELINE_BATCH) {
            let m = chunk.len() as f64;
            let mut gw = vec![0.0; k * d];
            let mut gb = vec![0.0; k];
            for &idx in chunk {
                let img = &train_set.images.data()[idx * d..(idx + 1) * d];
                let logits = logits_of(&wmat, &bias, img);
                let (_, dl) = ce_label_smoothing(&logits, train_set.labels[idx], 0.0);
                for kk in 0..k {
                    gb[kk] += dl[kk] / m;
                    for (g, xv) in gw[kk * d..(kk + 1) * d].iter_mut().zip(img) {
                        *g += dl[kk] * xv / m;
                    }
                }
            }
            for (w, g) in wmat.iter_mut().zip(&gw) {
                *w -= LINEAR_BASELINE_LR * g;
            }
            for (b, g) in bias.iter_mut().zip(&gb) {
                *b -= LINEAR_BASELINE_LR * g;
            }
        }
    }
    let mut correct = 0usize;
    for idx in 0..n {
        let img = &train_set.images.data()[idx * d..(idx + 1) * d];
        let logits = logits_of(&wmat, &bias, img);
        if rank_of_target(&logits, train_set.labels[idx]) < 1 {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{tiny34, AttentionConfig, AttentionPlacement, StageSpec};
    use crate::data::make_synthetic;

    fn tiny_spec(squeeze: BankKind, learnable: bool) -> NetworkSpec {
        let mut spec = tiny34(
            1,
            2,
            AttentionConfig {
                reduction: 2,
                filters_learnable: learnable,
                ..AttentionConfig::with_squeeze(AttentionPlacement::Standard, squeeze)
            },
        );
        spec.input_height = 8;
        spec.input_width = 8;
        spec.stem_channels = 4;
        spec.stages = vec![
            StageSpec { out_channels: 4, blocks: 1, stride: 1 },
            StageSpec { out_channels: 8, blocks: 1, stride: 2 },
        ];
        spec
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            batch_size: 8,
            epochs,
            seed: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sgd_two_hand_computed_steps() {
        // m=0.9, lr=0.1, g=1 twice, wd=0, from p=0:
        // v1=1, p1=-0.1; v2=1.9, p2=-0.29.
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut v = Tensor::zeros(&[1]).unwrap();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((v.data()[0] - 1.9).abs() < 1e-15);
        assert!((p.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_no_momentum_is_plain_descent() {
        let mut p = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.5, 0.25]).unwrap();
        let mut v = Tensor::zeros(&[2]).unwrap();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn sgd_zero_gradient_keeps_params() {
        let mut p = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::zeros(&[2]).unwrap();
        let mut v = Tensor::zeros(&[2]).unwrap();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn lr_schedule_cycle_contract() {
        let cfg = TrainConfig { lr: 0.2, epochs: 30, ..tiny_cfg(30) };
        assert_eq!(lr_at(&cfg, 0, 0, 10), 0.2);
        assert_eq!(lr_at(&cfg, 10, 0, 10), 0.2 * 0.1);
        assert_eq!(lr_at(&cfg, 20, 0, 10), 0.2 * 0.1 * 0.1);
        // Mid-cycle hand point: epoch 3, step 0 of cycle length 10.
        let want = 0.2 * 0.5 * (1.0 + (std::f64::consts::PI * 3.0 / 10.0).cos());
        assert!((lr_at(&cfg, 3, 0, 10) - want).abs() < 1e-15);
        let constant = TrainConfig { schedule: Schedule::Constant, ..cfg };
        assert_eq!(lr_at(&constant, 17, 3, 10), constant.lr);
    }

    #[test]
    fn lr_alternative_decay_reading() {
        let cfg = TrainConfig { lr: 1.0, restart_decay: 0.9, epochs: 30, ..tiny_cfg(30) };
        assert_eq!(lr_at(&cfg, 10, 0, 5), 0.9);
    }

    #[test]
    fn ce_uniform_logits_is_log_k() {
        let (loss, _) = ce_label_smoothing(&[0.3; 5], 2, 0.0);
        assert!((loss - (5.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        use crate::gradcheck::{fd_grad, max_rel_err};
        let logits = vec![0.2, -1.3, 0.7, 2.1];
        for eps in [0.0, 0.1] {
            let (_, d) = ce_label_smoothing(&logits, 1, eps);
            let numeric = fd_grad(|p| ce_label_smoothing(p, 1, eps).0, &logits, 1e-6);
            assert!(max_rel_err(&d, &numeric, 1e-6) <= 1e-8);
        }
    }

    #[test]
    fn ce_full_smoothing_ignores_target() {
        let logits = vec![0.5, -0.25, 1.5];
        let (l0, _) = ce_label_smoothing(&logits, 0, 1.0);
        let (l2, _) = ce_label_smoothing(&logits, 2, 1.0);
        assert!((l0 - l2).abs() < 1e-15);
    }

    #[test]
    fn filter_learning_predicates() {
        let mk = |filter_learning, epochs| TrainConfig {
            filter_learning,
            epochs,
            ..TrainConfig::default()
        };
        let ft20 = mk(FilterLearning::FinetunedLast { k: 20 }, 100);
        for epoch in 0..100 {
            assert_eq!(filter_learning_active(&ft20, epoch), epoch >= 80);
        }
        let ft40 = mk(FilterLearning::FinetunedMod5PlusLast { k: 20 }, 100);
        assert!(filter_learning_active(&ft40, 25));
        assert!(!filter_learning_active(&ft40, 26));
        assert!(filter_learning_active(&ft40, 81));
        let ft30 = mk(FilterLearning::FinetunedFirst { k: 30 }, 100);
        assert!(filter_learning_active(&ft30, 29));
        assert!(!filter_learning_active(&ft30, 30));
        let frozen = mk(FilterLearning::Frozen, 100);
        assert!((0..100).all(|e| !filter_learning_active(&frozen, e)));
    }

    #[test]
    fn train_smoke_single_epoch() {
        let data = make_synthetic(0, 2, 8, 8, 8).unwrap();
        let spec = tiny_spec(BankKind::Gap, false);
        let mut net = Network::build(&spec, 0).unwrap();
        let metrics = train(&mut net, &tiny_cfg(1), &data, None).unwrap();
        assert_eq!(metrics.epochs.len(), 1);
        assert!(metrics.epochs[0].train_loss.is_finite());
    }

    #[test]
    fn train_is_deterministic() {
        let data = make_synthetic(3, 2, 8, 8, 8).unwrap();
        let val = make_synthetic(4, 2, 4, 8, 8).unwrap();
        let spec = tiny_spec(BankKind::Ortho, false);
        let run = || {
            let mut net = Network::build(&spec, 1).unwrap();
            let m = train(&mut net, &tiny_cfg(2), &data, Some(&val)).unwrap();
            (m, checkpoint_to_bytes(&mut net, &tiny_cfg(2), 2))
        };
        let (m1, c1) = run();
        let (m2, c2) = run();
        assert_eq!(m1.to_csv(), m2.to_csv());
        assert_eq!(c1, c2);
    }

    #[test]
    fn frozen_banks_do_not_move() {
        let data = make_synthetic(5, 2, 8, 8, 8).unwrap();
        let spec = tiny_spec(BankKind::Ortho, false);
        let mut net = Network::build(&spec, 2).unwrap();
        let before = net.bank_snapshot();
        train(&mut net, &tiny_cfg(2), &data, None).unwrap();
        assert_eq!(net.bank_snapshot(), before);
    }

    #[test]
    fn finetuned_banks_move_in_active_epochs() {
        let data = make_synthetic(5, 2, 8, 8, 8).unwrap();
        let spec = tiny_spec(BankKind::Ortho, true);
        let mut net = Network::build(&spec, 2).unwrap();
        let before = net.bank_snapshot();
        let cfg = TrainConfig {
            filter_learning: FilterLearning::FinetunedFirst { k: 2 },
            ..tiny_cfg(2)
        };
        train(&mut net, &cfg, &data, None).unwrap();
        assert_ne!(net.bank_snapshot(), before);
    }

    #[test]
    fn checkpoint_roundtrip_and_resume_continuation() {
        let data = make_synthetic(6, 2, 8, 8, 8).unwrap();
        let val = make_synthetic(7, 2, 4, 8, 8).unwrap();
        let spec = tiny_spec(BankKind::Ortho, false);
        let cfg = tiny_cfg(3);

        // Uninterrupted run.
        let mut full_net = Network::build(&spec, 5).unwrap();
        let full_metrics = train(&mut full_net, &cfg, &data, Some(&val)).unwrap();
        let full_bytes = checkpoint_to_bytes(&mut full_net, &cfg, 3);

        // Interrupted after two epochs, then resumed.
        let mut part_net = Network::build(&spec, 5).unwrap();
        let mut part_metrics = Metrics::default();
        train_epochs(&mut part_net, &cfg, &data, Some(&val), 0, 2, &mut part_metrics).unwrap();
        let bytes = checkpoint_to_bytes(&mut part_net, &cfg, 2);
        let mut ckpt = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.epochs_done, 2);
        let tail = resume_training(&mut ckpt, &data, Some(&val)).unwrap();
        part_metrics.epochs.extend(tail.epochs);

        assert_eq!(part_metrics.to_csv(), full_metrics.to_csv());
        let resumed_bytes = checkpoint_to_bytes(&mut ckpt.net, &cfg, 3);
        assert_eq!(resumed_bytes, full_bytes);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let spec = tiny_spec(BankKind::Gap, false);
        let mut net = Network::build(&spec, 0).unwrap();
        let cfg = tiny_cfg(1);
        let bytes = checkpoint_to_bytes(&mut net, &cfg, 0);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bad_magic),
            Err(Error::BadMagic { .. })
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            checkpoint_from_bytes(&bad_version),
            Err(Error::BadVersion { .. })
        ));

        let mut bad_crc = bytes.clone();
        let n = bad_crc.len();
        bad_crc[n - 20] ^= 0x55;
        assert!(matches!(
            checkpoint_from_bytes(&bad_crc),
            Err(Error::ChecksumMismatch { .. })
        ));

        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn eval_matches_last_val_metric() {
        let data = make_synthetic(8, 2, 8, 8, 8).unwrap();
        let val = make_synthetic(9, 2, 4, 8, 8).unwrap();
        let spec = tiny_spec(BankKind::Gap, false);
        let mut net = Network::build(&spec, 3).unwrap();
        let metrics = train(&mut net, &tiny_cfg(2), &data, Some(&val)).unwrap();
        let (t1, t5) = evaluate(&net, &val).unwrap();
        assert_eq!(Some(t1), metrics.last().unwrap().val_top1);
        assert_eq!(Some(t5), metrics.last().unwrap().val_top5);
    }

    #[test]
    fn compare_rows_schema_and_determinism() {
        let data = make_synthetic(10, 2, 6, 8, 8).unwrap();
        let spec = tiny_spec(BankKind::Gap, false);
        let cfg = tiny_cfg(1);
        let rows = compare_squeeze(&spec, &cfg, &data, None, &[BankKind::Gap], &[0]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].n_seeds, 1);
        assert_eq!(rows[0].sd_t1, 0.0);

        let twice = compare_squeeze(
            &spec,
            &cfg,
            &data,
            None,
            &[BankKind::Ortho, BankKind::Ortho],
            &[1],
        )
        .unwrap();
        assert_eq!(twice[0], twice[1]);

        let table = comparison_table(&rows);
        assert!(table.starts_with("kind,n_seeds,mean_t1,sd_t1"));
    }
}
