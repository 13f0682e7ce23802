//! Command-line surface: bank generation and validation, gradient
//! checking, training, evaluation, squeeze-kind comparison, and artifact
//! inspection.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 failed check,
//! 4 corrupt artifact, 5 runtime failure.

use crate::attention::AttentionBlock;
use crate::backbone::{
    tiny34, tiny50, AttentionConfig, AttentionPlacement, Network, NetworkSpec, StageSpec,
};
use crate::data::{load_idx, make_synthetic, Dataset};
use crate::error::{Error, Result};
use crate::filterbank::{
    self, bank_to_bytes, check_orthonormality, dct_basis, load_bank, save_bank, BankKind,
    FilterBank,
};
use crate::gradcheck;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;
use crate::train::{
    self, compare_squeeze, comparison_table, evaluate, load_checkpoint, save_checkpoint,
    TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "orthoattn",
    version,
    about = "Orthogonal channel attention: filter banks, a desk-scale residual backbone, and a reproducible trainer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a squeeze filter bank and write it as an OFB1 file.
    Genbank(GenbankArgs),
    /// Validate a bank file: structure, checksum, and (for ortho banks)
    /// per-group orthonormality.
    Checkbank(CheckbankArgs),
    /// Finite-difference gradient check of the attention block or a toy
    /// network.
    Gradcheck(GradcheckArgs),
    /// Train a network from a JSON config; writes metrics CSV and a
    /// checkpoint.
    Train(ConfigArg),
    /// Evaluate the config's checkpoint on its evaluation split.
    Eval(ConfigArg),
    /// Train one run per (squeeze kind, seed) cell and print mean/sd.
    Compare(ConfigArg),
    /// Inspect an OFB1 bank or OCK1 checkpoint.
    Info(InfoArgs),
}

#[derive(Args)]
pub struct GenbankArgs {
    /// ortho | gap | dct | random
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub c: usize,
    #[arg(long)]
    pub h: usize,
    #[arg(long)]
    pub w: usize,
    /// Channels each filter spans (ortho/random only).
    #[arg(long, default_value_t = 1)]
    pub group: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// DCT frequency pairs as "i,j;i,j;..."; defaults to the zigzag list.
    #[arg(long)]
    pub freqs: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CheckbankArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub expect_kind: Option<String>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// attention | tiny34 | tiny50
    #[arg(long)]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Test fixture: negate analytic gradients to prove the harness
    /// catches a wrong backward pass.
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

#[derive(Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Args)]
pub struct InfoArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
}

// ---------------------------------------------------------------------------
// JSON run config (documented in docs/config_schema.md)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; every subsystem seed is derived from it by label.
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default)]
    pub compare: Option<CompareConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        classes: usize,
        n_per_class: usize,
        height: usize,
        width: usize,
        /// Held-out images per class (seeded independently); 0 disables
        /// the validation split.
        #[serde(default)]
        val_per_class: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        val_images: Option<PathBuf>,
        #[serde(default)]
        val_labels: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// tiny34 | tiny50; mutually exclusive with `spec`.
    #[serde(default)]
    pub preset: Option<String>,
    /// Full network spec; overrides the preset entirely.
    #[serde(default)]
    pub spec: Option<NetworkSpec>,
    #[serde(default = "default_attention")]
    pub attention: AttentionConfig,
    /// Override the preset's input resolution.
    #[serde(default)]
    pub input_height: Option<usize>,
    #[serde(default)]
    pub input_width: Option<usize>,
}

fn default_attention() -> AttentionConfig {
    AttentionConfig::with_squeeze(AttentionPlacement::Standard, BankKind::Ortho)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_metrics_csv")]
    pub metrics_csv: PathBuf,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    #[serde(default = "default_comparison_csv")]
    pub comparison_csv: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            metrics_csv: default_metrics_csv(),
            checkpoint: default_checkpoint(),
            comparison_csv: default_comparison_csv(),
        }
    }
}

fn default_metrics_csv() -> PathBuf {
    PathBuf::from("metrics.csv")
}
fn default_checkpoint() -> PathBuf {
    PathBuf::from("model.ock")
}
fn default_comparison_csv() -> PathBuf {
    PathBuf::from("comparison.csv")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub kinds: Vec<BankKind>,
    pub seeds: Vec<u64>,
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    if cfg.schema_version != 1 {
        return Err(Error::InvalidConfig(format!(
            "unsupported schema_version {}",
            cfg.schema_version
        )));
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    match &cfg.data {
        DataConfig::Synthetic {
            classes,
            n_per_class,
            height,
            width,
            val_per_class,
        } => {
            let train = make_synthetic(
                derive_seed(cfg.seed, "data-train"),
                *classes,
                *n_per_class,
                *height,
                *width,
            )?;
            let val = if *val_per_class > 0 {
                Some(make_synthetic(
                    derive_seed(cfg.seed, "data-val"),
                    *classes,
                    *val_per_class,
                    *height,
                    *width,
                )?)
            } else {
                None
            };
            Ok((train, val))
        }
        DataConfig::Idx {
            images,
            labels,
            val_images,
            val_labels,
        } => {
            let train = load_idx(images, labels)?;
            let val = match (val_images, val_labels) {
                (Some(vi), Some(vl)) => Some(load_idx(vi, vl)?),
                (None, None) => None,
                _ => {
                    return Err(Error::InvalidConfig(
                        "val_images and val_labels must be given together".into(),
                    ))
                }
            };
            Ok((train, val))
        }
    }
}

fn build_spec(cfg: &RunConfig, data: &Dataset) -> Result<NetworkSpec> {
    let net = &cfg.network;
    let mut spec = match (&net.spec, net.preset.as_deref()) {
        (Some(spec), None) => spec.clone(),
        (None, Some("tiny34")) => tiny34(data.channels(), data.class_count, net.attention.clone()),
        (None, Some("tiny50")) => tiny50(data.channels(), data.class_count, net.attention.clone()),
        (None, Some(other)) => {
            return Err(Error::InvalidConfig(format!("unknown preset {other:?}")))
        }
        (None, None) => {
            return Err(Error::InvalidConfig(
                "network needs either a preset or a full spec".into(),
            ))
        }
        (Some(_), Some(_)) => {
            return Err(Error::InvalidConfig(
                "give either a preset or a spec, not both".into(),
            ))
        }
    };
    if let Some(h) = net.input_height {
        spec.input_height = h;
    }
    if let Some(w) = net.input_width {
        spec.input_width = w;
    }
    if spec.input_channels != data.channels()
        || spec.input_height != data.height()
        || spec.input_width != data.width()
    {
        return Err(Error::InvalidConfig(format!(
            "network expects {}x{}x{} inputs, dataset provides {}x{}x{}",
            spec.input_channels,
            spec.input_height,
            spec.input_width,
            data.channels(),
            data.height(),
            data.width()
        )));
    }
    if spec.class_count != data.class_count {
        return Err(Error::InvalidConfig(format!(
            "network has {} classes, dataset {}",
            spec.class_count, data.class_count
        )));
    }
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn parse_freqs(text: &str) -> Result<Vec<(u32, u32)>> {
    let mut out = Vec::new();
    for pair in text.split(';').filter(|p| !p.trim().is_empty()) {
        let mut it = pair.split(',');
        let parse = |s: Option<&str>| -> Result<u32> {
            s.and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::InvalidConfig(format!("bad frequency pair {pair:?}")))
        };
        let i = parse(it.next())?;
        let j = parse(it.next())?;
        if it.next().is_some() {
            return Err(Error::InvalidConfig(format!("bad frequency pair {pair:?}")));
        }
        out.push((i, j));
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig("empty frequency list".into()));
    }
    Ok(out)
}

fn cmd_genbank(args: &GenbankArgs) -> Result<()> {
    if args.c == 0 || args.h == 0 || args.w == 0 || args.group == 0 {
        return Err(Error::InvalidConfig(
            "--c, --h, --w, and --group must be positive".into(),
        ));
    }
    let kind: BankKind = args.kind.parse()?;
    if kind != BankKind::Ortho && kind != BankKind::Random && args.group != 1 {
        return Err(Error::InvalidConfig(format!(
            "--group applies to ortho/random banks, not {}",
            kind.name()
        )));
    }
    if args.group > 1 && args.c % args.group != 0 {
        return Err(Error::InvalidConfig(format!(
            "--group {} does not divide --c {}",
            args.group, args.c
        )));
    }
    let bank = match kind {
        BankKind::Ortho => {
            filterbank::build_ortho_grouped(args.c, args.h, args.w, args.group, args.seed)?
        }
        BankKind::Random => {
            filterbank::build_random_grouped(args.c, args.h, args.w, args.group, args.seed)?
        }
        BankKind::Gap => filterbank::build_gap(args.c, args.h, args.w)?,
        BankKind::Dct => {
            let freqs = match &args.freqs {
                Some(text) => parse_freqs(text)?,
                None => filterbank::zigzag_freqs(args.h.min(7), args.w.min(7), 16),
            };
            filterbank::build_dct(args.c, args.h, args.w, &freqs)?
        }
    };
    save_bank(&bank, &args.out)?;
    println!(
        "wrote {} bank: c={} h={} w={} group={} seed={} ({} bytes)",
        kind.name(),
        bank.channels(),
        bank.height(),
        bank.width(),
        bank.group_size(),
        bank.seed(),
        bank_to_bytes(&bank).len()
    );
    if kind == BankKind::Ortho {
        let report = check_orthonormality(&bank)?;
        for (g, range) in bank.gs_groups().iter().enumerate() {
            println!(
                "group {g}: channels {}..{}, max |<Fi,Fj> - d_ij| = {:.3e}",
                range.start, range.end, report.group_deviations[g]
            );
        }
        println!(
            "orthonormality: {} (max deviation {:.3e})",
            if report.passes() { "PASS" } else { "FAIL" },
            report.max_deviation
        );
        if !report.passes() {
            return Err(Error::CheckFailed(format!(
                "orthonormality deviation {:.3e}",
                report.max_deviation
            )));
        }
    }
    Ok(())
}

fn structural_check(bank: &FilterBank) -> Result<()> {
    match bank.kind() {
        BankKind::Ortho => {
            let report = check_orthonormality(bank)?;
            for (g, range) in bank.gs_groups().iter().enumerate() {
                println!(
                    "group {g}: channels {}..{}, max deviation {:.3e}",
                    range.start, range.end, report.group_deviations[g]
                );
            }
            println!("max deviation {:.3e}", report.max_deviation);
            if !report.passes() {
                return Err(Error::CheckFailed(format!(
                    "orthonormality deviation {:.3e} exceeds 1e-10",
                    report.max_deviation
                )));
            }
        }
        BankKind::Gap => {
            let want = 1.0 / (bank.height() * bank.width()) as f64;
            if bank.kernel().data().iter().any(|&v| v != want) {
                return Err(Error::CheckFailed(
                    "gap bank entries differ from 1/(H*W)".into(),
                ));
            }
            println!("gap bank constant {want}");
        }
        BankKind::Dct => {
            let freqs = bank
                .dct_freqs()
                .ok_or_else(|| Error::CheckFailed("dct bank has no frequency table".into()))?;
            let block_size = (bank.channels() / freqs.len()).max(1);
            for c in 0..bank.channels() {
                let (i, j) = freqs[(c / block_size).min(freqs.len() - 1)];
                let basis = dct_basis(i, j, bank.height(), bank.width())?;
                let filt = bank.filter(c);
                let exact = filt
                    .iter()
                    .zip(basis.data())
                    .all(|(a, b)| (a - b).abs() <= 1e-12);
                // A unit-norm variant is also structurally valid.
                let norm = basis.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let scaled = filt
                    .iter()
                    .zip(basis.data())
                    .all(|(a, b)| (a - b / norm).abs() <= 1e-12);
                if !exact && !scaled {
                    return Err(Error::CheckFailed(format!(
                        "channel {c} filter does not match dct basis ({i},{j})"
                    )));
                }
            }
            println!("dct bank matches its {} frequency blocks", freqs.len());
        }
        BankKind::Random => {
            println!("random bank: structural checks only (shape, finiteness)");
        }
    }
    Ok(())
}

fn cmd_checkbank(args: &CheckbankArgs) -> Result<()> {
    let bank = load_bank(&args.input)?;
    println!(
        "bank: kind={} c={} h={} w={} group={} seed={}",
        bank.kind().name(),
        bank.channels(),
        bank.height(),
        bank.width(),
        bank.group_size(),
        bank.seed()
    );
    if let Some(expected) = &args.expect_kind {
        let expected: BankKind = expected.parse()?;
        if expected != bank.kind() {
            return Err(Error::WrongKind {
                expected: expected.name().into(),
                got: bank.kind().name().into(),
            });
        }
    }
    structural_check(&bank)
}

/// Toy 2-block specs sized for exhaustive finite differences.
fn gradcheck_spec(preset: &str) -> Result<NetworkSpec> {
    let attention = |placement, reduction| AttentionConfig {
        reduction,
        filters_learnable: true,
        ..AttentionConfig::with_squeeze(placement, BankKind::Ortho)
    };
    let mut spec = match preset {
        "tiny34" => {
            let mut s = tiny34(1, 2, attention(AttentionPlacement::Standard, 2));
            s.stages = vec![
                StageSpec { out_channels: 4, blocks: 1, stride: 1 },
                StageSpec { out_channels: 8, blocks: 1, stride: 2 },
            ];
            s
        }
        "tiny50" => {
            let mut s = tiny50(1, 2, attention(AttentionPlacement::Mod, 2));
            s.stages = vec![
                StageSpec { out_channels: 8, blocks: 1, stride: 1 },
                StageSpec { out_channels: 8, blocks: 1, stride: 2 },
            ];
            s
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown gradcheck preset {other:?}"
            )))
        }
    };
    spec.stem_channels = 4;
    spec.input_height = 8;
    spec.input_width = 8;
    Ok(spec)
}

/// Attention check with an optional injected sign fault: a negated
/// analytic input gradient must blow the comparison up.
fn attention_check_with_fault(seed: u64, eps: f64, flip_sign: bool) -> Result<f64> {
    let rng = Rng::from_seed(seed);
    let (c, h, w) = (4, 3, 3);
    let bank = filterbank::build_ortho(c, h, w, rng.split("bank").seed())?;
    let mut block = AttentionBlock::new(bank, 2, true, &mut rng.split("weights"))?;
    let x = Tensor::randn(&mut rng.split("input"), &[c, h, w])?;
    let g = Tensor::randn(&mut rng.split("loss"), &[c, h, w])?;
    block.forward(&x)?;
    let bundle = block.backward(&g)?;
    let mut analytic = bundle.d_input.data().to_vec();
    if flip_sign {
        analytic.iter_mut().for_each(|v| *v = -*v);
    }
    let numeric = gradcheck::fd_grad(
        |p| {
            let xt = Tensor::from_vec(&[c, h, w], p.to_vec()).unwrap();
            let (y, _, _) = block.forward_with_cache(&xt).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        },
        x.data(),
        eps,
    );
    Ok(gradcheck::max_rel_err(
        &analytic,
        &numeric,
        gradcheck::REL_ERR_FLOOR,
    ))
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let max_err = match args.preset.as_str() {
        "attention" => {
            if args.inject_sign_flip {
                attention_check_with_fault(args.seed, args.eps, true)?
            } else {
                let mut worst = attention_check_with_fault(args.seed, args.eps, false)?;
                // A spread of shapes, reductions, and groupings.
                let cases = [
                    (4usize, 3usize, 3usize, 2usize, 1usize, true),
                    (8, 2, 2, 4, 1, true),
                    (6, 4, 4, 2, 2, true),
                    (5, 1, 3, 1, 1, false),
                    (8, 4, 4, 16, 1, false),
                ];
                for (i, (c, h, w, r, g, learn)) in cases.iter().enumerate() {
                    worst = worst.max(gradcheck::check_attention_instance(
                        *c,
                        *h,
                        *w,
                        *r,
                        *g,
                        *learn,
                        args.seed.wrapping_add(i as u64),
                        args.eps,
                    )?);
                }
                worst
            }
        }
        preset => {
            let spec = gradcheck_spec(preset)?;
            gradcheck::check_network_with_fault(&spec, args.seed, args.eps, args.inject_sign_flip)?
        }
    };
    println!("max relative error: {max_err:.3e}");
    if max_err <= 1e-5 {
        println!("gradcheck: PASS");
        Ok(())
    } else {
        Err(Error::CheckFailed(format!(
            "max relative error {max_err:.3e} exceeds 1e-5"
        )))
    }
}

fn cmd_train(args: &ConfigArg) -> Result<()> {
    let cfg = load_run_config(&args.config)?;
    let (train_set, val_set) = load_data(&cfg)?;
    let spec = build_spec(&cfg, &train_set)?;
    let mut net = Network::build(&spec, derive_seed(cfg.seed, "net"))?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = derive_seed(cfg.seed, "train");
    let metrics = train::train(&mut net, &train_cfg, &train_set, val_set.as_ref())?;
    std::fs::write(&cfg.outputs.metrics_csv, metrics.to_csv())?;
    save_checkpoint(&cfg.outputs.checkpoint, &mut net, &train_cfg, train_cfg.epochs)?;
    println!("{}", metrics.table());
    println!(
        "wrote {} and {}",
        cfg.outputs.metrics_csv.display(),
        cfg.outputs.checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(args: &ConfigArg) -> Result<()> {
    let cfg = load_run_config(&args.config)?;
    let (train_set, val_set) = load_data(&cfg)?;
    let ckpt = load_checkpoint(&cfg.outputs.checkpoint)?;
    let eval_set = val_set.as_ref().unwrap_or(&train_set);
    let (top1, top5) = evaluate(&ckpt.net, eval_set)?;
    println!("top1 {top1}");
    println!("top5 {top5}");
    Ok(())
}

fn cmd_compare(args: &ConfigArg) -> Result<()> {
    let cfg = load_run_config(&args.config)?;
    let compare = cfg
        .compare
        .clone()
        .ok_or_else(|| Error::InvalidConfig("compare section missing".into()))?;
    if compare.kinds.is_empty() || compare.seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "compare needs at least one kind and one seed".into(),
        ));
    }
    let (train_set, val_set) = load_data(&cfg)?;
    let spec = build_spec(&cfg, &train_set)?;
    let rows = compare_squeeze(
        &spec,
        &cfg.train,
        &train_set,
        val_set.as_ref(),
        &compare.kinds,
        &compare.seeds,
    )?;
    let table = comparison_table(&rows);
    std::fs::write(&cfg.outputs.comparison_csv, &table)?;
    print!("{table}");
    println!("wrote {}", cfg.outputs.comparison_csv.display());
    Ok(())
}

fn cmd_info(args: &InfoArgs) -> Result<()> {
    let bytes = std::fs::read(&args.input)?;
    match bytes.get(..4) {
        Some(b"OFB1") => {
            let bank = filterbank::bank_from_bytes(&bytes)?;
            println!(
                "OFB1 bank: kind={} c={} h={} w={} group={} seed={}",
                bank.kind().name(),
                bank.channels(),
                bank.height(),
                bank.width(),
                bank.group_size(),
                bank.seed()
            );
            if let Some(freqs) = bank.dct_freqs() {
                println!("dct freqs: {freqs:?}");
            }
            if bank.kind() == BankKind::Ortho {
                let report = check_orthonormality(&bank)?;
                println!("max orthonormality deviation {:.3e}", report.max_deviation);
            }
            Ok(())
        }
        Some(b"OCK1") => {
            let mut ckpt = train::checkpoint_from_bytes(&bytes)?;
            let params = ckpt.net.count_params();
            println!(
                "OCK1 checkpoint: epochs_done={} classes={} params={}",
                ckpt.epochs_done,
                ckpt.net.spec().class_count,
                params
            );
            println!("spec:\n{}", ckpt.net.spec().to_json()?);
            Ok(())
        }
        _ => Err(Error::BadMagic {
            expected: "OFB1 or OCK1".into(),
        }),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Genbank(args) => cmd_genbank(args),
        Command::Checkbank(args) => cmd_checkbank(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Info(args) => cmd_info(args),
    }
}
