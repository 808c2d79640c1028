//! Training-loop orchestration: configuration, the budgeted search loop,
//! batch-norm calibration, checkpointing and evaluation.

use crate::autodiff::{Mode, Tape};
use crate::blocks::{ArchDesc, BranchKind, RepNet};
use crate::checkpoint::Checkpoint;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::fusion::FusedNetwork;
use crate::optim::{Adam, Sgd};
use crate::scalar::Scalar;
use crate::search::{self, ArchState, SearchConfig};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const ENV_DATA_DIR: &str = "REPFUSE_DATA_DIR";
/// Batches of train-mode forward used to settle batch-norm statistics
/// under the final gates before fusion.
pub const CALIBRATION_BATCHES: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Gaussian-blob images generated on the fly.
    Synthetic {
        n: usize,
        classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_n_test")]
        n_test: usize,
    },
    /// Standard binary batch files; `dir` falls back to $REPFUSE_DATA_DIR.
    Cifar10 {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
}

fn default_noise() -> f64 {
    0.15
}
fn default_n_test() -> usize {
    256
}

/// Named block stacks. The lettered presets mirror the published
/// channel/depth table (stage depths 1,2,4,14,1 or 1,4,6,16,1) and ship as
/// configuration only.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchPreset {
    VggTiny,
    A0,
    A1,
    A2,
    B1,
    B2,
    B3,
    Custom { blocks: Vec<(usize, usize)> },
}

impl Default for ArchPreset {
    fn default() -> Self {
        ArchPreset::VggTiny
    }
}

impl ArchPreset {
    /// (c_out, stride) per block.
    pub fn block_widths(&self) -> Vec<(usize, usize)> {
        match self {
            // 8 blocks, downsampling at blocks 3, 5 and 7 (1-indexed).
            ArchPreset::VggTiny => vec![
                (32, 1),
                (32, 1),
                (64, 2),
                (64, 1),
                (128, 2),
                (128, 1),
                (256, 2),
                (256, 1),
            ],
            ArchPreset::A0 => staged(&[1, 2, 4, 14, 1], &[64, 48, 96, 192, 1280]),
            ArchPreset::A1 => staged(&[1, 2, 4, 14, 1], &[64, 64, 128, 256, 1280]),
            ArchPreset::A2 => staged(&[1, 2, 4, 14, 1], &[64, 96, 192, 384, 1408]),
            ArchPreset::B1 => staged(&[1, 4, 6, 16, 1], &[64, 128, 256, 512, 2048]),
            ArchPreset::B2 => staged(&[1, 4, 6, 16, 1], &[64, 160, 320, 640, 2560]),
            ArchPreset::B3 => staged(&[1, 4, 6, 16, 1], &[64, 192, 384, 768, 2560]),
            ArchPreset::Custom { blocks } => blocks.clone(),
        }
    }
}

fn staged(depths: &[usize], widths: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (d, w) in depths.iter().zip(widths) {
        for layer in 0..*d {
            out.push((*w, if layer == 0 { 2 } else { 1 }));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub init_lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_schedule")]
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Global branch budget C (counts protected branches).
    pub budget: usize,
    #[serde(default)]
    pub arch: ArchPreset,
    #[serde(default = "default_fraction")]
    pub subset_fraction: f64,
    pub dataset: DatasetSpec,
    #[serde(default = "default_alpha_lr")]
    pub alpha_lr: f64,
    #[serde(default = "default_alpha_betas")]
    pub alpha_betas: (f64, f64),
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Baseline mode: plain ConvKxK blocks, no extra branches.
    #[serde(default)]
    pub single_path: bool,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_schedule() -> LrSchedule {
    LrSchedule::Cosine
}
fn default_fraction() -> f64 {
    1.0
}
fn default_alpha_lr() -> f64 {
    1e-4
}
fn default_alpha_betas() -> (f64, f64) {
    (0.5, 0.999)
}
fn default_k() -> usize {
    3
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: TrainConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.init_lr <= 0.0 {
            return Err(Error::Config(
                "batch_size and init_lr must be positive".into(),
            ));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::Config("subset_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                n,
                classes,
                noise,
                n_test,
            } => {
                let train = data::synthetic_dataset_with_noise(
                    *n,
                    *classes,
                    self.seed,
                    *noise,
                    data::Split::Train,
                );
                let test = data::synthetic_dataset_with_noise(
                    *n_test,
                    *classes,
                    self.seed.wrapping_add(1),
                    *noise,
                    data::Split::Test,
                );
                Ok((train, test))
            }
            DatasetSpec::Cifar10 { dir } => {
                let dir = dir
                    .clone()
                    .or_else(|| std::env::var(ENV_DATA_DIR).ok().map(PathBuf::from))
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "cifar10 dataset needs a dir (or ${ENV_DATA_DIR})"
                        ))
                    })?;
                data::load_cifar10(&dir)
            }
        }
    }

    pub fn branch_kinds(&self) -> Vec<BranchKind> {
        if self.single_path {
            vec![BranchKind::ConvKxK]
        } else {
            BranchKind::ALL.to_vec()
        }
    }
}

pub fn cosine_lr(init: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return init;
    }
    0.5 * init * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub loss: f64,
    pub samples: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub search_log: PathBuf,
    pub arch_final: PathBuf,
    pub final_arch: ArchDesc,
    pub best_train_top1: f64,
    pub final_train_top1: f64,
    /// Per-branch keep frequency over the last epoch, flat entry order.
    pub last_epoch_keep_rate: Vec<f64>,
}

/// Run the one-stage search: jointly train weights (SGD, cosine schedule)
/// and branch scalars (Adam, fixed lr), then finalize the architecture,
/// settle batch-norm statistics under the final gates, and write artifacts.
pub fn train_supernet(config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (train_full, _test) = config.load_datasets()?;
    let train = if config.subset_fraction < 1.0 {
        train_full.subset(config.subset_fraction, config.seed)
    } else {
        train_full
    };
    if train.len() < config.batch_size {
        return Err(Error::Config(format!(
            "training split ({} samples) smaller than one batch ({})",
            train.len(),
            config.batch_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net: RepNet<f32> = RepNet::build(
        &mut rng,
        data::IMAGE_CHANNELS,
        &config.arch.block_widths(),
        config.k,
        train.num_classes,
        &config.branch_kinds(),
    )?;
    let mut arch = ArchState::attach(&mut net, 1.0);
    let total = arch.total();
    let protected = arch.protected_count();
    let budget = config.budget.max(protected).min(total.max(protected));
    if config.budget < protected {
        log::warn!(
            "budget {} below {} protected branches; clamping",
            config.budget,
            protected
        );
    }
    let search_config = SearchConfig {
        budget,
        alpha_lr: config.alpha_lr,
        alpha_betas: config.alpha_betas,
        lambda: 1.0,
        seed: config.seed,
    };
    let mut sgd = Sgd::new(config.init_lr, config.momentum, config.weight_decay);
    let mut adam = Adam::new(
        config.alpha_lr,
        config.alpha_betas.0,
        config.alpha_betas.1,
        1e-8,
    );

    let log_path = out_dir.join("search_log.csv");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(
        log_file,
        "epoch,iter,loss,top1,active_branches,mean_alpha,min_alpha,max_alpha"
    )?;

    let batches_per_epoch = train.len() / config.batch_size;
    let mut best_train_top1 = 0.0f64;
    let mut final_train_top1 = 0.0f64;
    let mut keep_counts = vec![0usize; total];
    let mut last_epoch_iters = 0usize;

    for epoch in 0..config.epochs {
        let lr = match config.lr_schedule {
            LrSchedule::Cosine => cosine_lr(config.init_lr, epoch, config.epochs),
            LrSchedule::Constant => config.init_lr,
        };
        sgd.lr = lr as f32;

        let mut indices: Vec<usize> = (0..train.len()).collect();
        for i in (1..indices.len()).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }

        let is_last_epoch = epoch + 1 == config.epochs;
        if is_last_epoch {
            keep_counts.iter_mut().for_each(|c| *c = 0);
        }
        let mut epoch_correct = 0.0f64;
        for iter in 0..batches_per_epoch {
            let batch_idx = &indices[iter * config.batch_size..(iter + 1) * config.batch_size];
            let (mut images, labels) = train.gather::<f32>(batch_idx);
            if config.augment {
                data::augment(&mut images, &mut rng);
            }
            let metrics = search::search_step(
                &mut net,
                &mut arch,
                &search_config,
                &mut sgd,
                &mut adam,
                images,
                &labels,
                &mut rng,
            )?;
            if !metrics.loss.is_finite() {
                return Err(Error::NanLoss {
                    last_lr: lr,
                    batch_index: iter,
                });
            }
            if is_last_epoch {
                last_epoch_iters += 1;
                for (c, &kept) in keep_counts.iter_mut().zip(&arch.last_z_hard) {
                    if kept {
                        *c += 1;
                    }
                }
            }
            epoch_correct += metrics.top1;
            writeln!(
                log_file,
                "{epoch},{iter},{:.6},{:.4},{},{:.6},{:.6},{:.6}",
                metrics.loss,
                metrics.top1,
                metrics.active_branches,
                metrics.mean_alpha,
                metrics.min_alpha,
                metrics.max_alpha
            )?;
        }
        log_file.flush()?;
        let epoch_top1 = epoch_correct / batches_per_epoch.max(1) as f64;
        final_train_top1 = epoch_top1;
        if epoch_top1 > best_train_top1 {
            best_train_top1 = epoch_top1;
        }
        log::info!(
            "epoch {epoch}: lr {lr:.5} train top1 {epoch_top1:.4} (budget {budget}/{total})"
        );
    }

    let (gates, desc) = search::finalize_architecture(&net, &arch, budget)?;

    // Settle running statistics under the final gates before the
    // checkpoint is frozen; skipped when nothing was trained.
    if config.epochs > 0 {
        let signals = net.const_gates(&gates);
        for _ in 0..CALIBRATION_BATCHES {
            let batch_idx: Vec<usize> = (0..config.batch_size)
                .map(|_| rng.gen_range(0..train.len()))
                .collect();
            let (images, _) = train.gather::<f32>(&batch_idx);
            let mut tape = Tape::new();
            net.forward(&mut tape, images, &signals, Mode::Train)?;
        }
    }

    let arch_path = out_dir.join("arch_final.json");
    std::fs::write(&arch_path, desc.to_json())?;
    let ckpt_path = out_dir.join("checkpoint.bin");
    save_supernet(&net, &desc, &ckpt_path)?;

    let keep_rate: Vec<f64> = keep_counts
        .iter()
        .map(|&c| c as f64 / last_epoch_iters.max(1) as f64)
        .collect();
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        search_log: log_path,
        arch_final: arch_path,
        final_arch: desc,
        best_train_top1,
        final_train_top1,
        last_epoch_keep_rate: keep_rate,
    })
}

/// Snapshot the supernet (weights, alphas, buffers) with its architecture
/// embedded, so a checkpoint file is self-describing.
pub fn save_supernet<S: Scalar>(net: &RepNet<S>, desc: &ArchDesc, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::from_store(&net.store);
    ckpt.insert_bytes("__meta__/arch", desc.to_json().into_bytes());
    ckpt.insert_bytes("__meta__/model_kind", b"supernet".to_vec());
    ckpt.save(path)
}

/// Rebuild a supernet from a self-describing checkpoint. Alpha records are
/// restored when present.
pub fn load_supernet(path: &Path) -> Result<(RepNet<f32>, ArchDesc)> {
    let ckpt = Checkpoint::load(path)?;
    let kind = ckpt.bytes("__meta__/model_kind")?;
    if kind != b"supernet" {
        return Err(Error::Format {
            what: "model kind".into(),
            expected: "supernet".into(),
            got: String::from_utf8_lossy(kind).into_owned(),
        });
    }
    let desc = ArchDesc::from_json(&String::from_utf8_lossy(ckpt.bytes("__meta__/arch")?))?;
    // Construction rng is irrelevant: every parameter loads from the file.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net: RepNet<f32> = desc.build_net(&mut rng)?;
    ckpt.into_store(&mut net.store)?;
    // Restore search scalars when the checkpoint carries them.
    let arch = ArchState::attach(&mut net, 1.0);
    for entry in &arch.entries {
        let name = net.store.get(entry.alpha).name.clone();
        if ckpt.records.contains_key(&name) {
            let t: Tensor<f32> = ckpt.tensor(&name)?;
            *net.store.value_mut(entry.alpha) = t;
        }
    }
    Ok((net, desc))
}

/// Deterministic eval-mode pass over a dataset.
pub fn evaluate_supernet(
    net: &mut RepNet<f32>,
    gates: &[Vec<bool>],
    ds: &Dataset,
    batch_size: usize,
) -> Result<EvalReport> {
    let signals = net.const_gates(gates);
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let mut seen = 0usize;
    let n = ds.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (images, labels) = ds.gather::<f32>(&indices);
        let mut tape = Tape::new();
        let logits = net.forward(&mut tape, images, &signals, Mode::Eval)?;
        let ce = tape.softmax_cross_entropy(logits, &labels)?;
        loss_sum += tape.value(ce).data()[0] as f64 * labels.len() as f64;
        correct += (search::top1_accuracy(tape.value(logits), &labels)
            * labels.len() as f64)
            .round() as usize;
        seen += labels.len();
        start = end;
    }
    Ok(EvalReport {
        top1: correct as f64 / seen.max(1) as f64,
        loss: loss_sum / seen.max(1) as f64,
        samples: seen,
    })
}

pub fn evaluate_fused(
    fused: &FusedNetwork<f32>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<EvalReport> {
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let mut seen = 0usize;
    let n = ds.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (images, labels) = ds.gather::<f32>(&indices);
        let mut tape = Tape::new();
        let logits = fused.forward(&mut tape, images)?;
        let ce = tape.softmax_cross_entropy(logits, &labels)?;
        loss_sum += tape.value(ce).data()[0] as f64 * labels.len() as f64;
        correct += (search::top1_accuracy(tape.value(logits), &labels)
            * labels.len() as f64)
            .round() as usize;
        seen += labels.len();
        start = end;
    }
    Ok(EvalReport {
        top1: correct as f64 / seen.max(1) as f64,
        loss: loss_sum / seen.max(1) as f64,
        samples: seen,
    })
}

/// Batched logits over a dataset slice, used for fused-vs-supernet
/// divergence measurements.
pub fn supernet_logits(
    net: &mut RepNet<f32>,
    gates: &[Vec<bool>],
    images: Tensor<f32>,
) -> Result<Tensor<f32>> {
    let signals = net.const_gates(gates);
    let mut tape = Tape::new();
    let v = net.forward(&mut tape, images, &signals, Mode::Eval)?;
    Ok(tape.value(v).clone())
}
