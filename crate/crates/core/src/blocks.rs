//! The searchable multi-branch block.
//!
//! Each block owns one (C_out, C_in, K, K) main kernel plus up to seven
//! gated branches. Branches whose convolution fits inside a K x K window
//! (1x1, KxK, 1xK, Kx1 and the K x K stage of the 1x1-KxK sequence) take
//! their weights from a centered crop of the main kernel, so every branch
//! trains the same shared storage. Sequential branches zero-pad the block
//! input by K/2 up front and run their inner stages unpadded, which makes
//! border pixels exactly fusable later.

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchKind {
    #[serde(rename = "conv_1x1")]
    Conv1x1,
    #[serde(rename = "conv_kxk")]
    ConvKxK,
    #[serde(rename = "seq_1x1_kxk")]
    Seq1x1KxK,
    #[serde(rename = "seq_1x1_avg")]
    Seq1x1Avg,
    #[serde(rename = "conv_1xk")]
    Conv1xK,
    #[serde(rename = "conv_kx1")]
    ConvKx1,
    #[serde(rename = "skip_connect")]
    SkipConnect,
}

impl BranchKind {
    /// Canonical ordering used for branch layout inside a block.
    pub const ALL: [BranchKind; 7] = [
        BranchKind::Conv1x1,
        BranchKind::ConvKxK,
        BranchKind::Seq1x1KxK,
        BranchKind::Seq1x1Avg,
        BranchKind::Conv1xK,
        BranchKind::ConvKx1,
        BranchKind::SkipConnect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Conv1x1 => "conv_1x1",
            BranchKind::ConvKxK => "conv_kxk",
            BranchKind::Seq1x1KxK => "seq_1x1_kxk",
            BranchKind::Seq1x1Avg => "seq_1x1_avg",
            BranchKind::Conv1xK => "conv_1xk",
            BranchKind::ConvKx1 => "conv_kx1",
            BranchKind::SkipConnect => "skip_connect",
        }
    }

    /// True when the branch's conv weights come from the main kernel.
    pub fn shares_main_kernel(self) -> bool {
        !matches!(self, BranchKind::Seq1x1Avg | BranchKind::SkipConnect)
    }
}

/// Parameter ids of one batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnIds {
    fn create<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        BnIds {
            gamma: store.add(
                format!("{prefix}.gamma"),
                ParamKind::Weight,
                Tensor::full(shape, S::ONE),
            ),
            beta: store.add(
                format!("{prefix}.beta"),
                ParamKind::Weight,
                Tensor::zeros(shape),
            ),
            running_mean: store.add(
                format!("{prefix}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros(shape),
            ),
            running_var: store.add(
                format!("{prefix}.running_var"),
                ParamKind::Buffer,
                Tensor::full(shape, S::ONE),
            ),
        }
    }
}

/// One branch: its kind, any parameters not shared with the main kernel
/// (sequential 1x1 convs and every per-branch batch norm), and its index
/// into the architecture state.
#[derive(Debug, Clone)]
pub struct BranchSpec {
    pub kind: BranchKind,
    pub shares_main_kernel: bool,
    /// (block index, branch index) used by the search state.
    pub gate_index: (usize, usize),
    /// Own 1x1 kernel for the sequential branches.
    pub pre_conv: Option<ParamId>,
    /// Batch norm between the two stages of a sequential branch.
    pub bn_mid: Option<BnIds>,
    /// Batch norm closing every branch.
    pub bn_out: BnIds,
}

/// Gate applied to one branch output during a block forward.
#[derive(Debug, Clone, Copy)]
pub struct GateSignal<S: Scalar> {
    /// Forward multiplier: hard 0/1 during search, a soft keep probability
    /// in diagnostics mode, or any constant for plain gating. A branch with
    /// multiplier 0 and no architecture hook is skipped entirely.
    pub mult: S,
    /// Architecture scalar receiving the gate gradient.
    pub alpha: Option<Var>,
    pub z_soft: S,
    pub lambda: S,
}

impl<S: Scalar> GateSignal<S> {
    pub fn constant(mult: S) -> Self {
        GateSignal {
            mult,
            alpha: None,
            z_soft: S::from_f64(0.5),
            lambda: S::ONE,
        }
    }

    pub fn on() -> Self {
        Self::constant(S::ONE)
    }

    pub fn off() -> Self {
        Self::constant(S::ZERO)
    }

    fn active(&self) -> bool {
        self.mult != S::ZERO
    }
}

#[derive(Debug, Clone)]
pub struct RepBlock {
    pub index: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub k: usize,
    pub main_kernel: ParamId,
    pub branches: Vec<BranchSpec>,
    /// Index of the ConvKxK branch; never prunable.
    pub protected: usize,
}

impl RepBlock {
    /// Construct a block with the requested branch kinds. ConvKxK is
    /// mandatory; SkipConnect is dropped (with a logged notice) when the
    /// block changes channel count or downsamples.
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        index: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        k: usize,
        kinds: &[BranchKind],
    ) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::invalid(format!("kernel size {k} must be odd")));
        }
        if !kinds.contains(&BranchKind::ConvKxK) {
            return Err(Error::invalid(
                "every block needs the ConvKxK branch (it is the fusion target)",
            ));
        }
        for (i, a) in kinds.iter().enumerate() {
            if kinds[i + 1..].contains(a) {
                return Err(Error::invalid(format!(
                    "branch kind {} listed twice",
                    a.name()
                )));
            }
        }

        let he = (2.0 / (c_in * k * k) as f64).sqrt();
        let main_kernel = store.add(
            format!("block{index}.main_kernel"),
            ParamKind::Weight,
            Tensor::randn([c_out, c_in, k, k], he, rng),
        );

        let mut branches = Vec::new();
        for &kind in BranchKind::ALL.iter().filter(|kk| kinds.contains(kk)) {
            if kind == BranchKind::SkipConnect && (c_in != c_out || stride != 1) {
                log::info!(
                    "block{index}: dropping skip_connect (c_in {c_in} -> c_out {c_out}, stride {stride})"
                );
                continue;
            }
            let prefix = format!("block{index}.{}", kind.name());
            let (pre_conv, bn_mid) = match kind {
                BranchKind::Seq1x1KxK => {
                    let std = (2.0 / c_in as f64).sqrt();
                    let id = store.add(
                        format!("{prefix}.pre_conv"),
                        ParamKind::Weight,
                        Tensor::randn([c_in, c_in, 1, 1], std, rng),
                    );
                    (
                        Some(id),
                        Some(BnIds::create(store, &format!("{prefix}.bn_mid"), c_in)),
                    )
                }
                BranchKind::Seq1x1Avg => {
                    let std = (2.0 / c_in as f64).sqrt();
                    let id = store.add(
                        format!("{prefix}.pre_conv"),
                        ParamKind::Weight,
                        Tensor::randn([c_out, c_in, 1, 1], std, rng),
                    );
                    (
                        Some(id),
                        Some(BnIds::create(store, &format!("{prefix}.bn_mid"), c_out)),
                    )
                }
                _ => (None, None),
            };
            let bn_channels = if kind == BranchKind::SkipConnect {
                c_in
            } else {
                c_out
            };
            branches.push(BranchSpec {
                kind,
                shares_main_kernel: kind.shares_main_kernel(),
                gate_index: (index, branches.len()),
                pre_conv,
                bn_mid,
                bn_out: BnIds::create(store, &format!("{prefix}.bn_out"), bn_channels),
            });
        }
        let protected = branches
            .iter()
            .position(|b| b.kind == BranchKind::ConvKxK)
            .expect("ConvKxK presence checked above");
        Ok(RepBlock {
            index,
            c_in,
            c_out,
            stride,
            k,
            main_kernel,
            branches,
            protected,
        })
    }

    /// Forward one branch. `main` is the block's main-kernel tape var, so
    /// gradients from every sharing branch accumulate into one leaf.
    pub fn branch_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        branch: usize,
        x: Var,
        main: Var,
        mode: Mode,
    ) -> Result<Var> {
        let spec = &self.branches[branch];
        let k = self.k;
        let half = k / 2;
        let eps = S::from_f64(BN_EPS);
        let mom = S::from_f64(BN_MOMENTUM);
        let bn = |tape: &mut Tape<S>, store: &mut ParamStore<S>, ids: &BnIds, v: Var| {
            let g = tape.param(store, ids.gamma);
            let b = tape.param(store, ids.beta);
            tape.batch_norm(v, g, b, store, ids.running_mean, ids.running_var, mode, mom, eps)
        };
        let out = match spec.kind {
            BranchKind::ConvKxK => {
                let y = tape.conv2d(x, main, None, self.stride, half, half)?;
                bn(tape, store, &spec.bn_out, y)?
            }
            BranchKind::Conv1x1 => {
                let kc = tape.crop_kernel(main, 1, 1)?;
                let y = tape.conv2d(x, kc, None, self.stride, 0, 0)?;
                bn(tape, store, &spec.bn_out, y)?
            }
            BranchKind::Conv1xK => {
                let kc = tape.crop_kernel(main, 1, k)?;
                let y = tape.conv2d(x, kc, None, self.stride, 0, half)?;
                bn(tape, store, &spec.bn_out, y)?
            }
            BranchKind::ConvKx1 => {
                let kc = tape.crop_kernel(main, k, 1)?;
                let y = tape.conv2d(x, kc, None, self.stride, half, 0)?;
                bn(tape, store, &spec.bn_out, y)?
            }
            BranchKind::Seq1x1KxK => {
                let padded = tape.pad_spatial(x, half);
                let pre = tape.param(store, spec.pre_conv.expect("seq branch has pre conv"));
                let mid = tape.conv2d(padded, pre, None, 1, 0, 0)?;
                let mid = bn(tape, store, spec.bn_mid.as_ref().expect("seq bn"), mid)?;
                let y = tape.conv2d(mid, main, None, self.stride, 0, 0)?;
                bn(tape, store, &spec.bn_out, y)?
            }
            BranchKind::Seq1x1Avg => {
                let padded = tape.pad_spatial(x, half);
                let pre = tape.param(store, spec.pre_conv.expect("seq branch has pre conv"));
                let mid = tape.conv2d(padded, pre, None, 1, 0, 0)?;
                let mid = bn(tape, store, spec.bn_mid.as_ref().expect("seq bn"), mid)?;
                let y = tape.avg_pool2d(mid, k, self.stride, 0)?;
                bn(tape, store, &spec.bn_out, y)?
            }
            BranchKind::SkipConnect => bn(tape, store, &spec.bn_out, x)?,
        };
        Ok(out)
    }

    /// Gate-weighted branch sum before the nonlinearity. Branches gated to
    /// zero are skipped entirely, so they cost no compute and store no
    /// activations. This pre-activation value is what fusion must match.
    pub fn forward_summed<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        x: Var,
        gates: &[GateSignal<S>],
        mode: Mode,
    ) -> Result<Var> {
        if gates.len() != self.branches.len() {
            return Err(Error::DimensionMismatch {
                axis: "gates",
                expected: self.branches.len(),
                got: gates.len(),
            });
        }
        if !gates.iter().any(|g| g.active()) {
            return Err(Error::invalid(format!(
                "block{}: all branches gated off",
                self.index
            )));
        }
        let main = tape.param(store, self.main_kernel);
        let mut outputs = Vec::new();
        for (bi, gate) in gates.iter().enumerate() {
            if !gate.active() {
                continue;
            }
            let out = self.branch_forward(tape, store, bi, x, main, mode)?;
            outputs.push(tape.gate(out, gate.mult, gate.alpha, gate.z_soft, gate.lambda));
        }
        tape.add_n(&outputs)
    }

    /// Gated multi-branch forward: relu of the gate-weighted branch sum.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        x: Var,
        gates: &[GateSignal<S>],
        mode: Mode,
    ) -> Result<Var> {
        let summed = self.forward_summed(tape, store, x, gates, mode)?;
        Ok(tape.relu(summed))
    }
}

/// Classifier head parameter ids.
#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// A supernet: block stack plus global-average-pool classifier head.
#[derive(Debug)]
pub struct RepNet<S: Scalar> {
    pub blocks: Vec<RepBlock>,
    pub head: HeadIds,
    pub input_channels: usize,
    pub num_classes: usize,
    pub k: usize,
    pub store: ParamStore<S>,
}

impl<S: Scalar> RepNet<S> {
    pub fn build(
        rng: &mut impl Rng,
        input_channels: usize,
        block_widths: &[(usize, usize)],
        k: usize,
        num_classes: usize,
        kinds: &[BranchKind],
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut blocks = Vec::new();
        let mut c_in = input_channels;
        for (i, &(c_out, stride)) in block_widths.iter().enumerate() {
            blocks.push(RepBlock::build(
                &mut store, rng, i, c_in, c_out, stride, k, kinds,
            )?);
            c_in = c_out;
        }
        let std = (2.0 / c_in as f64).sqrt();
        let head = HeadIds {
            weight: store.add(
                "head.weight",
                ParamKind::Weight,
                Tensor::randn([num_classes, c_in, 1, 1], std, rng),
            ),
            bias: store.add(
                "head.bias",
                ParamKind::Weight,
                Tensor::zeros([1, num_classes, 1, 1]),
            ),
        };
        Ok(RepNet {
            blocks,
            head,
            input_channels,
            num_classes,
            k,
            store,
        })
    }

    pub fn total_branches(&self) -> usize {
        self.blocks.iter().map(|b| b.branches.len()).sum()
    }

    pub fn protected_count(&self) -> usize {
        self.blocks.len()
    }

    /// Forward to logits. `gates[i]` holds one signal per branch of block i.
    pub fn forward(
        &mut self,
        tape: &mut Tape<S>,
        images: Tensor<S>,
        gates: &[Vec<GateSignal<S>>],
        mode: Mode,
    ) -> Result<Var> {
        if gates.len() != self.blocks.len() {
            return Err(Error::DimensionMismatch {
                axis: "block_gates",
                expected: self.blocks.len(),
                got: gates.len(),
            });
        }
        let mut x = tape.input(images);
        for (block, block_gates) in self.blocks.iter().zip(gates) {
            x = block.forward(tape, &mut self.store, x, block_gates, mode)?;
        }
        let pooled = tape.global_avg_pool(x);
        let w = tape.param(&self.store, self.head.weight);
        let b = tape.param(&self.store, self.head.bias);
        tape.linear(pooled, w, b)
    }

    /// All-ones constant gates (every branch active).
    pub fn full_gates(&self) -> Vec<Vec<GateSignal<S>>> {
        self.blocks
            .iter()
            .map(|b| vec![GateSignal::on(); b.branches.len()])
            .collect()
    }

    /// Constant gates from hard 0/1 assignments.
    pub fn const_gates(&self, hard: &[Vec<bool>]) -> Vec<Vec<GateSignal<S>>> {
        self.blocks
            .iter()
            .zip(hard)
            .map(|(b, row)| {
                assert_eq!(row.len(), b.branches.len());
                row.iter()
                    .map(|&on| if on { GateSignal::on() } else { GateSignal::off() })
                    .collect()
            })
            .collect()
    }
}

// ── architecture description (JSON interchange) ─────────────────────

/// Serializable description of one block: construction parameters, branch
/// kinds in layout order, hard gates, and optionally the final architecture
/// scalars from a search.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlockDesc {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub k: usize,
    pub branches: Vec<BranchKind>,
    pub gates: Vec<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchDesc {
    pub schema_version: u32,
    pub input_channels: usize,
    pub num_classes: usize,
    pub k: usize,
    pub blocks: Vec<BlockDesc>,
}

impl ArchDesc {
    pub fn from_net<S: Scalar>(
        net: &RepNet<S>,
        gates: &[Vec<bool>],
        alpha: Option<&[Vec<f64>]>,
    ) -> Self {
        ArchDesc {
            schema_version: 1,
            input_channels: net.input_channels,
            num_classes: net.num_classes,
            k: net.k,
            blocks: net
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| BlockDesc {
                    c_in: b.c_in,
                    c_out: b.c_out,
                    stride: b.stride,
                    k: b.k,
                    branches: b.branches.iter().map(|s| s.kind).collect(),
                    gates: gates[i].iter().map(|&g| g as u8).collect(),
                    alpha: alpha.map(|a| a[i].clone()),
                })
                .collect(),
        }
    }

    /// Rebuild a supernet with exactly the listed branches. Parameter names
    /// match the original construction, so checkpoints load by name.
    pub fn build_net<S: Scalar>(&self, rng: &mut impl Rng) -> Result<RepNet<S>> {
        let mut store = ParamStore::new();
        let mut blocks = Vec::new();
        for (i, d) in self.blocks.iter().enumerate() {
            let block =
                RepBlock::build(&mut store, rng, i, d.c_in, d.c_out, d.stride, d.k, &d.branches)?;
            if block.branches.len() != d.branches.len() {
                return Err(Error::Config(format!(
                    "block {i}: description lists {} branches but {} are constructible",
                    d.branches.len(),
                    block.branches.len()
                )));
            }
            blocks.push(block);
        }
        let c_last = self
            .blocks
            .last()
            .map(|b| b.c_out)
            .ok_or_else(|| Error::Config("architecture has no blocks".into()))?;
        let std = (2.0 / c_last as f64).sqrt();
        let head = HeadIds {
            weight: store.add(
                "head.weight",
                ParamKind::Weight,
                Tensor::randn([self.num_classes, c_last, 1, 1], std, rng),
            ),
            bias: store.add(
                "head.bias",
                ParamKind::Weight,
                Tensor::zeros([1, self.num_classes, 1, 1]),
            ),
        };
        Ok(RepNet {
            blocks,
            head,
            input_channels: self.input_channels,
            num_classes: self.num_classes,
            k: self.k,
            store,
        })
    }

    pub fn hard_gates(&self) -> Vec<Vec<bool>> {
        self.blocks
            .iter()
            .map(|b| b.gates.iter().map(|&g| g != 0).collect())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arch serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Stable content hash used for fused-model provenance.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
