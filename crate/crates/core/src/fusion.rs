//! Lossless fusion of gated multi-branch blocks into single convolutions.
//!
//! Four linear identities do all the work: folding a batch norm into its
//! preceding conv, summing parallel conv branches after padding kernels to
//! a common size, collapsing a 1x1 -> KxK sequence into one KxK conv, and
//! rewriting average pooling as a uniform diagonal conv. All arithmetic
//! runs in double precision and casts down at the end, since the
//! sequential contraction amplifies rounding.

use crate::autodiff::{Mode, Tape};
use crate::blocks::{ArchDesc, BranchKind, RepBlock, RepNet, BN_EPS};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// One fused convolution: a K x K kernel with bias, plus the branch kinds
/// it was assembled from.
#[derive(Debug, Clone)]
pub struct FusedConv<S: Scalar> {
    pub kernel: Tensor<S>,
    pub bias: Vec<S>,
    pub stride: usize,
    pub padding: usize,
    pub provenance: Vec<BranchKind>,
}

/// Single-path network produced by fusing every block of a supernet.
#[derive(Debug, Clone)]
pub struct FusedNetwork<S: Scalar> {
    pub layers: Vec<FusedConv<S>>,
    pub head_weight: Tensor<S>,
    pub head_bias: Vec<S>,
    pub input_channels: usize,
    pub num_classes: usize,
    pub source_hash: String,
}

/// Fold batch-norm statistics into the preceding conv:
/// F' = (gamma/sigma) F,  b' = -mu gamma/sigma + beta (+ gamma/sigma b).
pub fn fuse_conv_bn(
    kernel: &Tensor<f64>,
    bias: Option<&[f64]>,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<(Tensor<f64>, Vec<f64>)> {
    let [co, ci, kh, kw] = kernel.shape();
    if gamma.len() != co {
        return Err(Error::DimensionMismatch {
            axis: "bn_channels",
            expected: co,
            got: gamma.len(),
        });
    }
    let mut out = Tensor::zeros(kernel.shape());
    let mut out_bias = vec![0.0; co];
    let per = ci * kh * kw;
    for j in 0..co {
        let sigma = (running_var[j] + eps).sqrt();
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Internal(format!(
                "non-positive sigma {sigma} at channel {j} during fusion"
            )));
        }
        let scale = gamma[j] / sigma;
        for i in 0..per {
            out.data_mut()[j * per + i] = kernel.data()[j * per + i] * scale;
        }
        out_bias[j] = -running_mean[j] * scale + beta[j] + bias.map_or(0.0, |b| b[j] * scale);
    }
    Ok((out, out_bias))
}

/// Sum parallel branches elementwise: F' = sum F^n, b' = sum b^n.
pub fn merge_parallel(branches: &[(Tensor<f64>, Vec<f64>)]) -> Result<(Tensor<f64>, Vec<f64>)> {
    let (first, fb) = branches
        .first()
        .ok_or_else(|| Error::invalid("merge_parallel needs at least one branch"))?;
    let shape = first.shape();
    let mut kernel = Tensor::zeros(shape);
    let mut bias = vec![0.0; fb.len()];
    for (k, b) in branches {
        if k.shape() != shape {
            return Err(Error::DimensionMismatch {
                axis: "kernel",
                expected: first.numel(),
                got: k.numel(),
            });
        }
        kernel
            .data_mut()
            .iter_mut()
            .zip(k.data())
            .for_each(|(a, &v)| *a += v);
        bias.iter_mut().zip(b).for_each(|(a, &v)| *a += v);
    }
    Ok((kernel, bias))
}

/// Collapse a 1x1 conv followed by a K x K conv into one K x K conv:
/// F'[j,c,u,v] = sum_d F2[j,d,u,v] F1[d,c],
/// b'_j = sum_{d,u,v} b1_d F2[j,d,u,v] + b2_j.
/// Exact under the pad-before-1x1 discipline used by the blocks.
pub fn merge_sequential(
    first: &Tensor<f64>,
    b1: &[f64],
    second: &Tensor<f64>,
    b2: &[f64],
) -> Result<(Tensor<f64>, Vec<f64>)> {
    let [d_mid, d_in, fh, fw] = first.shape();
    let [co, kd, kh, kw] = second.shape();
    if fh != 1 || fw != 1 {
        return Err(Error::Unsupported(format!(
            "sequential fusion requires a 1x1 leading conv, got {fh}x{fw}"
        )));
    }
    if kd != d_mid {
        return Err(Error::DimensionMismatch {
            axis: "mid_channels",
            expected: d_mid,
            got: kd,
        });
    }
    let mut kernel = Tensor::zeros([co, d_in, kh, kw]);
    for j in 0..co {
        for c in 0..d_in {
            for u in 0..kh {
                for v in 0..kw {
                    let mut acc = 0.0;
                    for d in 0..d_mid {
                        acc += second.get(j, d, u, v) * first.get(d, c, 0, 0);
                    }
                    kernel.set(j, c, u, v, acc);
                }
            }
        }
    }
    let mut bias = vec![0.0; co];
    for j in 0..co {
        let mut acc = 0.0;
        for d in 0..d_mid {
            for u in 0..kh {
                for v in 0..kw {
                    acc += b1[d] * second.get(j, d, u, v);
                }
            }
        }
        bias[j] = acc + b2[j];
    }
    Ok((kernel, bias))
}

/// k x k average pooling as a conv: kernel[j,c,:,:] = I(j==c) / k^2.
pub fn avgpool_to_conv(k: usize, channels: usize) -> Tensor<f64> {
    let inv = 1.0 / (k * k) as f64;
    let mut kernel = Tensor::zeros([channels, channels, k, k]);
    for c in 0..channels {
        for u in 0..k {
            for v in 0..k {
                kernel.set(c, c, u, v, inv);
            }
        }
    }
    kernel
}

/// Identity as a 1x1 conv: kernel[j,c] = I(j==c).
pub fn identity_to_conv(channels: usize) -> Tensor<f64> {
    let mut kernel = Tensor::zeros([channels, channels, 1, 1]);
    for c in 0..channels {
        kernel.set(c, c, 0, 0, 1.0);
    }
    kernel
}

/// Place an h x w kernel at the center of a K x K zero kernel.
pub fn pad_kernel_center(kernel: &Tensor<f64>, k: usize) -> Result<Tensor<f64>> {
    let [co, ci, h, w] = kernel.shape();
    if h > k || w > k || (k - h) % 2 != 0 || (k - w) % 2 != 0 {
        return Err(Error::invalid(format!(
            "cannot center a {h}x{w} kernel inside {k}x{k}"
        )));
    }
    let oy = (k - h) / 2;
    let ox = (k - w) / 2;
    let mut out = Tensor::zeros([co, ci, k, k]);
    for j in 0..co {
        for c in 0..ci {
            for y in 0..h {
                for x in 0..w {
                    out.set(j, c, oy + y, ox + x, kernel.get(j, c, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Centered h x w crop of the main kernel (the fusion-side mirror of the
/// tape's crop op).
pub fn crop_center(kernel: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let [co, ci, kh, kw] = kernel.shape();
    let oy = kh / 2 - h / 2;
    let ox = kw / 2 - w / 2;
    let mut out = Tensor::zeros([co, ci, h, w]);
    for j in 0..co {
        for c in 0..ci {
            for y in 0..h {
                for x in 0..w {
                    out.set(j, c, y, x, kernel.get(j, c, oy + y, ox + x));
                }
            }
        }
    }
    out
}

fn bn_arrays<S: Scalar>(
    store: &ParamStore<S>,
    ids: &crate::blocks::BnIds,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let to64 = |id| {
        store
            .value(id)
            .data()
            .iter()
            .map(|v: &S| v.to_f64())
            .collect::<Vec<f64>>()
    };
    (
        to64(ids.gamma),
        to64(ids.beta),
        to64(ids.running_mean),
        to64(ids.running_var),
    )
}

/// Collapse one gated block into a single K x K conv with bias. The block
/// must be in eval statistics; gates are hard and must keep the protected
/// branch.
pub fn fuse_block<S: Scalar>(
    block: &RepBlock,
    store: &ParamStore<S>,
    gates: &[bool],
) -> Result<FusedConv<S>> {
    if gates.len() != block.branches.len() {
        return Err(Error::DimensionMismatch {
            axis: "gates",
            expected: block.branches.len(),
            got: gates.len(),
        });
    }
    if !gates[block.protected] {
        return Err(Error::invalid(format!(
            "block{}: gate vector excludes the protected ConvKxK branch",
            block.index
        )));
    }
    let k = block.k;
    let main: Tensor<f64> = store.value(block.main_kernel).cast();
    let mut folded: Vec<(Tensor<f64>, Vec<f64>)> = Vec::new();
    let mut provenance = Vec::new();
    for (spec, &on) in block.branches.iter().zip(gates) {
        if !on {
            continue;
        }
        provenance.push(spec.kind);
        let (g, b, rm, rv) = bn_arrays(store, &spec.bn_out);
        let pair = match spec.kind {
            BranchKind::ConvKxK => fuse_conv_bn(&main, None, &g, &b, &rm, &rv, BN_EPS)?,
            BranchKind::Conv1x1 => {
                let (kk, bb) =
                    fuse_conv_bn(&crop_center(&main, 1, 1), None, &g, &b, &rm, &rv, BN_EPS)?;
                (pad_kernel_center(&kk, k)?, bb)
            }
            BranchKind::Conv1xK => {
                let (kk, bb) =
                    fuse_conv_bn(&crop_center(&main, 1, k), None, &g, &b, &rm, &rv, BN_EPS)?;
                (pad_kernel_center(&kk, k)?, bb)
            }
            BranchKind::ConvKx1 => {
                let (kk, bb) =
                    fuse_conv_bn(&crop_center(&main, k, 1), None, &g, &b, &rm, &rv, BN_EPS)?;
                (pad_kernel_center(&kk, k)?, bb)
            }
            BranchKind::Seq1x1KxK => {
                let pre: Tensor<f64> = store
                    .value(spec.pre_conv.expect("seq branch has pre conv"))
                    .cast();
                let (mg, mb, mrm, mrv) =
                    bn_arrays(store, spec.bn_mid.as_ref().expect("seq branch has bn_mid"));
                let (f1, b1) = fuse_conv_bn(&pre, None, &mg, &mb, &mrm, &mrv, BN_EPS)?;
                let (f2, b2) = fuse_conv_bn(&main, None, &g, &b, &rm, &rv, BN_EPS)?;
                merge_sequential(&f1, &b1, &f2, &b2)?
            }
            BranchKind::Seq1x1Avg => {
                let pre: Tensor<f64> = store
                    .value(spec.pre_conv.expect("seq branch has pre conv"))
                    .cast();
                let (mg, mb, mrm, mrv) =
                    bn_arrays(store, spec.bn_mid.as_ref().expect("seq branch has bn_mid"));
                let (f1, b1) = fuse_conv_bn(&pre, None, &mg, &mb, &mrm, &mrv, BN_EPS)?;
                let pool = avgpool_to_conv(k, block.c_out);
                let (f2, b2) = fuse_conv_bn(&pool, None, &g, &b, &rm, &rv, BN_EPS)?;
                merge_sequential(&f1, &b1, &f2, &b2)?
            }
            BranchKind::SkipConnect => {
                let ident = identity_to_conv(block.c_in);
                let (kk, bb) = fuse_conv_bn(&ident, None, &g, &b, &rm, &rv, BN_EPS)?;
                (pad_kernel_center(&kk, k)?, bb)
            }
        };
        folded.push(pair);
    }
    let (kernel, bias) = merge_parallel(&folded)?;
    Ok(FusedConv {
        kernel: kernel.cast(),
        bias: bias.iter().map(|&v| S::from_f64(v)).collect(),
        stride: block.stride,
        padding: k / 2,
        provenance,
    })
}

/// Fuse every block of the supernet under the given hard gates.
pub fn fuse_network<S: Scalar>(net: &RepNet<S>, gates: &[Vec<bool>]) -> Result<FusedNetwork<S>> {
    if gates.len() != net.blocks.len() {
        return Err(Error::DimensionMismatch {
            axis: "block_gates",
            expected: net.blocks.len(),
            got: gates.len(),
        });
    }
    let mut layers = Vec::with_capacity(net.blocks.len());
    for (block, g) in net.blocks.iter().zip(gates) {
        layers.push(fuse_block(block, &net.store, g)?);
    }
    let arch = ArchDesc::from_net(net, gates, None);
    Ok(FusedNetwork {
        layers,
        head_weight: net.store.value(net.head.weight).clone(),
        head_bias: net
            .store
            .value(net.head.bias)
            .data()
            .to_vec(),
        input_channels: net.input_channels,
        num_classes: net.num_classes,
        source_hash: arch.content_hash(),
    })
}

impl<S: Scalar> FusedNetwork<S> {
    /// Forward to logits through the same tape machinery the supernet uses,
    /// so latency comparisons reflect arithmetic only.
    pub fn forward(&self, tape: &mut Tape<S>, images: Tensor<S>) -> Result<crate::autodiff::Var> {
        let mut x = tape.input(images);
        for layer in &self.layers {
            let k = tape.input(layer.kernel.clone());
            let b = tape.input(
                Tensor::new([1, layer.bias.len(), 1, 1], layer.bias.clone()).expect("bias shape"),
            );
            let y = tape.conv2d(x, k, Some(b), layer.stride, layer.padding, layer.padding)?;
            x = tape.relu(y);
        }
        let pooled = tape.global_avg_pool(x);
        let w = tape.input(self.head_weight.clone());
        let b = tape.input(
            Tensor::new([1, self.head_bias.len(), 1, 1], self.head_bias.clone())
                .expect("bias shape"),
        );
        tape.linear(pooled, w, b)
    }

    pub fn logits(&self, images: Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, images)?;
        Ok(tape.value(v).clone())
    }

    /// sum over layers of (C_out * C_in * K^2 + C_out) plus the head.
    pub fn conv_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.kernel.numel() + l.bias.len())
            .sum()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, arch_json: &str) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        for (i, layer) in self.layers.iter().enumerate() {
            ckpt.insert_tensor(&format!("fused.block{i}.kernel"), &layer.kernel);
            ckpt.insert_tensor(
                &format!("fused.block{i}.bias"),
                &Tensor::new([1, layer.bias.len(), 1, 1], layer.bias.clone())?,
            );
            let meta = serde_json::json!({
                "stride": layer.stride,
                "padding": layer.padding,
                "provenance": layer.provenance.iter().map(|k| k.name()).collect::<Vec<_>>(),
            });
            ckpt.insert_bytes(&format!("__meta__/fused.block{i}"), meta.to_string().into_bytes());
        }
        ckpt.insert_tensor("head.weight", &self.head_weight);
        ckpt.insert_tensor(
            "head.bias",
            &Tensor::new([1, self.head_bias.len(), 1, 1], self.head_bias.clone())?,
        );
        ckpt.insert_bytes("__meta__/arch", arch_json.as_bytes().to_vec());
        ckpt.insert_bytes("__meta__/model_kind", b"fused".to_vec());
        ckpt.insert_bytes("__meta__/source_hash", self.source_hash.as_bytes().to_vec());
        ckpt.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<(Self, ArchDesc)> {
        let ckpt = Checkpoint::load(path)?;
        let kind = ckpt.bytes("__meta__/model_kind")?;
        if kind != b"fused" {
            return Err(Error::Format {
                what: "model kind".into(),
                expected: "fused".into(),
                got: String::from_utf8_lossy(kind).into_owned(),
            });
        }
        let arch = ArchDesc::from_json(&String::from_utf8_lossy(ckpt.bytes("__meta__/arch")?))?;
        let mut layers = Vec::new();
        for i in 0..arch.blocks.len() {
            let kernel: Tensor<S> = ckpt.tensor(&format!("fused.block{i}.kernel"))?;
            let bias: Tensor<S> = ckpt.tensor(&format!("fused.block{i}.bias"))?;
            let meta: serde_json::Value = serde_json::from_slice(
                ckpt.bytes(&format!("__meta__/fused.block{i}"))?,
            )?;
            let provenance = meta["provenance"]
                .as_array()
                .map(|a| {
                    a.iter()
                        .filter_map(|v| {
                            v.as_str()
                                .and_then(|s| serde_json::from_value(serde_json::json!(s)).ok())
                        })
                        .collect()
                })
                .unwrap_or_default();
            layers.push(FusedConv {
                kernel,
                bias: bias.data().to_vec(),
                stride: meta["stride"].as_u64().unwrap_or(1) as usize,
                padding: meta["padding"].as_u64().unwrap_or(0) as usize,
                provenance,
            });
        }
        let head_weight: Tensor<S> = ckpt.tensor("head.weight")?;
        let head_bias: Tensor<S> = ckpt.tensor("head.bias")?;
        let source_hash =
            String::from_utf8_lossy(ckpt.bytes("__meta__/source_hash")?).into_owned();
        Ok((
            FusedNetwork {
                layers,
                head_weight,
                head_bias: head_bias.data().to_vec(),
                input_channels: arch.input_channels,
                num_classes: arch.num_classes,
                source_hash,
            },
            arch,
        ))
    }
}

/// Outcome of running supernet and fused model on random inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub max_abs_diff: f64,
    pub trials: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Run both models on `n_trials` standard-normal inputs and report the
/// worst logit divergence.
pub fn verify_equivalence<S: Scalar>(
    net: &mut RepNet<S>,
    gates: &[Vec<bool>],
    fused: &FusedNetwork<S>,
    n_trials: usize,
    tol: f64,
    spatial: usize,
    rng: &mut impl Rng,
) -> Result<VerifyReport> {
    let gate_signals = net.const_gates(gates);
    let mut max_abs_diff: f64 = 0.0;
    for _ in 0..n_trials {
        let images = Tensor::from_fn([2, net.input_channels, spatial, spatial], |_| {
            S::from_f64(rng.sample::<f64, _>(StandardNormal))
        });
        let mut tape = Tape::new();
        let logits_super = net.forward(&mut tape, images.clone(), &gate_signals, Mode::Eval)?;
        let a = tape.value(logits_super);
        let b = fused.logits(images)?;
        max_abs_diff = max_abs_diff.max(a.max_abs_diff(&b));
    }
    Ok(VerifyReport {
        max_abs_diff,
        trials: n_trials,
        tol,
        pass: max_abs_diff <= tol,
    })
}
