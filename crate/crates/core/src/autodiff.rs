//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A forward pass records one node per operation; `backward` walks the tape
//! in exact reverse insertion order and accumulates gradients into every
//! contributing node, so parameters used by several branches (the shared
//! block kernel and its center crops) collect the sum of all contributions.
//! The tape is confined to one training thread; parallelism lives inside
//! individual kernels.

use crate::error::{Error, Result};
use crate::kernels::{conv, head, norm, pool};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum BnCtx<S: Scalar> {
    Train(norm::BnSaved<S>),
    Eval {
        running_mean: Vec<S>,
        running_var: Vec<S>,
        eps: S,
    },
}

enum Op<S: Scalar> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        ctx: BnCtx<S>,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Relu {
        x: Var,
    },
    AddN {
        xs: Vec<Var>,
    },
    Scale {
        x: Var,
        s: Var,
    },
    /// Branch gate: forward multiplies by `mult`; the architecture scalar
    /// receives grad = <upstream, x> * alpha_factor (the derivative of the
    /// relaxed keep probability).
    Gate {
        x: Var,
        alpha: Option<Var>,
        mult: S,
        alpha_factor: S,
    },
    /// Centered window view of a kernel tensor; gradients scatter back into
    /// the window so shared storage accumulates across branches.
    CropKernel {
        x: Var,
        oy: usize,
        ox: usize,
    },
    PadSpatial {
        x: Var,
        pad: usize,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Input)
    }

    /// Load a parameter onto the tape. Gradients flow back to the store via
    /// [`Tape::apply_param_grads`].
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Var> {
        let b = bias.map(|bv| self.nodes[bv.0].value.data().to_vec());
        let out = conv::conv2d(
            &self.nodes[x.0].value,
            &self.nodes[kernel.0].value,
            b.as_deref(),
            stride,
            pad_h,
            pad_w,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                pad_h,
                pad_w,
            },
        ))
    }

    /// Batch normalization. Train mode normalizes with batch statistics and
    /// updates the running buffers held in `store`; eval mode reads them.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &mut ParamStore<S>,
        running_mean: ParamId,
        running_var: ParamId,
        mode: Mode,
        momentum: S,
        eps: S,
    ) -> Result<Var> {
        let g = self.nodes[gamma.0].value.data().to_vec();
        let b = self.nodes[beta.0].value.data().to_vec();
        match mode {
            Mode::Train => {
                let mut rm = store.value(running_mean).data().to_vec();
                let mut rv = store.value(running_var).data().to_vec();
                let out = norm::batch_norm_train(
                    &self.nodes[x.0].value,
                    &g,
                    &b,
                    &mut rm,
                    &mut rv,
                    momentum,
                    eps,
                )?;
                store
                    .value_mut(running_mean)
                    .data_mut()
                    .copy_from_slice(&rm);
                store.value_mut(running_var).data_mut().copy_from_slice(&rv);
                Ok(self.push(
                    out.out,
                    Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        ctx: BnCtx::Train(out.saved),
                    },
                ))
            }
            Mode::Eval => {
                let rm = store.value(running_mean).data().to_vec();
                let rv = store.value(running_var).data().to_vec();
                let out =
                    norm::batch_norm_eval(&self.nodes[x.0].value, &g, &b, &rm, &rv, eps)?;
                Ok(self.push(
                    out,
                    Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        ctx: BnCtx::Eval {
                            running_mean: rm,
                            running_var: rv,
                            eps,
                        },
                    },
                ))
            }
        }
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let out = pool::avg_pool2d(&self.nodes[x.0].value, k, stride, pad)?;
        Ok(self.push(out, Op::AvgPool { x, k, stride, pad }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = pool::global_avg_pool(&self.nodes[x.0].value);
        self.push(out, Op::GlobalAvgPool { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| v.maximum(S::ZERO));
        self.push(out, Op::Relu { x })
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("add_n needs at least one input"));
        }
        let shape = self.nodes[xs[0].0].value.shape();
        for &v in &xs[1..] {
            if self.nodes[v.0].value.shape() != shape {
                return Err(Error::DimensionMismatch {
                    axis: "add_n",
                    expected: self.nodes[xs[0].0].value.numel(),
                    got: self.nodes[v.0].value.numel(),
                });
            }
        }
        let mut out = self.nodes[xs[0].0].value.clone();
        for &v in &xs[1..] {
            let src = self.nodes[v.0].value.data();
            out.data_mut()
                .iter_mut()
                .zip(src)
                .for_each(|(a, &b)| *a += b);
        }
        Ok(self.push(out, Op::AddN { xs: xs.to_vec() }))
    }

    /// Multiply by a scalar tape variable. d/ds is the inner product of the
    /// upstream gradient with the input.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(Error::invalid("scale factor must be a scalar"));
        }
        let sv = self.nodes[s.0].value.data()[0];
        let out = self.nodes[x.0].value.map(|v| v * sv);
        Ok(self.push(out, Op::Scale { x, s }))
    }

    /// Straight-through branch gate. Forward multiplies by `mult` (the hard
    /// 0/1 gate during search, or the soft keep probability in diagnostics
    /// mode); backward sends `<upstream, x> * zsoft*(1-zsoft)/lambda` to the
    /// architecture scalar.
    pub fn gate(&mut self, x: Var, mult: S, alpha: Option<Var>, zsoft: S, lambda: S) -> Var {
        let alpha_factor = zsoft * (S::ONE - zsoft) / lambda;
        let out = self.nodes[x.0].value.map(|v| v * mult);
        self.push(
            out,
            Op::Gate {
                x,
                alpha,
                mult,
                alpha_factor,
            },
        )
    }

    /// Centered h x w window of a (Co, Ci, K, K) kernel.
    pub fn crop_kernel(&mut self, kernel: Var, h: usize, w: usize) -> Result<Var> {
        let [co, ci, kh, kw] = self.nodes[kernel.0].value.shape();
        if h % 2 == 0 || w % 2 == 0 {
            return Err(Error::invalid(format!(
                "crop size {h}x{w} must be odd (center undefined)"
            )));
        }
        if h > kh || w > kw || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "crop {h}x{w} exceeds kernel {kh}x{kw}"
            )));
        }
        let oy = kh / 2 - h / 2;
        let ox = kw / 2 - w / 2;
        let src = &self.nodes[kernel.0].value;
        let mut out = Tensor::zeros([co, ci, h, w]);
        for o in 0..co {
            for i in 0..ci {
                for y in 0..h {
                    for x_ in 0..w {
                        out.set(o, i, y, x_, src.get(o, i, oy + y, ox + x_));
                    }
                }
            }
        }
        Ok(self.push(out, Op::CropKernel { x: kernel, oy, ox }))
    }

    /// Zero-pad both spatial dims by `pad` on each side.
    pub fn pad_spatial(&mut self, x: Var, pad: usize) -> Var {
        let [n, c, h, w] = self.nodes[x.0].value.shape();
        let src = &self.nodes[x.0].value;
        let mut out = Tensor::zeros([n, c, h + 2 * pad, w + 2 * pad]);
        for bi in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out.set(bi, ch, y + pad, xx + pad, src.get(bi, ch, y, xx));
                    }
                }
            }
        }
        self.push(out, Op::PadSpatial { x, pad })
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let b = self.nodes[bias.0].value.data().to_vec();
        let out = head::linear(&self.nodes[x.0].value, &self.nodes[weight.0].value, &b)?;
        Ok(self.push(out, Op::Linear { x, weight, bias }))
    }

    /// Mean cross-entropy over the batch; returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let out = head::softmax_cross_entropy(&self.nodes[logits.0].value, labels)?;
        Ok(self.push(
            Tensor::scalar(out.loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: out.probs,
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    fn add_grad(&mut self, v: Var, contribution: &[S]) {
        let node = &mut self.nodes[v.0];
        let g = node
            .grad
            .get_or_insert_with(|| vec![S::ZERO; node.value.numel()]);
        debug_assert_eq!(g.len(), contribution.len());
        g.iter_mut().zip(contribution).for_each(|(a, &b)| *a += b);
    }

    /// Reverse pass from a scalar loss. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid("backward already ran on this tape"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid("backward expects a scalar loss"));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![S::ONE]);

        for i in (0..self.nodes.len()).rev() {
            let Some(gvec) = self.nodes[i].grad.clone() else {
                continue;
            };
            let out_shape = self.nodes[i].value.shape();
            // Reborrow per-op below; grads accumulate into input nodes.
            match &self.nodes[i].op {
                Op::Input | Op::Param(_) => {}
                Op::Conv2d {
                    x,
                    kernel,
                    bias,
                    stride,
                    pad_h,
                    pad_w,
                } => {
                    let (x, kernel, bias, stride, pad_h, pad_w) =
                        (*x, *kernel, *bias, *stride, *pad_h, *pad_w);
                    let dy = Tensor::new(out_shape, gvec)?;
                    let grads = conv::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[kernel.0].value,
                        &dy,
                        stride,
                        pad_h,
                        pad_w,
                    );
                    self.add_grad(x, grads.dx.data());
                    self.add_grad(kernel, grads.dkernel.data());
                    if let Some(bv) = bias {
                        self.add_grad(bv, &grads.dbias);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    ctx,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let dy = Tensor::new(out_shape, gvec)?;
                    let g = self.nodes[gamma.0].value.data().to_vec();
                    let grads = match ctx {
                        BnCtx::Train(saved) => norm::batch_norm_train_backward(
                            &self.nodes[x.0].value,
                            &g,
                            saved,
                            &dy,
                        ),
                        BnCtx::Eval {
                            running_mean,
                            running_var,
                            eps,
                        } => norm::batch_norm_eval_backward(
                            &self.nodes[x.0].value,
                            &g,
                            running_mean,
                            running_var,
                            *eps,
                            &dy,
                        ),
                    };
                    self.add_grad(x, grads.dx.data());
                    self.add_grad(gamma, &grads.dgamma);
                    self.add_grad(beta, &grads.dbeta);
                }
                Op::AvgPool { x, k, stride, pad } => {
                    let (x, k, stride, pad) = (*x, *k, *stride, *pad);
                    let dy = Tensor::new(out_shape, gvec)?;
                    let in_shape = self.nodes[x.0].value.shape();
                    let dx = pool::avg_pool2d_backward(in_shape, &dy, k, stride, pad);
                    self.add_grad(x, dx.data());
                }
                Op::GlobalAvgPool { x } => {
                    let x = *x;
                    let dy = Tensor::new(out_shape, gvec)?;
                    let dx = pool::global_avg_pool_backward(self.nodes[x.0].value.shape(), &dy);
                    self.add_grad(x, dx.data());
                }
                Op::Relu { x } => {
                    let x = *x;
                    let dx: Vec<S> = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(&gvec)
                        .map(|(&v, &g)| if v > S::ZERO { g } else { S::ZERO })
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::AddN { xs } => {
                    for &v in &xs.clone() {
                        self.add_grad(v, &gvec);
                    }
                }
                Op::Scale { x, s } => {
                    let (x, s) = (*x, *s);
                    let sv = self.nodes[s.0].value.data()[0];
                    let dx: Vec<S> = gvec.iter().map(|&g| g * sv).collect();
                    let ds: S = gvec
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(&g, &v)| g * v)
                        .sum();
                    self.add_grad(x, &dx);
                    self.add_grad(s, &[ds]);
                }
                Op::Gate {
                    x,
                    alpha,
                    mult,
                    alpha_factor,
                } => {
                    let (x, alpha, mult, alpha_factor) = (*x, *alpha, *mult, *alpha_factor);
                    let dx: Vec<S> = gvec.iter().map(|&g| g * mult).collect();
                    if let Some(a) = alpha {
                        let dot: S = gvec
                            .iter()
                            .zip(self.nodes[x.0].value.data())
                            .map(|(&g, &v)| g * v)
                            .sum();
                        self.add_grad(a, &[dot * alpha_factor]);
                    }
                    self.add_grad(x, &dx);
                }
                Op::CropKernel { x, oy, ox } => {
                    let (x, oy, ox) = (*x, *oy, *ox);
                    let [co, ci, h, w] = out_shape;
                    let parent_shape = self.nodes[x.0].value.shape();
                    let mut dparent = Tensor::zeros(parent_shape);
                    for o in 0..co {
                        for ic in 0..ci {
                            for y in 0..h {
                                for xx in 0..w {
                                    let idx = dparent.at(o, ic, oy + y, ox + xx);
                                    dparent.data_mut()[idx] = gvec[((o * ci + ic) * h + y) * w + xx];
                                }
                            }
                        }
                    }
                    self.add_grad(x, dparent.data());
                }
                Op::PadSpatial { x, pad } => {
                    let (x, pad) = (*x, *pad);
                    let [n, c, h, w] = self.nodes[x.0].value.shape();
                    let dy = Tensor::new(out_shape, gvec)?;
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for bi in 0..n {
                        for ch in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    let v = dy.get(bi, ch, y + pad, xx + pad);
                                    dx.set(bi, ch, y, xx, v);
                                }
                            }
                        }
                    }
                    self.add_grad(x, dx.data());
                }
                Op::Linear { x, weight, bias } => {
                    let (x, weight, bias) = (*x, *weight, *bias);
                    let dy = Tensor::new(out_shape, gvec)?;
                    let grads = head::linear_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[weight.0].value,
                        &dy,
                    );
                    self.add_grad(x, grads.dx.data());
                    self.add_grad(weight, grads.dweight.data());
                    self.add_grad(bias, &grads.dbias);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    let [n, classes, _, _] = self.nodes[logits.0].value.shape();
                    let dlogits = head::softmax_cross_entropy_backward(
                        probs,
                        labels,
                        n,
                        classes,
                        gvec[0],
                    );
                    let dl = dlogits.into_data();
                    self.add_grad(logits, &dl);
                }
            }
        }
        Ok(())
    }

    /// Accumulate every parameter node's gradient into the store. Multiple
    /// tape loads of the same parameter sum.
    pub fn apply_param_grads(&self, store: &mut ParamStore<S>) {
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                store.accumulate_grad(*id, g);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}
