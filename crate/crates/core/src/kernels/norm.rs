//! Batch normalization over (N, H, W) per channel.
//!
//! Train mode normalizes with biased batch statistics and updates running
//! estimates by momentum (running variance uses the unbiased estimate).
//! Eval mode applies the frozen affine derived from running statistics.
//! Channel reductions run in a fixed index order so results do not depend
//! on thread count.

use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel context saved by the train-mode forward for backward.
pub struct BnSaved<S: Scalar> {
    pub mean: Vec<S>,
    pub inv_std: Vec<S>,
}

fn channel_moments<S: Scalar>(x: &Tensor<S>, ch: usize) -> (S, S) {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let m = S::from_usize(n * plane);
    let xd = x.data();
    let mut sum = S::ZERO;
    let mut sq = S::ZERO;
    for bi in 0..n {
        for &v in &xd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane] {
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / m;
    let var = sq / m - mean * mean;
    // Clamp tiny negative values from cancellation.
    (mean, var.maximum(S::ZERO))
}

pub struct BnTrainOut<S: Scalar> {
    pub out: Tensor<S>,
    pub saved: BnSaved<S>,
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_train<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    running_mean: &mut [S],
    running_var: &mut [S],
    momentum: S,
    eps: S,
) -> Result<BnTrainOut<S>> {
    let [n, c, h, w] = x.shape();
    check_channels(c, gamma.len())?;
    check_channels(c, beta.len())?;
    let plane = h * w;
    let m = n * plane;

    let moments: Vec<(S, S)> = map_indexed(c, |ch| channel_moments(x, ch));
    let mut mean = Vec::with_capacity(c);
    let mut inv_std = Vec::with_capacity(c);
    for &(mu, var) in &moments {
        let denom = var + eps;
        if !(denom.to_f64() > 0.0) || !denom.is_finite() {
            return Err(Error::Internal(format!(
                "non-positive variance after eps in batch norm: {denom}"
            )));
        }
        mean.push(mu);
        inv_std.push(S::ONE / denom.sqrt());
    }

    // Running stats: unbiased variance estimate.
    let unbias = if m > 1 {
        S::from_usize(m) / S::from_usize(m - 1)
    } else {
        S::ONE
    };
    for ch in 0..c {
        let (mu, var) = moments[ch];
        running_mean[ch] = (S::ONE - momentum) * running_mean[ch] + momentum * mu;
        running_var[ch] = (S::ONE - momentum) * running_var[ch] + momentum * var * unbias;
    }

    let xd = x.data();
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for bi in 0..n {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            let (g, b, mu, is) = (gamma[ch], beta[ch], mean[ch], inv_std[ch]);
            for i in base..base + plane {
                od[i] = g * (xd[i] - mu) * is + b;
            }
        }
    }
    Ok(BnTrainOut {
        out,
        saved: BnSaved { mean, inv_std },
    })
}

pub fn batch_norm_eval<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
    eps: S,
) -> Result<Tensor<S>> {
    let [n, c, h, w] = x.shape();
    check_channels(c, gamma.len())?;
    let plane = h * w;
    // Fold into scale/shift once per channel.
    let mut scale = Vec::with_capacity(c);
    let mut shift = Vec::with_capacity(c);
    for ch in 0..c {
        let denom = running_var[ch] + eps;
        if !(denom.to_f64() > 0.0) || !denom.is_finite() {
            return Err(Error::Internal(format!(
                "non-positive variance after eps in batch norm: {denom}"
            )));
        }
        let s = gamma[ch] / denom.sqrt();
        scale.push(s);
        shift.push(beta[ch] - running_mean[ch] * s);
    }
    let xd = x.data();
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for bi in 0..n {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            let (s, t) = (scale[ch], shift[ch]);
            for i in base..base + plane {
                od[i] = s * xd[i] + t;
            }
        }
    }
    Ok(out)
}

pub struct BnGrads<S: Scalar> {
    pub dx: Tensor<S>,
    pub dgamma: Vec<S>,
    pub dbeta: Vec<S>,
}

/// Backward through train-mode normalization (batch statistics are part of
/// the graph).
pub fn batch_norm_train_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    saved: &BnSaved<S>,
    dy: &Tensor<S>,
) -> BnGrads<S> {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let m = S::from_usize(n * plane);
    let xd = x.data();
    let dyd = dy.data();

    // Per channel: sum(dy) and sum(dy * xhat).
    let sums: Vec<(S, S)> = map_indexed(c, |ch| {
        let mu = saved.mean[ch];
        let is = saved.inv_std[ch];
        let mut s_dy = S::ZERO;
        let mut s_dyx = S::ZERO;
        for bi in 0..n {
            let base = (bi * c + ch) * plane;
            for i in base..base + plane {
                s_dy += dyd[i];
                s_dyx += dyd[i] * (xd[i] - mu) * is;
            }
        }
        (s_dy, s_dyx)
    });

    let mut dx = Tensor::zeros(x.shape());
    let dxd = dx.data_mut();
    for bi in 0..n {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            let mu = saved.mean[ch];
            let is = saved.inv_std[ch];
            let (s_dy, s_dyx) = sums[ch];
            let k = gamma[ch] * is / m;
            for i in base..base + plane {
                let xhat = (xd[i] - mu) * is;
                dxd[i] = k * (m * dyd[i] - s_dy - xhat * s_dyx);
            }
        }
    }
    BnGrads {
        dx,
        dgamma: sums.iter().map(|&(_, s)| s).collect(),
        dbeta: sums.iter().map(|&(s, _)| s).collect(),
    }
}

/// Backward through the frozen eval-mode affine.
pub fn batch_norm_eval_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    running_mean: &[S],
    running_var: &[S],
    eps: S,
    dy: &Tensor<S>,
) -> BnGrads<S> {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = Tensor::zeros(x.shape());
    let dxd = dx.data_mut();
    let mut dgamma = vec![S::ZERO; c];
    let mut dbeta = vec![S::ZERO; c];
    for ch in 0..c {
        let is = S::ONE / (running_var[ch] + eps).sqrt();
        let scale = gamma[ch] * is;
        for bi in 0..n {
            let base = (bi * c + ch) * plane;
            for i in base..base + plane {
                dxd[i] = dyd[i] * scale;
                dgamma[ch] += dyd[i] * (xd[i] - running_mean[ch]) * is;
                dbeta[ch] += dyd[i];
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

fn check_channels(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            axis: "channels",
            expected,
            got,
        });
    }
    Ok(())
}
