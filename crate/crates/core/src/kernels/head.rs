//! Classifier head: fully connected layer and softmax cross-entropy.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Input (N, F, 1, 1) (or any shape flattened per item), weight (O, F, 1, 1).
pub fn linear<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &[S]) -> Result<Tensor<S>> {
    let [n, c, h, w] = x.shape();
    let f = c * h * w;
    let [o, wf, wh, ww] = weight.shape();
    if wf * wh * ww != f {
        return Err(Error::DimensionMismatch {
            axis: "features",
            expected: wf * wh * ww,
            got: f,
        });
    }
    if bias.len() != o {
        return Err(Error::DimensionMismatch {
            axis: "bias",
            expected: o,
            got: bias.len(),
        });
    }
    let mut out = Tensor::zeros([n, o, 1, 1]);
    // out (N,O) = x (N,F) @ W^T (F,O)
    S::gemm_strided(
        n,
        f,
        o,
        x.data(),
        f as isize,
        1,
        weight.data(),
        1,
        f as isize,
        S::ZERO,
        out.data_mut(),
    );
    let od = out.data_mut();
    for bi in 0..n {
        for oi in 0..o {
            od[bi * o + oi] += bias[oi];
        }
    }
    Ok(out)
}

pub struct LinearGrads<S: Scalar> {
    pub dx: Tensor<S>,
    pub dweight: Tensor<S>,
    pub dbias: Vec<S>,
}

pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    dy: &Tensor<S>,
) -> LinearGrads<S> {
    let [n, c, h, w] = x.shape();
    let f = c * h * w;
    let o = weight.shape()[0];
    // dX (N,F) = dY (N,O) @ W (O,F)
    let mut dx = Tensor::zeros(x.shape());
    S::gemm(n, o, f, dy.data(), weight.data(), S::ZERO, dx.data_mut());
    // dW (O,F) = dY^T (O,N) @ X (N,F)
    let mut dweight = Tensor::zeros(weight.shape());
    S::gemm_strided(
        o,
        n,
        f,
        dy.data(),
        1,
        o as isize,
        x.data(),
        f as isize,
        1,
        S::ZERO,
        dweight.data_mut(),
    );
    let mut dbias = vec![S::ZERO; o];
    let dyd = dy.data();
    for bi in 0..n {
        for oi in 0..o {
            dbias[oi] += dyd[bi * o + oi];
        }
    }
    LinearGrads { dx, dweight, dbias }
}

pub struct CeOut<S: Scalar> {
    /// Mean cross-entropy over the batch.
    pub loss: S,
    /// Softmax probabilities (N x classes), saved for backward.
    pub probs: Vec<S>,
}

pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<CeOut<S>> {
    let [n, classes, h, w] = logits.shape();
    if h != 1 || w != 1 {
        return Err(Error::invalid("cross entropy expects (N, C, 1, 1) logits"));
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            axis: "labels",
            expected: n,
            got: labels.len(),
        });
    }
    let ld = logits.data();
    let mut probs = vec![S::ZERO; n * classes];
    let mut total = S::ZERO;
    for bi in 0..n {
        let row = &ld[bi * classes..(bi + 1) * classes];
        let label = labels[bi];
        if label >= classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let max = row.iter().fold(row[0], |a, &b| a.maximum(b));
        let mut denom = S::ZERO;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[bi * classes + j] = e;
            denom += e;
        }
        for j in 0..classes {
            probs[bi * classes + j] /= denom;
        }
        total += denom.ln() - (row[label] - max);
    }
    Ok(CeOut {
        loss: total / S::from_usize(n),
        probs,
    })
}

pub fn softmax_cross_entropy_backward<S: Scalar>(
    probs: &[S],
    labels: &[usize],
    n: usize,
    classes: usize,
    upstream: S,
) -> Tensor<S> {
    let mut dlogits = Tensor::zeros([n, classes, 1, 1]);
    let dl = dlogits.data_mut();
    let scale = upstream / S::from_usize(n);
    for bi in 0..n {
        for j in 0..classes {
            let indicator = if j == labels[bi] { S::ONE } else { S::ZERO };
            dl[bi * classes + j] = (probs[bi * classes + j] - indicator) * scale;
        }
    }
    dlogits
}
