//! Reference implementations used only for verification.
//!
//! Nothing here shares code with the production paths: convolution is the
//! direct six-loop definition rather than im2col + GEMM, and gradients are
//! checked by central finite differences against tape results. Unit tests,
//! integration tests and the acceptance suite all pull from this module.

use crate::scalar::Scalar;
use crate::tensor::{out_extent, Tensor};

/// Direct cross-correlation: six nested loops over the output and the
/// kernel window, zeros outside the padded border.
pub fn naive_conv2d<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&[S]>,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
) -> Tensor<S> {
    let [n, ci, h, w] = x.shape();
    let [co, kci, kh, kw] = kernel.shape();
    assert_eq!(ci, kci, "naive_conv2d: channel mismatch");
    let ho = out_extent("height", h, kh, pad_h, stride).unwrap();
    let wo = out_extent("width", w, kw, pad_w, stride).unwrap();
    let mut out = Tensor::zeros([n, co, ho, wo]);
    for bi in 0..n {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = S::ZERO;
                    for ic in 0..ci {
                        for dy in 0..kh {
                            let iy = (oy * stride + dy) as isize - pad_h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = (ox * stride + dx) as isize - pad_w as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x.get(bi, ic, iy as usize, ix as usize)
                                    * kernel.get(oc, ic, dy, dx);
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[oc];
                    }
                    out.set(bi, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Window mean with the divide-by-k*k convention (padded zeros count).
pub fn naive_avg_pool2d<S: Scalar>(x: &Tensor<S>, k: usize, stride: usize, pad: usize) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    let ho = out_extent("height", h, k, pad, stride).unwrap();
    let wo = out_extent("width", w, k, pad, stride).unwrap();
    let inv = S::ONE / S::from_usize(k * k);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for bi in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = S::ZERO;
                    for dy in 0..k {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += x.get(bi, ch, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(bi, ch, oy, ox, acc * inv);
                }
            }
        }
    }
    out
}

/// Result of one finite-difference comparison.
#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl FdReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err <= tol,
            "finite-difference check failed: rel err {} > {} (analytic {}, numeric {}, {} coords)",
            self.max_rel_err,
            tol,
            self.worst_analytic,
            self.worst_numeric,
            self.checked
        );
    }
}

/// Central-difference check of an analytic gradient.
///
/// `loss_fn` evaluates the scalar objective at the given parameter vectors;
/// `analytic` is the gradient under test, one vector per parameter. Checks
/// up to `coords_per_param` coordinates per parameter, chosen by an even
/// stride so the sample is deterministic. The relative error guard floors
/// the denominator at 1.0 to keep near-zero gradients on an absolute scale.
pub fn check_grads_fd(
    loss_fn: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    params: &[Vec<f64>],
    analytic: &[Vec<f64>],
    coords_per_param: usize,
    h: f64,
) -> FdReport {
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let mut report = FdReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (pi, p) in params.iter().enumerate() {
        assert_eq!(p.len(), analytic[pi].len());
        let total = p.len();
        let count = coords_per_param.min(total).max(1);
        let stride = (total / count).max(1);
        for s in 0..count {
            let i = (s * stride) % total;
            let mut plus = params.to_vec();
            plus[pi][i] += h;
            let mut minus = params.to_vec();
            minus[pi][i] -= h;
            let numeric = (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * h);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report
}

/// Randomize every parameter of a store into a nontrivial but valid state:
/// weights and batch-norm affines get additive noise, running variances get
/// a positive multiplicative jitter. Used to make fusion-equivalence tests
/// exercise arbitrary statistics rather than fresh-initialization ones.
pub fn perturb_params<S: Scalar>(
    store: &mut crate::params::ParamStore<S>,
    rng: &mut impl rand::Rng,
) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let data = store.value_mut(id).data_mut();
        if name.contains("running_var") {
            for v in data.iter_mut() {
                let jitter: f64 = 0.5 + 1.5 * rng.gen::<f64>();
                *v = S::from_f64((v.to_f64() * jitter).max(1e-3));
            }
        } else {
            for v in data.iter_mut() {
                let noise: f64 = rng.gen::<f64>() - 0.5;
                *v = S::from_f64(v.to_f64() + 0.8 * noise);
            }
        }
    }
}

/// Spearman rank correlation between two equal-length value sets.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        let xa = ra[i] - mean;
        let xb = rb[i] - mean;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    num / (da.sqrt() * db.sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    for (rank, &i) in idx.iter().enumerate() {
        out[i] = rank as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_conv_hand_counted() {
        // All-ones 3x3 input and kernel, pad 1: center sees the full 3x3
        // overlap (9), corners a 2x2 overlap (4).
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let y = naive_conv2d(&x, &k, None, 1, 1, 1);
        assert_eq!(y.get(0, 0, 1, 1), 9.0);
        assert_eq!(y.get(0, 0, 0, 0), 4.0);
        assert_eq!(y.get(0, 0, 2, 2), 4.0);
        assert_eq!(y.get(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn spearman_detects_order() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 30.0, 40.0];
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
        let c = [40.0, 30.0, 20.0, 10.0];
        assert!((spearman(&a, &c) + 1.0).abs() < 1e-12);
    }
}
