//! 2-D cross-correlation via im2col + GEMM.
//!
//! Layout conventions, all row-major:
//!   input   (N, Ci, H, W)
//!   kernel  (Co, Ci, Kh, Kw), read as a (Co) x (Ci*Kh*Kw) matrix
//!   cols    (Ci*Kh*Kw) x (Ho*Wo), one buffer per batch item
//!   output  (N, Co, Ho, Wo)
//!
//! Batch items are independent, so forward and input-gradient fan out over
//! the batch. Kernel gradients are reduced over fixed-size batch chunks in
//! ascending order, which keeps results bitwise identical for any thread
//! count.

use crate::error::{Error, Result};
use crate::parallel::{for_each_chunk_mut, map_indexed};
use crate::scalar::Scalar;
use crate::tensor::{out_extent, Shape, Tensor};

/// Batch items accumulated per kernel-gradient partial. Fixed so the
/// summation order never depends on the thread count.
const GRAD_CHUNK: usize = 8;

pub fn conv_out_shape(
    input: Shape,
    kernel: Shape,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
) -> Result<Shape> {
    let [n, ci, h, w] = input;
    let [co, kci, kh, kw] = kernel;
    if ci != kci {
        return Err(Error::DimensionMismatch {
            axis: "in_channels",
            expected: kci,
            got: ci,
        });
    }
    let ho = out_extent("height", h, kh, pad_h, stride)?;
    let wo = out_extent("width", w, kw, pad_w, stride)?;
    Ok([n, co, ho, wo])
}

/// Unpack one image (Ci, H, W) into the cols matrix.
fn im2col<S: Scalar>(
    x: &[S],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    debug_assert_eq!(cols.len(), ci * kh * kw * ho * wo);
    let mut row = 0;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad_h as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = S::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + dx) as isize - pad_w as isize;
                        *v = if ix >= 0 && ix < w as isize {
                            src_row[ix as usize]
                        } else {
                            S::ZERO
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the cols matrix back into one image (Ci, H, W).
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    ho: usize,
    wo: usize,
    x: &mut [S],
) {
    let mut row = 0;
    for c in 0..ci {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad_w as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&[S]>,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
) -> Result<Tensor<S>> {
    let out_shape = conv_out_shape(x.shape(), kernel.shape(), stride, pad_h, pad_w)?;
    let [_, co, ho, wo] = out_shape;
    let [_, ci, h, w] = x.shape();
    let [_, _, kh, kw] = kernel.shape();
    if let Some(b) = bias {
        if b.len() != co {
            return Err(Error::DimensionMismatch {
                axis: "bias_channels",
                expected: co,
                got: b.len(),
            });
        }
    }
    let krows = ci * kh * kw;
    let positions = ho * wo;
    let in_stride = ci * h * w;

    let mut out = Tensor::zeros(out_shape);
    let xd = x.data();
    let kd = kernel.data();
    for_each_chunk_mut(out.data_mut(), co * positions, |bi, out_n| {
        let mut cols = vec![S::ZERO; krows * positions];
        im2col(
            &xd[bi * in_stride..(bi + 1) * in_stride],
            ci,
            h,
            w,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            ho,
            wo,
            &mut cols,
        );
        S::gemm(co, krows, positions, kd, &cols, S::ZERO, out_n);
        if let Some(b) = bias {
            for c in 0..co {
                let bc = b[c];
                out_n[c * positions..(c + 1) * positions]
                    .iter_mut()
                    .for_each(|v| *v += bc);
            }
        }
    });
    Ok(out)
}

pub struct ConvGrads<S: Scalar> {
    pub dx: Tensor<S>,
    pub dkernel: Tensor<S>,
    pub dbias: Vec<S>,
}

pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    dy: &Tensor<S>,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
) -> ConvGrads<S> {
    let [n, ci, h, w] = x.shape();
    let [co, _, kh, kw] = kernel.shape();
    let [_, _, ho, wo] = dy.shape();
    let krows = ci * kh * kw;
    let positions = ho * wo;
    let in_stride = ci * h * w;
    let out_stride = co * positions;
    let kd = kernel.data();
    let xd = x.data();
    let dyd = dy.data();

    // dX[n] = col2im(K^T @ dY[n]); batch items are disjoint.
    let mut dx = Tensor::zeros(x.shape());
    for_each_chunk_mut(dx.data_mut(), in_stride, |bi, dx_n| {
        let mut dcols = vec![S::ZERO; krows * positions];
        S::gemm_strided(
            krows,
            co,
            positions,
            kd,
            1,
            krows as isize,
            &dyd[bi * out_stride..(bi + 1) * out_stride],
            positions as isize,
            1,
            S::ZERO,
            &mut dcols,
        );
        col2im(&dcols, ci, h, w, kh, kw, stride, pad_h, pad_w, ho, wo, dx_n);
    });

    // dK = sum_n dY[n] @ cols[n]^T, reduced over fixed-size chunks in order.
    let n_chunks = n.div_ceil(GRAD_CHUNK);
    let partials: Vec<Vec<S>> = map_indexed(n_chunks, |chunk| {
        let lo = chunk * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(n);
        let mut dk = vec![S::ZERO; co * krows];
        let mut cols = vec![S::ZERO; krows * positions];
        for bi in lo..hi {
            im2col(
                &xd[bi * in_stride..(bi + 1) * in_stride],
                ci,
                h,
                w,
                kh,
                kw,
                stride,
                pad_h,
                pad_w,
                ho,
                wo,
                &mut cols,
            );
            S::gemm_strided(
                co,
                positions,
                krows,
                &dyd[bi * out_stride..(bi + 1) * out_stride],
                positions as isize,
                1,
                &cols,
                1,
                positions as isize,
                S::ONE,
                &mut dk,
            );
        }
        dk
    });
    let mut dkernel = Tensor::zeros(kernel.shape());
    for p in &partials {
        dkernel
            .data_mut()
            .iter_mut()
            .zip(p.iter())
            .for_each(|(a, &b)| *a += b);
    }

    let mut dbias = vec![S::ZERO; co];
    for bi in 0..n {
        let dy_n = &dyd[bi * out_stride..(bi + 1) * out_stride];
        for c in 0..co {
            let mut s = S::ZERO;
            for &v in &dy_n[c * positions..(c + 1) * positions] {
                s += v;
            }
            dbias[c] += s;
        }
    }

    ConvGrads { dx, dkernel, dbias }
}
