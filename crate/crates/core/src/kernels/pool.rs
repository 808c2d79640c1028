//! Average pooling. The window mean always divides by k*k (zeros outside a
//! padded border count), which keeps pooling exactly equal to convolution
//! with a uniform diagonal kernel on the zero-padded input.

use crate::error::Result;
use crate::parallel::for_each_chunk_mut;
use crate::scalar::Scalar;
use crate::tensor::{out_extent, Tensor};

pub fn avg_pool2d<S: Scalar>(
    x: &Tensor<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let [n, c, h, w] = x.shape();
    let ho = out_extent("height", h, k, pad, stride)?;
    let wo = out_extent("width", w, k, pad, stride)?;
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let xd = x.data();
    let plane_in = h * w;
    let plane_out = ho * wo;
    let inv = S::ONE / S::from_usize(k * k);
    for_each_chunk_mut(out.data_mut(), c * plane_out, |bi, out_n| {
        for ch in 0..c {
            let src = &xd[(bi * c + ch) * plane_in..(bi * c + ch + 1) * plane_in];
            let dst = &mut out_n[ch * plane_out..(ch + 1) * plane_out];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = S::ZERO;
                    for dy in 0..k {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                s += src[iy as usize * w + ix as usize];
                            }
                        }
                    }
                    dst[oy * wo + ox] = s * inv;
                }
            }
        }
    });
    Ok(out)
}

pub fn avg_pool2d_backward<S: Scalar>(
    in_shape: [usize; 4],
    dy: &Tensor<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor<S> {
    let [_, c, h, w] = in_shape;
    let [_, _, ho, wo] = dy.shape();
    let mut dx = Tensor::zeros(in_shape);
    let dyd = dy.data();
    let plane_in = h * w;
    let plane_out = ho * wo;
    let inv = S::ONE / S::from_usize(k * k);
    for_each_chunk_mut(dx.data_mut(), c * plane_in, |bi, dx_n| {
        for ch in 0..c {
            let g = &dyd[(bi * c + ch) * plane_out..(bi * c + ch + 1) * plane_out];
            let dst = &mut dx_n[ch * plane_in..(ch + 1) * plane_in];
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g[oy * wo + ox] * inv;
                    for dy_k in 0..k {
                        let iy = (oy * stride + dy_k) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx_k in 0..k {
                            let ix = (ox * stride + dx_k) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += gv;
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// (N, C, H, W) -> (N, C, 1, 1) spatial mean.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let inv = S::ONE / S::from_usize(plane);
    let xd = x.data();
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for_each_chunk_mut(out.data_mut(), c, |bi, out_n| {
        for ch in 0..c {
            let mut s = S::ZERO;
            for &v in &xd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane] {
                s += v;
            }
            out_n[ch] = s * inv;
        }
    });
    out
}

pub fn global_avg_pool_backward<S: Scalar>(in_shape: [usize; 4], dy: &Tensor<S>) -> Tensor<S> {
    let [_, c, h, w] = in_shape;
    let plane = h * w;
    let inv = S::ONE / S::from_usize(plane);
    let dyd = dy.data();
    let mut dx = Tensor::zeros(in_shape);
    for_each_chunk_mut(dx.data_mut(), c * plane, |bi, dx_n| {
        for ch in 0..c {
            let g = dyd[bi * c + ch] * inv;
            dx_n[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = g);
        }
    });
    dx
}
