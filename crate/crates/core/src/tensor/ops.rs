//! Layer primitives as pure forward/backward function pairs. Backward
//! functions return gradients w.r.t. every differentiable argument.
//!
//! All loops accumulate in a fixed order, and parallel regions write disjoint
//! chunks, so results are bit-identical run to run regardless of thread count.

use rayon::prelude::*;

use super::{ConvParams, Rng, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output length and leading pad for TF-style "same" padding.
#[inline]
pub fn same_padding(n_in: usize, k: usize, stride: usize) -> (usize, usize) {
    let n_out = n_in.div_ceil(stride);
    let pad_total = ((n_out - 1) * stride + k).saturating_sub(n_in);
    (n_out, pad_total / 2)
}

fn check_conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &[T],
    stride: usize,
) -> Result<()> {
    let [_, ci, _, _, _] = x.shape();
    let [oc, wci, kd, kh, kw] = w.shape();
    if ci != wci {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            detail: format!("input channels {ci} != kernel channels {wci}"),
        });
    }
    if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            detail: format!("kernel dims must be odd, got {kd}x{kh}x{kw}"),
        });
    }
    if b.len() != oc {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            detail: format!("bias length {} != out channels {oc}", b.len()),
        });
    }
    if stride != 1 && stride != 2 {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            detail: format!("stride must be 1 or 2, got {stride}"),
        });
    }
    Ok(())
}

/// 3D cross-correlation with zero "same" padding: stride 1 preserves spatial
/// dims, stride 2 halves them (ceil).
pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &[T],
    stride: usize,
) -> Result<Tensor<T>> {
    check_conv_shapes(x, w, b, stride)?;
    let [n, ci, d, h, wd] = x.shape();
    let [oc, _, kd, kh, kw] = w.shape();
    let (od, pd) = same_padding(d, kd, stride);
    let (oh, ph) = same_padding(h, kh, stride);
    let (ow, pw) = same_padding(wd, kw, stride);

    let out_spatial = od * oh * ow;
    let in_spatial = d * h * wd;
    let mut out = Tensor::zeros([n, oc, od, oh, ow]);
    let xd = x.data();
    let wd_data = w.data();
    let ksz = kd * kh * kw;

    out.data_mut()
        .par_chunks_mut(out_spatial)
        .enumerate()
        .for_each(|(chunk, o)| {
            let ni = chunk / oc;
            let c = chunk % oc;
            for v in o.iter_mut() {
                *v = b[c];
            }
            for ic in 0..ci {
                let xin = &xd[(ni * ci + ic) * in_spatial..(ni * ci + ic + 1) * in_spatial];
                let wk = &wd_data[(c * ci + ic) * ksz..(c * ci + ic + 1) * ksz];
                for kz in 0..kd {
                    let (od_lo, od_hi) = valid_out_range(d, od, kz, pd, stride);
                    for oz in od_lo..od_hi {
                        let iz = oz * stride + kz - pd;
                        for ky in 0..kh {
                            let (oh_lo, oh_hi) = valid_out_range(h, oh, ky, ph, stride);
                            for oy in oh_lo..oh_hi {
                                let iy = oy * stride + ky - ph;
                                let in_row = &xin[(iz * h + iy) * wd..(iz * h + iy + 1) * wd];
                                let out_row = &mut o[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                for kx in 0..kw {
                                    let wv = wk[(kz * kh + ky) * kw + kx];
                                    accumulate_row(out_row, in_row, wv, kx, pw, stride, wd);
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Output positions `o` with `0 <= o*stride + k - pad < n_in`.
#[inline]
fn valid_out_range(n_in: usize, n_out: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let max_i = n_in as i64 - 1 - k as i64 + pad as i64;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = ((max_i as usize) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

/// out_row[o] += wv * in_row[o*stride + kx - pw] over the valid range.
#[inline]
fn accumulate_row<T: Scalar>(
    out_row: &mut [T],
    in_row: &[T],
    wv: T,
    kx: usize,
    pw: usize,
    stride: usize,
    n_in: usize,
) {
    let (lo, hi) = valid_out_range(n_in, out_row.len(), kx, pw, stride);
    if lo >= hi {
        return;
    }
    if stride == 1 {
        let off = kx as i64 - pw as i64;
        let src = &in_row[(lo as i64 + off) as usize..(hi as i64 + off) as usize];
        for (o, i) in out_row[lo..hi].iter_mut().zip(src) {
            *o += wv * *i;
        }
    } else {
        for o in lo..hi {
            out_row[o] += wv * in_row[o * stride + kx - pw];
        }
    }
}

/// Gradients of [`conv3d_forward`] w.r.t. input, weights and bias.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    gout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let [n, ci, d, h, wd] = x.shape();
    let [oc, _, kd, kh, kw] = w.shape();
    let [gn, gc, od, oh, ow] = gout.shape();
    if gn != n || gc != oc {
        return Err(Error::ShapeMismatch {
            op: "conv3d_backward",
            detail: format!("grad shape {:?} vs input {:?}", gout.shape(), x.shape()),
        });
    }
    let (_, pd) = same_padding(d, kd, stride);
    let (_, ph) = same_padding(h, kh, stride);
    let (_, pw) = same_padding(wd, kw, stride);
    let in_spatial = d * h * wd;
    let out_spatial = od * oh * ow;
    let ksz = kd * kh * kw;
    let xd = x.data();
    let wdat = w.data();
    let gd = gout.data();

    // Bias gradient: per out-channel sum in fixed scan order.
    let mut gb = vec![T::zero(); oc];
    for ni in 0..n {
        for c in 0..oc {
            let g = &gd[(ni * oc + c) * out_spatial..(ni * oc + c + 1) * out_spatial];
            let mut acc = T::zero();
            for &v in g {
                acc += v;
            }
            gb[c] += acc;
        }
    }

    // Weight gradient, parallel over out channels (disjoint writes).
    let mut gw = Tensor::zeros(w.shape());
    gw.data_mut()
        .par_chunks_mut(ci * ksz)
        .enumerate()
        .for_each(|(c, gw_c)| {
            for ni in 0..n {
                let g = &gd[(ni * oc + c) * out_spatial..(ni * oc + c + 1) * out_spatial];
                for ic in 0..ci {
                    let xin = &xd[(ni * ci + ic) * in_spatial..(ni * ci + ic + 1) * in_spatial];
                    for kz in 0..kd {
                        let (od_lo, od_hi) = valid_out_range(d, od, kz, pd, stride);
                        for ky in 0..kh {
                            let (oh_lo, oh_hi) = valid_out_range(h, oh, ky, ph, stride);
                            for kx in 0..kw {
                                let (ow_lo, ow_hi) = valid_out_range(wd, ow, kx, pw, stride);
                                let mut acc = T::zero();
                                for oz in od_lo..od_hi {
                                    let iz = oz * stride + kz - pd;
                                    for oy in oh_lo..oh_hi {
                                        let iy = oy * stride + ky - ph;
                                        let in_row = &xin[(iz * h + iy) * wd..];
                                        let g_row = &g[(oz * oh + oy) * ow..];
                                        for o in ow_lo..ow_hi {
                                            acc += g_row[o] * in_row[o * stride + kx - pw];
                                        }
                                    }
                                }
                                gw_c[ic * ksz + (kz * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        });

    // Input gradient, parallel over (sample, in-channel) pairs.
    let mut gx = Tensor::zeros(x.shape());
    gx.data_mut()
        .par_chunks_mut(in_spatial)
        .enumerate()
        .for_each(|(chunk, gxin)| {
            let ni = chunk / ci;
            let ic = chunk % ci;
            for c in 0..oc {
                let g = &gd[(ni * oc + c) * out_spatial..(ni * oc + c + 1) * out_spatial];
                let wk = &wdat[(c * ci + ic) * ksz..(c * ci + ic + 1) * ksz];
                for kz in 0..kd {
                    let (od_lo, od_hi) = valid_out_range(d, od, kz, pd, stride);
                    for oz in od_lo..od_hi {
                        let iz = oz * stride + kz - pd;
                        for ky in 0..kh {
                            let (oh_lo, oh_hi) = valid_out_range(h, oh, ky, ph, stride);
                            for oy in oh_lo..oh_hi {
                                let iy = oy * stride + ky - ph;
                                let gx_row = &mut gxin[(iz * h + iy) * wd..(iz * h + iy + 1) * wd];
                                let g_row = &g[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                for kx in 0..kw {
                                    let wv = wk[(kz * kh + ky) * kw + kx];
                                    let (lo, hi) = valid_out_range(wd, ow, kx, pw, stride);
                                    for o in lo..hi {
                                        gx_row[o * stride + kx - pw] += wv * g_row[o];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    Ok((gx, gw, gb))
}

/// Convenience wrapper over [`conv3d_forward`] taking validated params.
pub fn conv3d<T: Scalar>(x: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    conv3d_forward(x, &params.weights, &params.bias, params.stride)
}

/// Each voxel repeated `factor` times along d, h and w.
pub fn upsample_repeat_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    assert!(factor >= 1);
    let [n, c, d, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, d * factor, h * factor, w * factor]);
    let (oh, ow) = (h * factor, w * factor);
    for ni in 0..n {
        for ch in 0..c {
            for oz in 0..d * factor {
                for oy in 0..oh {
                    let base_in = x.index(ni, ch, oz / factor, oy / factor, 0);
                    let base_out = out.index(ni, ch, oz, oy, 0);
                    for ox in 0..ow {
                        out.data_mut()[base_out + ox] = x.data()[base_in + ox / factor];
                    }
                }
            }
        }
    }
    out
}

/// Sums the upstream gradient over each duplicated block.
pub fn upsample_repeat_backward<T: Scalar>(x_shape: super::Shape5, factor: usize, gout: &Tensor<T>) -> Tensor<T> {
    let [n, c, d, h, w] = x_shape;
    let mut gx = Tensor::zeros(x_shape);
    let (oh, ow) = (h * factor, w * factor);
    for ni in 0..n {
        for ch in 0..c {
            for oz in 0..d * factor {
                for oy in 0..oh {
                    let base_g = gout.index(ni, ch, oz, oy, 0);
                    let base_x = gx.index(ni, ch, oz / factor, oy / factor, 0);
                    for ox in 0..ow {
                        gx.data_mut()[base_x + ox / factor] += gout.data()[base_g + ox];
                    }
                }
            }
        }
    }
    gx
}

/// x >= 0 -> x, x < 0 -> slope*x. The subgradient at 0 is taken as 1.
pub fn leaky_relu_forward<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v >= T::zero() { v } else { slope * v })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, slope: T, gout: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&v, &g)| if v >= T::zero() { g } else { slope * g })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Per-(sample, channel) statistics over (d, h, w). Returns the output plus
/// saved (mean, inv_std) pairs for the backward pass.
pub fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor<T>, Vec<(T, T)>) {
    let [n, c, _, _, _] = x.shape();
    assert_eq!(gamma.len(), c);
    assert_eq!(beta.len(), c);
    let m = x.spatial();
    let mf = T::from_f64(m as f64);
    let mut out = Tensor::zeros(x.shape());
    let mut saved = Vec::with_capacity(n * c);
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * m;
            let xs = &x.data()[base..base + m];
            let mut mean = T::zero();
            for &v in xs {
                mean += v;
            }
            mean = mean / mf;
            let mut var = T::zero();
            for &v in xs {
                let d = v - mean;
                var += d * d;
            }
            var = var / mf;
            let inv = (var + eps).sqrt().recip();
            let os = &mut out.data_mut()[base..base + m];
            for (o, &v) in os.iter_mut().zip(xs) {
                *o = (v - mean) * inv * gamma[ch] + beta[ch];
            }
            saved.push((mean, inv));
        }
    }
    (out, saved)
}

/// Gradients w.r.t. x, gamma, beta.
pub fn instance_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    saved: &[(T, T)],
    gout: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, _, _, _] = x.shape();
    let m = x.spatial();
    let mf = T::from_f64(m as f64);
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * m;
            let (mean, inv) = saved[ni * c + ch];
            let xs = &x.data()[base..base + m];
            let gs = &gout.data()[base..base + m];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for (&v, &g) in xs.iter().zip(gs) {
                let xhat = (v - mean) * inv;
                sum_g += g;
                sum_gx += g * xhat;
                ggamma[ch] += g * xhat;
                gbeta[ch] += g;
            }
            let gxs = &mut gx.data_mut()[base..base + m];
            let gamma_inv = gamma[ch] * inv;
            for ((o, &v), &g) in gxs.iter_mut().zip(xs).zip(gs) {
                let xhat = (v - mean) * inv;
                *o = gamma_inv * (g - sum_g / mf - xhat * sum_gx / mf);
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Inverted dropout: in training each voxel is zeroed with probability
/// `p_drop` and survivors are scaled by 1/(1 - p_drop); inference is the
/// identity. Returns the kept-mask for the backward pass (empty at inference).
pub fn dropout_forward<T: Scalar>(
    x: &Tensor<T>,
    p_drop: f64,
    rng: &mut Rng,
    training: bool,
) -> (Tensor<T>, Vec<bool>) {
    assert!((0.0..1.0).contains(&p_drop));
    if !training || p_drop == 0.0 {
        return (x.clone(), Vec::new());
    }
    let scale = T::from_f64(1.0 / (1.0 - p_drop));
    let mut keep = Vec::with_capacity(x.numel());
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let k = !rng.bernoulli(p_drop);
            keep.push(k);
            if k {
                v * scale
            } else {
                T::zero()
            }
        })
        .collect();
    (Tensor::from_vec(x.shape(), data).expect("same shape"), keep)
}

pub fn dropout_backward<T: Scalar>(
    p_drop: f64,
    keep: &[bool],
    gout: &Tensor<T>,
) -> Tensor<T> {
    if keep.is_empty() {
        return gout.clone();
    }
    let scale = T::from_f64(1.0 / (1.0 - p_drop));
    let data = gout
        .data()
        .iter()
        .zip(keep)
        .map(|(&g, &k)| if k { g * scale } else { T::zero() })
        .collect();
    Tensor::from_vec(gout.shape(), data).expect("same shape")
}

/// Per-(sample, channel) maximum over (d, h, w) -> (n, c, 1, 1, 1). Saves the
/// flat argmax (first in scan order on ties) for the backward pass.
pub fn global_max_pool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, _, _, _] = x.shape();
    let m = x.spatial();
    let mut out = Tensor::zeros([n, c, 1, 1, 1]);
    let mut argmax = Vec::with_capacity(n * c);
    for i in 0..n * c {
        let xs = &x.data()[i * m..(i + 1) * m];
        let mut best = xs[0];
        let mut best_j = 0usize;
        for (j, &v) in xs.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_j = j;
            }
        }
        out.data_mut()[i] = best;
        argmax.push(i * m + best_j);
    }
    (out, argmax)
}

pub fn global_max_pool_backward<T: Scalar>(
    x_shape: super::Shape5,
    argmax: &[usize],
    gout: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(x_shape);
    for (i, &j) in argmax.iter().enumerate() {
        gx.data_mut()[j] += gout.data()[i];
    }
    gx
}

/// Affine map on channel vectors: x (n, c_in) as (n, c_in, 1, 1, 1), weights
/// (c_out, c_in, 1, 1, 1), bias per output channel.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &[T]) -> Result<Tensor<T>> {
    let [n, ci, d, h, wd] = x.shape();
    let [co, wci, _, _, _] = w.shape();
    if ci != wci || d != 1 || h != 1 || wd != 1 {
        return Err(Error::ShapeMismatch {
            op: "dense",
            detail: format!("x {:?} vs w {:?}", x.shape(), w.shape()),
        });
    }
    if b.len() != co {
        return Err(Error::ShapeMismatch {
            op: "dense",
            detail: format!("bias length {} != out features {co}", b.len()),
        });
    }
    let mut out = Tensor::zeros([n, co, 1, 1, 1]);
    for ni in 0..n {
        for o in 0..co {
            let mut acc = b[o];
            for i in 0..ci {
                acc += w.data()[o * ci + i] * x.data()[ni * ci + i];
            }
            out.data_mut()[ni * co + o] = acc;
        }
    }
    Ok(out)
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let [n, ci, _, _, _] = x.shape();
    let [co, _, _, _, _] = w.shape();
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = vec![T::zero(); co];
    for ni in 0..n {
        for o in 0..co {
            let g = gout.data()[ni * co + o];
            gb[o] += g;
            for i in 0..ci {
                gx.data_mut()[ni * ci + i] += w.data()[o * ci + i] * g;
                gw.data_mut()[o * ci + i] += x.data()[ni * ci + i] * g;
            }
        }
    }
    (gx, gw, gb)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    leaky_relu_forward(x, T::zero())
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    leaky_relu_backward(x, T::zero(), gout)
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| T::one() / (T::one() + (-v).exp()))
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Backward from the saved output y: dy/dx = y*(1-y).
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    Tensor::from_vec(gout.shape(), data).expect("same shape")
}

/// Softmax over the channel axis, per voxel, with max subtraction.
pub fn softmax_channels_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _, _] = x.shape();
    let m = x.spatial();
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for sp in 0..m {
            let base = ni * c * m + sp;
            let mut mx = x.data()[base];
            for ch in 1..c {
                mx = mx.max(x.data()[base + ch * m]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x.data()[base + ch * m] - mx).exp();
                out.data_mut()[base + ch * m] = e;
                z += e;
            }
            for ch in 0..c {
                out.data_mut()[base + ch * m] /= z;
            }
        }
    }
    out
}

/// Backward from the saved output y: gx_c = y_c * (g_c - sum_k g_k y_k).
pub fn softmax_channels_backward<T: Scalar>(y: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _, _] = y.shape();
    let m = y.spatial();
    let mut gx = Tensor::zeros(y.shape());
    for ni in 0..n {
        for sp in 0..m {
            let base = ni * c * m + sp;
            let mut dot = T::zero();
            for ch in 0..c {
                dot += gout.data()[base + ch * m] * y.data()[base + ch * m];
            }
            for ch in 0..c {
                let yv = y.data()[base + ch * m];
                gx.data_mut()[base + ch * m] = yv * (gout.data()[base + ch * m] - dot);
            }
        }
    }
    gx
}

/// Channel-wise rescale: y[n,c,:,:,:] = x[n,c,:,:,:] * gates[n,c].
pub fn scale_channels_forward<T: Scalar>(x: &Tensor<T>, gates: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, _, _, _] = x.shape();
    if gates.shape() != [n, c, 1, 1, 1] {
        return Err(Error::ShapeMismatch {
            op: "scale_channels",
            detail: format!("gates {:?} vs x {:?}", gates.shape(), x.shape()),
        });
    }
    let m = x.spatial();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n * c {
        let g = gates.data()[i];
        let xs = &x.data()[i * m..(i + 1) * m];
        let os = &mut out.data_mut()[i * m..(i + 1) * m];
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = v * g;
        }
    }
    Ok(out)
}

pub fn scale_channels_backward<T: Scalar>(
    x: &Tensor<T>,
    gates: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, _, _, _] = x.shape();
    let m = x.spatial();
    let mut gx = Tensor::zeros(x.shape());
    let mut gg = Tensor::zeros(gates.shape());
    for i in 0..n * c {
        let g = gates.data()[i];
        let xs = &x.data()[i * m..(i + 1) * m];
        let gs = &gout.data()[i * m..(i + 1) * m];
        let gxs = &mut gx.data_mut()[i * m..(i + 1) * m];
        let mut acc = T::zero();
        for ((o, &v), &gv) in gxs.iter_mut().zip(xs).zip(gs) {
            *o = gv * g;
            acc += gv * v;
        }
        gg.data_mut()[i] = acc;
    }
    (gx, gg)
}

/// Elementwise sum of two same-shape tensors.
pub fn add_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Concatenate along the channel axis.
pub fn concat_channels_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, d, h, w] = a.shape();
    let [nb, cb, db, hb, wb] = b.shape();
    if na != nb || d != db || h != hb || w != wb {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let m = d * h * w;
    let mut out = Tensor::zeros([na, ca + cb, d, h, w]);
    for ni in 0..na {
        let oa = ni * (ca + cb) * m;
        out.data_mut()[oa..oa + ca * m].copy_from_slice(&a.data()[ni * ca * m..(ni + 1) * ca * m]);
        out.data_mut()[oa + ca * m..oa + (ca + cb) * m]
            .copy_from_slice(&b.data()[ni * cb * m..(ni + 1) * cb * m]);
    }
    Ok(out)
}

/// Split the upstream gradient back into the two concatenated parts.
pub fn concat_channels_backward<T: Scalar>(
    ca: usize,
    cb: usize,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, d, h, w] = gout.shape();
    debug_assert_eq!(c, ca + cb);
    let m = d * h * w;
    let mut ga = Tensor::zeros([n, ca, d, h, w]);
    let mut gb = Tensor::zeros([n, cb, d, h, w]);
    for ni in 0..n {
        let base = ni * c * m;
        ga.data_mut()[ni * ca * m..(ni + 1) * ca * m]
            .copy_from_slice(&gout.data()[base..base + ca * m]);
        gb.data_mut()[ni * cb * m..(ni + 1) * cb * m]
            .copy_from_slice(&gout.data()[base + ca * m..base + c * m]);
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2, 2], (1..=8).map(|i| i as f32).collect())
            .unwrap();
        let w = Tensor::from_vec([1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv3d_forward(&x, &w, &[0.0], 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_ones_kernel_interior_sum() {
        let x = Tensor::<f32>::filled([1, 1, 5, 5, 5], 1.0);
        let w = Tensor::filled([1, 1, 3, 3, 3], 1.0);
        let y = conv3d_forward(&x, &w, &[0.0], 1).unwrap();
        assert_eq!(y.at(0, 0, 2, 2, 2), 27.0);
        // Corner sees only the 2x2x2 in-bounds part.
        assert_eq!(y.at(0, 0, 0, 0, 0), 8.0);
    }

    #[test]
    fn conv_stride2_halves_dims() {
        let x = Tensor::<f32>::zeros([1, 3, 8, 8, 8]);
        let w = Tensor::zeros([4, 3, 3, 3, 3]);
        let y = conv3d_forward(&x, &w, &[0.0; 4], 2).unwrap();
        assert_eq!(y.shape(), [1, 4, 4, 4, 4]);

        let x = Tensor::<f32>::zeros([1, 1, 7, 7, 7]);
        let w = Tensor::zeros([1, 1, 3, 3, 3]);
        let y = conv3d_forward(&x, &w, &[0.0], 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 4, 4, 4]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4, 4]);
        let w = Tensor::zeros([1, 3, 3, 3, 3]);
        let err = conv3d_forward(&x, &w, &[0.0], 1).unwrap_err();
        assert_eq!(err.class(), "ShapeMismatch");
    }

    #[test]
    fn conv_matches_naive_reference() {
        // Independent brute-force oracle with explicit zero padding.
        let mut rng = Rng::from_seed(5);
        for &stride in &[1usize, 2] {
            let x_data: Vec<f64> = (0..2 * 3 * 5 * 4 * 6).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let x = Tensor::from_vec([2, 3, 5, 4, 6], x_data).unwrap();
            let w_data: Vec<f64> = (0..4 * 3 * 27).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let w = Tensor::from_vec([4, 3, 3, 3, 3], w_data).unwrap();
            let b: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let y = conv3d_forward(&x, &w, &b, stride).unwrap();

            let [n, ci, d, h, wd] = x.shape();
            let [oc, _, kd, kh, kw] = w.shape();
            let (od, pd) = same_padding(d, kd, stride);
            let (oh, ph) = same_padding(h, kh, stride);
            let (ow, pw) = same_padding(wd, kw, stride);
            assert_eq!(y.shape(), [n, oc, od, oh, ow]);
            for ni in 0..n {
                for c in 0..oc {
                    for oz in 0..od {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = b[c];
                                for ic in 0..ci {
                                    for kz in 0..kd {
                                        for ky in 0..kh {
                                            for kx in 0..kw {
                                                let iz = oz as i64 * stride as i64 + kz as i64
                                                    - pd as i64;
                                                let iy = oy as i64 * stride as i64 + ky as i64
                                                    - ph as i64;
                                                let ix = ox as i64 * stride as i64 + kx as i64
                                                    - pw as i64;
                                                if iz < 0
                                                    || iy < 0
                                                    || ix < 0
                                                    || iz >= d as i64
                                                    || iy >= h as i64
                                                    || ix >= wd as i64
                                                {
                                                    continue;
                                                }
                                                acc += x.at(
                                                    ni,
                                                    ic,
                                                    iz as usize,
                                                    iy as usize,
                                                    ix as usize,
                                                ) * w.at(c, ic, kz, ky, kx);
                                            }
                                        }
                                    }
                                }
                                let got = y.at(ni, c, oz, oy, ox);
                                assert!(
                                    (got - acc).abs() < 1e-9,
                                    "stride {stride} at ({ni},{c},{oz},{oy},{ox}): {got} vs {acc}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_repeat_blocks() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2, 2], (1..=8).map(|i| i as f32).collect())
            .unwrap();
        let y = upsample_repeat_forward(&x, 2);
        assert_eq!(y.shape(), [1, 1, 4, 4, 4]);
        for z in 0..4 {
            for yy in 0..4 {
                for xx in 0..4 {
                    assert_eq!(y.at(0, 0, z, yy, xx), x.at(0, 0, z / 2, yy / 2, xx / 2));
                }
            }
        }
        assert_eq!(upsample_repeat_forward(&x, 1).data(), x.data());

        let gout = Tensor::<f32>::filled([1, 1, 4, 4, 4], 1.0);
        let gx = upsample_repeat_backward([1, 1, 2, 2, 2], 2, &gout);
        assert!(gx.data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = leaky_relu_forward(&x, 0.01);
        assert_eq!(y.data(), &[-0.01, 0.0, 2.0]);
        let g = leaky_relu_backward(&x, 0.01, &Tensor::filled([1, 1, 1, 1, 3], 1.0));
        assert_eq!(g.data(), &[0.01, 1.0, 1.0]); // grad 1 at x = 0
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let x = Tensor::<f32>::filled([1, 2, 2, 2, 2], 5.0);
        let (y, _) = instance_norm_forward(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        for &v in y.data() {
            assert!(v.abs() < 1e-4);
        }
    }

    #[test]
    fn instance_norm_standardizes() {
        let mut rng = Rng::from_seed(2);
        let data: Vec<f64> = (0..2 * 3 * 64).map(|_| rng.uniform(-3.0, 7.0)).collect();
        let x = Tensor::from_vec([2, 3, 4, 4, 4], data).unwrap();
        let (y, _) = instance_norm_forward(&x, &[1.0; 3], &[0.0; 3], 1e-9);
        let m = y.spatial();
        for i in 0..6 {
            let ys = &y.data()[i * m..(i + 1) * m];
            let mean: f64 = ys.iter().sum::<f64>() / m as f64;
            let var: f64 = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::<f32>::filled([1, 1, 4, 4, 4], 2.0);
        let mut rng = Rng::from_seed(0);
        let (y, keep) = dropout_forward(&x, 0.0, &mut rng, true);
        assert_eq!(y.data(), x.data());
        assert!(keep.is_empty());
        let (y, _) = dropout_forward(&x, 0.5, &mut rng, false);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dropout_survivor_statistics() {
        let x = Tensor::<f64>::filled([1, 1, 100, 100, 10], 1.0);
        let mut rng = Rng::from_seed(9);
        let (y, keep) = dropout_forward(&x, 0.3, &mut rng, true);
        let survivors = keep.iter().filter(|&&k| k).count() as f64 / keep.len() as f64;
        assert!((survivors - 0.7).abs() < 0.01, "survivor fraction {survivors}");
        let mean: f64 = y.data().iter().sum::<f64>() / y.numel() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn max_pool_values_and_tie_routing() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2, 2], (1..=8).map(|i| i as f32).collect())
            .unwrap();
        let (y, am) = global_max_pool_forward(&x);
        assert_eq!(y.data(), &[8.0]);
        assert_eq!(am, vec![7]);

        let x = Tensor::<f32>::filled([1, 1, 2, 2, 2], 3.0);
        let (y, am) = global_max_pool_forward(&x);
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(am, vec![0]); // first voxel on ties
        let gx = global_max_pool_backward([1, 1, 2, 2, 2], &am, &Tensor::filled([1, 1, 1, 1, 1], 2.0));
        assert_eq!(gx.data()[0], 2.0);
        assert!(gx.data()[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_identity_and_constant() {
        let x = Tensor::<f32>::from_vec([1, 3, 1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let mut eye = Tensor::zeros([3, 3, 1, 1, 1]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let y = dense_forward(&x, &eye, &[0.0; 3]).unwrap();
        assert_eq!(y.data(), x.data());

        let zero = Tensor::zeros([2, 3, 1, 1, 1]);
        let y = dense_forward(&x, &zero, &[4.0, 5.0]).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0]);
    }

    #[test]
    fn sigmoid_and_softmax_basics() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 1, 1], vec![0.0]).unwrap();
        assert_eq!(sigmoid_forward(&x).data(), &[0.5]);

        let x = Tensor::<f64>::filled([1, 3, 1, 1, 2], 1.7);
        let y = softmax_channels_forward(&x);
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let mut rng = Rng::from_seed(4);
        let data: Vec<f64> = (0..3 * 8).map(|_| rng.uniform(-4.0, 4.0)).collect();
        let x = Tensor::from_vec([1, 3, 2, 2, 2], data).unwrap();
        let y = softmax_channels_forward(&x);
        let m = y.spatial();
        for sp in 0..m {
            let s: f64 = (0..3).map(|c| y.data()[c * m + sp]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_and_split_round_trip() {
        let a = Tensor::<f32>::from_vec([1, 2, 1, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f32>::from_vec([1, 1, 1, 1, 2], vec![5., 6.]).unwrap();
        let y = concat_channels_forward(&a, &b).unwrap();
        assert_eq!(y.data(), &[1., 2., 3., 4., 5., 6.]);
        let (ga, gb) = concat_channels_backward(2, 1, &y);
        assert_eq!(ga.data(), a.data());
        assert_eq!(gb.data(), b.data());
    }
}
