//! Forward and adjoint kernels on plain tensors. Accumulation is sequential
//! in a fixed order, so results are bitwise reproducible.

use super::{Activation, ConvParams, Tensor};
use crate::error::{Error, Result};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Output indices `o` in `[start, end)` for which `o * stride + offset`
/// lands inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    // o * s + offset >= 0
    let start = if offset >= 0 {
        0
    } else {
        (-offset + s - 1) / s
    };
    // o * s + offset <= len - 1
    let last = len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let end = ((last / s) + 1).min(out_len as isize);
    let start = start.min(end);
    (start as usize, end as usize)
}

fn check_weights(
    op: &'static str,
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    p: &ConvParams,
    transposed: bool,
) -> Result<()> {
    p.validate()?;
    let [wa, wb, kh, kw] = weights.shape();
    let (w_out, w_in) = if transposed { (wb, wa) } else { (wa, wb) };
    if w_out != p.filters {
        return Err(Error::Dimension {
            op,
            axis: "filters",
            expected: p.filters,
            actual: w_out,
        });
    }
    if w_in != input.channels() {
        return Err(Error::Dimension {
            op,
            axis: "channel",
            expected: w_in,
            actual: input.channels(),
        });
    }
    if kh != p.kernel {
        return Err(Error::Dimension {
            op,
            axis: "kernel height",
            expected: p.kernel,
            actual: kh,
        });
    }
    if kw != p.kernel {
        return Err(Error::Dimension {
            op,
            axis: "kernel width",
            expected: p.kernel,
            actual: kw,
        });
    }
    if bias.len() != p.filters {
        return Err(Error::Dimension {
            op,
            axis: "bias",
            expected: p.filters,
            actual: bias.len(),
        });
    }
    Ok(())
}

fn spatial_out(
    op: &'static str,
    axis: &'static str,
    len: usize,
    out: Option<usize>,
) -> Result<usize> {
    out.ok_or(Error::Dimension {
        op,
        axis,
        expected: 1,
        actual: len,
    })
}

/// Cross-correlation with weights `(filters, in_channels, k, k)` and bias of
/// `filters` entries.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, p: &ConvParams) -> Result<Tensor> {
    check_weights("conv2d", input, weights, bias, p, false)?;
    let [n, c_in, h, w] = input.shape();
    let oh = spatial_out("conv2d", "height", h, p.conv_out(h))?;
    let ow = spatial_out("conv2d", "width", w, p.conv_out(w))?;
    let k = p.kernel;
    let (s, pad) = (p.stride, p.padding as isize);
    let mut out = Tensor::zeros([n, p.filters, oh, ow]);
    let wd = weights.data();
    let bd = bias.data();
    for b in 0..n {
        for f in 0..p.filters {
            let mut plane = vec![bd[f]; oh * ow];
            for c in 0..c_in {
                let src = input.plane(b, c);
                for ky in 0..k {
                    let (y0, y1) = valid_range(oh, h, s, ky as isize - pad);
                    for kx in 0..k {
                        let wv = wd[((f * c_in + c) * k + ky) * k + kx];
                        let offx = kx as isize - pad;
                        let (x0, x1) = valid_range(ow, w, s, offx);
                        for oy in y0..y1 {
                            let iy = (oy * s) as isize + ky as isize - pad;
                            let row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                dst[ox] += wv * row[((ox * s) as isize + offx) as usize];
                            }
                        }
                    }
                }
            }
            out.plane_mut(b, f).copy_from_slice(&plane);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    p: &ConvParams,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c_in, h, w] = input.shape();
    let [_, _, oh, ow] = grad_out.shape();
    let k = p.kernel;
    let (s, pad) = (p.stride, p.padding as isize);
    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weights.shape());
    let mut gb = Tensor::zeros([1, p.filters, 1, 1]);
    let wd = weights.data();
    for b in 0..n {
        for f in 0..p.filters {
            let gy = grad_out.plane(b, f);
            gb.data_mut()[f] += gy.iter().sum::<f64>();
            for c in 0..c_in {
                let src = input.plane(b, c);
                for ky in 0..k {
                    let (y0, y1) = valid_range(oh, h, s, ky as isize - pad);
                    for kx in 0..k {
                        let widx = ((f * c_in + c) * k + ky) * k + kx;
                        let wv = wd[widx];
                        let offx = kx as isize - pad;
                        let (x0, x1) = valid_range(ow, w, s, offx);
                        let mut acc = 0.0;
                        {
                            let gxp = gx.plane_mut(b, c);
                            for oy in y0..y1 {
                                let iy = ((oy * s) as isize + ky as isize - pad) as usize;
                                for ox in x0..x1 {
                                    let ix = ((ox * s) as isize + offx) as usize;
                                    let g = gy[oy * ow + ox];
                                    gxp[iy * w + ix] += wv * g;
                                    acc += g * src[iy * w + ix];
                                }
                            }
                        }
                        gw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Transposed convolution with weights `(in_channels, filters, k, k)`;
/// the adjoint of [`conv2d`] for the same weight array.
pub fn conv_transpose2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    p: &ConvParams,
) -> Result<Tensor> {
    check_weights("conv_transpose2d", input, weights, bias, p, true)?;
    let [n, c_in, h, w] = input.shape();
    let oh = spatial_out("conv_transpose2d", "height", h, p.deconv_out(h))?;
    let ow = spatial_out("conv_transpose2d", "width", w, p.deconv_out(w))?;
    let k = p.kernel;
    let (s, pad) = (p.stride, p.padding as isize);
    let f_out = p.filters;
    let mut out = Tensor::zeros([n, f_out, oh, ow]);
    let wd = weights.data();
    let bd = bias.data();
    for b in 0..n {
        for f in 0..f_out {
            let mut plane = vec![bd[f]; oh * ow];
            for c in 0..c_in {
                let src = input.plane(b, c);
                for ky in 0..k {
                    // iy * s + ky - pad in [0, oh)
                    let (y0, y1) = valid_range(h, oh, s, ky as isize - pad);
                    for kx in 0..k {
                        let wv = wd[((c * f_out + f) * k + ky) * k + kx];
                        let offx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, ow, s, offx);
                        for iy in y0..y1 {
                            let oy = ((iy * s) as isize + ky as isize - pad) as usize;
                            let row = &src[iy * w..(iy + 1) * w];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            for ix in x0..x1 {
                                dst[((ix * s) as isize + offx) as usize] += wv * row[ix];
                            }
                        }
                    }
                }
            }
            out.plane_mut(b, f).copy_from_slice(&plane);
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_backward(
    input: &Tensor,
    weights: &Tensor,
    p: &ConvParams,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c_in, h, w] = input.shape();
    let [_, f_out, oh, ow] = grad_out.shape();
    let k = p.kernel;
    let (s, pad) = (p.stride, p.padding as isize);
    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weights.shape());
    let mut gb = Tensor::zeros([1, f_out, 1, 1]);
    let wd = weights.data();
    for b in 0..n {
        for f in 0..f_out {
            let gy = grad_out.plane(b, f);
            gb.data_mut()[f] += gy.iter().sum::<f64>();
            for c in 0..c_in {
                let src = input.plane(b, c);
                for ky in 0..k {
                    let (y0, y1) = valid_range(h, oh, s, ky as isize - pad);
                    for kx in 0..k {
                        let widx = ((c * f_out + f) * k + ky) * k + kx;
                        let wv = wd[widx];
                        let offx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, ow, s, offx);
                        let mut acc = 0.0;
                        {
                            let gxp = gx.plane_mut(b, c);
                            for iy in y0..y1 {
                                let oy = ((iy * s) as isize + ky as isize - pad) as usize;
                                for ix in x0..x1 {
                                    let ox = ((ix * s) as isize + offx) as usize;
                                    let g = gy[oy * ow + ox];
                                    gxp[iy * w + ix] += wv * g;
                                    acc += g * src[iy * w + ix];
                                }
                            }
                        }
                        gw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Per-plane standardisation. Returns the output and `1/sqrt(var + eps)` per
/// `(n, c)` plane, which the adjoint reuses.
pub fn instance_norm_with_stats(input: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    if eps <= 0.0 {
        return Err(Error::invalid("instance_norm eps must be positive"));
    }
    let hw = input.plane_len();
    if hw == 0 {
        return Err(Error::Dimension {
            op: "instance_norm",
            axis: "height*width",
            expected: 1,
            actual: 0,
        });
    }
    let [n, c, _, _] = input.shape();
    let mut out = Tensor::zeros(input.shape());
    let mut inv_std = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, v) in out.plane_mut(b, ch).iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
    }
    Ok((out, inv_std))
}

pub fn instance_norm(input: &Tensor, eps: f64) -> Result<Tensor> {
    instance_norm_with_stats(input, eps).map(|(y, _)| y)
}

/// `dx = inv_std * (dy - mean(dy) - y * mean(dy * y))` per plane.
pub fn instance_norm_backward(output: &Tensor, inv_std: &[f64], grad_out: &Tensor) -> Tensor {
    let [n, c, _, _] = output.shape();
    let hw = output.plane_len() as f64;
    let mut gx = Tensor::zeros(output.shape());
    for b in 0..n {
        for ch in 0..c {
            let y = output.plane(b, ch);
            let gy = grad_out.plane(b, ch);
            let mean_g = gy.iter().sum::<f64>() / hw;
            let mean_gy = gy.iter().zip(y).map(|(g, v)| g * v).sum::<f64>() / hw;
            let is = inv_std[b * c + ch];
            for ((o, g), v) in gx.plane_mut(b, ch).iter_mut().zip(gy).zip(y) {
                *o = is * (g - mean_g - v * mean_gy);
            }
        }
    }
    gx
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    input.map(|v| kind.apply(v))
}
