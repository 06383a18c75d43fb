//! Forward and backward kernels: 2-d convolution, max pooling, global average
//! pooling, fully connected, relu.
//!
//! Backward passes take the saved forward input explicitly and accumulate
//! parameter gradients additively into the layer's buffers. All loops run in
//! a fixed order so gradient accumulation is bit-reproducible.

use super::{LayerParams, Tensor};
use crate::error::{Error, Result};

/// Output extent along one axis for a kernel of size `k`: `None` when the
/// padded input is smaller than the kernel.
pub fn conv2d_output_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

fn conv_geometry(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if stride == 0 {
        return Err(Error::Shape("conv2d stride must be >= 1".into()));
    }
    let [c_in, h, w] = match *input.shape() {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::Shape(format!(
                "conv2d input must be [C, H, W], got {:?}",
                input.shape()
            )))
        }
    };
    let [o, wc, kh, kw] = match *params.weights.shape() {
        [o, c, kh, kw] => [o, c, kh, kw],
        _ => {
            return Err(Error::Shape(format!(
                "conv2d weights must be [O, C, K, K], got {:?}",
                params.weights.shape()
            )))
        }
    };
    if kh != kw {
        return Err(Error::Shape(format!("conv2d kernels must be square, got {kh}x{kw}")));
    }
    if wc != c_in {
        return Err(Error::Shape(format!(
            "conv2d layer '{}' expects {wc} input channels, got {c_in}",
            params.name
        )));
    }
    if params.bias.shape() != [o] {
        return Err(Error::Shape(format!(
            "conv2d layer '{}' bias must be [{o}], got {:?}",
            params.name,
            params.bias.shape()
        )));
    }
    let out_h = conv2d_output_extent(h, kh, stride, pad).ok_or_else(|| {
        Error::Shape(format!("conv2d input height {h} (+2*{pad} pad) smaller than kernel {kh}"))
    })?;
    let out_w = conv2d_output_extent(w, kw, stride, pad).ok_or_else(|| {
        Error::Shape(format!("conv2d input width {w} (+2*{pad} pad) smaller than kernel {kw}"))
    })?;
    Ok((c_in, h, w, o, kh, out_h, out_w))
}

/// Zero-padded 2-d convolution over a `[C, H, W]` input.
pub fn conv2d_forward(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (c_in, h, w, out_ch, k, out_h, out_w) = conv_geometry(input, params, stride, pad)?;
    let in_data = input.data();
    let w_data = params.weights.data();
    let b_data = params.bias.data();
    let mut out = vec![0.0; out_ch * out_h * out_w];
    for o in 0..out_ch {
        let w_base = o * c_in * k * k;
        for oy in 0..out_h {
            let y0 = (oy * stride) as isize - pad as isize;
            for ox in 0..out_w {
                let x0 = (ox * stride) as isize - pad as isize;
                let mut acc = b_data[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_data[(c * h + iy as usize) * w..][..w];
                        let w_row = &w_data[w_base + (c * k + ky) * k..][..k];
                        for (kx, &wv) in w_row.iter().enumerate() {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wv * in_row[ix as usize];
                        }
                    }
                }
                out[(o * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    let out = Tensor::from_parts(vec![out_ch, out_h, out_w], out);
    out.ensure_finite("conv2d_forward")?;
    Ok(out)
}

/// Backward pass of [`conv2d_forward`]: accumulates weight/bias gradients into
/// `params` and returns the gradient with respect to the input.
pub fn conv2d_backward(
    grad_out: &Tensor,
    saved_input: &Tensor,
    params: &mut LayerParams,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (c_in, h, w, out_ch, k, out_h, out_w) = conv_geometry(saved_input, params, stride, pad)?;
    if grad_out.shape() != [out_ch, out_h, out_w] {
        return Err(Error::State(format!(
            "conv2d_backward for layer '{}': grad shape {:?} does not match saved forward output [{out_ch}, {out_h}, {out_w}]",
            params.name,
            grad_out.shape()
        )));
    }
    let in_data = saved_input.data();
    let go = grad_out.data();
    let w_data = params.weights.data().to_vec();
    let gw = params.grad_weights.data_mut();
    let mut grad_in = vec![0.0; c_in * h * w];
    let mut grad_bias = vec![0.0; out_ch];
    for o in 0..out_ch {
        let w_base = o * c_in * k * k;
        for oy in 0..out_h {
            let y0 = (oy * stride) as isize - pad as isize;
            for ox in 0..out_w {
                let g = go[(o * out_h + oy) * out_w + ox];
                grad_bias[o] += g;
                let x0 = (ox * stride) as isize - pad as isize;
                for c in 0..c_in {
                    for ky in 0..k {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = (c * h + iy as usize) * w;
                        let w_row = w_base + (c * k + ky) * k;
                        for kx in 0..k {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gw[w_row + kx] += g * in_data[row + ix as usize];
                            grad_in[row + ix as usize] += g * w_data[w_row + kx];
                        }
                    }
                }
            }
        }
    }
    for (b, g) in params.grad_bias.data_mut().iter_mut().zip(&grad_bias) {
        *b += g;
    }
    let grad_in = Tensor::from_parts(vec![c_in, h, w], grad_in);
    grad_in.ensure_finite("conv2d_backward")?;
    Ok(grad_in)
}

/// Indices needed to route max-pool gradients back to the winning inputs.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// Max pooling over `[C, H, W]`; ties go to the first (row-major) maximum.
pub fn maxpool2d_forward(
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, MaxPoolCache)> {
    if window == 0 || stride == 0 {
        return Err(Error::Shape("maxpool window and stride must be >= 1".into()));
    }
    let [c_in, h, w] = match *input.shape() {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::Shape(format!(
                "maxpool input must be [C, H, W], got {:?}",
                input.shape()
            )))
        }
    };
    if h < window || w < window {
        return Err(Error::Shape(format!(
            "maxpool window {window} larger than input {h}x{w}"
        )));
    }
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let data = input.data();
    let mut out = vec![0.0; c_in * out_h * out_w];
    let mut argmax = vec![0usize; out.len()];
    for c in 0..c_in {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..window {
                    let iy = oy * stride + ky;
                    for kx in 0..window {
                        let ix = ox * stride + kx;
                        let idx = (c * h + iy) * w + ix;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let oidx = (c * out_h + oy) * out_w + ox;
                out[oidx] = best;
                argmax[oidx] = best_idx;
            }
        }
    }
    let out = Tensor::from_parts(vec![c_in, out_h, out_w], out);
    let cache = MaxPoolCache {
        in_shape: vec![c_in, h, w],
        out_shape: out.shape().to_vec(),
        argmax,
    };
    Ok((out, cache))
}

/// Scatters each output gradient back to the input element that won the max.
pub fn maxpool2d_backward(grad_out: &Tensor, cache: &MaxPoolCache) -> Result<Tensor> {
    if grad_out.shape() != cache.out_shape.as_slice() {
        return Err(Error::State(format!(
            "maxpool2d_backward: grad shape {:?} does not match pooled shape {:?}",
            grad_out.shape(),
            cache.out_shape
        )));
    }
    let mut grad_in = vec![0.0; cache.in_shape.iter().product()];
    for (g, &idx) in grad_out.data().iter().zip(&cache.argmax) {
        grad_in[idx] += g;
    }
    Ok(Tensor::from_parts(cache.in_shape.clone(), grad_in))
}

/// Collapses `[C, H, W]` to `[C]` by averaging each channel.
pub fn avgpool_global_forward(input: &Tensor) -> Result<Tensor> {
    let [c_in, h, w] = match *input.shape() {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::Shape(format!(
                "global avgpool input must be [C, H, W], got {:?}",
                input.shape()
            )))
        }
    };
    let plane = h * w;
    let data = input.data();
    let out: Vec<f64> = (0..c_in)
        .map(|c| data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor::from_parts(vec![c_in], out))
}

/// Spreads each channel gradient uniformly over the pooled plane.
pub fn avgpool_global_backward(grad_out: &Tensor, in_shape: &[usize]) -> Result<Tensor> {
    let [c_in, h, w] = match *in_shape {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::State(format!(
                "global avgpool backward needs a [C, H, W] forward shape, got {in_shape:?}"
            )))
        }
    };
    if grad_out.shape() != [c_in] {
        return Err(Error::State(format!(
            "global avgpool backward: grad shape {:?} does not match {c_in} channels",
            grad_out.shape()
        )));
    }
    let plane = h * w;
    let mut grad_in = vec![0.0; c_in * plane];
    for c in 0..c_in {
        let g = grad_out.data()[c] / plane as f64;
        grad_in[c * plane..(c + 1) * plane].fill(g);
    }
    Ok(Tensor::from_parts(in_shape.to_vec(), grad_in))
}

fn fc_geometry(input: &Tensor, params: &LayerParams) -> Result<(usize, usize)> {
    let d = match *input.shape() {
        [d] => d,
        _ => {
            return Err(Error::Shape(format!(
                "fc input must be a vector, got {:?}",
                input.shape()
            )))
        }
    };
    let [o, wd] = match *params.weights.shape() {
        [o, wd] => [o, wd],
        _ => {
            return Err(Error::Shape(format!(
                "fc weights must be [O, D], got {:?}",
                params.weights.shape()
            )))
        }
    };
    if wd != d {
        return Err(Error::Shape(format!(
            "fc layer '{}' expects input of length {wd}, got {d}",
            params.name
        )));
    }
    if params.bias.shape() != [o] {
        return Err(Error::Shape(format!(
            "fc layer '{}' bias must be [{o}], got {:?}",
            params.name,
            params.bias.shape()
        )));
    }
    Ok((o, d))
}

/// Affine map `out = W x + b` for a `[D]` input and `[O, D]` weights.
pub fn fc_forward(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (out_dim, d) = fc_geometry(input, params)?;
    let x = input.data();
    let wd = params.weights.data();
    let out: Vec<f64> = (0..out_dim)
        .map(|o| {
            params.bias.data()[o]
                + wd[o * d..(o + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect();
    let out = Tensor::from_parts(vec![out_dim], out);
    out.ensure_finite("fc_forward")?;
    Ok(out)
}

/// Backward pass of [`fc_forward`].
pub fn fc_backward(
    grad_out: &Tensor,
    saved_input: &Tensor,
    params: &mut LayerParams,
) -> Result<Tensor> {
    let (out_dim, d) = fc_geometry(saved_input, params)?;
    if grad_out.shape() != [out_dim] {
        return Err(Error::State(format!(
            "fc_backward for layer '{}': grad shape {:?} does not match output [{out_dim}]",
            params.name,
            grad_out.shape()
        )));
    }
    let x = saved_input.data();
    let go = grad_out.data();
    let w = params.weights.data().to_vec();
    let gw = params.grad_weights.data_mut();
    let mut grad_in = vec![0.0; d];
    for o in 0..out_dim {
        let g = go[o];
        for i in 0..d {
            gw[o * d + i] += g * x[i];
            grad_in[i] += g * w[o * d + i];
        }
    }
    for (b, g) in params.grad_bias.data_mut().iter_mut().zip(go) {
        *b += g;
    }
    let grad_in = Tensor::from_parts(vec![d], grad_in);
    grad_in.ensure_finite("fc_backward")?;
    Ok(grad_in)
}

/// Elementwise `max(0, x)`.
pub fn relu_forward(input: &Tensor) -> Tensor {
    Tensor::from_parts(
        input.shape().to_vec(),
        input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    )
}

/// Passes gradients through where the saved input was strictly positive.
pub fn relu_backward(grad_out: &Tensor, saved_input: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != saved_input.shape() {
        return Err(Error::State(format!(
            "relu_backward: grad shape {:?} does not match input shape {:?}",
            grad_out.shape(),
            saved_input.shape()
        )));
    }
    Ok(Tensor::from_parts(
        grad_out.shape().to_vec(),
        grad_out
            .data()
            .iter()
            .zip(saved_input.data())
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    ))
}
