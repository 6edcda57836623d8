//! 2D convolution and transposed convolution, im2col + sgemm.
//!
//! Layouts: activations are `[N, C, H, W]`, kernels are
//! `[outC, inC, kH, kW]`, all row-major f32.
//!
//! "Same" padding follows the ceil(H/s) convention with the extra pad row or
//! column on the bottom/right, so 128 -> 64 -> 32 -> 16 under stride 2 is
//! exact. `conv_transpose2d` is the adjoint of the stride-s same-padded
//! convolution and therefore produces exactly `stride * H` outputs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights and bias of one convolution (or transposed convolution) layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerParams {
    /// `[outC, inC, kH, kW]`
    pub kernels: Tensor,
    /// `[outC]`
    pub bias: Tensor,
}

impl ConvLayerParams {
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.kernels.shape();
        (s[0], s[1], s[2], s[3])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// (out_size, pad_top/left) for one spatial axis.
fn pad_geometry(size: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(size);
            (out, total / 2)
        }
        Padding::Valid => ((size - k) / stride + 1, 0),
    }
}

/// Row-major sgemm helper (`c = a*b + beta*c`) with explicit strides so the
/// same call handles transposed operands without copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one `[C, H, W]` item into `[C*k*k, outH*outW]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: (usize, usize),
    out_h: usize,
    out_w: usize,
    cols: &mut [f32],
) {
    let l = out_h * out_w;
    debug_assert_eq!(cols.len(), c * k * k * l);
    cols.fill(0.0);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = &mut cols[(ch * k * k + dy * k + dx) * l..][..l];
                for oy in 0..out_h {
                    let iy = (oy * stride + dy) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * out_w..][..out_w];
                    for ox in 0..out_w {
                        let ix = (ox * stride + dx) as isize - pad.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[C, H, W]` item.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: (usize, usize),
    out_h: usize,
    out_w: usize,
    output: &mut [f32],
) {
    let l = out_h * out_w;
    for ch in 0..c {
        let plane = &mut output[ch * h * w..(ch + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = &cols[(ch * k * k + dy * k + dx) * l..][..l];
                for oy in 0..out_h {
                    let iy = (oy * stride + dy) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * out_w..][..out_w];
                    for ox in 0..out_w {
                        let ix = (ox * stride + dx) as isize - pad.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_channels(context: &str, params: &ConvLayerParams, c: usize) -> Result<()> {
    let (_, in_c, kh, kw) = params.shape();
    if in_c != c {
        return Err(Error::shape(
            format!("{context}: input channels vs kernel channels"),
            &[in_c, kh, kw],
            &[c, kh, kw],
        ));
    }
    Ok(())
}

/// Cross-correlation plus per-channel bias.
pub fn conv2d(
    input: &Tensor,
    params: &ConvLayerParams,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    check_channels("conv2d", params, c)?;
    let (f, _, kh, _) = params.shape();
    let k = kh;
    let (out_h, pad_y) = pad_geometry(h, k, stride, padding);
    let (out_w, pad_x) = pad_geometry(w, k, stride, padding);
    let l = out_h * out_w;
    let ckk = c * k * k;

    let mut out = Tensor::zeros(&[n, f, out_h, out_w]);
    let mut cols = vec![0.0f32; ckk * l];
    let wmat = params.kernels.data();
    for item in 0..n {
        im2col(
            &input.data()[item * c * h * w..][..c * h * w],
            c,
            h,
            w,
            k,
            stride,
            (pad_y, pad_x),
            out_h,
            out_w,
            &mut cols,
        );
        let dst = &mut out.data_mut()[item * f * l..][..f * l];
        gemm(f, ckk, l, wmat, ckk as isize, 1, &cols, l as isize, 1, 0.0, dst);
        for oc in 0..f {
            let b = params.bias[oc];
            if b != 0.0 {
                for v in &mut dst[oc * l..][..l] {
                    *v += b;
                }
            }
        }
    }
    Ok(out)
}

/// VJP of [`conv2d`]: gradients for the input, kernels, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    params: &ConvLayerParams,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = input.dims4()?;
    let (f, _, k, _) = params.shape();
    let (out_h, pad_y) = pad_geometry(h, k, stride, padding);
    let (out_w, pad_x) = pad_geometry(w, k, stride, padding);
    let l = out_h * out_w;
    let ckk = c * k * k;

    let mut grad_input = Tensor::zeros(&[n, c, h, w]);
    let mut grad_w = Tensor::zeros(params.kernels.shape());
    let mut grad_b = Tensor::zeros(&[f]);
    let mut cols = vec![0.0f32; ckk * l];
    let mut gcols = vec![0.0f32; ckk * l];
    let wmat = params.kernels.data();

    for item in 0..n {
        let gout = &grad_out.data()[item * f * l..][..f * l];
        // input gradient: cols_grad = W^T * gout, then fold back
        gemm(ckk, f, l, wmat, 1, ckk as isize, gout, l as isize, 1, 0.0, &mut gcols);
        col2im(
            &gcols,
            c,
            h,
            w,
            k,
            stride,
            (pad_y, pad_x),
            out_h,
            out_w,
            &mut grad_input.data_mut()[item * c * h * w..][..c * h * w],
        );
        // weight gradient: gout * cols^T, accumulated over the batch
        im2col(
            &input.data()[item * c * h * w..][..c * h * w],
            c,
            h,
            w,
            k,
            stride,
            (pad_y, pad_x),
            out_h,
            out_w,
            &mut cols,
        );
        gemm(
            f,
            l,
            ckk,
            gout,
            l as isize,
            1,
            &cols,
            1,
            l as isize,
            1.0,
            grad_w.data_mut(),
        );
        for oc in 0..f {
            grad_b[oc] += gout[oc * l..][..l].iter().sum::<f32>();
        }
    }
    Ok((grad_input, grad_w, grad_b))
}

/// Transposed convolution: adjoint of the stride-s same-padded [`conv2d`],
/// so spatial dims grow exactly `stride`-fold. Kernels are
/// `[outC, inC, k, k]` with `inC` matching the input.
pub fn conv_transpose2d(
    input: &Tensor,
    params: &ConvLayerParams,
    stride: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    check_channels("conv_transpose2d", params, c)?;
    let (g, _, k, _) = params.shape();
    let big_h = h * stride;
    let big_w = w * stride;
    let (oh, pad_y) = pad_geometry(big_h, k, stride, Padding::Same);
    let (ow, pad_x) = pad_geometry(big_w, k, stride, Padding::Same);
    debug_assert_eq!((oh, ow), (h, w));
    let l = h * w;
    let gkk = g * k * k;

    // Virtual forward conv maps [G, big] -> [C, small] with weight
    // V[c, g, dy, dx] = kernels[g, c, dy, dx]; we apply its transpose.
    let mut vmat = vec![0.0f32; c * gkk];
    {
        let kern = params.kernels.data();
        for gc in 0..g {
            for ic in 0..c {
                for d in 0..k * k {
                    vmat[ic * gkk + gc * k * k + d] = kern[(gc * c + ic) * k * k + d];
                }
            }
        }
    }

    let mut out = Tensor::zeros(&[n, g, big_h, big_w]);
    let mut gcols = vec![0.0f32; gkk * l];
    for item in 0..n {
        let src = &input.data()[item * c * l..][..c * l];
        gemm(gkk, c, l, &vmat, 1, gkk as isize, src, l as isize, 1, 0.0, &mut gcols);
        let dst = &mut out.data_mut()[item * g * big_h * big_w..][..g * big_h * big_w];
        col2im(&gcols, g, big_h, big_w, k, stride, (pad_y, pad_x), h, w, dst);
        for oc in 0..g {
            let b = params.bias[oc];
            if b != 0.0 {
                for v in &mut dst[oc * big_h * big_w..][..big_h * big_w] {
                    *v += b;
                }
            }
        }
    }
    Ok(out)
}

/// VJP of [`conv_transpose2d`].
pub fn conv_transpose2d_backward(
    input: &Tensor,
    params: &ConvLayerParams,
    stride: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = input.dims4()?;
    let (g, _, k, _) = params.shape();
    let big_h = h * stride;
    let big_w = w * stride;
    let (_, pad_y) = pad_geometry(big_h, k, stride, Padding::Same);
    let (_, pad_x) = pad_geometry(big_w, k, stride, Padding::Same);
    let l = h * w;
    let gkk = g * k * k;

    let mut vmat = vec![0.0f32; c * gkk];
    {
        let kern = params.kernels.data();
        for gc in 0..g {
            for ic in 0..c {
                for d in 0..k * k {
                    vmat[ic * gkk + gc * k * k + d] = kern[(gc * c + ic) * k * k + d];
                }
            }
        }
    }

    let mut grad_input = Tensor::zeros(&[n, c, h, w]);
    let mut grad_v = vec![0.0f32; c * gkk];
    let mut grad_b = Tensor::zeros(&[g]);
    let mut cols = vec![0.0f32; gkk * l];

    for item in 0..n {
        let gout = &grad_out.data()[item * g * big_h * big_w..][..big_h * big_w * g];
        im2col(gout, g, big_h, big_w, k, stride, (pad_y, pad_x), h, w, &mut cols);
        // grad wrt input: V * im2col(gout)
        gemm(
            c,
            gkk,
            l,
            &vmat,
            gkk as isize,
            1,
            &cols,
            l as isize,
            1,
            0.0,
            &mut grad_input.data_mut()[item * c * l..][..c * l],
        );
        // grad wrt V: input * im2col(gout)^T
        let src = &input.data()[item * c * l..][..c * l];
        gemm(c, l, gkk, src, l as isize, 1, &cols, 1, l as isize, 1.0, &mut grad_v);
        for oc in 0..g {
            grad_b[oc] += gout[oc * big_h * big_w..][..big_h * big_w].iter().sum::<f32>();
        }
    }

    let mut grad_w = Tensor::zeros(params.kernels.shape());
    {
        let gw = grad_w.data_mut();
        for gc in 0..g {
            for ic in 0..c {
                for d in 0..k * k {
                    gw[(gc * c + ic) * k * k + d] = grad_v[ic * gkk + gc * k * k + d];
                }
            }
        }
    }
    Ok((grad_input, grad_w, grad_b))
}
