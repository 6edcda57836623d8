//! Size-preserving 2x2 average pooling.
//!
//! Window anchored at each output pixel, stride 1; edge windows average only
//! the in-bounds cells, so the spatial shape never changes and the doubling
//! schedule of the transposed-conv chain is preserved.

use crate::error::Result;
use crate::tensor::Tensor;

pub fn avgpool2d(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let mut out = Tensor::zeros(input.shape());
    for plane_idx in 0..n * c {
        let src = &input.data()[plane_idx * h * w..][..h * w];
        let dst = &mut out.data_mut()[plane_idx * h * w..][..h * w];
        for y in 0..h {
            let y1 = (y + 1).min(h - 1);
            for x in 0..w {
                let x1 = (x + 1).min(w - 1);
                let (mut sum, mut cnt) = (src[y * w + x], 1.0f32);
                if x1 > x {
                    sum += src[y * w + x1];
                    cnt += 1.0;
                }
                if y1 > y {
                    sum += src[y1 * w + x];
                    cnt += 1.0;
                    if x1 > x {
                        sum += src[y1 * w + x1];
                        cnt += 1.0;
                    }
                }
                dst[y * w + x] = sum / cnt;
            }
        }
    }
    Ok(out)
}

pub fn avgpool2d_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let mut grad_in = Tensor::zeros(input.shape());
    for plane_idx in 0..n * c {
        let gout = &grad_out.data()[plane_idx * h * w..][..h * w];
        let gin = &mut grad_in.data_mut()[plane_idx * h * w..][..h * w];
        for y in 0..h {
            let ys: &[usize] = if y + 1 < h { &[0, 1] } else { &[0] };
            for x in 0..w {
                let xs: &[usize] = if x + 1 < w { &[0, 1] } else { &[0] };
                let share = gout[y * w + x] / (ys.len() * xs.len()) as f32;
                for &dy in ys {
                    for &dx in xs {
                        gin[(y + dy) * w + (x + dx)] += share;
                    }
                }
            }
        }
    }
    Ok(grad_in)
}
