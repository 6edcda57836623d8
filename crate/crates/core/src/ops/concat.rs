//! Channel concatenation of two `[N, C, H, W]` tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape("concat_channels", a.shape(), b.shape()));
    }
    let plane = ha * wa;
    let mut out = Tensor::zeros(&[na, ca + cb, ha, wa]);
    for item in 0..na {
        let dst = &mut out.data_mut()[item * (ca + cb) * plane..][..(ca + cb) * plane];
        dst[..ca * plane].copy_from_slice(&a.data()[item * ca * plane..][..ca * plane]);
        dst[ca * plane..].copy_from_slice(&b.data()[item * cb * plane..][..cb * plane]);
    }
    Ok(out)
}

/// Backward: split the upstream gradient at the channel boundary.
pub fn concat_channels_backward(
    grad_out: &Tensor,
    ca: usize,
    cb: usize,
) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = grad_out.dims4()?;
    debug_assert_eq!(c, ca + cb);
    let plane = h * w;
    let mut ga = Tensor::zeros(&[n, ca, h, w]);
    let mut gb = Tensor::zeros(&[n, cb, h, w]);
    for item in 0..n {
        let src = &grad_out.data()[item * c * plane..][..c * plane];
        ga.data_mut()[item * ca * plane..][..ca * plane].copy_from_slice(&src[..ca * plane]);
        gb.data_mut()[item * cb * plane..][..cb * plane].copy_from_slice(&src[ca * plane..]);
    }
    Ok((ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_roundtrip() {
        let a = Tensor::from_fn(&[1, 64, 8, 8], |i| i as f32);
        let b = Tensor::from_fn(&[1, 1, 8, 8], |i| -(i as f32));
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), &[1, 65, 8, 8]);
        let (ra, rb) = concat_channels_backward(&cat, 64, 1).unwrap();
        assert_eq!(ra.data(), a.data());
        assert_eq!(rb.data(), b.data());
    }

    #[test]
    fn zero_inputs_give_zero() {
        let z = concat_channels(&Tensor::zeros(&[2, 3, 4, 4]), &Tensor::zeros(&[2, 2, 4, 4]))
            .unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_mismatch_errors() {
        let a = Tensor::zeros(&[1, 1, 4, 4]);
        let b = Tensor::zeros(&[1, 1, 5, 4]);
        assert!(concat_channels(&a, &b).is_err());
    }
}
