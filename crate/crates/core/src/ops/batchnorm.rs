//! Per-channel batch normalization over `[N, C, H, W]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learnable scale/shift plus running statistics for inference.
///
/// Running stats are bias-corrected exponential moving averages: the raw
/// accumulators start at zero and `updates` counts how many batches have been
/// folded in, so inference divides by `1 - momentum^updates` instead of
/// trusting a cold-start value.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f32,
    pub momentum: f32,
    pub updates: u64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::zeros(&[channels]),
            epsilon: 1e-3,
            momentum: 0.99,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Bias-corrected (mean, var) per channel; (0, 1) before any update.
    pub fn corrected_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let c = self.channels();
        if self.updates == 0 {
            return (vec![0.0; c], vec![1.0; c]);
        }
        let corr = 1.0 - (self.momentum as f64).powi(self.updates as i32) as f32;
        let mean = self.running_mean.data().iter().map(|m| m / corr).collect();
        let var = self.running_var.data().iter().map(|v| (v / corr).max(0.0)).collect();
        (mean, var)
    }
}

/// Forward-pass data saved for the train-mode backward.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

fn check_input(input: &Tensor, params: &BatchNormParams) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    if c != params.channels() {
        return Err(Error::shape("batchnorm channels", &[params.channels()], &[c]));
    }
    Ok((n, c, h, w))
}

/// Train mode: normalize by batch statistics and fold them into the running
/// averages. Errors when a channel has fewer than two elements.
pub fn batchnorm_train(
    input: &Tensor,
    params: &mut BatchNormParams,
) -> Result<(Tensor, BnCache)> {
    let (n, c, h, w) = check_input(input, params)?;
    let m = n * h * w;
    if m < 2 {
        return Err(Error::InvalidArgument(
            "batchnorm train mode needs at least 2 elements per channel".into(),
        ));
    }
    let plane = h * w;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for item in 0..n {
            let src = &input.data()[(item * c + ch) * plane..][..plane];
            sum += src.iter().map(|&x| x as f64).sum::<f64>();
        }
        let mu = sum / m as f64;
        let mut sq = 0.0f64;
        for item in 0..n {
            let src = &input.data()[(item * c + ch) * plane..][..plane];
            sq += src.iter().map(|&x| (x as f64 - mu) * (x as f64 - mu)).sum::<f64>();
        }
        mean[ch] = mu as f32;
        var[ch] = (sq / m as f64) as f32;
    }

    let mom = params.momentum;
    for ch in 0..c {
        params.running_mean[ch] = mom * params.running_mean[ch] + (1.0 - mom) * mean[ch];
        params.running_var[ch] = mom * params.running_var[ch] + (1.0 - mom) * var[ch];
    }
    params.updates += 1;

    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + params.epsilon).sqrt()).collect();
    let mut out = Tensor::zeros(input.shape());
    for item in 0..n {
        for ch in 0..c {
            let g = params.gamma[ch];
            let b = params.beta[ch];
            let (mu, is) = (mean[ch], inv_std[ch]);
            let src = &input.data()[(item * c + ch) * plane..][..plane];
            let dst = &mut out.data_mut()[(item * c + ch) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mu) * is * g + b;
            }
        }
    }
    Ok((out, BnCache { mean, inv_std }))
}

/// Infer mode: deterministic affine map from the running statistics.
pub fn batchnorm_infer(input: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    let (n, c, h, w) = check_input(input, params)?;
    let plane = h * w;
    let (mean, var) = params.corrected_stats();
    let mut out = Tensor::zeros(input.shape());
    for item in 0..n {
        for ch in 0..c {
            let is = 1.0 / (var[ch] + params.epsilon).sqrt();
            let g = params.gamma[ch];
            let b = params.beta[ch];
            let mu = mean[ch];
            let src = &input.data()[(item * c + ch) * plane..][..plane];
            let dst = &mut out.data_mut()[(item * c + ch) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mu) * is * g + b;
            }
        }
    }
    Ok(out)
}

/// VJP of [`batchnorm_train`]: gradients for input, gamma, beta.
pub fn batchnorm_train_backward(
    input: &Tensor,
    params: &BatchNormParams,
    cache: &BnCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let m = (n * plane) as f32;
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);

    for ch in 0..c {
        let (mu, is) = (cache.mean[ch], cache.inv_std[ch]);
        let g = params.gamma[ch];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for item in 0..n {
            let x = &input.data()[(item * c + ch) * plane..][..plane];
            let dy = &grad_out.data()[(item * c + ch) * plane..][..plane];
            for (&xv, &dv) in x.iter().zip(dy) {
                let xhat = (xv - mu) * is;
                sum_dy += dv as f64;
                sum_dy_xhat += (dv * xhat) as f64;
            }
        }
        grad_beta[ch] = sum_dy as f32;
        grad_gamma[ch] = sum_dy_xhat as f32;
        let mean_dy = sum_dy as f32 / m;
        let mean_dy_xhat = sum_dy_xhat as f32 / m;
        for item in 0..n {
            let x = &input.data()[(item * c + ch) * plane..][..plane];
            let dy = &grad_out.data()[(item * c + ch) * plane..][..plane];
            let dst = &mut grad_input.data_mut()[(item * c + ch) * plane..][..plane];
            for ((d, &xv), &dv) in dst.iter_mut().zip(x).zip(dy) {
                let xhat = (xv - mu) * is;
                *d = g * is * (dv - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}

/// VJP of [`batchnorm_infer`] (a fixed affine map).
pub fn batchnorm_infer_backward(
    input: &Tensor,
    params: &BatchNormParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let (mean, var) = params.corrected_stats();
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let is = 1.0 / (var[ch] + params.epsilon).sqrt();
        let g = params.gamma[ch];
        let mu = mean[ch];
        for item in 0..n {
            let x = &input.data()[(item * c + ch) * plane..][..plane];
            let dy = &grad_out.data()[(item * c + ch) * plane..][..plane];
            let dst = &mut grad_input.data_mut()[(item * c + ch) * plane..][..plane];
            for ((d, &xv), &dv) in dst.iter_mut().zip(x).zip(dy) {
                *d = dv * g * is;
                grad_gamma[ch] += dv * (xv - mu) * is;
                grad_beta[ch] += dv;
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}
