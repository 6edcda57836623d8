//! Elementwise activations and their VJPs.

use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Gradient is 0 wherever the input was <= 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::from_fn(input.shape(), |i| if input[i] > 0.0 { grad_out[i] } else { 0.0 })
}

pub fn tanh(input: &Tensor) -> Tensor {
    input.map(f32::tanh)
}

/// VJP from the saved forward output: d tanh = 1 - y^2.
pub fn tanh_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::from_fn(output.shape(), |i| grad_out[i] * (1.0 - output[i] * output[i]))
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(|x| 1.0 / (1.0 + (-x).exp()))
}

/// VJP from the saved forward output: d sigmoid = y(1 - y).
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::from_fn(output.shape(), |i| grad_out[i] * output[i] * (1.0 - output[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_values() {
        let x = Tensor::new(&[4], vec![-1.0, 0.0, 2.0, 0.5]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0, 0.5]);
        assert_eq!(tanh(&Tensor::scalar(0.0)).item(), 0.0);
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).item(), 0.5);
    }

    #[test]
    fn sigmoid_symmetry() {
        for k in -8..=8 {
            let x = k as f32 * 0.7;
            let s = sigmoid(&Tensor::scalar(x)).item() + sigmoid(&Tensor::scalar(-x)).item();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn relu_grad_zero_on_negative() {
        let x = Tensor::new(&[3], vec![-2.0, -0.1, 3.0]).unwrap();
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }
}
