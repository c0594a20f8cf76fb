use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Gradient of ReLU given its forward output.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if output.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            left: output.shape().to_vec(),
            right: grad_out.shape().to_vec(),
        });
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

/// Softmax over every element of the tensor, shape preserved.
pub fn softmax(input: &Tensor) -> Tensor {
    let max = input.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = input.data().iter().map(|&x| ((x - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::new(
        input.shape().to_vec(),
        exps.iter().map(|e| (e / sum) as f32).collect(),
    )
    .expect("shape preserved")
}
