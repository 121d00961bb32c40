use super::{gemm, shape_err, NeuralError, Tensor};

fn check(input: &[f64], batch: usize, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize), NeuralError> {
    let &[out, inp] = weight.shape() else {
        return shape_err(format!("dense weight must be 2-D, found {:?}", weight.shape()));
    };
    bias.expect_shape("dense bias", &[out])?;
    if input.len() != batch * inp {
        return shape_err(format!("dense input has {} values, expected {batch}×{inp}", input.len()));
    }
    Ok((out, inp))
}

/// `y = x·Wᵀ + b` for `batch` rows of `x`; `weight` is out×in.
pub fn dense_forward(input: &[f64], batch: usize, weight: &Tensor, bias: &Tensor) -> Result<Vec<f64>, NeuralError> {
    let (out, inp) = check(input, batch, weight, bias)?;
    let mut y = Vec::with_capacity(batch * out);
    for _ in 0..batch {
        y.extend_from_slice(bias.values());
    }
    gemm(batch, inp, out, input, false, weight.values(), true, 1.0, &mut y);
    Ok(y)
}

/// Accumulates weight and bias gradients; returns the input gradient.
pub fn dense_backward(
    input: &[f64],
    grad_out: &[f64],
    batch: usize,
    weight: &Tensor,
    grad_weight: &mut Tensor,
    grad_bias: &mut Tensor,
) -> Result<Vec<f64>, NeuralError> {
    let (out, inp) = check(input, batch, weight, grad_bias)?;
    grad_weight.expect_shape("dense weight gradient", weight.shape())?;
    if grad_out.len() != batch * out {
        return shape_err(format!("dense output gradient has {} values, expected {batch}×{out}", grad_out.len()));
    }
    gemm(out, batch, inp, grad_out, true, input, false, 1.0, grad_weight.values_mut());
    let gb = grad_bias.values_mut();
    for row in grad_out.chunks_exact(out) {
        for (g, &d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
    let mut grad_in = vec![0.0; batch * inp];
    gemm(batch, out, inp, grad_out, false, weight.values(), false, 0.0, &mut grad_in);
    Ok(grad_in)
}
