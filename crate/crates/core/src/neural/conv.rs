use super::{gemm, shape_err, NeuralError, Tensor};

/// Patch matrix kept from the forward pass.
#[derive(Debug, Clone)]
pub struct Conv2dCache {
    cols: Vec<f64>,
    batch: usize,
    c_in: usize,
    height: usize,
    width: usize,
}

fn dims(input: &[f64], batch: usize, height: usize, width: usize, kernels: &Tensor, bias: &Tensor) -> Result<(usize, usize), NeuralError> {
    let &[c_out, c_in, 3, 3] = kernels.shape() else {
        return shape_err(format!("conv kernels must be C_out×C_in×3×3, found {:?}", kernels.shape()));
    };
    bias.expect_shape("conv bias", &[c_out])?;
    if height == 0 || width == 0 {
        return shape_err("conv spatial size must be positive");
    }
    if input.len() != batch * c_in * height * width {
        return shape_err(format!(
            "conv input has {} values, expected {batch}×{c_in}×{height}×{width}",
            input.len()
        ));
    }
    Ok((c_out, c_in))
}

/// Rows (b, y, x), columns (c, ky, kx), zero padding 1.
fn im2col(input: &[f64], batch: usize, c_in: usize, h: usize, w: usize) -> Vec<f64> {
    let kk = c_in * 9;
    let mut cols = vec![0.0; batch * h * w * kk];
    for b in 0..batch {
        for c in 0..c_in {
            let plane = &input[(b * c_in + c) * h * w..][..h * w];
            for y in 0..h {
                for x in 0..w {
                    let row = &mut cols[((b * h + y) * w + x) * kk + c * 9..][..9];
                    for ky in 0..3 {
                        let sy = y + ky;
                        if sy == 0 || sy > h {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = x + kx;
                            if sx == 0 || sx > w {
                                continue;
                            }
                            row[ky * 3 + kx] = plane[(sy - 1) * w + sx - 1];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], batch: usize, c_in: usize, h: usize, w: usize) -> Vec<f64> {
    let kk = c_in * 9;
    let mut out = vec![0.0; batch * c_in * h * w];
    for b in 0..batch {
        for c in 0..c_in {
            let plane = &mut out[(b * c_in + c) * h * w..][..h * w];
            for y in 0..h {
                for x in 0..w {
                    let row = &cols[((b * h + y) * w + x) * kk + c * 9..][..9];
                    for ky in 0..3 {
                        let sy = y + ky;
                        if sy == 0 || sy > h {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = x + kx;
                            if sx == 0 || sx > w {
                                continue;
                            }
                            plane[(sy - 1) * w + sx - 1] += row[ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 3×3 cross-correlation, stride 1, zero padding 1. Input and output are
/// batch×C×H×W.
pub fn conv2d_forward(
    input: &[f64],
    batch: usize,
    height: usize,
    width: usize,
    kernels: &Tensor,
    bias: &Tensor,
) -> Result<(Vec<f64>, Conv2dCache), NeuralError> {
    let (c_out, c_in) = dims(input, batch, height, width, kernels, bias)?;
    let hw = height * width;
    let cols = im2col(input, batch, c_in, height, width);
    let mut rows = vec![0.0; batch * hw * c_out];
    gemm(batch * hw, c_in * 9, c_out, &cols, false, kernels.values(), true, 0.0, &mut rows);
    let mut out = vec![0.0; batch * c_out * hw];
    for b in 0..batch {
        for p in 0..hw {
            let r = &rows[(b * hw + p) * c_out..][..c_out];
            for (co, &v) in r.iter().enumerate() {
                out[(b * c_out + co) * hw + p] = v + bias.values()[co];
            }
        }
    }
    Ok((out, Conv2dCache { cols, batch, c_in, height, width }))
}

/// Accumulates kernel and bias gradients; returns the input gradient.
pub fn conv2d_backward(
    cache: &Conv2dCache,
    grad_out: &[f64],
    kernels: &Tensor,
    grad_kernels: &mut Tensor,
    grad_bias: &mut Tensor,
) -> Result<Vec<f64>, NeuralError> {
    let Conv2dCache { batch, c_in, height, width, .. } = *cache;
    let c_out = kernels.shape()[0];
    let hw = height * width;
    grad_kernels.expect_shape("conv kernel gradient", kernels.shape())?;
    grad_bias.expect_shape("conv bias gradient", &[c_out])?;
    if grad_out.len() != batch * c_out * hw {
        return shape_err("conv output gradient size mismatch");
    }
    let mut rows = vec![0.0; batch * hw * c_out];
    let gb = grad_bias.values_mut();
    for b in 0..batch {
        for co in 0..c_out {
            let plane = &grad_out[(b * c_out + co) * hw..][..hw];
            for (p, &g) in plane.iter().enumerate() {
                rows[(b * hw + p) * c_out + co] = g;
                gb[co] += g;
            }
        }
    }
    gemm(c_out, batch * hw, c_in * 9, &rows, true, &cache.cols, false, 1.0, grad_kernels.values_mut());
    let mut grad_cols = vec![0.0; batch * hw * c_in * 9];
    gemm(batch * hw, c_out, c_in * 9, &rows, false, kernels.values(), false, 0.0, &mut grad_cols);
    Ok(col2im(&grad_cols, batch, c_in, height, width))
}
