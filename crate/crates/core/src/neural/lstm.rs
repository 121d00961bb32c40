//! Single-layer LSTM with gate order (input, forget, candidate, output) and
//! full backpropagation through time. Sequences are time-major: row
//! `t·batch + b` of the input holds step `t` of sample `b`.

use super::ops::sigmoid;
use super::{gemm, shape_err, NeuralError, Tensor};

/// Borrowed LSTM weights: `w_input` is 4H×k, `w_hidden` 4H×H, `bias` 4H.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams<'a> {
    pub w_input: &'a Tensor,
    pub w_hidden: &'a Tensor,
    pub bias: &'a Tensor,
}

impl LstmParams<'_> {
    fn dims(&self) -> Result<(usize, usize), NeuralError> {
        let &[four_h, k] = self.w_input.shape() else {
            return shape_err(format!("LSTM input weights must be 2-D, found {:?}", self.w_input.shape()));
        };
        if four_h % 4 != 0 {
            return shape_err(format!("LSTM gate rows {four_h} not divisible by 4"));
        }
        let h = four_h / 4;
        self.w_hidden.expect_shape("LSTM hidden weights", &[four_h, h])?;
        self.bias.expect_shape("LSTM bias", &[four_h])?;
        Ok((k, h))
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    tau: usize,
    batch: usize,
    input_size: usize,
    hidden: usize,
    inputs: Vec<f64>,
    /// (τ+1)·B×H, entry 0 is the zero initial state.
    hs: Vec<f64>,
    cs: Vec<f64>,
    /// τ·B×4H activated gates.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

pub fn lstm_forward(
    inputs: &[f64],
    tau: usize,
    batch: usize,
    params: LstmParams<'_>,
) -> Result<(Vec<f64>, LstmCache), NeuralError> {
    let (k, h) = params.dims()?;
    if tau == 0 {
        return shape_err("LSTM sequence length must be ≥ 1");
    }
    if inputs.len() != tau * batch * k {
        return shape_err(format!("LSTM input has {} values, expected {tau}×{batch}×{k}", inputs.len()));
    }
    let g4 = 4 * h;
    let mut gates = Vec::with_capacity(tau * batch * g4);
    for _ in 0..tau * batch {
        gates.extend_from_slice(params.bias.values());
    }
    gemm(tau * batch, k, g4, inputs, false, params.w_input.values(), true, 1.0, &mut gates);

    let bh = batch * h;
    let mut hs = vec![0.0; (tau + 1) * bh];
    let mut cs = vec![0.0; (tau + 1) * bh];
    let mut tanh_c = vec![0.0; tau * bh];
    for t in 0..tau {
        let z = &mut gates[t * batch * g4..][..batch * g4];
        let (h_prev_all, h_next_all) = hs.split_at_mut((t + 1) * bh);
        let h_prev = &h_prev_all[t * bh..];
        gemm(batch, h, g4, h_prev, false, params.w_hidden.values(), true, 1.0, z);
        let h_next = &mut h_next_all[..bh];
        let (c_prev_all, c_next_all) = cs.split_at_mut((t + 1) * bh);
        let c_prev = &c_prev_all[t * bh..];
        let c_next = &mut c_next_all[..bh];
        let tc = &mut tanh_c[t * bh..][..bh];
        for b in 0..batch {
            let zr = &mut z[b * g4..][..g4];
            for j in 0..h {
                let i_g = sigmoid(zr[j]);
                let f_g = sigmoid(zr[h + j]);
                let g_g = zr[2 * h + j].tanh();
                let o_g = sigmoid(zr[3 * h + j]);
                zr[j] = i_g;
                zr[h + j] = f_g;
                zr[2 * h + j] = g_g;
                zr[3 * h + j] = o_g;
                let c = f_g * c_prev[b * h + j] + i_g * g_g;
                let t_c = c.tanh();
                c_next[b * h + j] = c;
                tc[b * h + j] = t_c;
                h_next[b * h + j] = o_g * t_c;
            }
        }
    }
    let h_final = hs[tau * bh..].to_vec();
    Ok((
        h_final,
        LstmCache { tau, batch, input_size: k, hidden: h, inputs: inputs.to_vec(), hs, cs, gates, tanh_c },
    ))
}

/// Backpropagates a gradient on the final hidden state through every step.
/// Accumulates into the gradient tensors and returns the input gradient
/// (time-major, same layout as the forward input).
pub fn lstm_backward(
    cache: &LstmCache,
    grad_h_final: &[f64],
    params: LstmParams<'_>,
    grad_w_input: &mut Tensor,
    grad_w_hidden: &mut Tensor,
    grad_bias: &mut Tensor,
) -> Result<Vec<f64>, NeuralError> {
    let LstmCache { tau, batch, input_size: k, hidden: h, .. } = *cache;
    let g4 = 4 * h;
    let bh = batch * h;
    if grad_h_final.len() != bh {
        return shape_err("LSTM hidden gradient size mismatch");
    }
    grad_w_input.expect_shape("LSTM input weight gradient", params.w_input.shape())?;
    grad_w_hidden.expect_shape("LSTM hidden weight gradient", params.w_hidden.shape())?;
    grad_bias.expect_shape("LSTM bias gradient", params.bias.shape())?;

    let mut dz_all = vec![0.0; tau * batch * g4];
    let mut dh = grad_h_final.to_vec();
    let mut dc = vec![0.0; bh];
    for t in (0..tau).rev() {
        let gates = &cache.gates[t * batch * g4..][..batch * g4];
        let c_prev = &cache.cs[t * bh..][..bh];
        let tc = &cache.tanh_c[t * bh..][..bh];
        let dz = &mut dz_all[t * batch * g4..][..batch * g4];
        for b in 0..batch {
            let gr = &gates[b * g4..][..g4];
            let dzr = &mut dz[b * g4..][..g4];
            for j in 0..h {
                let idx = b * h + j;
                let (i_g, f_g, g_g, o_g) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                let d_o = dh[idx] * tc[idx];
                let dcell = dc[idx] + dh[idx] * o_g * (1.0 - tc[idx] * tc[idx]);
                dzr[j] = dcell * g_g * i_g * (1.0 - i_g);
                dzr[h + j] = dcell * c_prev[idx] * f_g * (1.0 - f_g);
                dzr[2 * h + j] = dcell * i_g * (1.0 - g_g * g_g);
                dzr[3 * h + j] = d_o * o_g * (1.0 - o_g);
                dc[idx] = dcell * f_g;
            }
        }
        let h_prev = &cache.hs[t * bh..][..bh];
        gemm(g4, batch, h, dz, true, h_prev, false, 1.0, grad_w_hidden.values_mut());
        gemm(batch, g4, h, dz, false, params.w_hidden.values(), false, 0.0, &mut dh);
    }
    gemm(g4, tau * batch, k, &dz_all, true, &cache.inputs, false, 1.0, grad_w_input.values_mut());
    let gb = grad_bias.values_mut();
    for row in dz_all.chunks_exact(g4) {
        for (g, &d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
    let mut grad_in = vec![0.0; tau * batch * k];
    gemm(tau * batch, g4, k, &dz_all, false, params.w_input.values(), false, 0.0, &mut grad_in);
    Ok(grad_in)
}

/// Runs one sequence of `τ` input vectors from a zero state and returns the
/// last hidden state.
pub fn lstm_sequence(inputs: &[Vec<f64>], params: LstmParams<'_>) -> Result<Vec<f64>, NeuralError> {
    let flat: Vec<f64> = inputs.iter().flatten().copied().collect();
    if let Some(first) = inputs.first() {
        if inputs.iter().any(|v| v.len() != first.len()) {
            return shape_err("LSTM inputs have differing lengths");
        }
    }
    Ok(lstm_forward(&flat, inputs.len(), 1, params)?.0)
}
