//! Fused single-layer LSTM with full backpropagation through time.
//!
//! Gate layout in the stacked weights is `[input, forget, cell, output]`,
//! each block `hidden` rows tall.

use crate::kernels::{matmul_nn_acc, matmul_nt, matmul_tn_acc};

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations kept from the forward pass for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct LstmCache {
    /// Post-activation gates, `[time, batch, 4 * hidden]`.
    gates: Vec<f64>,
    /// Cell states, `[time, batch, hidden]`.
    cells: Vec<f64>,
    /// Hidden states, `[time, batch, hidden]`.
    hiddens: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmDims {
    pub batch: usize,
    pub time: usize,
    pub input: usize,
    pub hidden: usize,
}

/// Runs the layer over `x` laid out `[batch, time, input]`; returns
/// `[batch, time, hidden]` outputs and the cache.
pub fn lstm_forward(d: LstmDims, x: &[f64], w_ih: &[f64], w_hh: &[f64], bias: &[f64]) -> (Vec<f64>, LstmCache) {
    let LstmDims { batch, time, input, hidden } = d;
    let g4 = 4 * hidden;
    // Input contribution for every (batch, time) row at once.
    let mut pre_x = vec![0.0; batch * time * g4];
    matmul_nt(x, w_ih, batch * time, input, g4, &mut pre_x);

    let mut cache = LstmCache {
        gates: vec![0.0; time * batch * g4],
        cells: vec![0.0; time * batch * hidden],
        hiddens: vec![0.0; time * batch * hidden],
    };
    let mut out = vec![0.0; batch * time * hidden];
    let mut rec = vec![0.0; batch * g4];
    let zeros = vec![0.0; batch * hidden];

    for t in 0..time {
        let h_prev: &[f64] = if t == 0 { &zeros } else { &cache.hiddens[(t - 1) * batch * hidden..t * batch * hidden] };
        matmul_nt(h_prev, w_hh, batch, hidden, g4, &mut rec);
        let (done, rest) = cache.cells.split_at_mut(t * batch * hidden);
        let c_prev: &[f64] = if t == 0 { &zeros } else { &done[(t - 1) * batch * hidden..] };
        let c_now = &mut rest[..batch * hidden];
        let gates = &mut cache.gates[t * batch * g4..(t + 1) * batch * g4];
        let h_now = &mut cache.hiddens[t * batch * hidden..(t + 1) * batch * hidden];
        for b in 0..batch {
            let px = &pre_x[(b * time + t) * g4..(b * time + t + 1) * g4];
            let pr = &rec[b * g4..(b + 1) * g4];
            let gb = &mut gates[b * g4..(b + 1) * g4];
            for j in 0..hidden {
                let i_g = sigmoid(px[j] + pr[j] + bias[j]);
                let f_g = sigmoid(px[hidden + j] + pr[hidden + j] + bias[hidden + j]);
                let c_g = (px[2 * hidden + j] + pr[2 * hidden + j] + bias[2 * hidden + j]).tanh();
                let o_g = sigmoid(px[3 * hidden + j] + pr[3 * hidden + j] + bias[3 * hidden + j]);
                gb[j] = i_g;
                gb[hidden + j] = f_g;
                gb[2 * hidden + j] = c_g;
                gb[3 * hidden + j] = o_g;
                let c = f_g * c_prev[b * hidden + j] + i_g * c_g;
                c_now[b * hidden + j] = c;
                let h = o_g * c.tanh();
                h_now[b * hidden + j] = h;
                out[(b * time + t) * hidden + j] = h;
            }
        }
    }
    (out, cache)
}

pub struct LstmGrads {
    pub x: Vec<f64>,
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn lstm_backward(
    d: LstmDims,
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    cache: &LstmCache,
    grad_out: &[f64],
) -> LstmGrads {
    let LstmDims { batch, time, input, hidden } = d;
    let g4 = 4 * hidden;
    let mut dpre = vec![0.0; batch * time * g4];
    let mut dw_hh = vec![0.0; g4 * hidden];
    let mut dbias = vec![0.0; g4];
    let mut dh_next = vec![0.0; batch * hidden];
    let mut dc_next = vec![0.0; batch * hidden];
    let mut da = vec![0.0; batch * g4];
    let zeros = vec![0.0; batch * hidden];

    for t in (0..time).rev() {
        let gates = &cache.gates[t * batch * g4..(t + 1) * batch * g4];
        let c_now = &cache.cells[t * batch * hidden..(t + 1) * batch * hidden];
        let c_prev: &[f64] = if t == 0 { &zeros } else { &cache.cells[(t - 1) * batch * hidden..t * batch * hidden] };
        for b in 0..batch {
            let gb = &gates[b * g4..(b + 1) * g4];
            let dab = &mut da[b * g4..(b + 1) * g4];
            for j in 0..hidden {
                let (i_g, f_g, c_g, o_g) = (gb[j], gb[hidden + j], gb[2 * hidden + j], gb[3 * hidden + j]);
                let dh = grad_out[(b * time + t) * hidden + j] + dh_next[b * hidden + j];
                let tc = c_now[b * hidden + j].tanh();
                let d_o = dh * tc;
                let dc = dh * o_g * (1.0 - tc * tc) + dc_next[b * hidden + j];
                let d_i = dc * c_g;
                let d_c = dc * i_g;
                let d_f = dc * c_prev[b * hidden + j];
                dc_next[b * hidden + j] = dc * f_g;
                dab[j] = d_i * i_g * (1.0 - i_g);
                dab[hidden + j] = d_f * f_g * (1.0 - f_g);
                dab[2 * hidden + j] = d_c * (1.0 - c_g * c_g);
                dab[3 * hidden + j] = d_o * o_g * (1.0 - o_g);
            }
        }
        for b in 0..batch {
            for k in 0..g4 {
                let v = da[b * g4 + k];
                dbias[k] += v;
                dpre[(b * time + t) * g4 + k] = v;
            }
        }
        if t > 0 {
            let h_prev = &cache.hiddens[(t - 1) * batch * hidden..t * batch * hidden];
            matmul_tn_acc(&da, h_prev, batch, g4, hidden, &mut dw_hh);
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        matmul_nn_acc(&da, w_hh, batch, g4, hidden, &mut dh_next);
    }

    let mut dx = vec![0.0; batch * time * input];
    matmul_nn_acc(&dpre, w_ih, batch * time, g4, input, &mut dx);
    let mut dw_ih = vec![0.0; g4 * input];
    matmul_tn_acc(&dpre, x, batch * time, g4, input, &mut dw_ih);
    LstmGrads { x: dx, w_ih: dw_ih, w_hh: dw_hh, bias: dbias }
}
