//! Inner loops shared by forward and backward passes.
//!
//! Everything here works on flat row-major slices. Loops over the time axis
//! are written as contiguous zips where the stride allows it so the compiler
//! can vectorize them.

/// Geometry of a 1-D convolution over `[batch, channels, time]` data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub t_in: usize,
    pub t_out: usize,
}

impl ConvGeom {
    pub fn conv_out_len(t_in: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> usize {
        let span = dilation * (kernel - 1) + 1;
        let padded = t_in + 2 * padding;
        if padded < span {
            0
        } else {
            (padded - span) / stride + 1
        }
    }
}

/// Splits `row` into `stride` phases: `phases[p][j] = row[j * stride + p]`.
/// Returns the start offset of each phase inside `buf`.
fn deinterleave(row: &[f64], stride: usize, buf: &mut Vec<f64>, starts: &mut Vec<usize>) {
    buf.clear();
    starts.clear();
    for p in 0..stride {
        starts.push(buf.len());
        buf.extend(row.iter().skip(p).step_by(stride));
    }
    starts.push(buf.len());
}

/// Inverse of [`deinterleave`], accumulating into `row`.
fn interleave_add(buf: &[f64], starts: &[usize], stride: usize, row: &mut [f64]) {
    for p in 0..stride {
        for (j, v) in buf[starts[p]..starts[p + 1]].iter().enumerate() {
            row[j * stride + p] += v;
        }
    }
}

/// For an offset `off = q * stride + p`, the range of output positions `t`
/// such that `t + q` indexes inside a phase of length `phase_len`.
#[inline]
fn phase_range(q: isize, phase_len: usize, t_len: usize) -> (usize, usize) {
    let t0 = (-q).max(0);
    let t1 = (phase_len as isize - q).min(t_len as isize);
    if t0 >= t1 {
        (0, 0)
    } else {
        (t0 as usize, t1 as usize)
    }
}

/// `out[b, co, t] = bias[co] + sum_{ci, k} w[co, ci, k] * x[b, ci, t*s + k*d - p]`
pub fn conv1d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let ConvGeom { batch, c_in, c_out, kernel, stride, padding, dilation, t_in, t_out } = *g;
    let s = stride as isize;
    let mut buf = Vec::with_capacity(t_in);
    let mut starts = Vec::with_capacity(stride + 1);
    for b in 0..batch {
        for co in 0..c_out {
            let init = bias.map_or(0.0, |bs| bs[co]);
            out[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out].iter_mut().for_each(|v| *v = init);
        }
        for ci in 0..c_in {
            let x_row = &x[(b * c_in + ci) * t_in..(b * c_in + ci + 1) * t_in];
            deinterleave(x_row, stride, &mut buf, &mut starts);
            for co in 0..c_out {
                let out_row = &mut out[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
                for k in 0..kernel {
                    let wv = w[(co * c_in + ci) * kernel + k];
                    let off = (k * dilation) as isize - padding as isize;
                    let (q, p) = (off.div_euclid(s), off.rem_euclid(s) as usize);
                    let phase = &buf[starts[p]..starts[p + 1]];
                    let (t0, t1) = phase_range(q, phase.len(), t_out);
                    if t0 == t1 {
                        continue;
                    }
                    let src = &phase[(t0 as isize + q) as usize..(t1 as isize + q) as usize];
                    axpy(wv, src, &mut out_row[t0..t1]);
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients of [`conv1d_forward`].
pub fn conv1d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    mut grad_x: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    mut grad_b: Option<&mut [f64]>,
) {
    let ConvGeom { batch, c_in, c_out, kernel, stride, padding, dilation, t_in, t_out } = *g;
    let s = stride as isize;
    let mut buf = Vec::with_capacity(t_in);
    let mut starts = Vec::with_capacity(stride + 1);
    let mut gbuf = vec![0.0; t_in];
    if let Some(gb) = grad_b.as_deref_mut() {
        for b in 0..batch {
            for co in 0..c_out {
                gb[co] += grad_out[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out].iter().sum::<f64>();
            }
        }
    }
    for b in 0..batch {
        for ci in 0..c_in {
            let base = (b * c_in + ci) * t_in;
            deinterleave(&x[base..base + t_in], stride, &mut buf, &mut starts);
            gbuf.iter_mut().for_each(|v| *v = 0.0);
            for co in 0..c_out {
                let g_row = &grad_out[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
                for k in 0..kernel {
                    let widx = (co * c_in + ci) * kernel + k;
                    let off = (k * dilation) as isize - padding as isize;
                    let (q, p) = (off.div_euclid(s), off.rem_euclid(s) as usize);
                    let (lo_p, hi_p) = (starts[p], starts[p + 1]);
                    let (t0, t1) = phase_range(q, hi_p - lo_p, t_out);
                    if t0 == t1 {
                        continue;
                    }
                    let lo = lo_p + (t0 as isize + q) as usize;
                    let hi = lo_p + (t1 as isize + q) as usize;
                    if let Some(gw) = grad_w.as_deref_mut() {
                        gw[widx] += dot(&g_row[t0..t1], &buf[lo..hi]);
                    }
                    if grad_x.is_some() {
                        axpy(w[widx], &g_row[t0..t1], &mut gbuf[lo..hi]);
                    }
                }
            }
            if let Some(gx) = grad_x.as_deref_mut() {
                if stride == 1 {
                    axpy(1.0, &gbuf, &mut gx[base..base + t_in]);
                } else {
                    interleave_add(&gbuf, &starts, stride, &mut gx[base..base + t_in]);
                }
            }
        }
    }
}

/// Geometry of a transposed convolution: input `[batch, c_in, t_in]`,
/// weight `[c_in, c_out, kernel]`, output cropped to `[crop, crop + t_out)`
/// of the full `(t_in - 1) * stride + kernel` samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub crop: usize,
    pub t_in: usize,
    pub t_out: usize,
}

fn phase_starts(len: usize, stride: usize, starts: &mut Vec<usize>) {
    starts.clear();
    let mut acc = 0;
    for p in 0..stride {
        starts.push(acc);
        acc += if p < len { (len - p).div_ceil(stride) } else { 0 };
    }
    starts.push(acc);
}

/// `out[b, co, t*s + k - crop] += x[b, ci, t] * w[ci, co, k]`
pub fn conv_transpose1d_forward(
    g: &ConvTransposeGeom,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let ConvTransposeGeom { batch, c_in, c_out, kernel, stride, crop, t_in, t_out } = *g;
    let s = stride as isize;
    let mut starts = Vec::with_capacity(stride + 1);
    phase_starts(t_out, stride, &mut starts);
    let mut buf = vec![0.0; t_out];
    for b in 0..batch {
        for co in 0..c_out {
            buf.iter_mut().for_each(|v| *v = 0.0);
            for ci in 0..c_in {
                let x_row = &x[(b * c_in + ci) * t_in..(b * c_in + ci + 1) * t_in];
                for k in 0..kernel {
                    let wv = w[(ci * c_out + co) * kernel + k];
                    let off = k as isize - crop as isize;
                    let (q, p) = (off.div_euclid(s), off.rem_euclid(s) as usize);
                    let (lo_p, hi_p) = (starts[p], starts[p + 1]);
                    let (t0, t1) = phase_range(q, hi_p - lo_p, t_in);
                    if t0 == t1 {
                        continue;
                    }
                    let lo = lo_p + (t0 as isize + q) as usize;
                    let hi = lo_p + (t1 as isize + q) as usize;
                    axpy(wv, &x_row[t0..t1], &mut buf[lo..hi]);
                }
            }
            let out_row = &mut out[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
            let init = bias.map_or(0.0, |bs| bs[co]);
            out_row.iter_mut().for_each(|v| *v = init);
            interleave_add(&buf, &starts, stride, out_row);
        }
    }
}

pub fn conv_transpose1d_backward(
    g: &ConvTransposeGeom,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    mut grad_x: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    mut grad_b: Option<&mut [f64]>,
) {
    let ConvTransposeGeom { batch, c_in, c_out, kernel, stride, crop, t_in, t_out } = *g;
    let s = stride as isize;
    let mut buf = Vec::with_capacity(t_out);
    let mut starts = Vec::with_capacity(stride + 1);
    for b in 0..batch {
        for co in 0..c_out {
            let g_row = &grad_out[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
            if let Some(gb) = grad_b.as_deref_mut() {
                gb[co] += g_row.iter().sum::<f64>();
            }
            deinterleave(g_row, stride, &mut buf, &mut starts);
            for ci in 0..c_in {
                let base = (b * c_in + ci) * t_in;
                for k in 0..kernel {
                    let widx = (ci * c_out + co) * kernel + k;
                    let off = k as isize - crop as isize;
                    let (q, p) = (off.div_euclid(s), off.rem_euclid(s) as usize);
                    let (lo_p, hi_p) = (starts[p], starts[p + 1]);
                    let (t0, t1) = phase_range(q, hi_p - lo_p, t_in);
                    if t0 == t1 {
                        continue;
                    }
                    let lo = lo_p + (t0 as isize + q) as usize;
                    let hi = lo_p + (t1 as isize + q) as usize;
                    if let Some(gw) = grad_w.as_deref_mut() {
                        gw[widx] += dot(&x[base + t0..base + t1], &buf[lo..hi]);
                    }
                    if let Some(gx) = grad_x.as_deref_mut() {
                        axpy(w[widx], &buf[lo..hi], &mut gx[base + t0..base + t1]);
                    }
                }
            }
        }
    }
}

/// `out[m, n] = sum_k a[m, k] * b[n, k]` (right operand stored row-per-output).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(a_row, b_row);
        }
    }
}

/// `out[m, k] += sum_n g[m, n] * b[n, k]`
pub fn matmul_nn_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * k..(i + 1) * k];
        for j in 0..n {
            let gv = g[i * n + j];
            if gv == 0.0 {
                continue;
            }
            axpy(gv, &b[j * k..(j + 1) * k], out_row);
        }
    }
}

/// `out[n, k] += sum_m g[m, n] * a[m, k]`
pub fn matmul_tn_acc(g: &[f64], a: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let gv = g[i * n + j];
            if gv == 0.0 {
                continue;
            }
            axpy(gv, a_row, &mut out[j * k..(j + 1) * k]);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators so the reduction can vectorize.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.c_out * g.t_out];
        for b in 0..g.batch {
            for co in 0..g.c_out {
                for t in 0..g.t_out {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for k in 0..g.kernel {
                            let idx = (t * g.stride + k * g.dilation) as isize - g.padding as isize;
                            if idx >= 0 && (idx as usize) < g.t_in {
                                acc += w[(co * g.c_in + ci) * g.kernel + k]
                                    * x[(b * g.c_in + ci) * g.t_in + idx as usize];
                            }
                        }
                    }
                    out[(b * g.c_out + co) * g.t_out + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, padding, dilation, kernel) in &[(1, 1, 1, 3), (2, 1, 1, 4), (5, 3, 1, 10), (1, 3, 2, 3), (3, 0, 1, 2)] {
            let t_in = 23;
            let t_out = ConvGeom::conv_out_len(t_in, kernel, stride, padding, dilation);
            let g = ConvGeom { batch: 2, c_in: 3, c_out: 2, kernel, stride, padding, dilation, t_in, t_out };
            let x: Vec<f64> = (0..2 * 3 * t_in).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
            let w: Vec<f64> = (0..2 * 3 * kernel).map(|i| ((i * 5 % 11) as f64) * 0.1 - 0.5).collect();
            let mut out = vec![0.0; 2 * 2 * t_out];
            conv1d_forward(&g, &x, &w, None, &mut out);
            let expect = naive_conv(&g, &x, &w);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <convT(x), y> == <x, conv(y)> when both use the same weight and offsets.
        let (stride, kernel, crop, t_in) = (5usize, 10usize, 2usize, 7usize);
        let t_out = t_in * stride;
        let tg = ConvTransposeGeom { batch: 1, c_in: 2, c_out: 3, kernel, stride, crop, t_in, t_out };
        let x: Vec<f64> = (0..2 * t_in).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..3 * t_out).map(|i| (i as f64 * 0.11).cos()).collect();
        let w: Vec<f64> = (0..2 * 3 * kernel).map(|i| (i as f64 * 0.73).sin()).collect();
        let mut out = vec![0.0; 3 * t_out];
        conv_transpose1d_forward(&tg, &x, &w, None, &mut out);
        let lhs: f64 = out.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut gx = vec![0.0; 2 * t_in];
        conv_transpose1d_backward(&tg, &x, &w, &y, Some(&mut gx), None, None);
        let rhs: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
