//! The recording graph and its reverse pass.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended, so node order is already a topological order and the
//! backward pass is a single reverse sweep.

use crate::kernels::{self, ConvGeom, ConvTransposeGeom};
use crate::lstm::{self, LstmCache, LstmDims};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this crate.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; only the vector-Jacobian product lives here.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients for each input, in input order. `None` means zero.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose1d { x: Var, w: Var, b: Option<Var>, geom: ConvTransposeGeom },
    Elu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Lstm { x: Var, w_ih: Var, w_hh: Var, b: Var, dims: LstmDims, cache: LstmCache },
    Transpose12(Var),
    Reshape(Var),
    MeanLast(Var),
    L2NormalizeRows(Var),
    CosineRows(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64> },
    BroadcastLast(Var),
    Concat1(Vec<Var>),
    AvgPool(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanAbs(Var),
    MeanSquare(Var),
    Sqrt(Var),
    StraightThrough(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameter handles created by [`Graph::bind`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    /// Gradient per bound parameter; unused parameters get zeros.
    pub fn for_params(&mut self, bound: &Bound, store: &ParamStore) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                self.grads[v.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(store.tensor(ParamId(i)).shape().to_vec()))
            })
            .collect()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies every parameter of `store` into the graph. With
    /// `trainable = false` they are recorded as constants.
    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Bound {
        let vars = store
            .tensors()
            .iter()
            .map(|t| self.push(t.clone(), Op::Leaf, trainable))
            .collect();
        Bound { vars }
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        let rg = self.rg(&[a]);
        self.push(v, Op::Elu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Elementwise square root; inputs are clamped at a tiny positive value.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(SQRT_FLOOR).sqrt());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sqrt(a), rg)
    }

    // ---- layers ------------------------------------------------------

    /// Adds `b[c]` along axis 1 of `x` (`[n, c]` or `[n, c, t]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[1];
        assert_eq!(self.value(b).numel(), c, "bias length mismatch");
        let inner: usize = xv.shape()[2..].iter().product();
        let bv = self.value(b).data();
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bias = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddBias(x, b), rg)
    }

    /// `y = x W^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let (n_out, n_in) = self.value(w).dims2();
        let in_dim = *xv.shape().last().expect("linear on scalar");
        assert_eq!(in_dim, n_in, "linear input dim mismatch");
        let rows = xv.numel() / n_in;
        let mut out = vec![0.0; rows * n_out];
        kernels::matmul_nt(xv.data(), self.value(w).data(), rows, n_in, n_out, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(n_out) {
                row.iter_mut().zip(bv).for_each(|(o, bb)| *o += bb);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n_out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, rg)
    }

    /// 1-D convolution of `x: [batch, c_in, t]` with `w: [c_out, c_in, k]`, zero padded.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, dilation: usize) -> Var {
        let (batch, c_in, t_in) = self.value(x).dims3();
        let (c_out, wc_in, kernel) = self.value(w).dims3();
        assert_eq!(c_in, wc_in, "conv1d channel mismatch");
        let t_out = ConvGeom::conv_out_len(t_in, kernel, stride, padding, dilation);
        assert!(t_out > 0, "conv1d input too short ({t_in} samples)");
        let geom = ConvGeom { batch, c_in, c_out, kernel, stride, padding, dilation, t_in, t_out };
        let mut out = vec![0.0; batch * c_out * t_out];
        kernels::conv1d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new([batch, c_out, t_out], out), Op::Conv1d { x, w, b, geom }, rg)
    }

    /// Transposed convolution with `w: [c_in, c_out, k]`. The full output
    /// `(t - 1) * stride + k` is cropped to `[crop, crop + out_len)`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        crop: usize,
        out_len: usize,
    ) -> Var {
        let (batch, c_in, t_in) = self.value(x).dims3();
        let (wc_in, c_out, kernel) = self.value(w).dims3();
        assert_eq!(c_in, wc_in, "conv_transpose1d channel mismatch");
        assert!(crop + out_len <= (t_in - 1) * stride + kernel, "conv_transpose1d crop out of range");
        let geom = ConvTransposeGeom { batch, c_in, c_out, kernel, stride, crop, t_in, t_out: out_len };
        let mut out = vec![0.0; batch * c_out * out_len];
        kernels::conv_transpose1d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new([batch, c_out, out_len], out), Op::ConvTranspose1d { x, w, b, geom }, rg)
    }

    /// Single LSTM layer over `x: [batch, time, input]`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var) -> Var {
        let (batch, time, input) = self.value(x).dims3();
        let (g4, hidden) = self.value(w_hh).dims2();
        assert_eq!(g4, 4 * hidden);
        assert_eq!(self.value(w_ih).dims2(), (g4, input));
        let dims = LstmDims { batch, time, input, hidden };
        let (out, cache) = lstm::lstm_forward(
            dims,
            self.value(x).data(),
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b).data(),
        );
        let rg = self.rg(&[x, w_ih, w_hh, b]);
        self.push(Tensor::new([batch, time, hidden], out), Op::Lstm { x, w_ih, w_hh, b, dims, cache }, rg)
    }

    // ---- shape -------------------------------------------------------

    /// `[b, m, n] -> [b, n, m]`
    pub fn transpose12(&mut self, x: Var) -> Var {
        let (b, m, n) = self.value(x).dims3();
        let src = self.value(x).data();
        let mut out = vec![0.0; b * m * n];
        for bi in 0..b {
            for i in 0..m {
                for j in 0..n {
                    out[(bi * n + j) * m + i] = src[(bi * m + i) * n + j];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new([b, n, m], out), Op::Transpose12(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape.to_vec());
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    /// Repeats every element along a new trailing axis: `[n, c] -> [n, c, len]`.
    pub fn broadcast_last(&mut self, x: Var, len: usize) -> Var {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        shape.push(len);
        let data = xv.data().iter().flat_map(|&v| std::iter::repeat(v).take(len)).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data), Op::BroadcastLast(x), rg)
    }

    /// Concatenates `[b, c_i, t]` tensors along axis 1.
    pub fn concat1(&mut self, xs: &[Var]) -> Var {
        let (b, _, t) = self.value(xs[0]).dims3();
        let channels: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let (bb, c, tt) = self.value(x).dims3();
                assert!(bb == b && tt == t, "concat1 shape mismatch");
                c
            })
            .collect();
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(b * total * t);
        for bi in 0..b {
            for (&x, &c) in xs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(x).data()[bi * c * t..(bi + 1) * c * t]);
            }
        }
        let rg = self.rg(xs);
        self.push(Tensor::new([b, total, t], out), Op::Concat1(xs.to_vec()), rg)
    }

    /// Non-overlapping average pooling along the last axis; the remainder is dropped.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let (b, c, t) = self.value(x).dims3();
        let t_out = t / k;
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * t_out];
        for row in 0..b * c {
            for j in 0..t_out {
                let s: f64 = src[row * t + j * k..row * t + (j + 1) * k].iter().sum();
                out[row * t_out + j] = s / k as f64;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new([b, c, t_out], out), Op::AvgPool(x, k), rg)
    }

    // ---- reductions --------------------------------------------------

    /// Mean over the last axis.
    pub fn mean_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = *xv.shape().last().unwrap();
        let data = xv.data().chunks(t).map(|c| c.iter().sum::<f64>() / t as f64).collect();
        let shape = xv.shape()[..xv.rank() - 1].to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data), Op::MeanLast(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = xv.sum() / xv.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    pub fn mean_abs(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = xv.data().iter().map(|a| a.abs()).sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::MeanAbs(x), rg)
    }

    pub fn mean_square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = xv.data().iter().map(|a| a * a).sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::MeanSquare(x), rg)
    }

    /// Row-wise L2 normalization of `[n, d]`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        debug_assert_eq!(out.numel(), n * d);
        let rg = self.rg(&[x]);
        self.push(out, Op::L2NormalizeRows(x), rg)
    }

    /// Row-wise cosine similarity of two `[n, d]` tensors, giving `[n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let (n, d) = self.value(a).dims2();
        assert_eq!(self.value(b).dims2(), (n, d));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = (0..n)
            .map(|i| {
                let (x, y) = (&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]);
                let na = kernels::dot(x, x).sqrt().max(NORM_FLOOR);
                let nb = kernels::dot(y, y).sqrt().max(NORM_FLOOR);
                kernels::dot(x, y) / (na * nb)
            })
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new([n], data), Op::CosineRows(a, b), rg)
    }

    /// Weighted mean cross-entropy of integer targets under `[n, k]` logits.
    /// Rows with weight 0 are ignored; if every weight is 0 the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Var {
        let (n, k) = self.value(logits).dims2();
        assert_eq!(targets.len(), n, "cross_entropy target count mismatch");
        let weights = weights.map_or_else(|| vec![1.0; n], |w| w.to_vec());
        assert_eq!(weights.len(), n);
        let lv = self.value(logits).data();
        let wsum: f64 = weights.iter().sum();
        let mut total = 0.0;
        for i in 0..n {
            assert!(targets[i] < k, "cross_entropy target {} out of range {k}", targets[i]);
            if weights[i] == 0.0 {
                continue;
            }
            let row = &lv[i * k..(i + 1) * k];
            total += weights[i] * (log_sum_exp(row) - row[targets[i]]);
        }
        let v = if wsum > 0.0 { total / wsum } else { 0.0 };
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(v),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights },
            rg,
        )
    }

    /// Forward value `value`, identity Jacobian toward `x`.
    pub fn straight_through(&mut self, x: Var, value: Tensor) -> Var {
        assert_eq!(self.value(x).shape(), value.shape(), "straight_through shape mismatch");
        let rg = self.rg(&[x]);
        self.push(value, Op::StraightThrough(x), rg)
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    // ---- reverse pass ------------------------------------------------

    /// Backpropagates from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward from non-scalar node");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), 1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = zip_map(g, self.value(*b), |gv, bv| gv * bv);
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = zip_map(g, self.value(*a), |gv, av| gv * av);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Elu(a) => {
                let d = zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { gv * x.exp() });
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let d = zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { gv * slope });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, zip_map(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip_map(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Sqrt(a) => {
                let d = Tensor::new(
                    out.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .zip(self.value(*a).data())
                        .map(|((gv, y), x)| if *x > SQRT_FLOOR { gv * 0.5 / y } else { 0.0 })
                        .collect(),
                );
                self.accumulate(grads, *a, d);
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let c = out.shape()[1];
                    let inner: usize = out.shape()[2..].iter().product();
                    let mut gb = vec![0.0; c];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        gb[i % c] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, Tensor::new([c], gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (n_out, n_in) = self.value(*w).dims2();
                let rows = g.numel() / n_out;
                if self.needs(*x) {
                    let mut gx = vec![0.0; rows * n_in];
                    kernels::matmul_nn_acc(g.data(), self.value(*w).data(), rows, n_out, n_in, &mut gx);
                    self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; n_out * n_in];
                    kernels::matmul_tn_acc(g.data(), self.value(*x).data(), rows, n_out, n_in, &mut gw);
                    self.accumulate(grads, *w, Tensor::new([n_out, n_in], gw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![0.0; n_out];
                        for row in g.data().chunks(n_out) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        self.accumulate(grads, *b, Tensor::new([n_out], gb));
                    }
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let mut gx = self.needs(*x).then(|| vec![0.0; self.value(*x).numel()]);
                let mut gw = self.needs(*w).then(|| vec![0.0; self.value(*w).numel()]);
                let mut gb = b.filter(|b| self.needs(*b)).map(|_| vec![0.0; geom.c_out]);
                kernels::conv1d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), gx));
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), gw));
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(grads, *b, Tensor::new([geom.c_out], gb));
                }
            }
            Op::ConvTranspose1d { x, w, b, geom } => {
                let mut gx = self.needs(*x).then(|| vec![0.0; self.value(*x).numel()]);
                let mut gw = self.needs(*w).then(|| vec![0.0; self.value(*w).numel()]);
                let mut gb = b.filter(|b| self.needs(*b)).map(|_| vec![0.0; geom.c_out]);
                kernels::conv_transpose1d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), gx));
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), gw));
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(grads, *b, Tensor::new([geom.c_out], gb));
                }
            }
            Op::Lstm { x, w_ih, w_hh, b, dims, cache } => {
                let lg = lstm::lstm_backward(
                    *dims,
                    self.value(*x).data(),
                    self.value(*w_ih).data(),
                    self.value(*w_hh).data(),
                    cache,
                    g.data(),
                );
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), lg.x));
                self.accumulate(grads, *w_ih, Tensor::new(self.value(*w_ih).shape().to_vec(), lg.w_ih));
                self.accumulate(grads, *w_hh, Tensor::new(self.value(*w_hh).shape().to_vec(), lg.w_hh));
                self.accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), lg.bias));
            }
            Op::Transpose12(x) => {
                let (b, n, m) = g.dims3();
                let src = g.data();
                let mut d = vec![0.0; b * m * n];
                for bi in 0..b {
                    for j in 0..n {
                        for i in 0..m {
                            d[(bi * m + i) * n + j] = src[(bi * n + j) * m + i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([b, m, n], d));
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.value(*x).shape().to_vec());
                self.accumulate(grads, *x, d);
            }
            Op::BroadcastLast(x) => {
                let len = *out.shape().last().unwrap();
                let d = g.data().chunks(len).map(|c| c.iter().sum()).collect();
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), d));
            }
            Op::Concat1(xs) => {
                let (b, _, t) = out.dims3();
                let mut offset = 0;
                let total = out.shape()[1];
                for &x in xs {
                    let c = self.value(x).shape()[1];
                    if self.needs(x) {
                        let mut d = Vec::with_capacity(b * c * t);
                        for bi in 0..b {
                            let start = (bi * total + offset) * t;
                            d.extend_from_slice(&g.data()[start..start + c * t]);
                        }
                        self.accumulate(grads, x, Tensor::new([b, c, t], d));
                    }
                    offset += c;
                }
            }
            Op::AvgPool(x, k) => {
                let (b, c, t) = self.value(*x).dims3();
                let t_out = t / k;
                let mut d = vec![0.0; b * c * t];
                for row in 0..b * c {
                    for j in 0..t_out {
                        let gv = g.data()[row * t_out + j] / *k as f64;
                        d[row * t + j * k..row * t + (j + 1) * k].iter_mut().for_each(|v| *v = gv);
                    }
                }
                self.accumulate(grads, *x, Tensor::new([b, c, t], d));
            }
            Op::MeanLast(x) => {
                let t = *self.value(*x).shape().last().unwrap();
                let d = g.data().iter().flat_map(|&gv| std::iter::repeat(gv / t as f64).take(t)).collect();
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), d));
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), gv));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.item() / xv.numel() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), gv));
            }
            Op::MeanAbs(x) => {
                let xv = self.value(*x);
                let s = g.item() / xv.numel() as f64;
                let d = xv.map(|v| if v > 0.0 { s } else if v < 0.0 { -s } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::MeanSquare(x) => {
                let xv = self.value(*x);
                let s = 2.0 * g.item() / xv.numel() as f64;
                self.accumulate(grads, *x, xv.map(|v| v * s));
            }
            Op::L2NormalizeRows(x) => {
                let xv = self.value(*x);
                let (_, d) = xv.dims2();
                let mut dx = vec![0.0; xv.numel()];
                for (i, (xr, gr)) in xv.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                    let norm = kernels::dot(xr, xr).sqrt();
                    let yr = &out.data()[i * d..(i + 1) * d];
                    let dst = &mut dx[i * d..(i + 1) * d];
                    if norm <= NORM_FLOOR {
                        dst.iter_mut().zip(gr).for_each(|(o, gv)| *o = gv / NORM_FLOOR);
                    } else {
                        let proj = kernels::dot(yr, gr);
                        for j in 0..d {
                            dst[j] = (gr[j] - yr[j] * proj) / norm;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
            }
            Op::CosineRows(a, b) => {
                let (n, d) = self.value(*a).dims2();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; n * d];
                for i in 0..n {
                    let (x, y) = (&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]);
                    let na = kernels::dot(x, x).sqrt().max(NORM_FLOOR);
                    let nb = kernels::dot(y, y).sqrt().max(NORM_FLOOR);
                    let c = out.data()[i];
                    let gv = g.data()[i];
                    for j in 0..d {
                        da[i * d + j] = gv * (y[j] / (na * nb) - c * x[j] / (na * na));
                        db[i * d + j] = gv * (x[j] / (na * nb) - c * y[j] / (nb * nb));
                    }
                }
                self.accumulate(grads, *a, Tensor::new([n, d], da));
                self.accumulate(grads, *b, Tensor::new([n, d], db));
            }
            Op::CrossEntropy { logits, targets, weights } => {
                let lv = self.value(*logits);
                let (n, k) = lv.dims2();
                let wsum: f64 = weights.iter().sum();
                let mut d = vec![0.0; n * k];
                if wsum > 0.0 {
                    let scale = g.item() / wsum;
                    for i in 0..n {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        let row = &lv.data()[i * k..(i + 1) * k];
                        let lse = log_sum_exp(row);
                        for j in 0..k {
                            let p = (row[j] - lse).exp();
                            let y = if j == targets[i] { 1.0 } else { 0.0 };
                            d[i * k + j] = scale * weights[i] * (p - y);
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::new([n, k], d));
            }
            Op::StraightThrough(x) => self.accumulate(grads, *x, g.clone()),
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let ds = op.backward(&values, out, g);
                assert_eq!(ds.len(), inputs.len(), "custom op {} returned wrong gradient count", op.name());
                for (&v, d) in inputs.iter().zip(ds) {
                    if let Some(d) = d {
                        assert_eq!(d.shape(), self.value(v).shape(), "custom op {} gradient shape", op.name());
                        self.accumulate(grads, v, d);
                    }
                }
            }
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;
const SQRT_FLOOR: f64 = 1e-24;

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
