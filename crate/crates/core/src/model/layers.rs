//! Parameterized building blocks. Each block registers its tensors in a
//! [`ParamStore`] at construction and records its forward pass on a
//! [`Graph`] given the bound parameters.

use anoncodec_autograd::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[c_out, c_in, kernel], c_in * kernel, rng);
        let b = store.add_const(format!("{name}.b"), &[c_out], 0.0);
        Self { w, b, stride, padding, dilation: 1 }
    }

    /// Stride-1 convolution that keeps the length (odd kernel).
    pub fn same<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, rng: &mut R) -> Self {
        Self::new(store, name, c_in, c_out, kernel, 1, kernel / 2, rng)
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv1d(x, p[self.w], Some(p[self.b]), self.stride, self.padding, self.dilation)
    }
}

/// Upsampling by `stride` with kernel `2 * stride`, cropped to exactly `stride * T`.
#[derive(Clone, Debug)]
pub struct ConvUp {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl ConvUp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let k = 2 * stride;
        // Each output sample sees c_in * 2 taps.
        let w = store.add_uniform(format!("{name}.w"), &[c_in, c_out, k], c_in * 2, rng);
        let b = store.add_const(format!("{name}.b"), &[c_out], 0.0);
        Self { w, b, stride }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let t = g.shape(x)[2];
        g.conv_transpose1d(x, p[self.w], Some(p[self.b]), self.stride, self.stride / 2, t * self.stride)
    }
}

/// `x + conv(elu(conv(elu(x))))` with two kernel-3 convolutions.
#[derive(Clone, Debug)]
pub struct ResUnit {
    c1: Conv,
    c2: Conv,
}

impl ResUnit {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Self {
        Self {
            c1: Conv::same(store, &format!("{name}.c1"), ch, ch, 3, rng),
            c2: Conv::same(store, &format!("{name}.c2"), ch, ch, 3, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = g.elu(x);
        let h = self.c1.apply(g, p, h);
        let h = g.elu(h);
        let h = self.c2.apply(g, p, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[d_out, d_in], d_in, rng);
        let b = bias.then(|| store.add_const(format!("{name}.b"), &[d_out], 0.0));
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p[self.w], self.b.map(|b| p[b]))
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

/// Stacked LSTM over `[batch, channels, time]` with a residual connection
/// around the whole stack; input and hidden width are equal.
#[derive(Clone, Debug)]
pub struct LstmStack {
    layers: Vec<(ParamId, ParamId, ParamId)>,
}

impl LstmStack {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, num_layers: usize, rng: &mut R) -> Self {
        let layers = (0..num_layers)
            .map(|i| {
                let w_ih = store.add_uniform(format!("{name}.{i}.w_ih"), &[4 * width, width], width, rng);
                let w_hh = store.add_uniform(format!("{name}.{i}.w_hh"), &[4 * width, width], width, rng);
                let mut bias = vec![0.0; 4 * width];
                bias[width..2 * width].iter_mut().for_each(|v| *v = 1.0);
                let b = store.add(format!("{name}.{i}.b"), Tensor::new([4 * width], bias));
                (w_ih, w_hh, b)
            })
            .collect();
        Self { layers }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        if self.layers.is_empty() {
            return x;
        }
        let mut h = g.transpose12(x);
        for &(w_ih, w_hh, b) in &self.layers {
            h = g.lstm(h, p[w_ih], p[w_hh], p[b]);
        }
        let h = g.transpose12(h);
        g.add(x, h)
    }
}
