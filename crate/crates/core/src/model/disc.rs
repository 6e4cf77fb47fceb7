use anoncodec_autograd::{Bound, Graph, ParamStore, Var};
use rand::Rng;

use super::layers::Conv;

const SLOPE: f64 = 0.2;

/// Scores and hidden activations for one discriminator scale.
#[derive(Clone, Debug)]
pub struct ScaleOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

#[derive(Clone, Debug)]
struct ScaleNet {
    convs: Vec<Conv>,
    out: Conv,
}

/// Multi-scale waveform discriminator: scale `i` sees the input average
/// pooled by `2^i`. Least-squares GAN scores.
#[derive(Clone, Debug)]
pub struct Discriminator {
    scales: Vec<ScaleNet>,
}

impl Discriminator {
    pub fn new<R: Rng>(store: &mut ParamStore, channels: usize, num_scales: usize, rng: &mut R) -> Self {
        let c = channels;
        let scales = (0..num_scales)
            .map(|s| {
                let n = format!("disc.{s}");
                ScaleNet {
                    convs: vec![
                        Conv::new(store, &format!("{n}.c0"), 1, c, 15, 1, 7, rng),
                        Conv::new(store, &format!("{n}.c1"), c, 2 * c, 11, 4, 5, rng),
                        Conv::new(store, &format!("{n}.c2"), 2 * c, 4 * c, 11, 4, 5, rng),
                        Conv::new(store, &format!("{n}.c3"), 4 * c, 4 * c, 5, 1, 2, rng),
                    ],
                    out: Conv::new(store, &format!("{n}.out"), 4 * c, 1, 3, 1, 1, rng),
                }
            })
            .collect();
        Self { scales }
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// `x` is `[batch, 1, samples]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Vec<ScaleOutput> {
        let mut input = x;
        let mut out = Vec::with_capacity(self.scales.len());
        for (i, net) in self.scales.iter().enumerate() {
            if i > 0 {
                input = g.avg_pool(input, 2);
            }
            let mut h = input;
            let mut features = Vec::with_capacity(net.convs.len());
            for conv in &net.convs {
                h = conv.apply(g, p, h);
                h = g.leaky_relu(h, SLOPE);
                features.push(h);
            }
            let score = net.out.apply(g, p, h);
            out.push(ScaleOutput { score, features });
        }
        out
    }
}
