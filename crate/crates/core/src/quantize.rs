//! Residual vector quantization: nearest-codeword search, the cascade,
//! the straight-through gradient path and EMA codebook learning.

use anoncodec_autograd::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuantizeError {
    #[error("k-means needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("layer {0} out of range")]
    IndexOutOfRange(usize),
}

pub const KMEANS_MAX_ITERS: usize = 50;
pub const KMEANS_TOL: f64 = 1e-6;
pub const LAPLACE_EPS: f64 = 1e-5;
pub const DEAD_CODE_USAGE: f64 = 0.01;

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `vectors` (lowest index on ties) and its squared distance.
#[inline]
fn nearest(x: &[f64], vectors: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, v) in vectors.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, v);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// `K x D` codewords plus the EMA statistics used to learn them.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    dim: usize,
    vectors: Vec<f64>,
    usage: Vec<f64>,
    sums: Vec<f64>,
    frozen_zero: bool,
}

impl Codebook {
    /// Codebook with the given rows; usage starts at 1 per codeword.
    pub fn new(vectors: Vec<f64>, dim: usize) -> Self {
        assert!(dim > 0 && !vectors.is_empty() && vectors.len() % dim == 0, "bad codebook shape");
        let k = vectors.len() / dim;
        Self { dim, sums: vectors.clone(), vectors, usage: vec![1.0; k], frozen_zero: false }
    }

    /// Codebook whose row 0 is a zero vector that never moves. The other
    /// rows are zero until [`Codebook::set_learned`] fills them.
    pub fn with_zero(k: usize, dim: usize) -> Self {
        assert!(k >= 1 && dim >= 1);
        let mut cb = Self::new(vec![0.0; k * dim], dim);
        cb.frozen_zero = true;
        cb
    }

    pub fn from_parts(dim: usize, vectors: Vec<f64>, usage: Vec<f64>, sums: Vec<f64>, frozen_zero: bool) -> Self {
        let k = vectors.len() / dim;
        assert_eq!(usage.len(), k);
        assert_eq!(sums.len(), vectors.len());
        Self { dim, vectors, usage, sums, frozen_zero }
    }

    pub fn len(&self) -> usize {
        self.usage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.usage.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn usage(&self) -> &[f64] {
        &self.usage
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    pub fn frozen_zero(&self) -> bool {
        self.frozen_zero
    }

    fn first_learned(&self) -> usize {
        usize::from(self.frozen_zero)
    }

    /// Overwrites the learned rows (all rows after the frozen zero, if any).
    pub fn set_learned(&mut self, rows: &[f64]) {
        let start = self.first_learned() * self.dim;
        assert_eq!(rows.len(), self.vectors.len() - start, "wrong number of learned rows");
        self.vectors[start..].copy_from_slice(rows);
        self.sums[start..].copy_from_slice(rows);
        let first = self.first_learned();
        for u in &mut self.usage[first..] {
            *u = 1.0;
        }
    }
}

/// Result of [`kmeans`].
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub inertia: f64,
    pub iterations: usize,
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Seeding draws the first center with `gen_range(0..m)`; each further
/// center draws `u = gen::<f64>() * total` and takes the first sample whose
/// running sum of squared distances exceeds `u`. Lloyd stops after
/// [`KMEANS_MAX_ITERS`] updates or when inertia changes by less than
/// [`KMEANS_TOL`] relative. Empty clusters keep their center.
pub fn kmeans(samples: &[f64], dim: usize, k: usize, seed: u64) -> Result<KMeansFit, QuantizeError> {
    if dim == 0 || samples.len() % dim != 0 {
        return Err(QuantizeError::DimensionMismatch { expected: dim, got: samples.len() % dim.max(1) });
    }
    let m = samples.len() / dim;
    if k == 0 || m < k {
        return Err(QuantizeError::TooFewSamples { needed: k.max(1), got: m });
    }
    let row = |i: usize| &samples[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = Vec::with_capacity(k * dim);
    centers.extend_from_slice(row(rng.gen_range(0..m)));
    let mut closest: Vec<f64> = (0..m).map(|i| sq_dist(row(i), &centers[..dim])).collect();
    for _ in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in closest.iter().enumerate() {
                acc += d;
                if acc > u {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or_else(|| closest.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.gen_range(0..m)
        };
        let c = row(pick).to_vec();
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centers.extend_from_slice(&c);
    }

    let mut assign = vec![0usize; m];
    let assign_all = |centers: &[f64], assign: &mut [usize]| -> f64 {
        let mut inertia = 0.0;
        for (i, a) in assign.iter_mut().enumerate() {
            let (j, d) = nearest(row(i), centers, dim);
            *a = j;
            inertia += d;
        }
        inertia
    };
    let mut inertia = assign_all(&centers, &mut assign);
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS && inertia > 0.0 {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)).for_each(|(s, x)| *s += x);
        }
        for j in 0..k {
            if counts[j] > 0 {
                for c in 0..dim {
                    centers[j * dim + c] = sums[j * dim + c] / counts[j] as f64;
                }
            }
        }
        iterations += 1;
        let next = assign_all(&centers, &mut assign);
        let converged = (inertia - next).abs() <= KMEANS_TOL * inertia;
        inertia = next;
        if converged {
            break;
        }
    }
    Ok(KMeansFit { codebook: Codebook::new(centers, dim), inertia, iterations })
}

pub fn kmeans_init(samples: &[f64], dim: usize, k: usize, seed: u64) -> Result<Codebook, QuantizeError> {
    kmeans(samples, dim, k, seed).map(|f| f.codebook)
}

/// Nearest codeword per row of `input` (`T x D`), ties to the lowest index.
pub fn quantize_nearest(input: &[f64], codebook: &Codebook) -> Result<(Vec<usize>, Vec<f64>), QuantizeError> {
    let dim = codebook.dim;
    if input.len() % dim != 0 {
        return Err(QuantizeError::DimensionMismatch { expected: dim, got: input.len() % dim });
    }
    let mut indices = Vec::with_capacity(input.len() / dim);
    let mut quantized = Vec::with_capacity(input.len());
    for x in input.chunks_exact(dim) {
        let (k, _) = nearest(x, &codebook.vectors, dim);
        indices.push(k);
        quantized.extend_from_slice(codebook.vector(k));
    }
    Ok((indices, quantized))
}

/// `N` cascaded codebooks of equal dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBottleneck {
    pub layers: Vec<Codebook>,
    /// False until the learned codewords were seeded from data.
    pub initialized: bool,
}

impl ResidualBottleneck {
    /// `n` zero-augmented codebooks of `k` rows (including the zero row).
    pub fn new(n: usize, k: usize, dim: usize) -> Self {
        assert!(n >= 1 && k >= 2, "need at least one layer and one learned codeword");
        Self { layers: (0..n).map(|_| Codebook::with_zero(k, dim)).collect(), initialized: false }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Seeds each layer's learned codewords by k-means on that layer's
    /// residuals of `input`, cascading through the freshly seeded layers.
    /// Layers with too few distinct rows get random input rows instead.
    pub fn init_from_data(&mut self, input: &[f64], seed: u64) {
        let dim = self.dim();
        let mut residual = input.to_vec();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let learned = layer.len() - layer.first_learned();
            let layer_seed = seed.wrapping_add(i as u64);
            let rows = match kmeans_init(&residual, dim, learned, layer_seed) {
                Ok(cb) => cb.vectors,
                Err(_) => {
                    let m = residual.len() / dim;
                    let mut rng = ChaCha8Rng::seed_from_u64(layer_seed);
                    (0..learned)
                        .flat_map(|_| {
                            let r = rng.gen_range(0..m);
                            residual[r * dim..(r + 1) * dim].to_vec()
                        })
                        .collect()
                }
            };
            layer.set_learned(&rows);
            let (_, q) = quantize_nearest(&residual, layer).expect("dimension checked");
            residual.iter_mut().zip(&q).for_each(|(r, q)| *r -= q);
        }
        self.initialized = true;
    }
}

/// Per-layer output of [`rvq_forward`]. `residuals[i]` is what remains after
/// layer `i`, so `residuals[i] = residuals[i - 1] - quantized[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub dim: usize,
    pub indices: Vec<Vec<usize>>,
    pub quantized: Vec<Vec<f64>>,
    pub cumulative: Vec<f64>,
    pub residuals: Vec<Vec<f64>>,
    pub commitment_terms: Vec<f64>,
}

impl QuantizationResult {
    pub fn rows(&self) -> usize {
        self.cumulative.len() / self.dim
    }

    /// Sum of the first `layers` quantized layers.
    pub fn partial_sum(&self, layers: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cumulative.len()];
        for q in &self.quantized[..layers] {
            out.iter_mut().zip(q).for_each(|(o, v)| *o += v);
        }
        out
    }
}

pub fn rvq_forward(input: &[f64], rb: &ResidualBottleneck) -> Result<QuantizationResult, QuantizeError> {
    let dim = rb.dim();
    if input.len() % dim != 0 {
        return Err(QuantizeError::DimensionMismatch { expected: dim, got: input.len() % dim });
    }
    let n_el = input.len() as f64;
    let mut residual = input.to_vec();
    let mut cumulative = vec![0.0; input.len()];
    let mut out = QuantizationResult {
        dim,
        indices: Vec::with_capacity(rb.layers.len()),
        quantized: Vec::with_capacity(rb.layers.len()),
        cumulative: Vec::new(),
        residuals: Vec::with_capacity(rb.layers.len()),
        commitment_terms: Vec::with_capacity(rb.layers.len()),
    };
    for layer in &rb.layers {
        if layer.dim != dim {
            return Err(QuantizeError::DimensionMismatch { expected: dim, got: layer.dim });
        }
        let (idx, q) = quantize_nearest(&residual, layer)?;
        residual.iter_mut().zip(&q).for_each(|(r, v)| *r -= v);
        cumulative.iter_mut().zip(&q).for_each(|(c, v)| *c += v);
        let commit = if n_el > 0.0 { residual.iter().map(|r| r * r).sum::<f64>() / n_el } else { 0.0 };
        out.indices.push(idx);
        out.quantized.push(q);
        out.residuals.push(residual.clone());
        out.commitment_terms.push(commit);
    }
    out.cumulative = cumulative;
    Ok(out)
}

/// Differentiable bottleneck output: forward value is `result.cumulative`,
/// backward is the identity toward `input` (shape `[rows, D]` or any shape
/// with the same element order). Codebooks get no gradient here.
pub fn straight_through(g: &mut Graph, input: Var, result: &QuantizationResult) -> Var {
    let shape = g.shape(input).to_vec();
    g.straight_through(input, Tensor::new(shape, result.cumulative.clone()))
}

/// One EMA step on `codebook` from the rows `inputs` assigned to `indices`.
/// Codewords with assignments move to their smoothed cluster mean; others
/// keep their value. Learned codewords whose usage EMA falls below
/// [`DEAD_CODE_USAGE`] are replaced by random rows of `inputs`.
pub fn ema_update<R: Rng>(codebook: &mut Codebook, indices: &[usize], inputs: &[f64], decay: f64, rng: &mut R) {
    assert!(decay > 0.0 && decay < 1.0, "decay must be in (0, 1)");
    let (k, dim) = (codebook.len(), codebook.dim);
    assert_eq!(indices.len() * dim, inputs.len());
    let mut counts = vec![0.0; k];
    let mut sums = vec![0.0; k * dim];
    for (&i, x) in indices.iter().zip(inputs.chunks_exact(dim)) {
        counts[i] += 1.0;
        sums[i * dim..(i + 1) * dim].iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    for j in 0..k {
        codebook.usage[j] = decay * codebook.usage[j] + (1.0 - decay) * counts[j];
    }
    for (s, b) in codebook.sums.iter_mut().zip(&sums) {
        *s = decay * *s + (1.0 - decay) * b;
    }
    let total: f64 = codebook.usage.iter().sum();
    let first = codebook.first_learned();
    for j in first..k {
        if counts[j] == 0.0 {
            continue;
        }
        let smoothed = (codebook.usage[j] + LAPLACE_EPS) / (total + k as f64 * LAPLACE_EPS) * total;
        for c in 0..dim {
            codebook.vectors[j * dim + c] = codebook.sums[j * dim + c] / smoothed;
        }
    }
    let m = indices.len();
    if m == 0 {
        return;
    }
    for j in first..k {
        if codebook.usage[j] < DEAD_CODE_USAGE {
            let r = rng.gen_range(0..m);
            let u = codebook.usage[j];
            for c in 0..dim {
                let v = inputs[r * dim + c];
                codebook.vectors[j * dim + c] = v;
                codebook.sums[j * dim + c] = v * u;
            }
        }
    }
}

/// `exp` of the entropy of the assignment histogram at `layer`.
pub fn codebook_perplexity(result: &QuantizationResult, layer: usize) -> Result<f64, QuantizeError> {
    let idx = result.indices.get(layer).ok_or(QuantizeError::IndexOutOfRange(layer))?;
    Ok(perplexity_of(idx))
}

pub fn perplexity_of(indices: &[usize]) -> f64 {
    if indices.is_empty() {
        return 1.0;
    }
    let mut counts = std::collections::BTreeMap::new();
    for &i in indices {
        *counts.entry(i).or_insert(0usize) += 1;
    }
    let n = indices.len() as f64;
    let h: f64 = counts.values().map(|&c| {
        let p = c as f64 / n;
        -p * p.ln()
    }).sum();
    h.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_examples() {
        assert!((perplexity_of(&[3, 3, 3]) - 1.0).abs() < 1e-12);
        assert!((perplexity_of(&[0, 1, 2, 3]) - 4.0).abs() < 1e-12);
        assert!((perplexity_of(&[0, 0, 1, 2]) - 2.0f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_row_stays_frozen() {
        let mut cb = Codebook::with_zero(3, 2);
        cb.set_learned(&[1.0, 1.0, -1.0, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            ema_update(&mut cb, &[0, 0], &[0.3, 0.3, -0.2, 0.1], 0.9, &mut rng);
        }
        assert_eq!(cb.vector(0), &[0.0, 0.0]);
    }
}
