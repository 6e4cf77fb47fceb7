mod common;

use anoncodec_autograd::{Graph, Tensor};
use anoncodec_core::quantize::{
    codebook_perplexity, ema_update, kmeans, kmeans_init, quantize_nearest, rvq_forward, straight_through, Codebook,
    QuantizeError, ResidualBottleneck,
};
use common::{brute_nearest, reference_lloyd, reference_rvq};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn rows(flat: &[f64], dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(dim).map(|c| c.to_vec()).collect()
}

fn random_bottleneck(rng: &mut ChaCha8Rng, n: usize, k: usize, dim: usize, scale: f64) -> ResidualBottleneck {
    let mut rb = ResidualBottleneck::new(n, k, dim);
    for (i, layer) in rb.layers.iter_mut().enumerate() {
        let s = scale / (1 << i) as f64;
        layer.set_learned(&randn(rng, (k - 1) * dim).iter().map(|v| v * s).collect::<Vec<_>>());
    }
    rb.initialized = true;
    rb
}

#[test]
fn kmeans_single_cluster_is_mean() {
    let pts = [1.0, 2.0, 3.0, 6.0, 5.0, 1.0];
    let cb = kmeans_init(&pts, 2, 1, 3).unwrap();
    assert_eq!(cb.vectors(), &[3.0, 3.0]);
}

#[test]
fn kmeans_with_k_equal_m_reproduces_samples() {
    let pts = [0.0, 0.0, 1.0, 0.0, 0.0, 5.0, -2.0, 3.0];
    let fit = kmeans(&pts, 2, 4, 11).unwrap();
    assert_eq!(fit.inertia, 0.0);
    let mut got = rows(fit.codebook.vectors(), 2);
    let mut want = rows(&pts, 2);
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, want);
}

#[test]
fn kmeans_matches_reference_lloyd_on_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
    let mut pts = Vec::new();
    for i in 0..200 {
        let c = centers[i % 4];
        pts.push(c[0] + 0.5 * rng.sample::<f64, _>(StandardNormal));
        pts.push(c[1] + 0.5 * rng.sample::<f64, _>(StandardNormal));
    }
    for seed in 0..5 {
        let fit = kmeans(&pts, 2, 4, seed).unwrap();
        let (_, oracle) = reference_lloyd(&rows(&pts, 2), 4, seed);
        assert!((fit.inertia - oracle).abs() <= 1e-9, "seed {seed}: {} vs {oracle}", fit.inertia);
    }
}

#[test]
fn kmeans_rejects_too_few_samples() {
    assert_eq!(kmeans_init(&[1.0, 2.0], 1, 3, 0).unwrap_err(), QuantizeError::TooFewSamples { needed: 3, got: 2 });
}

#[test]
fn nearest_exact_hit_and_tie_break() {
    let cb = Codebook::new(vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 3.0, -1.0, 2.0], 2);
    let (idx, q) = quantize_nearest(&[3.0, 3.0], &cb).unwrap();
    assert_eq!((idx[0], q), (3, vec![3.0, 3.0]));
    // (0, 1) is at squared distance 2 from rows 1 and 4.
    let tie = Codebook::new(vec![9.0, 9.0, 1.0, 0.0, 9.0, -9.0, -9.0, 9.0, -1.0, 2.0], 2);
    assert_eq!(quantize_nearest(&[0.0, 1.0], &tie).unwrap().0, vec![1]);
    assert!(matches!(quantize_nearest(&[1.0, 2.0, 3.0], &cb), Err(QuantizeError::DimensionMismatch { .. })));
}

#[test]
fn nearest_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cb_flat = randn(&mut rng, 5 * 3);
    let cb = Codebook::new(cb_flat.clone(), 3);
    let input = randn(&mut rng, 100 * 3);
    let (idx, _) = quantize_nearest(&input, &cb).unwrap();
    let words = rows(&cb_flat, 3);
    for (t, x) in rows(&input, 3).iter().enumerate() {
        assert_eq!(idx[t], brute_nearest(x, &words));
    }
}

#[test]
fn rvq_exactly_representable_input() {
    let mut rb = ResidualBottleneck::new(3, 3, 2);
    rb.layers[0].set_learned(&[1.0, 2.0, -1.0, 0.5]);
    rb.layers[1].set_learned(&[0.1, 0.1, -0.1, 0.0]);
    rb.layers[2].set_learned(&[0.3, 0.3, 0.0, -0.2]);
    let input = [1.0, 2.0, -1.0, 0.5, 1.0, 2.0];
    let r = rvq_forward(&input, &rb).unwrap();
    assert!(r.residuals[0].iter().all(|&v| v == 0.0));
    assert_eq!(r.indices[1], vec![0, 0, 0]);
    assert_eq!(r.indices[2], vec![0, 0, 0]);
    assert_eq!(r.cumulative, input.to_vec());
    assert!(r.commitment_terms.iter().all(|&c| c == 0.0));
}

#[test]
fn rvq_matches_step_by_step_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let rb = random_bottleneck(&mut rng, 3, 16, 4, 1.0);
    let input = randn(&mut rng, 50 * 4);
    let r = rvq_forward(&input, &rb).unwrap();
    let layers: Vec<Vec<Vec<f64>>> = rb.layers.iter().map(|l| rows(l.vectors(), 4)).collect();
    let (idx, recon) = reference_rvq(&rows(&input, 4), &layers);
    assert_eq!(r.indices, idx);
    for (a, b) in r.cumulative.iter().zip(recon.iter().flatten()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn commitment_is_mean_squared_residual() {
    // One layer, scalar frames [1, 3], codeword 2.
    let mut rb = ResidualBottleneck::new(1, 2, 1);
    rb.layers[0].set_learned(&[2.0]);
    let r = rvq_forward(&[1.0, 3.0], &rb).unwrap();
    assert_eq!(r.commitment_terms, vec![1.0]);
}

#[test]
fn straight_through_passes_identity_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rb = random_bottleneck(&mut rng, 2, 8, 3, 1.0);
    let input = randn(&mut rng, 10 * 3);
    let r = rvq_forward(&input, &rb).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new([10, 3], input.clone()));
    let y = straight_through(&mut g, x, &r);
    assert_eq!(g.value(y).data(), r.cumulative.as_slice());
    let s = g.sum(y);
    let grads = g.backward(s);
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn straight_through_finite_difference_away_from_boundaries() {
    // Inputs sitting on codewords are deep inside their Voronoi cells, so
    // small perturbations keep assignments and the output moves like input + const.
    let mut rb = ResidualBottleneck::new(1, 4, 2);
    rb.layers[0].set_learned(&[5.0, 0.0, 0.0, 5.0, -5.0, -5.0]);
    let input = vec![5.0, 0.0, -5.0, -5.0, 0.0, 5.0];
    let weights = [0.3, -1.2, 0.7, 2.0, -0.4, 1.1];
    let loss = |x: &[f64]| {
        let r = rvq_forward(x, &rb).unwrap();
        // Downstream loss on output = cumulative + (x - stop_grad(x)).
        r.cumulative.iter().zip(x).zip(&input).zip(&weights).map(|(((c, xi), x0), w)| w * (c + xi - x0).powi(2)).sum::<f64>()
    };
    let r = rvq_forward(&input, &rb).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new([3, 2], input.clone()));
    let y = straight_through(&mut g, x, &r);
    let w = g.constant(Tensor::new([3, 2], weights.to_vec()));
    let sq = g.mul(y, y);
    let l = g.mul(sq, w);
    let l = g.sum(l);
    let grads = g.backward(l);
    let analytic = grads.get(x).unwrap().data().to_vec();
    let eps = 1e-5;
    for i in 0..input.len() {
        let mut p = input.clone();
        p[i] += eps;
        let mut m = input.clone();
        m[i] -= eps;
        let num = (loss(&p) - loss(&m)) / (2.0 * eps);
        assert!((num - analytic[i]).abs() < 1e-6 * (1.0 + num.abs()), "{i}: {num} vs {}", analytic[i]);
    }
}

#[test]
fn ema_leaves_unassigned_codewords_alone() {
    let mut cb = Codebook::new(vec![0.0, 0.0, 4.0, 4.0], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    ema_update(&mut cb, &[0, 0], &[0.5, 0.5, 1.0, 0.0], 0.99, &mut rng);
    assert_eq!(cb.vector(1), &[4.0, 4.0]);
    assert_ne!(cb.vector(0), &[0.0, 0.0]);
}

#[test]
fn ema_converges_to_repeated_input_and_usage_sums_to_batch() {
    let v = [0.7, -1.3, 2.0];
    let t = 32;
    let mut cb = Codebook::new(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs: Vec<f64> = (0..t).flat_map(|_| v).collect();
    for _ in 0..2000 {
        let (idx, _) = quantize_nearest(&inputs, &cb).unwrap();
        ema_update(&mut cb, &idx, &inputs, 0.99, &mut rng);
    }
    let (idx, q) = quantize_nearest(&inputs[..3], &cb).unwrap();
    for (a, b) in q.iter().zip(&v) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
    let usage: f64 = cb.usage().iter().sum();
    assert!((usage - t as f64).abs() < 1e-3 * t as f64, "usage sum {usage}");
    assert!(idx[0] < 2);
}

#[test]
fn ema_revives_dead_codes_from_batch() {
    let mut cb = Codebook::new(vec![0.0, 100.0], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [0.1, 0.2, 0.3];
    for _ in 0..600 {
        ema_update(&mut cb, &[0, 0, 0], &inputs, 0.99, &mut rng);
    }
    assert!(inputs.contains(&cb.vector(1)[0]), "dead code not revived: {:?}", cb.vectors());
}

#[test]
fn perplexity_hand_computed() {
    let mut rb = ResidualBottleneck::new(1, 4, 1);
    rb.layers[0].set_learned(&[1.0, 2.0, 3.0]);
    let r = rvq_forward(&[1.0, 1.0, 2.0, 3.0], &rb).unwrap();
    let p = codebook_perplexity(&r, 0).unwrap();
    assert!((p - 1.0397207708399179f64.exp()).abs() < 1e-12);
    assert!((p - 2.828).abs() < 1e-3);
    assert_eq!(codebook_perplexity(&r, 1), Err(QuantizeError::IndexOutOfRange(1)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nearest_equals_exhaustive(seed in any::<u64>(), k in 1usize..=64, t in 1usize..=256, dim in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Coarse integer grids make exact ties common.
        let cb_flat: Vec<f64> = (0..k * dim).map(|_| rng.gen_range(-2i32..=2) as f64).collect();
        let input: Vec<f64> = (0..t * dim).map(|_| rng.gen_range(-4i32..=4) as f64 * 0.5).collect();
        let (idx, _) = quantize_nearest(&input, &Codebook::new(cb_flat.clone(), dim)).unwrap();
        let words = rows(&cb_flat, dim);
        for (ti, x) in rows(&input, dim).iter().enumerate() {
            prop_assert_eq!(idx[ti], brute_nearest(x, &words));
        }
    }

    #[test]
    fn telescoping_and_monotone_refinement(seed in any::<u64>(), n in 1usize..6, k in 2usize..20, dim in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rb = random_bottleneck(&mut rng, n, k, dim, 2.0);
        let input = randn(&mut rng, 30 * dim);
        let r = rvq_forward(&input, &rb).unwrap();
        let last = r.residuals.last().unwrap();
        for i in 0..input.len() {
            prop_assert!((input[i] - (r.cumulative[i] + last[i])).abs() <= 1e-12);
        }
        for row in 0..30 {
            let norm = |v: &[f64]| v[row * dim..(row + 1) * dim].iter().map(|x| x * x).sum::<f64>();
            let mut prev = norm(&input);
            for res in &r.residuals {
                let cur = norm(res);
                prop_assert!(cur <= prev + 1e-12);
                prev = cur;
            }
        }
    }

    #[test]
    fn kmeans_and_ema_are_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = randn(&mut rng, 60 * 3);
        let a = kmeans(&pts, 3, 5, seed).unwrap();
        let b = kmeans(&pts, 3, 5, seed).unwrap();
        prop_assert_eq!(&a.codebook, &b.codebook);
        let run = || {
            let mut cb = a.codebook.clone();
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
            for _ in 0..20 {
                let (idx, _) = quantize_nearest(&pts, &cb).unwrap();
                ema_update(&mut cb, &idx, &pts, 0.9, &mut r);
            }
            cb
        };
        prop_assert_eq!(run(), run());
    }
}
