//! Independent reference implementations the library is checked against.
//! Written for clarity, not speed, and sharing no code with the crate.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Exhaustive nearest neighbour; strict `<` keeps the lowest index on ties.
pub fn brute_nearest(x: &[f64], codewords: &[Vec<f64>]) -> usize {
    let mut best = 0;
    for k in 1..codewords.len() {
        if dist2(x, &codewords[k]) < dist2(x, &codewords[best]) {
            best = k;
        }
    }
    best
}

/// Plain Lloyd with the same k-means++ draw sequence as the library.
pub fn reference_lloyd(points: &[Vec<f64>], k: usize, seed: u64) -> (Vec<Vec<f64>>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = points.len();
    let mut centers = vec![points[rng.gen_range(0..m)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let idx = if total > 0.0 {
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = m - 1;
            for (i, di) in d.iter().enumerate() {
                acc += di;
                if acc > u {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..m)
        };
        centers.push(points[idx].clone());
    }
    let inertia_of = |centers: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let a: Vec<usize> = points.iter().map(|p| brute_nearest(p, centers)).collect();
        let i = points.iter().zip(&a).map(|(p, &j)| dist2(p, &centers[j])).sum();
        (a, i)
    };
    let (mut assign, mut inertia) = inertia_of(&centers);
    for _ in 0..50 {
        if inertia == 0.0 {
            break;
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for (dim, v) in c.iter_mut().enumerate() {
                    *v = members.iter().map(|p| p[dim]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let (a, next) = inertia_of(&centers);
        let done = (inertia - next).abs() <= 1e-6 * inertia;
        assign = a;
        inertia = next;
        if done {
            break;
        }
    }
    (centers, inertia)
}

/// Residual cascade done one layer at a time with fresh allocations.
/// Returns per-layer indices and the final reconstruction.
pub fn reference_rvq(rows: &[Vec<f64>], layers: &[Vec<Vec<f64>>]) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let mut residual: Vec<Vec<f64>> = rows.to_vec();
    let mut recon: Vec<Vec<f64>> = rows.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut all = Vec::new();
    for cb in layers {
        let idx: Vec<usize> = residual.iter().map(|r| brute_nearest(r, cb)).collect();
        for (t, &k) in idx.iter().enumerate() {
            for d in 0..rows[t].len() {
                residual[t][d] -= cb[k][d];
                recon[t][d] += cb[k][d];
            }
        }
        all.push(idx);
    }
    (all, recon)
}

/// EER by brute force: every distinct score and +inf as a threshold, each
/// operating point counted from scratch, linear interpolation at the first
/// sign change of FAR - FRR. Returns percent.
pub fn brute_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let fa = nontargets.iter().filter(|&&s| s >= th).count() as f64 / nontargets.len() as f64;
            let fr = targets.iter().filter(|&&s| s < th).count() as f64 / targets.len() as f64;
            (fa, fr)
        })
        .collect();
    for i in 0..points.len() {
        let d = points[i].0 - points[i].1;
        if d == 0.0 {
            return 100.0 * points[i].0;
        }
        if i + 1 < points.len() {
            let dn = points[i + 1].0 - points[i + 1].1;
            if d > 0.0 && dn < 0.0 {
                let lam = d / (d - dn);
                return 100.0 * (points[i].0 + lam * (points[i + 1].0 - points[i].0));
            }
        }
    }
    unreachable!("FAR - FRR always ends at -1")
}
