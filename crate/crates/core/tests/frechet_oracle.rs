//! Fréchet distance against an independent trace-sqrt route: Denman-Beavers
//! iteration on the non-symmetric product `S_a S_b`, with hand-rolled dense
//! matrix algebra.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rtk_core::metrics::{fit_gaussian, frechet_distance, GaussianStats};

type Mat = Vec<Vec<f64>>;

fn identity(d: usize) -> Mat {
    (0..d).map(|i| (0..d).map(|j| (i == j) as u8 as f64).collect()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let d = a.len();
    (0..d)
        .map(|i| (0..d).map(|j| (0..d).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

fn inverse(m: &Mat) -> Mat {
    let d = m.len();
    let mut a: Mat = m.iter().zip(identity(d)).map(|(r, e)| [r.clone(), e].concat()).collect();
    for col in 0..d {
        let piv = (col..d).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        a[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..d {
            if r != col {
                let f = a[r][col];
                let pivot_row = a[col].clone();
                a[r].iter_mut().zip(&pivot_row).for_each(|(v, q)| *v -= f * q);
            }
        }
    }
    a.into_iter().map(|r| r[d..].to_vec()).collect()
}

fn trace_sqrt(a: &Mat) -> f64 {
    let d = a.len();
    let (mut y, mut z) = (a.clone(), identity(d));
    for _ in 0..100 {
        let (yi, zi) = (inverse(&y), inverse(&z));
        let ny: Mat = (0..d).map(|i| (0..d).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect()).collect();
        let nz: Mat = (0..d).map(|i| (0..d).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect()).collect();
        let change: f64 = ny.iter().flatten().zip(y.iter().flatten()).map(|(p, q)| (p - q).abs()).sum();
        y = ny;
        z = nz;
        if change < 1e-15 {
            break;
        }
    }
    (0..d).map(|i| y[i][i]).sum()
}

fn oracle(a: &GaussianStats, b: &GaussianStats) -> f64 {
    let d = a.dim();
    let rows = |s: &[f64]| -> Mat { s.chunks(d).map(|r| r.to_vec()).collect() };
    let (sa, sb) = (rows(&a.sigma), rows(&b.sigma));
    let dmu: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let tr = |m: &Mat| (0..d).map(|i| m[i][i]).sum::<f64>();
    dmu + tr(&sa) + tr(&sb) - 2.0 * trace_sqrt(&matmul(&sa, &sb))
}

fn random_stats(seed: u64, d: usize, n: usize, scale: f64) -> GaussianStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let feats: Vec<f64> = (0..n)
        .flat_map(|_| {
            let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            (0..d)
                .map(|i| scale * (0..d).map(|k| mix[i * d + k] * g[k]).sum::<f64>() + i as f64 * 0.1)
                .collect::<Vec<_>>()
        })
        .collect();
    fit_gaussian(&feats, d).unwrap()
}

#[test]
fn matches_denman_beavers_on_fitted_stats() {
    for (seed, d) in [(1, 2), (2, 5), (3, 9), (4, 16)] {
        let a = random_stats(seed, d, 4 * d + 10, 1.0);
        let b = random_stats(seed + 100, d, 4 * d + 10, 0.6);
        let want = oracle(&a, &b);
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-7 * want.max(1.0), "d={d}: {got} vs {want}");
    }
}

#[test]
fn oracle_agrees_on_scaled_identity() {
    // S_a = s I, S_b = t I: trace sqrt is d * sqrt(s t)
    let d = 4;
    let diag = |v: f64| -> Vec<f64> { (0..d * d).map(|i| if i % (d + 1) == 0 { v } else { 0.0 }).collect() };
    let a = GaussianStats { mu: vec![0.0; d], sigma: diag(2.0), n: 10 };
    let b = GaussianStats { mu: vec![1.0; d], sigma: diag(0.5), n: 10 };
    let want = d as f64 * (1.0 + 2.0 + 0.5 - 2.0);
    assert!((oracle(&a, &b) - want).abs() < 1e-10);
    assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn agrees_with_oracle(seed in 0u64..10_000, d in 1usize..7, scale in 0.2f64..3.0) {
        let a = random_stats(seed, d, 3 * d + 5, 1.0);
        let b = random_stats(seed ^ 0x5555, d, 3 * d + 5, scale);
        let want = oracle(&a, &b);
        let got = frechet_distance(&a, &b).unwrap();
        prop_assert!((got - want).abs() < 1e-6 * want.max(1.0), "{} vs {}", got, want);
    }
}
