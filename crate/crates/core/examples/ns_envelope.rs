//! Sweeps seeded matrices with prescribed condition numbers through the
//! default Newton-Schulz iteration and prints the observed range of output
//! singular values per condition bucket.
//!
//! The frozen table in `lmo::NS_ENVELOPE` comes from this sweep.

use lanton::linalg::{jacobi_svd, random_orthonormal, Matrix};
use lanton::lmo::{newton_schulz, NsVariant, DEFAULT_NS_STEPS};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

const SHAPES: [(usize, usize); 9] = [
    (4, 4),
    (8, 8),
    (16, 16),
    (32, 32),
    (64, 64),
    (128, 128),
    (256, 256),
    (256, 64),
    (32, 128),
];
const CONDS: [f64; 5] = [1.0, 1e1, 1e2, 1e3, 1e4];

/// `U diag(s) V^T` with singular values log-spaced from 1 down to `1/cond`.
fn conditioned(rows: usize, cols: usize, cond: f64, seed: u64) -> Matrix {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let k = rows.min(cols);
    let u = random_orthonormal(rows, k, &mut rng);
    let v = random_orthonormal(cols, k, &mut rng);
    let mut us = u.clone();
    for j in 0..k {
        let t = if k == 1 { 0.0 } else { j as f64 / (k - 1) as f64 };
        let s = cond.powf(-t);
        for i in 0..rows {
            us[(i, j)] *= s;
        }
    }
    us.matmul(&v.transpose()).unwrap()
}

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| (0..5).collect());
    for cond in CONDS {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for &(r, c) in &SHAPES {
            for &seed in &seeds {
                let a = conditioned(r, c, cond, seed * 1000 + (r * 7 + c) as u64);
                let out = newton_schulz(&a, DEFAULT_NS_STEPS, NsVariant::Quintic).unwrap();
                for &s in jacobi_svd(&out).unwrap().s.data() {
                    lo = lo.min(s);
                    hi = hi.max(s);
                }
            }
        }
        println!(
            "cond {cond:>8.0e}: min {lo:.6} max {hi:.6}  pinned ({:.6}, {:.6})",
            lo * 0.98,
            hi * 1.02
        );
    }
}
