//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use alope::transformer::{Activation, TransformerConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config(n_layers: usize, d_model: usize) -> TransformerConfig {
    TransformerConfig {
        n_layers,
        d_model,
        n_heads: 4,
        d_ff: 2 * d_model,
        vocab_size: 64,
        max_seq_len: 32,
        activation: Activation::Silu,
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize, len: std::ops::Range<usize>, vocab: u32) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            let l = rng.gen_range(len.clone());
            (0..l).map(|_| rng.gen_range(0..vocab)).collect()
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` in coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Least-squares weights for `rows · w ≈ y`, via the normal equations.
pub fn ols(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let d = rows[0].len();
    let x = DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * DVector::from_column_slice(y);
    let w = xtx.cholesky().expect("full column rank").solve(&xty);
    w.iter().copied().collect()
}

/// Average ranks by counting: rank = #smaller + (#equal + 1) / 2.
pub fn brute_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
    brute_pearson(&brute_ranks(a), &brute_ranks(b))
}

/// Williams t for `r12` vs `r13` sharing variable 1, and its one-sided p.
pub fn williams_reference(r12: f64, r13: f64, r23: f64, n: f64) -> (f64, f64) {
    let k = 1.0 - r12.powi(2) - r13.powi(2) - r23.powi(2) + 2.0 * r12 * r13 * r23;
    let num = (r12 - r13) * ((n - 1.0) * (1.0 + r23)).sqrt();
    let den = (2.0 * k * (n - 1.0) / (n - 3.0) + (r12 + r13).powi(2) / 4.0 * (1.0 - r23).powi(3)).sqrt();
    let t = num / den;
    let dist = StudentsT::new(0.0, 1.0, n - 3.0).expect("valid df");
    (t, 1.0 - dist.cdf(t))
}

pub fn golden(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}
