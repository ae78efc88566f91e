//! Non-negative matrix factorization with multiplicative updates.
//!
//! Minimizes the squared Frobenius reconstruction error `||C - WH||²` with
//! the classic multiplicative update rules, which keep both factors
//! non-negative and never increase the objective. A fixed-basis variant
//! updates only `W`, used when a later session inherits term intensities
//! from the previous one.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::SparseCounts;

/// Entries of W and H never fall below this floor, so a coordinate that
/// hits zero can recover in later updates.
pub const NMF_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum NmfError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("input matrix is all zero")]
    DegenerateInput,
}

/// Factorization result: `C ≈ W · H`.
#[derive(Debug, Clone)]
pub struct NmfResult {
    /// docs x K, non-negative.
    pub w: Array2<f64>,
    /// K x terms, non-negative.
    pub h: Array2<f64>,
    /// Squared Frobenius loss after each iteration, non-increasing.
    pub objective_trace: Vec<f64>,
}

fn squared_frobenius(c: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>) -> f64 {
    let diff = c - &w.dot(h);
    diff.iter().map(|d| d * d).sum()
}

fn random_factor(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        (rng.random::<f64>() * scale).max(NMF_FLOOR)
    })
}

fn update_w(c: &Array2<f64>, w: &mut Array2<f64>, h: &Array2<f64>) {
    let numer = c.dot(&h.t());
    let denom = w.dot(&h.dot(&h.t()));
    ndarray::Zip::from(w)
        .and(&numer)
        .and(&denom)
        .for_each(|w, &n, &d| {
            *w = (*w * n / d).max(NMF_FLOOR);
        });
}

fn update_h(c: &Array2<f64>, w: &Array2<f64>, h: &mut Array2<f64>) {
    let numer = w.t().dot(c);
    let denom = w.t().dot(w).dot(&*h);
    ndarray::Zip::from(h)
        .and(&numer)
        .and(&denom)
        .for_each(|h, &n, &d| {
            *h = (*h * n / d).max(NMF_FLOOR);
        });
}

/// Factorizes a sparse count matrix into `K` non-negative components.
///
/// Both factors start i.i.d. uniform scaled by `mean(C)/K` and are refined
/// with `iters` rounds of multiplicative updates. Same seed, same factors.
pub fn nmf_factorize(
    counts: &SparseCounts,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<NmfResult, NmfError> {
    assert!(k >= 1 && iters >= 1);
    let c = counts.to_dense();
    if counts.total() == 0 {
        return Err(NmfError::DegenerateInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = c.mean().unwrap() / k as f64;
    let mut w = random_factor(c.nrows(), k, scale, &mut rng);
    let mut h = random_factor(k, c.ncols(), scale, &mut rng);

    let mut objective_trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        update_h(&c, &w, &mut h);
        update_w(&c, &mut w, &h);
        objective_trace.push(squared_frobenius(&c, &w, &h));
    }
    Ok(NmfResult {
        w,
        h,
        objective_trace,
    })
}

/// Solves for document weights against a fixed basis `H`.
///
/// Only `W` is updated; the basis rows keep their meaning, so topic `k` of
/// the result corresponds to row `k` of `h_fixed`.
pub fn nmf_transform(
    counts: &SparseCounts,
    h_fixed: &Array2<f64>,
    iters: usize,
    seed: u64,
) -> Result<NmfResult, NmfError> {
    assert!(iters >= 1);
    if h_fixed.ncols() != counts.n_cols {
        return Err(NmfError::DimensionMismatch(format!(
            "basis has {} columns, counts have {}",
            h_fixed.ncols(),
            counts.n_cols
        )));
    }
    if h_fixed.iter().any(|&v| v < 0.0) {
        return Err(NmfError::DimensionMismatch(
            "basis must be non-negative".into(),
        ));
    }
    let c = counts.to_dense();
    let k = h_fixed.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (c.mean().unwrap() / k as f64).max(NMF_FLOOR);
    let mut w = random_factor(c.nrows(), k, scale, &mut rng);
    let h = h_fixed.mapv(|v| v.max(NMF_FLOOR));

    let mut objective_trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        update_w(&c, &mut w, &h);
        objective_trace.push(squared_frobenius(&c, &w, &h));
    }
    Ok(NmfResult {
        w,
        h,
        objective_trace,
    })
}

/// Relative Frobenius reconstruction error `||C - WH|| / ||C||`.
pub fn relative_error(counts: &SparseCounts, result: &NmfResult) -> f64 {
    let c = counts.to_dense();
    let num = squared_frobenius(&c, &result.w, &result.h).sqrt();
    let den = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    num / den
}

/// Per-topic medians of the basis rows; used to seed columns for terms that
/// have no carried-over intensity.
pub fn row_medians(h: &Array2<f64>) -> Vec<f64> {
    h.axis_iter(Axis(0))
        .map(|row| {
            let mut vals: Vec<f64> = row.iter().copied().collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if vals.is_empty() {
                1.0
            } else if vals.len() % 2 == 1 {
                vals[vals.len() / 2]
            } else {
                0.5 * (vals[vals.len() / 2 - 1] + vals[vals.len() / 2])
            }
        })
        .collect()
}
