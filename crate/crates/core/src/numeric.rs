//! Small numerical helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

const PAIRWISE_BLOCK: usize = 8;

/// Pairwise (cascade) reduction with a fixed tree shape, so the result
/// depends only on the order of `items`.
pub fn pairwise_reduce<T: Clone>(items: &[T], add: &impl Fn(&T, &T) -> T) -> Option<T> {
    match items.len() {
        0 => None,
        n if n <= PAIRWISE_BLOCK => {
            let mut acc = items[0].clone();
            for it in &items[1..] {
                acc = add(&acc, it);
            }
            Some(acc)
        }
        n => {
            let (lo, hi) = items.split_at(n / 2);
            let a = pairwise_reduce(lo, add)?;
            let b = pairwise_reduce(hi, add)?;
            Some(add(&a, &b))
        }
    }
}

pub fn pairwise_sum(values: &[f64]) -> f64 {
    pairwise_reduce(values, &|a, b| a + b).unwrap_or(0.0)
}

pub fn pairwise_sum_vectors(values: &[DVector<f64>], len: usize) -> DVector<f64> {
    pairwise_reduce(values, &|a, b| a + b).unwrap_or_else(|| DVector::zeros(len))
}

pub fn pairwise_sum_matrices(values: &[DMatrix<f64>], rows: usize, cols: usize) -> DMatrix<f64> {
    pairwise_reduce(values, &|a, b| a + b).unwrap_or_else(|| DMatrix::zeros(rows, cols))
}

/// Replaces `m` by `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetric square root of a symmetric positive semi-definite matrix.
/// Returns `None` when an eigenvalue is negative beyond round-off.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return None;
    }
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::NAN;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        pairwise_sum(values) / values.len() as f64
    }
}

/// Sample standard deviation (divisor n - 1).
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    let ss: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    (pairwise_sum(&ss) / (n - 1) as f64).sqrt()
}

/// Pearson correlation of two equally long samples.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
