//! Deterministic SVD for tiny square matrices (tucker cores, r <= 8).
//!
//! One-sided cyclic Jacobi with a fixed sweep count and a fixed sign
//! convention, so results are bit-stable across runs and platforms.

use super::Matrix;
use crate::error::{Result, UmvError};

const SWEEPS: usize = 30;
const MAX_DIM: usize = 8;

/// A = left * diag(values) * right^T, with `values` descending and the
/// columns of `left`/`right` orthonormal.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub values: Vec<f64>,
    pub left: Matrix,
    pub right: Matrix,
}

impl SvdResult {
    /// Column `k` of the left factor.
    pub fn left_vector(&self, k: usize) -> Vec<f64> {
        (0..self.left.rows).map(|i| self.left.at(i, k)).collect()
    }

    pub fn right_vector(&self, k: usize) -> Vec<f64> {
        (0..self.right.rows).map(|i| self.right.at(i, k)).collect()
    }

    pub fn reconstruct(&self) -> Matrix {
        let n = self.left.rows;
        let mut scaled = self.left.clone();
        for j in 0..self.values.len() {
            for i in 0..n {
                *scaled.at_mut(i, j) *= self.values[j];
            }
        }
        scaled.matmul_nt(&self.right)
    }
}

/// SVD of a square matrix with side <= 8.
///
/// Sign convention: the largest-magnitude entry of each left vector is
/// positive (ties to the lowest row index). Singular values descend; equal
/// values keep their pre-sort column order.
pub fn svd_small(a: &Matrix) -> Result<SvdResult> {
    if a.rows != a.cols {
        return Err(UmvError::config(format!(
            "svd_small expects a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    if n == 0 || n > MAX_DIM {
        return Err(UmvError::config(format!(
            "svd_small supports 1..={MAX_DIM} rows, got {n}"
        )));
    }
    a.check_finite("svd_small input")?;

    // Work on columns: b[j] is the j-th column of A * V_accumulated.
    let mut b: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| a.at(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..SWEEPS {
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha: f64 = b[p].iter().map(|x| x * x).sum();
                let beta: f64 = b[q].iter().map(|x| x * x).sum();
                let gamma: f64 = b[p].iter().zip(&b[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-300 || gamma.abs() <= 1e-30 * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let bp = b[p][i];
                    let bq = b[q][i];
                    b[p][i] = c * bp - s * bq;
                    b[q][i] = s * bp + c * bq;
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
    }

    let mut cols: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::with_capacity(n);
    for j in 0..n {
        let norm: f64 = b[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        cols.push((norm, std::mem::take(&mut b[j]), std::mem::take(&mut v[j])));
    }
    // Descending singular values; stable, so ties keep column order.
    cols.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());

    let mut values = Vec::with_capacity(n);
    let mut left = Matrix::zeros(n, n);
    let mut right = Matrix::zeros(n, n);
    for (j, (sigma, bc, vc)) in cols.iter().enumerate() {
        values.push(*sigma);
        let u: Vec<f64> = if *sigma > 1e-300 {
            bc.iter().map(|x| x / sigma).collect()
        } else {
            // Null direction: complete the left basis orthonormally.
            complete_column(&left, j, n)
        };
        // Largest-magnitude entry of the left vector made positive.
        let mut pivot = 0;
        for i in 1..n {
            if u[i].abs() > u[pivot].abs() {
                pivot = i;
            }
        }
        let flip = if u[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            *left.at_mut(i, j) = flip * u[i];
            *right.at_mut(i, j) = flip * vc[i];
        }
    }

    Ok(SvdResult { values, left, right })
}

/// Unit vector orthogonal to the first `j` columns of `left`.
fn complete_column(left: &Matrix, j: usize, n: usize) -> Vec<f64> {
    for seed in 0..n {
        let mut u: Vec<f64> = (0..n).map(|i| if i == seed { 1.0 } else { 0.0 }).collect();
        for k in 0..j {
            let proj: f64 = (0..n).map(|i| u[i] * left.at(i, k)).sum();
            for i in 0..n {
                u[i] -= proj * left.at(i, k);
            }
        }
        let norm: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return u.iter().map(|x| x / norm).collect();
        }
    }
    unreachable!("orthonormal completion always exists for j < n");
}
