//! Principal component analysis via full symmetric eigendecomposition
//! (cyclic Jacobi rotations) of the sample covariance.

use crate::{Error, Result};
use ndarray::{Array1, Array2};

#[derive(Clone, Debug)]
pub struct PcaResult {
    /// (k, dim), unit rows, pairwise orthogonal.
    pub components: Array2<f64>,
    /// Top-k sample-covariance eigenvalues, nonincreasing.
    pub explained_variance: Vec<f64>,
    /// (n, k) coordinates of the centered inputs on the components.
    pub projections: Array2<f64>,
    pub mean: Array1<f64>,
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), sorted descending.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let (n, m) = a.dim();
    if n != m {
        return Err(Error::Shape(format!("eigen: matrix is {n}x{m}, need square")));
    }
    let asym = a
        .indexed_iter()
        .map(|((i, j), &v)| (v - a[(j, i)]).abs())
        .fold(0.0f64, f64::max);
    if asym > 1e-9 {
        return Err(Error::domain(format!("eigen: matrix asymmetry {asym}")));
    }
    let mut d = a.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    let off = |d: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += d[(i, j)] * d[(i, j)];
            }
        }
        s
    };
    let scale: f64 = a.iter().map(|&x| x * x).sum::<f64>().max(1e-300);
    for _sweep in 0..100 {
        if off(&d) <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = d[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (d[(q, q)] - d[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let dkp = d[(k, p)];
                    let dkq = d[(k, q)];
                    d[(k, p)] = c * dkp - s * dkq;
                    d[(k, q)] = s * dkp + c * dkq;
                }
                for k in 0..n {
                    let dpk = d[(p, k)];
                    let dqk = d[(q, k)];
                    d[(p, k)] = c * dpk - s * dqk;
                    d[(q, k)] = s * dpk + c * dqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[(j, j)].partial_cmp(&d[(i, i)]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| d[(i, i)]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, col)] = v[(r, i)];
        }
    }
    Ok((eigenvalues, vectors))
}

/// Top-k PCA of `data` (rows = observations). Components carry a
/// deterministic sign: the largest-magnitude coordinate is positive.
pub fn pca(data: &Array2<f64>, k: usize) -> Result<PcaResult> {
    let (n, dim) = data.dim();
    if n < 2 {
        return Err(Error::domain("pca: need at least 2 vectors"));
    }
    if k > dim || k == 0 {
        return Err(Error::domain(format!("pca: k = {k} out of range for dim {dim}")));
    }
    let mean = data.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = data - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let (eigenvalues, vectors) = symmetric_eigen(&cov)?;
    let mut components = Array2::zeros((k, dim));
    for c in 0..k {
        let col = vectors.column(c);
        let mut best = 0;
        for (i, &x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            components[(c, i)] = col[i] * sign;
        }
    }
    let explained_variance: Vec<f64> = eigenvalues[..k].iter().map(|&l| l.max(0.0)).collect();
    let projections = centered.dot(&components.t());
    Ok(PcaResult { components, explained_variance, projections, mean })
}
