//! Dense linear algebra for analysis: thin SVD via one-sided Jacobi
//! rotations, energy-based effective rank, and low-rank truncation.
//!
//! Everything here runs in f64 regardless of the model's storage type; weight
//! matrices are converted on entry. The Jacobi sweep loop is deterministic
//! (fixed pair order, sequential), so results are bitwise reproducible.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Thin singular value decomposition `a = u * diag(s) * v^T`.
///
/// `u` is [m, k], `s` is length k with non-increasing entries, `v` is [n, k],
/// where k = min(m, n).
pub struct Svd {
    pub u: Tensor<f64>,
    pub s: Vec<f64>,
    pub v: Tensor<f64>,
}

/// One-sided Jacobi SVD of an [m, n] matrix in f64.
///
/// Orthogonalizes the columns of `a` (transposing first when m < n so the
/// working matrix is tall), then reads singular values off column norms.
/// Converges to machine precision for the moderate sizes used in analysis.
pub fn svd<T: Scalar>(a: &Tensor<T>) -> Svd {
    let sh = a.shape();
    assert_eq!(sh.len(), 2, "svd wants a 2-D tensor, got {sh:?}");
    let (m, n) = (sh[0], sh[1]);
    let transposed = m < n;
    // Column-major working copy of the tall orientation.
    let (rows, cols) = if transposed { (n, m) } else { (m, n) };
    let mut w = vec![0.0f64; rows * cols];
    for i in 0..m {
        for j in 0..n {
            let v = a.data()[i * n + j].to_f64();
            let (r, c) = if transposed { (j, i) } else { (i, j) };
            w[c * rows + r] = v;
        }
    }
    // Right accumulator, identity [cols, cols], column-major.
    let mut vt = vec![0.0f64; cols * cols];
    for j in 0..cols {
        vt[j * cols + j] = 1.0;
    }

    let eps = 1e-14;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (cp, cq) = (p * rows, q * rows);
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for r in 0..rows {
                    let (x, y) = (w[cp + r], w[cq + r]);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                let denom = (app * aqq).sqrt();
                if denom > 0.0 {
                    off = off.max(apq.abs() / denom);
                }
                if apq.abs() <= eps * denom || denom == 0.0 {
                    continue;
                }
                // Jacobi rotation zeroing the (p, q) Gram entry.
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let (x, y) = (w[cp + r], w[cq + r]);
                    w[cp + r] = c * x - s * y;
                    w[cq + r] = s * x + c * y;
                }
                for r in 0..cols {
                    let (x, y) = (vt[p * cols + r], vt[q * cols + r]);
                    vt[p * cols + r] = c * x - s * y;
                    vt[q * cols + r] = s * x + c * y;
                }
            }
        }
        if off < eps {
            break;
        }
    }

    // Singular values are column norms; normalize columns into U.
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols)
        .map(|j| {
            let mut s = 0.0;
            for r in 0..rows {
                s += w[j * rows + r] * w[j * rows + r];
            }
            s.sqrt()
        })
        .collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms").then(a.cmp(&b)));

    let k = cols;
    let mut s = Vec::with_capacity(k);
    let mut tall_u = vec![0.0f64; rows * k];
    let mut small_v = vec![0.0f64; cols * k];
    for (out_j, &j) in order.iter().enumerate() {
        let norm = norms[j];
        s.push(norm);
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        for r in 0..rows {
            tall_u[r * k + out_j] = w[j * rows + r] * inv;
        }
        for r in 0..cols {
            small_v[r * k + out_j] = vt[j * cols + r];
        }
    }

    if transposed {
        // a^T = tall_u diag(s) small_v^T  =>  a = small_v diag(s) tall_u^T.
        Svd {
            u: Tensor::new(&[m, k], small_v),
            s,
            v: Tensor::new(&[n, k], tall_u),
        }
    } else {
        Svd {
            u: Tensor::new(&[m, k], tall_u),
            s,
            v: Tensor::new(&[n, k], small_v),
        }
    }
}

/// Smallest r with sum of the top r squared singular values >= `fraction` of
/// the total. An all-zero matrix has rank 0.
pub fn energy_rank(s: &[f64], fraction: f64) -> usize {
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (i, x) in s.iter().enumerate() {
        acc += x * x;
        if acc >= fraction * total {
            return i + 1;
        }
    }
    s.len()
}

/// Best rank-r approximation assembled from the decomposition.
pub fn truncate(svd: &Svd, r: usize) -> Tensor<f64> {
    let m = svd.u.shape()[0];
    let n = svd.v.shape()[0];
    let k = svd.s.len().min(r);
    let mut out = vec![0.0f64; m * n];
    let (u, v) = (svd.u.data(), svd.v.data());
    let ku = svd.u.shape()[1];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += u[i * ku + t] * svd.s[t] * v[j * ku + t];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(&[m, n], out)
}

/// Frobenius norm of the difference between two equally shaped matrices.
pub fn frobenius_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut acc = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y;
        acc += d * d;
    }
    acc.sqrt()
}
