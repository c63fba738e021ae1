//! Symmetric eigendecomposition: Householder tridiagonalisation followed by
//! implicit QL iteration with Wilkinson-style shifts.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-eigenvalue QL iteration cap.
const MAX_QL_ITERATIONS: usize = 64;

/// Eigenvalues in descending order and the matching eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Array2<f64>,
}

impl SymmetricEigen {
    /// `Q diag(f(λ)) Qᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Array2<f64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &l) in self.values.iter().enumerate() {
            let fl = f(l);
            scaled.column_mut(j).mapv_inplace(|v| v * fl);
        }
        let out = scaled.dot(&self.vectors.t());
        debug_assert_eq!(out.nrows(), n);
        out
    }
}

/// Full eigendecomposition of a symmetric matrix. Only `(a + aᵀ)/2` is used.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<SymmetricEigen> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::DimensionMismatch {
            what: "eigensolver input columns",
            expected: n,
            found: a.ncols(),
        });
    }
    if n == 0 {
        return Ok(SymmetricEigen {
            values: vec![],
            vectors: Array2::zeros((0, 0)),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "eigensolver input".into(),
        });
    }
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            v[i][j] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    ql_implicit(&mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| d[y].total_cmp(&d[x]));
    let values = order.iter().map(|&k| d[k]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            vectors[[i, dst]] = v[i][src];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Eigenvalues only, descending.
pub fn symmetric_eigenvalues(a: &Array2<f64>) -> Result<Vec<f64>> {
    symmetric_eigen(a).map(|e| e.values)
}

// Householder reduction to tridiagonal form. On exit `v` holds the
// accumulated orthogonal transform, `d` the diagonal and `e[1..]` the
// sub-diagonal.
fn tridiagonalize(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    d.copy_from_slice(&v[n - 1][..n]);
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                let f = d[j];
                v[j][i] = f;
                let mut g = e[j] + v[j][j] * f;
                for k in j + 1..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for (dk, row) in d.iter_mut().zip(v.iter()).take(i + 1) {
                *dk = row[i + 1] / h;
            }
            for j in 0..=i {
                let g: f64 = v.iter().take(i + 1).map(|row| row[i + 1] * row[j]).sum();
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for row in v.iter_mut().take(i + 1) {
            row[i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

fn ql_implicit(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let eps = f64::EPSILON;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_ITERATIONS {
                    return Err(Error::NoConvergence {
                        iterations: MAX_QL_ITERATIONS,
                    });
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        let h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}
