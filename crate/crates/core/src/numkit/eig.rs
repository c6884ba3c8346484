use alloc::vec::Vec;

use super::Matrix;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues as an `n x 1`
/// column sorted descending and eigenvectors as the matching columns of
/// an orthonormal `n x n` matrix, so `a = V diag(λ) Vᵀ`.
pub fn sym_eig(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dimension { op: "sym_eig", expected: (n, n), got: a.shape() });
    }
    if !a.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::Dimension { op: "sym_eig (asymmetric)", expected: (n, n), got: a.shape() });
    }

    let mut m = a.clone();
    // symmetrize exactly so rotations see identical off-diagonal pairs
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut v = Matrix::identity(n);
    let scale = m.frobenius().max(f64::MIN_POSITIVE);

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if libm::sqrt(off) <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = Matrix::column(&order.iter().map(|&i| m[(i, i)]).collect::<Vec<_>>());
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, dst)] = v[(r, src)];
        }
    }
    Ok((values, vectors))
}

/// Applies the rotation `Jᵀ m J` on rows/cols `p, q` and accumulates `v J`.
fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Principal square root of a symmetric positive semi-definite matrix;
/// negative eigenvalues from round-off are clamped to zero.
pub fn sym_sqrt(a: &Matrix) -> Result<Matrix> {
    let (vals, vecs) = sym_eig(a)?;
    let n = a.rows();
    let mut scaled = vecs.clone();
    for c in 0..n {
        let s = libm::sqrt(vals[(c, 0)].max(0.0));
        for r in 0..n {
            scaled[(r, c)] *= s;
        }
    }
    scaled.matmul_t(&vecs)
}
