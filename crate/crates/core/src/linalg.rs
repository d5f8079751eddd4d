//! Small dense helpers shared by the model code.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::basis::symmetrize;

/// Rank of a symmetric positive semidefinite matrix by diagonal-pivoted
/// Cholesky, together with the indices left over once the pivot falls below
/// `tol` times the largest diagonal. The leftover indices are the columns that
/// are linear combinations of the pivoted ones.
pub fn pivoted_cholesky_rank(a: &DMatrix<f64>, tol: f64) -> (usize, Vec<usize>) {
    let n = a.nrows();
    let mut m = symmetrize(a);
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = (0..n).map(|i| m[(i, i)]).fold(0.0, f64::max);
    if scale <= 0.0 {
        return (0, perm);
    }
    let mut rank = 0;
    for k in 0..n {
        let (piv, best) = (k..n)
            .map(|i| (i, m[(i, i)]))
            .fold(
                (k, f64::NEG_INFINITY),
                |acc, v| if v.1 > acc.1 { v } else { acc },
            );
        if best <= tol * scale {
            break;
        }
        m.swap_rows(k, piv);
        m.swap_columns(k, piv);
        perm.swap(k, piv);
        let d = m[(k, k)].sqrt();
        m[(k, k)] = d;
        for i in k + 1..n {
            m[(i, k)] /= d;
        }
        for j in k + 1..n {
            for i in j..n {
                let v = m[(i, k)] * m[(j, k)];
                m[(i, j)] -= v;
                m[(j, i)] = m[(i, j)];
            }
        }
        rank += 1;
    }
    let mut aliased = perm[rank..].to_vec();
    aliased.sort_unstable();
    (rank, aliased)
}

/// Orthonormal basis of the range of a symmetric PSD matrix.
pub fn range_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > 1e-10 * top.max(f64::MIN_POSITIVE))
        .collect();
    let mut out = DMatrix::zeros(n, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        out.set_column(j, &eig.eigenvectors.column(i));
    }
    out
}

/// Moore-Penrose style inverse of a symmetric matrix, keeping the `rank`
/// largest eigenvalues.
pub fn truncated_pinv(a: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut out = DMatrix::zeros(n, n);
    for &i in order.iter().take(rank) {
        let v = eig.eigenvalues[i];
        if v > 0.0 {
            let u = eig.eigenvectors.column(i);
            out += (&u * u.transpose()) / v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pivoted_rank_finds_alias() {
        // column 2 = column 0 + column 1
        let x = DMatrix::from_row_slice(4, 3, &[1., 0., 1., 1., 1., 2., 1., 0., 1., 1., 1., 2.]);
        let (rank, aliased) = pivoted_cholesky_rank(&(x.transpose() * &x), 1e-10);
        assert_eq!(rank, 2);
        assert_eq!(aliased.len(), 1);
    }

    #[test]
    fn range_of_projector() {
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0]);
        let r = range_basis(&(&v * v.transpose()));
        assert_eq!(r.ncols(), 1);
        assert!((r[(0, 0)].abs() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn truncated_pinv_inverts_full_rank() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = truncated_pinv(&a, 2);
        let id = &a * p;
        assert!((id - DMatrix::identity(2, 2)).norm() < 1e-12);
    }
}
