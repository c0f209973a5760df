//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::Scalar;
use crate::tolerances::{RANK_RELATIVE, SINGULAR_DET};

pub fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Singular values, padded with zeros up to `min(rows, cols)`.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn rank_of(s: &[f64], rel: f64) -> usize {
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel * top).count()
}

pub fn rank(m: &DMatrix<f64>) -> usize {
    rank_of(&singular_values(m), RANK_RELATIVE)
}

/// Orthonormal basis (as columns) of the null space of `m`.
pub fn null_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return DMatrix::zeros(0, 0);
    }
    // pad to at least square so that V carries a full basis of the domain
    let padded = if rows < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (rows, cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let s: Vec<f64> = svd.singular_values.iter().copied().collect();
    let top = s.iter().cloned().fold(0.0, f64::max);
    let cols_out: Vec<DVector<f64>> = s
        .iter()
        .enumerate()
        .filter(|(_, &v)| top == 0.0 || v <= RANK_RELATIVE * top)
        .map(|(i, _)| v_t.row(i).transpose())
        .collect();
    if cols_out.is_empty() {
        DMatrix::zeros(cols, 0)
    } else {
        DMatrix::from_columns(&cols_out)
    }
}

/// Orthonormal basis (as columns) of the column space of `m`.
pub fn column_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(rows, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let s: Vec<f64> = svd.singular_values.iter().copied().collect();
    let top = s.iter().cloned().fold(0.0, f64::max);
    let cols_out: Vec<DVector<f64>> = s
        .iter()
        .enumerate()
        .filter(|(_, &v)| top > 0.0 && v > RANK_RELATIVE * top)
        .map(|(i, _)| u.column(i).into_owned())
        .collect();
    if cols_out.is_empty() {
        DMatrix::zeros(rows, 0)
    } else {
        DMatrix::from_columns(&cols_out)
    }
}

/// Orthonormal basis of `span(a) ∩ span(b)` for column-basis matrices.
pub fn intersection(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if a.ncols() == 0 || b.ncols() == 0 {
        return DMatrix::zeros(n, 0);
    }
    let qa = column_space(a);
    let qb = column_space(b);
    let mut stacked = DMatrix::zeros(n, qa.ncols() + qb.ncols());
    stacked.view_mut((0, 0), (n, qa.ncols())).copy_from(&qa);
    stacked
        .view_mut((0, qa.ncols()), (n, qb.ncols()))
        .copy_from(&(-&qb));
    let kernel = null_space(&stacked);
    if kernel.ncols() == 0 {
        return DMatrix::zeros(n, 0);
    }
    let coeffs = kernel.rows(0, qa.ncols()).into_owned();
    column_space(&(qa * coeffs))
}

/// Largest principal-angle sine between two subspaces given by column
/// bases. Subspaces of different dimension are at distance 1.
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = column_space(a);
    let qb = column_space(b);
    if qa.ncols() != qb.ncols() {
        return 1.0;
    }
    if qa.ncols() == 0 {
        return 0.0;
    }
    let residual = &qa - &qb * (qb.transpose() * &qa);
    singular_values(&residual)
        .first()
        .copied()
        .unwrap_or(0.0)
        .min(1.0)
}

/// Minimiser and residual norm of `‖J v − b‖`, via Householder QR.
/// Errors when `J` lacks full column rank.
pub fn least_squares(j: &DMatrix<f64>, b: &[f64], context: &str) -> Result<(Vec<f64>, f64)> {
    let (rows, cols) = j.shape();
    if b.len() != rows {
        return Err(Error::dimension(context, rows, b.len()));
    }
    if cols == 0 {
        return Ok((Vec::new(), norm(b)));
    }
    let r = rank(j);
    if r < cols || rows < cols {
        return Err(Error::RankDeficient {
            context: context.to_string(),
            rank: r,
            required: cols,
        });
    }
    let rhs = DVector::from_column_slice(b);
    let qr = j.clone().qr();
    let qtb = qr.q().transpose() * &rhs;
    let rmat = qr.r();
    let v = rmat
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::Singular {
            context: context.to_string(),
            detail: "triangular factor is singular".into(),
        })?;
    let resid = j * &v - rhs;
    Ok((to_vec(&v), resid.norm()))
}

/// Solves `A x = b` by LU with partial pivoting; `|det| ≤ 1e-12 · max|A|^n`
/// is treated as singular.
pub fn solve(a: &DMatrix<f64>, b: &[f64], context: &str) -> Result<Vec<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::dimension(context, n, b.len()));
    }
    let lu = a.clone().lu();
    check_det(lu.determinant(), a, context)?;
    lu.solve(&DVector::from_column_slice(b))
        .map(|x| to_vec(&x))
        .ok_or_else(|| Error::Singular {
            context: context.to_string(),
            detail: "LU solve failed".into(),
        })
}

pub fn inverse(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let lu = a.clone().lu();
    check_det(lu.determinant(), a, context)?;
    lu.try_inverse().ok_or_else(|| Error::Singular {
        context: context.to_string(),
        detail: "LU inverse failed".into(),
    })
}

fn check_det(det: f64, a: &DMatrix<f64>, context: &str) -> Result<()> {
    let scale = max_abs(a).powi(a.nrows() as i32);
    if scale == 0.0 || det.abs() <= SINGULAR_DET * scale {
        return Err(Error::Singular {
            context: context.to_string(),
            detail: format!("|det| = {:e}", det.abs()),
        });
    }
    Ok(())
}

/// Gaussian elimination with partial pivoting (on real parts) over any
/// scalar type, so derivatives propagate through the solve.
pub fn solve_generic<T: Scalar>(
    mut a: Vec<Vec<T>>,
    mut b: Vec<T>,
    context: &str,
) -> Result<Vec<T>> {
    let n = b.len();
    if a.len() != n || a.iter().any(|r| r.len() != n) {
        return Err(Error::dimension(context, n, a.len()));
    }
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.re().abs()));
    let singular = || Error::Singular {
        context: context.to_string(),
        detail: "zero pivot".into(),
    };
    if scale == 0.0 {
        return Err(singular());
    }
    let mut det_scale = 1.0f64;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].re().abs().total_cmp(&a[j][col].re().abs()))
            .expect("non-empty range");
        a.swap(col, piv);
        b.swap(col, piv);
        let p = a[col][col];
        det_scale *= p.re().abs() / scale;
        if det_scale <= SINGULAR_DET {
            return Err(singular());
        }
        for row in col + 1..n {
            let f = a[row][col] / p;
            for k in col..n {
                let v = a[col][k];
                a[row][k] = a[row][k] - f * v;
            }
            let v = b[col];
            b[row] = b[row] - f * v;
        }
    }
    let mut x = vec![T::constant(0.0); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc = acc - a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// 2-norm condition number; infinite when singular.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let s = singular_values(a);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_space_of_wide_matrix_is_complete() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let k = null_space(&m);
        assert_eq!(k.ncols(), 2);
        assert!(max_abs(&(&m * &k)) < 1e-14);
    }

    #[test]
    fn least_squares_recovers_exact_solution() {
        let j = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let (v, r) = least_squares(&j, &[2.0, -1.0, 0.5], "test").unwrap();
        assert!((v[0] - 2.0).abs() < 1e-15 && (v[1] + 1.0).abs() < 1e-15);
        assert!((r - 0.5).abs() < 1e-15);
    }

    #[test]
    fn least_squares_flags_rank_deficiency() {
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            least_squares(&j, &[1.0, 1.0], "t"),
            Err(Error::RankDeficient { rank: 1, .. })
        ));
    }

    #[test]
    fn intersection_of_planes_is_a_line() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let i = intersection(&a, &b);
        assert_eq!(i.ncols(), 1);
        assert!((i[(0, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn subspace_distance_is_basis_independent() {
        let a = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 0.0]);
        let b = DMatrix::from_row_slice(3, 1, &[-2.0, -2.0, 0.0]);
        assert!(subspace_distance(&a, &b) < 1e-15);
        let c = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        assert!((subspace_distance(&a, &c) - (0.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn generic_solve_matches_lu() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 1.0, 1.0, -1.0, 0.5, 3.0, 0.0, 1.0]);
        let b = [1.0, 2.0, 3.0];
        let rows: Vec<Vec<f64>> = (0..3).map(|i| a.row(i).iter().copied().collect()).collect();
        let x = solve_generic(rows, b.to_vec(), "t").unwrap();
        let y = solve(&a, &b, "t").unwrap();
        assert!(x.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-14));
        let sing = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        assert!(solve_generic(sing, vec![1.0, 1.0], "t").is_err());
    }

    #[test]
    fn singular_solve_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            solve(&a, &[1.0, 0.0], "t"),
            Err(Error::Singular { .. })
        ));
    }
}
