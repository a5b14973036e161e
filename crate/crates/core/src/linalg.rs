//! Small dense helpers on top of nalgebra. Every matrix in this crate is tiny
//! (a handful of rows), so exact decompositions are used throughout.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Largest singular value together with its singular vectors and the gap to
/// the second singular value (`+inf` for rank-one shapes).
#[derive(Debug, Clone)]
pub struct TopSingular {
    pub value: f64,
    pub left: Vector,
    pub right: Vector,
    pub gap: f64,
}

pub fn top_singular(m: &Matrix) -> TopSingular {
    if m.nrows() == 0 || m.ncols() == 0 {
        return TopSingular {
            value: 0.0,
            left: Vector::zeros(m.nrows()),
            right: Vector::zeros(m.ncols()),
            gap: f64::INFINITY,
        };
    }
    let svd = m.clone().svd(true, true);
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let top = order[0];
    let gap = if order.len() > 1 {
        sv[top] - sv[order[1]]
    } else {
        f64::INFINITY
    };
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let vt = svd.v_t.as_ref().expect("right singular vectors requested");
    TopSingular {
        value: sv[top],
        left: u.column(top).into_owned(),
        right: vt.row(top).transpose().into_owned(),
        gap,
    }
}

pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

/// Extreme eigenvalues of a symmetric matrix.
pub fn eig_range(m: &Matrix) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sym_sqrt(m: &Matrix) -> Result<Matrix> {
    if !is_symmetric(m, 1e-10) {
        return Err(Error::Config("matrix square root needs a symmetric matrix".into()));
    }
    let eig = SymmetricEigen::new(m.clone());
    let scale = 1.0 + m.amax();
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(Error::Config(
            "matrix square root needs a positive semidefinite matrix".into(),
        ));
    }
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * Matrix::from_diagonal(&d) * v.transpose())
}

pub fn quad_form(p: &Matrix, d: &Vector) -> f64 {
    d.dot(&(p * d))
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config("ragged matrix rows".into()));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sqrt_squares_back() {
        let p = Matrix::from_row_slice(2, 2, &[3.2, -1.3, -1.3, 2.5]);
        let s = sym_sqrt(&p).unwrap();
        assert_relative_eq!(&s * &s, p, epsilon = 1e-12);
    }

    #[test]
    fn top_singular_of_diagonal() {
        let m = Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -2.0]);
        let t = top_singular(&m);
        assert_relative_eq!(t.value, 2.0, epsilon = 1e-12);
        assert_relative_eq!(t.gap, 1.5, epsilon = 1e-12);
        // u' M v reproduces the singular value
        assert_relative_eq!(t.left.dot(&(&m * &t.right)), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_indefinite_sqrt() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(sym_sqrt(&m).is_err());
    }
}
