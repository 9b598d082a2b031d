//! Small dense linear-algebra helpers shared across the crate.
//!
//! Vectors that live in sample space (samples, means, scores) are row
//! vectors, so a reparameterized draw reads `x = mean + z * S^T`.

use nalgebra::{DMatrix, RowDVector};

use crate::error::{Error, Result};

pub type Row = RowDVector<f64>;
pub type Mat = DMatrix<f64>;

/// Relative pivot floor below which a matrix is treated as singular.
pub const SINGULAR_PIVOT_TOL: f64 = 1e-12;

/// LU-based factorization of a general nonsingular square matrix.
#[derive(Debug, Clone)]
pub struct Inverse {
    pub inverse: Mat,
    pub log_abs_det: f64,
}

impl Inverse {
    pub fn new(m: &Mat, what: &'static str) -> Result<Self> {
        check_square(m, what)?;
        let norm = max_abs(m);
        if !norm.is_finite() {
            return Err(Error::NonFinite { what, index: 0 });
        }
        let lu = m.clone().lu();
        let u = lu.u();
        let mut log_abs_det = 0.0;
        for i in 0..u.nrows() {
            let pivot = u[(i, i)].abs();
            if pivot < SINGULAR_PIVOT_TOL * norm || pivot == 0.0 {
                return Err(Error::Singular(what));
            }
            log_abs_det += pivot.ln();
        }
        let inverse = lu.try_inverse().ok_or(Error::Singular(what))?;
        Ok(Self {
            inverse,
            log_abs_det,
        })
    }
}

/// 2-norm condition number via singular values.
pub fn condition_number(m: &Mat) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn check_square(m: &Mat, what: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            what,
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    Ok(())
}

pub fn check_len(found: usize, expected: usize, what: &'static str) -> Result<()> {
    if found != expected {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_lower(m: &Mat, what: &str) -> Result<Mat> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `max |m - m^T|`.
pub fn asymmetry(m: &Mat) -> f64 {
    max_abs(&(m - m.transpose()))
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

/// Outer product `a^T b` of two row vectors, as an `a.len() x b.len()` matrix.
pub fn outer(a: &Row, b: &Row) -> Mat {
    a.transpose() * b
}

pub fn row_from(values: &[f64]) -> Row {
    Row::from_row_slice(values)
}

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    for r in rows {
        check_len(r.len(), m, "matrix row")?;
    }
    Ok(Mat::from_fn(n, m, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// `log(sum(exp(values)))` with max-shift; `-inf` for empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_detects_singular() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(Inverse::new(&m, "S"), Err(Error::Singular(_))));
    }

    #[test]
    fn inverse_log_det() {
        let m = Mat::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]);
        let inv = Inverse::new(&m, "S").unwrap();
        assert!((inv.log_abs_det - 6f64.ln()).abs() < 1e-14);
        assert!(max_abs(&(&m * &inv.inverse - Mat::identity(2, 2))) < 1e-14);
    }

    #[test]
    fn log_sum_exp_large_values() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[3.5]), 3.5);
    }

    #[test]
    fn outer_shape() {
        let o = outer(&row_from(&[1.0, 2.0]), &row_from(&[3.0, 4.0, 5.0]));
        assert_eq!(o.shape(), (2, 3));
        assert_eq!(o[(1, 2)], 10.0);
    }
}
