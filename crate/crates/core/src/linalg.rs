//! Dense singular value decompositions through LAPACK's divide-and-conquer
//! driver.

use ndarray::{Array2, ShapeBuilder};
use ndarray_linalg::{JobSvd, SVDDCInto};

use crate::error::{Error, Result};
use crate::transforms::Matrix;

/// `m = U diag(s) V^T` with `s` descending, `U` of size `rows x q` and
/// `V^T` of size `q x cols`, `q = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v_t: Matrix,
}

fn to_lapack(m: &Matrix) -> Result<Array2<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Svd("input has non-finite entries".into()));
    }
    Array2::from_shape_vec(m.shape().f(), m.as_slice().to_vec())
        .map_err(|e| Error::Svd(e.to_string()))
}

fn from_lapack(a: &Array2<f64>) -> Matrix {
    Matrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

pub fn thin_svd(m: &Matrix) -> Result<ThinSvd> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(ThinSvd {
            u: Matrix::zeros(rows, 0),
            s: Vec::new(),
            v_t: Matrix::zeros(0, cols),
        });
    }
    let (u, s, v_t) = to_lapack(m)?
        .svddc_into(JobSvd::Some)
        .map_err(|e| Error::Svd(e.to_string()))?;
    Ok(ThinSvd {
        u: from_lapack(&u.expect("requested U")),
        s: s.to_vec(),
        v_t: from_lapack(&v_t.expect("requested V^T")),
    })
}

/// Singular values in descending order; empty for an empty matrix.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let (_, s, _) = to_lapack(m)?
        .svddc_into(JobSvd::None)
        .map_err(|e| Error::Svd(e.to_string()))?;
    Ok(s.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_deficient_wide_input() {
        let f: Vec<f64> = (0..50).map(|t| ((t * 7) % 11) as f64 - 5.0).collect();
        let m = Matrix::from_fn(2, 50, |n, t| (n + 1) as f64 * f[t]);
        let svd = thin_svd(&m).unwrap();
        assert_eq!(svd.u.shape(), (2, 2));
        assert_eq!(svd.v_t.shape(), (2, 50));
        let rebuilt = &svd.u * Matrix::from_diagonal(&nalgebra::DVector::from_vec(svd.s.clone())) * &svd.v_t;
        assert!((rebuilt - &m).amax() < 1e-12);
        assert!(svd.s[1] < 1e-12 * svd.s[0]);
    }

    #[test]
    fn values_descend() {
        let m = Matrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 3.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        assert_eq!(singular_values(&m).unwrap(), vec![3.0, 2.0, 1.0]);
        assert!(singular_values(&Matrix::from_element(1, 1, f64::NAN)).is_err());
    }
}
