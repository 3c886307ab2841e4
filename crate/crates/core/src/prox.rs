//! Proximal maps used by the splitting solver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{singular_values, thin_svd, ThinSvd};
use crate::transforms::Matrix;

/// How singular value thresholding factors its input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SvdMode {
    /// Thin QR followed by a dense SVD of the small triangular factor.
    #[default]
    Full,
    /// Randomized range finder with `rank + oversample` columns, grown until
    /// the smallest captured singular value falls below the threshold.
    Randomized {
        rank: usize,
        oversample: usize,
        power_iters: usize,
    },
}

/// Result of a singular value shrinkage.
#[derive(Debug, Clone)]
pub struct Shrunk {
    pub value: Matrix,
    /// Nuclear norm of `value`.
    pub nuclear_norm: f64,
    pub rank: usize,
}

/// `argmin_Z tau ||Z||_* + 1/2 ||Z - M||_F^2`: every singular value is
/// replaced by `max(sigma - tau, 0)`.
pub fn prox_nuclear(m: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    Ok(shrink_singular_values(m, tau, SvdMode::Full)?.value)
}

pub fn shrink_singular_values(m: &Matrix, tau: f64, mode: SvdMode) -> Result<Shrunk> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Svd("input has non-finite entries".into()));
    }
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(Shrunk {
            value: m.clone(),
            nuclear_norm: 0.0,
            rank: 0,
        });
    }
    match mode {
        SvdMode::Full => shrink_full(m, tau),
        SvdMode::Randomized {
            rank,
            oversample,
            power_iters,
        } => shrink_randomized(m, tau, rank.max(1), oversample, power_iters),
    }
}

fn shrink_full(m: &Matrix, tau: f64) -> Result<Shrunk> {
    let (value, nuclear_norm, rank) = shrink_core(thin_svd(m)?, tau);
    Ok(Shrunk {
        value,
        nuclear_norm,
        rank,
    })
}

/// `U max(S - tau, 0) V^T`.
fn shrink_core(svd: ThinSvd, tau: f64) -> (Matrix, f64, usize) {
    let mut core = Matrix::zeros(svd.u.nrows(), svd.v_t.ncols());
    let mut nuclear_norm = 0.0;
    let mut rank = 0;
    for (i, &sigma) in svd.s.iter().enumerate() {
        let shrunk = sigma - tau;
        if shrunk <= 0.0 {
            break;
        }
        nuclear_norm += shrunk;
        rank += 1;
        core.ger(shrunk, &svd.u.column(i), &svd.v_t.row(i).transpose(), 1.0);
    }
    (core, nuclear_norm, rank)
}

fn shrink_randomized(
    m: &Matrix,
    tau: f64,
    rank: usize,
    oversample: usize,
    power_iters: usize,
) -> Result<Shrunk> {
    let (rows, cols) = m.shape();
    let full = rows.min(cols);
    let mut width = (rank + oversample).min(full);
    loop {
        if width >= full {
            return shrink_full(m, tau);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let omega = Matrix::from_fn(cols, width, |_, _| rng.random_range(-1.0..1.0));
        let mut basis = (m * omega).qr().q();
        for _ in 0..power_iters {
            let back = (m.transpose() * &basis).qr().q();
            basis = (m * back).qr().q();
        }
        let projected = basis.transpose() * m;
        let svd = thin_svd(&projected)?;
        let smallest = svd.s.last().copied().unwrap_or(0.0);
        if smallest > tau {
            width = (width * 2).min(full);
            continue;
        }
        let (core, nuclear_norm, r) = shrink_core(svd, tau);
        return Ok(Shrunk {
            value: basis * core,
            nuclear_norm,
            rank: r,
        });
    }
}

/// Entrywise soft thresholding `sign(m) max(|m| - tau, 0)`.
pub fn prox_l1(m: &Matrix, tau: f64) -> Matrix {
    m.map(|v| soft_threshold(v, tau))
}

#[inline]
pub fn soft_threshold(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Entrywise clamp of `m` into `[center - radius, center + radius]`.
pub fn project_box(m: &Matrix, center: &Matrix, radius: &Matrix) -> Result<Matrix> {
    if m.shape() != center.shape() {
        return Err(Error::shape("box center", m.shape(), center.shape()));
    }
    if m.shape() != radius.shape() {
        return Err(Error::shape("box radius", m.shape(), radius.shape()));
    }
    if radius.iter().any(|&r| r < 0.0) {
        return Err(Error::InvalidParameter("box radius must be nonnegative".into()));
    }
    Ok(Matrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        let c = center[(i, j)];
        let r = radius[(i, j)];
        m[(i, j)].clamp(c - r, c + r)
    }))
}

/// Sum of singular values; NaN for non-finite input.
pub fn nuclear_norm(m: &Matrix) -> f64 {
    singular_values(m).map_or(f64::NAN, |s| s.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_shrinkage() {
        let m = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0]));
        let out = prox_nuclear(&m, 2.0).unwrap();
        let expected = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.0]));
        assert!((out - expected).amax() < 1e-14);
    }

    #[test]
    fn large_tau_gives_zero() {
        let m = Matrix::from_fn(4, 7, |i, j| ((i * 3 + j) % 5) as f64 - 2.0);
        let sigma_max = singular_values(&m).unwrap()[0];
        let out = prox_nuclear(&m, sigma_max * 1.0001).unwrap();
        assert_eq!(out.amax(), 0.0);
    }

    #[test]
    fn nuclear_prox_rejects_bad_input() {
        let mut m = Matrix::zeros(2, 2);
        assert!(prox_nuclear(&m, 0.0).is_err());
        m[(0, 0)] = f64::INFINITY;
        assert!(matches!(prox_nuclear(&m, 1.0), Err(Error::Svd(_))));
    }

    #[test]
    fn tall_and_wide_agree() {
        let m = Matrix::from_fn(6, 3, |i, j| (i as f64 * 0.7 - j as f64).sin());
        let a = prox_nuclear(&m, 0.3).unwrap();
        let b = prox_nuclear(&m.transpose(), 0.3).unwrap();
        assert!((a - b.transpose()).amax() < 1e-12);
    }

    #[test]
    fn randomized_matches_full() {
        let left = Matrix::from_fn(30, 3, |i, j| ((i + 1) as f64 * (j + 1) as f64 * 0.37).cos());
        let right = Matrix::from_fn(3, 120, |i, j| ((j + 2) as f64 * (i + 1) as f64 * 0.05).sin());
        let noise = Matrix::from_fn(30, 120, |i, j| 1e-3 * ((i * 131 + j * 17) % 7) as f64);
        let m = left * right + noise;
        let full = shrink_singular_values(&m, 0.5, SvdMode::Full).unwrap();
        let rand = shrink_singular_values(
            &m,
            0.5,
            SvdMode::Randomized {
                rank: 2,
                oversample: 2,
                power_iters: 3,
            },
        )
        .unwrap();
        assert_eq!(full.rank, rand.rank);
        assert!((full.value - rand.value).amax() < 1e-8);
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(5.0, 2.0), 3.0);
        assert_eq!(soft_threshold(-1.0, 2.0), 0.0);
        assert_eq!(soft_threshold(-3.5, 2.0), -1.5);
        let m = Matrix::from_row_slice(1, 3, &[0.3, -0.2, 7.0]);
        assert_eq!(prox_l1(&m, 0.0), m);
    }

    #[test]
    fn box_projection() {
        let m = Matrix::from_row_slice(1, 3, &[0.5, -4.0, 9.0]);
        let c = Matrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]);
        let r = Matrix::from_row_slice(1, 3, &[1.0, 1.0, 2.0]);
        let out = project_box(&m, &c, &r).unwrap();
        assert_eq!(out, Matrix::from_row_slice(1, 3, &[0.5, -1.0, 3.0]));
        assert_eq!(project_box(&m, &c, &Matrix::zeros(1, 3)).unwrap(), c);
        assert!(project_box(&m, &c, &Matrix::zeros(1, 2)).is_err());
        assert!(project_box(&m, &c, &Matrix::from_element(1, 3, -1.0)).is_err());
    }
}
