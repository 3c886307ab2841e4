//! Structured time-axis operators.
//!
//! All operators act on the rows of an `N x T` matrix, i.e. they are right
//! multiplications `M * Op`. Nothing here materializes a dense `T x T`
//! matrix: averaging is a block mean, the cumulative-sum operator is a running
//! sum, and the difference operator takes adjacent differences.
//!
//! | operator | right multiplication | effect on a row `x` |
//! |----------|----------------------|---------------------|
//! | [`AveragingOperator`] | `M * A` (`T x T/r`) | block means over `r` slots |
//! | [`CumSumOperator`] | `M * U` (upper-triangular ones) | running sum |
//! | [`DiffOperator`] | `M * W`, `W = U^-1` | `(x1, x2 - x1, ..., xT - xT-1)` |

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Interval averaging: column `j` of the output is the mean of input columns
/// `j*r .. (j+1)*r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AveragingOperator {
    horizon: usize,
    factor: usize,
}

impl AveragingOperator {
    pub fn new(horizon: usize, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidParameter(
                "averaging factor must be at least 1".into(),
            ));
        }
        if horizon == 0 || horizon % factor != 0 {
            return Err(Error::NotDivisible { horizon, factor });
        }
        Ok(Self { horizon, factor })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Number of coarse (meter) intervals, `T / r`.
    pub fn coarse_len(&self) -> usize {
        self.horizon / self.factor
    }

    /// `M * A`.
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.ncols() != self.horizon {
            return Err(Error::shape(
                "averaging input",
                (m.nrows(), self.horizon),
                m.shape(),
            ));
        }
        let rows = m.nrows();
        let mut out = Matrix::zeros(rows, self.coarse_len());
        let src = m.as_slice();
        let dst = out.as_mut_slice();
        let r = self.factor as f64;
        for j in 0..self.coarse_len() {
            let block = &mut dst[j * rows..(j + 1) * rows];
            for t in j * self.factor..(j + 1) * self.factor {
                for (acc, v) in block.iter_mut().zip(&src[t * rows..(t + 1) * rows]) {
                    *acc += v;
                }
            }
            for acc in block.iter_mut() {
                *acc /= r;
            }
        }
        Ok(out)
    }

    /// `M * A^T`: each coarse value is spread as `value / r` over its block.
    pub fn adjoint(&self, m: &Matrix) -> Result<Matrix> {
        if m.ncols() != self.coarse_len() {
            return Err(Error::shape(
                "averaging adjoint input",
                (m.nrows(), self.coarse_len()),
                m.shape(),
            ));
        }
        let rows = m.nrows();
        let mut out = Matrix::zeros(rows, self.horizon);
        let src = m.as_slice();
        let dst = out.as_mut_slice();
        let r = self.factor as f64;
        for t in 0..self.horizon {
            let j = t / self.factor;
            for (o, v) in dst[t * rows..(t + 1) * rows]
                .iter_mut()
                .zip(&src[j * rows..(j + 1) * rows])
            {
                *o = v / r;
            }
        }
        Ok(out)
    }

    /// Spectral norm: `A` has orthogonal columns of norm `1/sqrt(r)`.
    pub fn operator_norm(&self) -> f64 {
        1.0 / (self.factor as f64).sqrt()
    }
}

/// Running sum along time, `M * U` with `U` the all-ones upper-triangular matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CumSumOperator {
    horizon: usize,
}

impl CumSumOperator {
    pub fn new(horizon: usize) -> Self {
        Self { horizon }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m, "cumsum input")?;
        Ok(apply_cumsum(m))
    }

    /// `M * U^T`: reverse running sum, `out_t = sum_{s >= t} m_s`.
    pub fn adjoint(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m, "cumsum adjoint input")?;
        Ok(adjoint_cumsum(m))
    }

    /// Spectral norm of `U`, `1 / (2 sin(pi / (4T + 2)))`.
    pub fn operator_norm(&self) -> f64 {
        let t = self.horizon as f64;
        1.0 / (2.0 * (std::f64::consts::PI / (4.0 * t + 2.0)).sin())
    }

    fn check(&self, m: &Matrix, context: &'static str) -> Result<()> {
        if m.ncols() != self.horizon {
            return Err(Error::shape(context, (m.nrows(), self.horizon), m.shape()));
        }
        Ok(())
    }
}

/// Adjacent differences along time, `M * W` with `W = U^-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffOperator {
    horizon: usize,
}

impl DiffOperator {
    pub fn new(horizon: usize) -> Self {
        Self { horizon }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m, "diff input")?;
        Ok(apply_diff(m))
    }

    /// `M * W^T`: `out_t = m_t - m_{t+1}`, last column unchanged.
    pub fn adjoint(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m, "diff adjoint input")?;
        Ok(adjoint_diff(m))
    }

    /// Spectral norm of `W`, `2 sin((2T - 1) pi / (4T + 2))`.
    pub fn operator_norm(&self) -> f64 {
        let t = self.horizon as f64;
        2.0 * ((2.0 * t - 1.0) * std::f64::consts::PI / (4.0 * t + 2.0)).sin()
    }

    fn check(&self, m: &Matrix, context: &'static str) -> Result<()> {
        if m.ncols() != self.horizon {
            return Err(Error::shape(context, (m.nrows(), self.horizon), m.shape()));
        }
        Ok(())
    }
}

/// `M * A` for a factor `r`; see [`AveragingOperator::apply`].
pub fn apply_averaging(m: &Matrix, op: &AveragingOperator) -> Result<Matrix> {
    op.apply(m)
}

/// `M * A^T`; see [`AveragingOperator::adjoint`].
pub fn adjoint_averaging(m: &Matrix, op: &AveragingOperator) -> Result<Matrix> {
    op.adjoint(m)
}

/// Row-wise running sum, `M * U`.
pub fn apply_cumsum(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    cumsum_in_place(&mut out);
    out
}

/// Row-wise reverse running sum, `M * U^T`.
pub fn adjoint_cumsum(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    let rows = out.nrows();
    let cols = out.ncols();
    let data = out.as_mut_slice();
    for t in (0..cols.saturating_sub(1)).rev() {
        let (head, tail) = data.split_at_mut((t + 1) * rows);
        for (a, b) in head[t * rows..].iter_mut().zip(&tail[..rows]) {
            *a += b;
        }
    }
    out
}

/// Row-wise adjacent differences, `M * W`. The first column is kept as is.
pub fn apply_diff(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    let rows = out.nrows();
    let cols = out.ncols();
    let data = out.as_mut_slice();
    for t in (1..cols).rev() {
        let (head, tail) = data.split_at_mut(t * rows);
        for (b, a) in tail[..rows].iter_mut().zip(&head[(t - 1) * rows..]) {
            *b -= a;
        }
    }
    out
}

/// `M * W^T`: `out_t = m_t - m_{t+1}` for `t < T`, last column kept.
pub fn adjoint_diff(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    let rows = out.nrows();
    let cols = out.ncols();
    let data = out.as_mut_slice();
    for t in 0..cols.saturating_sub(1) {
        let (head, tail) = data.split_at_mut((t + 1) * rows);
        for (a, b) in head[t * rows..].iter_mut().zip(&tail[..rows]) {
            *a -= b;
        }
    }
    out
}

pub(crate) fn cumsum_in_place(m: &mut Matrix) {
    let rows = m.nrows();
    let cols = m.ncols();
    let data = m.as_mut_slice();
    for t in 1..cols {
        let (head, tail) = data.split_at_mut(t * rows);
        for (b, a) in tail[..rows].iter_mut().zip(&head[(t - 1) * rows..]) {
            *b += a;
        }
    }
}

/// Estimates the spectral norm of a linear map on `rows x cols` matrices by
/// power iteration on `adjoint(forward(.))`, starting from a fixed-seed
/// Gaussian-like matrix. Returns `||forward(x)||` for the final unit iterate,
/// which never exceeds the true norm.
pub fn estimate_operator_norm<F, G>(
    rows: usize,
    cols: usize,
    forward: F,
    adjoint: G,
    iterations: usize,
    seed: u64,
) -> f64
where
    F: Fn(&Matrix) -> Matrix,
    G: Fn(&Matrix) -> Matrix,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    let norm = x.norm();
    if norm == 0.0 {
        return 0.0;
    }
    x /= norm;
    for _ in 0..iterations {
        let y = adjoint(&forward(&x));
        let n = y.norm();
        if n == 0.0 {
            return 0.0;
        }
        x = y / n;
    }
    forward(&x).norm()
}
