//! Small dense helpers shared by the model fits.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Prepends an intercept column.
pub fn design(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = x.shape();
    DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

/// `(1, x)` for a single covariate vector.
pub fn augment(x: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.len() + 1, std::iter::once(1.0).chain(x.iter().copied()))
}

/// Cholesky factor of a symmetric matrix, rejecting numerically singular input.
pub fn cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let (rows, cols) = a.shape();
    let chol = Cholesky::new(a.clone()).ok_or(Error::RankDeficient { rows, cols })?;
    let diag = chol.l_dirty().diagonal();
    let max = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    // squared pivot ratio bounds the reciprocal condition number
    if max == 0.0 || (min / max).powi(2) < 1e-14 {
        return Err(Error::RankDeficient { rows, cols });
    }
    Ok(chol)
}

/// Identity with a zero in the intercept slot.
pub fn penalty_mask(p: usize) -> DMatrix<f64> {
    let mut m = DMatrix::identity(p, p);
    if p > 0 {
        m[(0, 0)] = 0.0;
    }
    m
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_matrix_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky(&a).is_err());
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!(cholesky(&b).is_ok());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
