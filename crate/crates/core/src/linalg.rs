use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factor of `a + ridge·I`, growing the ridge tenfold until the
/// factorization succeeds. Returns the factor and the ridge actually used.
pub(crate) fn cholesky_ridged(a: &DMatrix<f64>, base_ridge: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let k = a.nrows();
    if k == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    let scale = (0..k).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut ridge = base_ridge;
    for _ in 0..16 {
        let mut m = a.clone();
        for i in 0..k {
            m[(i, i)] += ridge;
        }
        if let Some(ch) = Cholesky::new(m) {
            return Ok((ch, ridge));
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 10.0 };
    }
    Err(Error::Singular(format!("matrix of order {k} is not positive definite even with ridge {ridge:e}")))
}

/// Solves the lower-triangular system `L x = b` for the factor of `ch`.
pub(crate) fn solve_lower(ch: &Cholesky<f64, Dyn>, b: &DMatrix<f64>) -> DMatrix<f64> {
    ch.l_dirty()
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal")
}

pub(crate) fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile (type 7).
pub(crate) fn quantile(values: &[f64], prob: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Median absolute deviation divided by 0.6745.
pub(crate) fn mad_sd(values: &[f64]) -> f64 {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    median(&dev) / 0.6745
}

pub(crate) fn sup_norm_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
