//! Sandwich covariance of the nonzero penalized coefficients.

use nalgebra::{DMatrix, DVector};

use crate::beta_solver::BetaFit;
use crate::error::{Error, Result};
use crate::partial_lik::{risk_log_norms, risk_moments, LikelihoodContext};

#[derive(Debug, Clone)]
pub struct SandwichCov {
    /// Indices of the nonzero coefficients, in order.
    pub active: Vec<usize>,
    /// Covariance over `active`.
    pub covariance: DMatrix<f64>,
    /// Standard error per coefficient; `None` for zero coefficients.
    pub se: Vec<Option<f64>>,
    /// `p′_θ(|β̂_j|)/|β̂_j|` per coefficient (zero where `β̂_j = 0`).
    pub sigma_theta: Vec<f64>,
}

/// Per-subject contributions to the score `∇l(β)`, with η̂ held fixed:
/// `Δ_i (U_i − Ū(X_i)) − Σ_{p: i ∈ R_p} w_{ip} (U_i − Ū_p)` where `w_{ip}`
/// is subject `i`'s share of risk set `p`.
pub fn score_residuals(ctx: &LikelihoodContext<'_>, beta: &DVector<f64>, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let lp = ctx.linear_predictor(beta, eta)?;
    let rs = ctx.risk_set();
    let u = ctx.dataset().u();
    let (n, d) = u.shape();
    let mom = risk_moments(rs, &lp, u, false);
    let log_norm = risk_log_norms(rs, &lp);
    let mut resid = DMatrix::zeros(n, d);
    for p in 0..rs.n_failures() {
        let i = rs.failure(p);
        for j in 0..d {
            resid[(i, j)] += u[(i, j)] - mom.means[(p, j)];
        }
        for &k in rs.members(p) {
            let share = (lp[k] - log_norm[p]).exp();
            for j in 0..d {
                resid[(k, j)] -= share * (u[(k, j)] - mom.means[(p, j)]);
            }
        }
    }
    Ok(resid)
}

/// `{I(β̂) + nΣ_θ}⁻¹ Ĉ {I(β̂) + nΣ_θ}⁻¹` on the nonzero coefficients, with `Ĉ`
/// the sum of outer products of score residuals.
pub fn sandwich_cov(ctx: &LikelihoodContext<'_>, eta: &DVector<f64>, fit: &BetaFit) -> Result<SandwichCov> {
    let beta = fit.beta_vector();
    let d = beta.len();
    let spec = fit.spec();
    let sigma_theta: Vec<f64> = (0..d)
        .map(|j| {
            let b = beta[j].abs();
            if b == 0.0 {
                0.0
            } else {
                spec.deriv(j, b) / b
            }
        })
        .collect();
    let active = fit.nonzero();
    if active.is_empty() {
        return Err(Error::InvalidArgument("every coefficient is zero".into()));
    }
    let der = ctx.grad_hess_beta(&beta, eta)?;
    let resid = score_residuals(ctx, &beta, eta)?;
    let k = active.len();
    let n = ctx.n() as f64;
    let bread = DMatrix::from_fn(k, k, |a, b| {
        let v = der.information[(active[a], active[b])];
        if a == b {
            v + n * sigma_theta[active[a]]
        } else {
            v
        }
    });
    let r = resid.select_columns(&active);
    let meat = r.transpose() * &r;
    let inv = bread
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| bread.try_inverse())
        .ok_or_else(|| Error::Singular("sandwich bread".into()))?;
    let mut covariance = &inv * meat * &inv;
    crate::partial_lik::symmetrize(&mut covariance);
    let mut se = vec![None; d];
    for (a, &j) in active.iter().enumerate() {
        se[j] = Some(covariance[(a, a)].max(0.0).sqrt());
    }
    Ok(SandwichCov {
        active,
        covariance,
        se,
        sigma_theta,
    })
}
