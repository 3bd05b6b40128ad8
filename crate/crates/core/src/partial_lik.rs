//! Cox log partial likelihood with Breslow handling of ties.
//!
//! Everything is computed from risk-set moments of a linear predictor
//! `lp = Uβ + η(W)`: the log normalizers `log Σ_{k∈R_p} exp(lp_k)`, the
//! weighted means of a design over each risk set, and the summed risk-set
//! covariances. Risk sets are suffixes of the time order, so all moments are
//! suffix sums and cost `O(n·m + N·m²)`.

use nalgebra::{DMatrix, DVector};

use crate::data::{RiskSet, SurvivalDataset};
use crate::error::{Error, Result};
use crate::spline::SplineDesign;

/// Log-sum-exp of the linear predictor over each risk set.
pub(crate) fn risk_log_norms(rs: &RiskSet, lp: &[f64]) -> Vec<f64> {
    let order = rs.by_time();
    let n = order.len();
    // running (max, scaled sum) from the latest time backwards
    let mut suffix = vec![f64::NEG_INFINITY; n + 1];
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for pos in (0..n).rev() {
        let v = lp[order[pos]];
        if v > max {
            sum = sum * (max - v).exp() + 1.0;
            max = v;
        } else {
            sum += (v - max).exp();
        }
        suffix[pos] = max + sum.ln();
    }
    (0..rs.n_failures()).map(|p| suffix[rs.start(p)]).collect()
}

/// Risk-set moments of the columns of `x` under weights `exp(lp)`.
pub(crate) struct RiskMoments {
    /// `log Σ_{k∈R_p} exp(lp_k)` per failure.
    pub log_norm: Vec<f64>,
    /// Weighted mean of the design over each risk set (`N × m`).
    pub means: DMatrix<f64>,
    /// `Σ_p Cov_p(x)`, present when requested.
    pub covariance: Option<DMatrix<f64>>,
}

pub(crate) fn risk_moments(rs: &RiskSet, lp: &[f64], x: &DMatrix<f64>, with_covariance: bool) -> RiskMoments {
    let order = rs.by_time();
    let n = order.len();
    let m = x.ncols();
    let n_fail = rs.n_failures();
    let log_norm = risk_log_norms(rs, lp);
    let shift = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weight: Vec<f64> = lp.iter().map(|v| (v - shift).exp()).collect();

    // suffix sums of weight·x over the time order, column-major
    let mut suffix = DMatrix::zeros(n + 1, m);
    let mut suffix_w = vec![0.0; n + 1];
    for pos in (0..n).rev() {
        let k = order[pos];
        suffix_w[pos] = suffix_w[pos + 1] + weight[k];
    }
    for j in 0..m {
        let mut acc = 0.0;
        for pos in (0..n).rev() {
            let k = order[pos];
            acc += weight[k] * x[(k, j)];
            suffix[(pos, j)] = acc;
        }
    }
    let mut means = DMatrix::zeros(n_fail, m);
    for p in 0..n_fail {
        let s = rs.start(p);
        let denom = suffix_w[s];
        for j in 0..m {
            means[(p, j)] = suffix[(s, j)] / denom;
        }
    }

    let covariance = with_covariance.then(|| {
        // D_k = Σ_{p: k ∈ R_p} exp(lp_k − log_norm_p)
        let mut at_start = vec![0.0; n];
        for p in 0..n_fail {
            at_start[rs.start(p)] += (shift - log_norm[p]).exp();
        }
        let mut acc = 0.0;
        let mut diag = DVector::zeros(n);
        for pos in 0..n {
            acc += at_start[pos];
            let k = order[pos];
            diag[k] = weight[k] * acc;
        }
        let mut scaled = x.clone();
        for (k, mut row) in scaled.row_iter_mut().enumerate() {
            row *= diag[k];
        }
        let mut cov = x.tr_mul(&scaled);
        cov -= means.tr_mul(&means);
        symmetrize(&mut cov);
        cov
    });

    RiskMoments {
        log_norm,
        means,
        covariance,
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let k = m.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Log partial likelihood `l`, its gradient and the information `−∇²l`
/// with respect to the coefficients of a design.
#[derive(Debug, Clone)]
pub struct CoxDerivatives {
    pub loglik: f64,
    pub gradient: DVector<f64>,
    pub information: DMatrix<f64>,
}

/// Derivatives of `l(γ) = Σ_p {lp_{i_p} − log Σ_{R_p} exp(lp_k)}` with
/// `lp = offset + x·γ`, evaluated at the given linear predictor.
pub(crate) fn cox_derivatives(rs: &RiskSet, lp: &[f64], x: &DMatrix<f64>) -> CoxDerivatives {
    let mom = risk_moments(rs, lp, x, true);
    let mut loglik = 0.0;
    let mut gradient = DVector::zeros(x.ncols());
    for p in 0..rs.n_failures() {
        let i = rs.failure(p);
        loglik += lp[i] - mom.log_norm[p];
        for j in 0..x.ncols() {
            gradient[j] += x[(i, j)] - mom.means[(p, j)];
        }
    }
    CoxDerivatives {
        loglik,
        gradient,
        information: mom.covariance.expect("requested"),
    }
}

pub(crate) fn log_partial_likelihood(rs: &RiskSet, lp: &[f64]) -> f64 {
    let log_norm = risk_log_norms(rs, lp);
    (0..rs.n_failures()).map(|p| lp[rs.failure(p)] - log_norm[p]).sum()
}

/// Dataset plus its risk sets; the shared input of every likelihood.
#[derive(Debug, Clone)]
pub struct LikelihoodContext<'a> {
    ds: &'a SurvivalDataset,
    rs: RiskSet,
}

/// Value, gradient and Hessian of the penalized η objective.
#[derive(Debug, Clone)]
pub struct EtaObjective {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl<'a> LikelihoodContext<'a> {
    pub fn new(ds: &'a SurvivalDataset) -> Self {
        Self {
            ds,
            rs: RiskSet::build(ds),
        }
    }

    pub fn dataset(&self) -> &'a SurvivalDataset {
        self.ds
    }

    pub fn risk_set(&self) -> &RiskSet {
        &self.rs
    }

    pub fn n(&self) -> usize {
        self.ds.n()
    }

    /// `Uβ + η` at every subject.
    pub fn linear_predictor(&self, beta: &DVector<f64>, eta_vals: &DVector<f64>) -> Result<Vec<f64>> {
        if beta.len() != self.ds.d() {
            return Err(Error::DimensionMismatch(format!(
                "β has length {}, data has {} parametric covariates",
                beta.len(),
                self.ds.d()
            )));
        }
        if eta_vals.len() != self.ds.n() {
            return Err(Error::DimensionMismatch(format!(
                "η has {} values for {} subjects",
                eta_vals.len(),
                self.ds.n()
            )));
        }
        let ub = self.ds.u() * beta;
        let lp: Vec<f64> = ub.iter().zip(eta_vals.iter()).map(|(a, b)| a + b).collect();
        if lp.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite linear predictor".into()));
        }
        Ok(lp)
    }

    /// Unnormalized log partial likelihood `l(β, η)`.
    pub fn log_pl(&self, beta: &DVector<f64>, eta_vals: &DVector<f64>) -> Result<f64> {
        let lp = self.linear_predictor(beta, eta_vals)?;
        Ok(log_partial_likelihood(&self.rs, &lp))
    }

    /// `−(1/n) l(β, η)`.
    pub fn neg_log_pl(&self, beta: &DVector<f64>, eta_vals: &DVector<f64>) -> Result<f64> {
        Ok(-self.log_pl(beta, eta_vals)? / self.n() as f64)
    }

    /// Gradient of `l` in β and the information `I(β) = −∇²l`, η held fixed.
    pub fn grad_hess_beta(&self, beta: &DVector<f64>, eta_vals: &DVector<f64>) -> Result<CoxDerivatives> {
        let lp = self.linear_predictor(beta, eta_vals)?;
        Ok(cox_derivatives(&self.rs, &lp, self.ds.u()))
    }

    /// `−(1/n) l(β, η) + λ·J(η)` for `η = design·coef`, with derivatives in
    /// every spline coefficient. Null-space coefficients are unpenalized.
    pub fn penalized_eta_objective(
        &self,
        design: &SplineDesign,
        coef: &DVector<f64>,
        lambda: f64,
        beta: &DVector<f64>,
    ) -> Result<EtaObjective> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("λ must be positive, got {lambda}")));
        }
        if coef.len() != design.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for a basis of dimension {}",
                coef.len(),
                design.dim()
            )));
        }
        self.penalized_objective(&design.data, &design.penalty, coef, lambda, beta)
    }

    /// `−(1/n) l(β, x·coef) + λ·coefᵀ·penalty·coef` for an arbitrary
    /// coefficient parametrization of η.
    pub fn penalized_objective(
        &self,
        x: &DMatrix<f64>,
        penalty: &DMatrix<f64>,
        coef: &DVector<f64>,
        lambda: f64,
        beta: &DVector<f64>,
    ) -> Result<EtaObjective> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("λ must be positive, got {lambda}")));
        }
        if coef.len() != x.ncols() || penalty.nrows() != x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for a design with {} columns",
                coef.len(),
                x.ncols()
            )));
        }
        let eta = x * coef;
        let lp = self.linear_predictor(beta, &eta)?;
        let der = cox_derivatives(&self.rs, &lp, x);
        let inv_n = 1.0 / self.n() as f64;
        let pc = penalty * coef;
        Ok(EtaObjective {
            value: -der.loglik * inv_n + lambda * coef.dot(&pc),
            gradient: -der.gradient * inv_n + pc * (2.0 * lambda),
            hessian: der.information * inv_n + penalty * (2.0 * lambda),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::{build_basis, select_knots, Structure};
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(n: usize, d: usize, q: usize, seed: u64) -> SurvivalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times = (0..n).map(|_| (rng.random::<f64>() * 10.0).round() / 2.0).collect();
        let mut events: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.75).collect();
        events[0] = true;
        let u = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let w = DMatrix::from_fn(n, q, |_, _| rng.random::<f64>());
        SurvivalDataset::with_w_bounds(times, events, u, w, &vec![(0.0, 1.0); q]).unwrap()
    }

    /// Product form: Π_p exp(lp_{i_p}) / Σ_k Y_k(X_{i_p}) exp(lp_k), by a double loop.
    fn product_form(ds: &SurvivalDataset, lp: &[f64]) -> f64 {
        let t = ds.times();
        let mut log_prod = 0.0;
        for &i in ds.failure_order() {
            let denom: f64 = (0..ds.n()).filter(|&k| t[k] >= t[i]).map(|k| lp[k].exp()).sum();
            log_prod += (lp[i].exp() / denom).ln();
        }
        log_prod
    }

    #[test]
    fn single_subject_gives_zero() {
        let w = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let ds = SurvivalDataset::new(vec![1.0, 2.0], vec![false, true], DMatrix::zeros(2, 0), w).unwrap();
        let ctx = LikelihoodContext::new(&ds);
        // only the last subject fails; its risk set is itself
        let v = ctx.log_pl(&DVector::zeros(0), &DVector::zeros(2)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn two_failures_half_log_two() {
        let w = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let ds = SurvivalDataset::new(vec![1.0, 2.0], vec![true, true], DMatrix::zeros(2, 0), w).unwrap();
        let ctx = LikelihoodContext::new(&ds);
        let v = ctx.neg_log_pl(&DVector::zeros(0), &DVector::zeros(2)).unwrap();
        assert!((v - 0.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn matches_product_form() {
        for seed in 0..5 {
            let ds = random_dataset(15, 2, 1, seed);
            let ctx = LikelihoodContext::new(&ds);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let beta = DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
            let eta = DVector::from_fn(15, |_, _| rng.random::<f64>() - 0.5);
            let lp = ctx.linear_predictor(&beta, &eta).unwrap();
            let direct = -product_form(&ds, &lp) / 15.0;
            let ours = ctx.neg_log_pl(&beta, &eta).unwrap();
            assert!((direct - ours).abs() < 1e-12, "{direct} vs {ours}");
        }
    }

    #[test]
    fn shift_invariance_in_eta() {
        let ds = random_dataset(30, 1, 1, 9);
        let ctx = LikelihoodContext::new(&ds);
        let beta = DVector::from_element(1, 0.3);
        let eta = DVector::from_fn(30, |i, _| (i as f64).sin());
        let shifted = eta.add_scalar(4.2);
        let a = ctx.neg_log_pl(&beta, &eta).unwrap();
        let b = ctx.neg_log_pl(&beta, &shifted).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn huge_predictor_does_not_overflow() {
        let ds = random_dataset(20, 1, 1, 4);
        let ctx = LikelihoodContext::new(&ds);
        let eta = DVector::from_fn(20, |i, _| 800.0 + i as f64);
        assert!(ctx.neg_log_pl(&DVector::zeros(1), &eta).unwrap().is_finite());
    }

    #[test]
    fn beta_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let ds = random_dataset(40, 3, 1, seed);
            let ctx = LikelihoodContext::new(&ds);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let beta = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
            let eta = DVector::from_fn(40, |_, _| rng.random::<f64>() - 0.5);
            let der = ctx.grad_hess_beta(&beta, &eta).unwrap();
            let h = 1e-5;
            for j in 0..3 {
                let mut bp = beta.clone();
                bp[j] += h;
                let mut bm = beta.clone();
                bm[j] -= h;
                let fd = (ctx.log_pl(&bp, &eta).unwrap() - ctx.log_pl(&bm, &eta).unwrap()) / (2.0 * h);
                assert!((fd - der.gradient[j]).abs() <= 1e-6 * der.gradient[j].abs().max(1.0));
            }
            let eig = SymmetricEigen::new(der.information.clone());
            assert!(eig.eigenvalues.min() >= -1e-8);
        }
    }

    #[test]
    fn symmetric_two_subject_gradient_is_zero() {
        let u = DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]);
        let w = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let ds = SurvivalDataset::new(vec![1.0, 1.0], vec![true, true], u, w).unwrap();
        let ctx = LikelihoodContext::new(&ds);
        let der = ctx.grad_hess_beta(&DVector::zeros(1), &DVector::zeros(2)).unwrap();
        assert!(der.gradient[0].abs() < 1e-15);
    }

    #[test]
    fn eta_objective_at_zero_and_gradient() {
        let ds = random_dataset(35, 2, 2, 3);
        let ctx = LikelihoodContext::new(&ds);
        let design = build_basis(&ds, &select_knots(&ds, 1), &Structure::full()).unwrap();
        let beta = DVector::from_vec(vec![0.2, -0.4]);
        let zero = DVector::zeros(design.dim());
        let obj = ctx.penalized_eta_objective(&design, &zero, 1e-3, &beta).unwrap();
        let nl = ctx.neg_log_pl(&beta, &DVector::zeros(35)).unwrap();
        assert!((obj.value - nl).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coef = DVector::from_fn(design.dim(), |_, _| rng.random::<f64>() - 0.5);
        let lambda = 1e-2;
        let obj = ctx.penalized_eta_objective(&design, &coef, lambda, &beta).unwrap();
        let h = 1e-5;
        for j in 0..design.dim() {
            let mut cp = coef.clone();
            cp[j] += h;
            let mut cm = coef.clone();
            cm[j] -= h;
            let fp = ctx.penalized_eta_objective(&design, &cp, lambda, &beta).unwrap().value;
            let fm = ctx.penalized_eta_objective(&design, &cm, lambda, &beta).unwrap().value;
            let fd = (fp - fm) / (2.0 * h);
            let tol = 1e-6 * obj.gradient[j].abs().max(1e-3);
            assert!((fd - obj.gradient[j]).abs() <= tol, "coef {j}: fd {fd} vs {}", obj.gradient[j]);
        }
    }

    #[test]
    fn rejects_nonpositive_lambda() {
        let ds = random_dataset(10, 0, 1, 3);
        let ctx = LikelihoodContext::new(&ds);
        let design = build_basis(&ds, &[0, 1, 2], &Structure::univariate()).unwrap();
        let zero = DVector::zeros(design.dim());
        assert!(ctx.penalized_eta_objective(&design, &zero, 0.0, &DVector::zeros(0)).is_err());
    }
}
