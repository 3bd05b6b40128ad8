//! Kullback–Leibler geometry for choosing the nonparametric structure.
//!
//! With β fixed, each failure `p` defines a density on the observed covariate
//! points `W_n` proportional to `a_p(W_k) e^{η(W_k)}` with biased-sampling
//! weights `a_p(W_k) = Y_k(X_{i_p}) e^{U_kᵀβ}`. The fitted η̂ is projected onto
//! a reduced ANOVA structure, and the share of `KL(η̂, η_c)` lost by the
//! projection judges whether the reduction is acceptable.

use nalgebra::{DMatrix, DVector};

use crate::data::{RiskSet, SurvivalDataset};
use crate::error::{Error, Result};
use crate::linalg::cholesky_ridged;
use crate::partial_lik::{risk_log_norms, risk_moments};
use crate::spline::{SplineDesign, Structure};

pub const DEFAULT_THRESHOLD: f64 = 0.05;

/// `a_p(W_k) = Y_k(X_{i_p}) exp(U_kᵀβ)`, stored as the risk sets and the
/// offsets `U_kᵀβ`.
#[derive(Debug, Clone)]
pub struct BiasedWeights {
    rs: RiskSet,
    offset: Vec<f64>,
}

impl BiasedWeights {
    pub fn new(ds: &SurvivalDataset, beta: &DVector<f64>) -> Result<Self> {
        if beta.len() != ds.d() {
            return Err(Error::DimensionMismatch(format!("β has length {}, expected {}", beta.len(), ds.d())));
        }
        let offset: Vec<f64> = (ds.u() * beta).iter().copied().collect();
        if offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parametric offset".into()));
        }
        Ok(Self {
            rs: RiskSet::build(ds),
            offset,
        })
    }

    pub fn n_points(&self) -> usize {
        self.offset.len()
    }

    pub fn n_failures(&self) -> usize {
        self.rs.n_failures()
    }

    pub fn risk_set(&self) -> &RiskSet {
        &self.rs
    }

    /// `a_p(W_k)`.
    pub fn weight(&self, p: usize, k: usize) -> f64 {
        if self.rs.contains(p, k) {
            self.offset[k].exp()
        } else {
            0.0
        }
    }

    /// `N × n` matrix of all weights.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_failures(), self.n_points(), |p, k| self.weight(p, k))
    }

    fn predictor(&self, eta: &DVector<f64>) -> Vec<f64> {
        self.offset.iter().zip(eta.iter()).map(|(a, b)| a + b).collect()
    }

    fn check(&self, eta: &DVector<f64>) -> Result<()> {
        if eta.len() != self.n_points() {
            return Err(Error::DimensionMismatch(format!(
                "η has {} values, the domain has {} points",
                eta.len(),
                self.n_points()
            )));
        }
        Ok(())
    }
}

/// `KL(η₁, η₂)` averaged over failures.
pub fn kl_distance(eta1: &DVector<f64>, eta2: &DVector<f64>, weights: &BiasedWeights) -> Result<f64> {
    weights.check(eta1)?;
    weights.check(eta2)?;
    let lp1 = weights.predictor(eta1);
    let lp2 = weights.predictor(eta2);
    let diff = DMatrix::from_column_slice(eta1.len(), 1, (eta1 - eta2).as_slice());
    let mom = risk_moments(&weights.rs, &lp1, &diff, false);
    let norm2 = risk_log_norms(&weights.rs, &lp2);
    let n_fail = weights.n_failures();
    let total: f64 = (0..n_fail).map(|p| mom.means[(p, 0)] - mom.log_norm[p] + norm2[p]).sum();
    Ok(total / n_fail as f64)
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub structure: Structure,
    /// `η̃` at the domain points.
    pub values: DVector<f64>,
    /// Coefficients over an orthogonal basis of the reduced span, scaled so
    /// each basis vector has mean square one over the domain points.
    pub coef: DVector<f64>,
    pub columns: Vec<usize>,
    pub kl: f64,
    /// Largest absolute first-order condition residual at the solution.
    pub stationarity: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Orthogonal basis of the column span of `x`, columns scaled to mean
/// square one. Directions with singular value below `1e-9` of the largest
/// are treated as rank deficiency and dropped.
fn orthonormal_span(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let svd = x.clone().svd(true, false);
    let u = svd.u.expect("requested");
    let top = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > 1e-9 * top)
        .collect();
    u.select_columns(&keep) * (n as f64).sqrt()
}

/// KL projection of `eta_hat` onto the span of the reduced structure's
/// working columns of `design`, by Newton's method.
pub fn kl_project(eta_hat: &DVector<f64>, design: &SplineDesign, reduced: &Structure, weights: &BiasedWeights) -> Result<Projection> {
    weights.check(eta_hat)?;
    let columns = if reduced.terms().is_empty() {
        Vec::new()
    } else {
        design.work_columns_for(reduced)?
    };
    if !reduced.is_subset_of(design.basis.structure()) {
        return Err(Error::Structure(format!(
            "{reduced} is not nested in the fitted structure {}",
            design.basis.structure()
        )));
    }
    let n = weights.n_points();
    if columns.is_empty() {
        let zero = DVector::zeros(n);
        return Ok(Projection {
            structure: reduced.clone(),
            kl: kl_distance(eta_hat, &zero, weights)?,
            values: zero,
            coef: DVector::zeros(0),
            columns,
            stationarity: 0.0,
            converged: true,
            iterations: 0,
        });
    }
    let x = orthonormal_span(&design.work.select_columns(&columns));
    let n_fail = weights.n_failures() as f64;
    let target = risk_moments(&weights.rs, &weights.predictor(eta_hat), &x, false).means.row_sum() / n_fail;

    let mut coef = DVector::zeros(x.ncols());
    let mut values = DVector::zeros(n);
    let mut kl = kl_distance(eta_hat, &values, weights)?;
    let mut converged = false;
    let mut iterations = 0;
    let mut stationarity = f64::INFINITY;
    while iterations < 100 {
        let mom = risk_moments(&weights.rs, &weights.predictor(&values), &x, true);
        let grad = mom.means.row_sum().transpose() / n_fail - target.transpose();
        stationarity = grad.amax();
        if stationarity * (1.0 + coef.amax()) < 1e-13 {
            converged = true;
            break;
        }
        let hess = mom.covariance.expect("requested") / n_fail;
        let (chol, _) = cholesky_ridged(&hess, 1e-14 * (1.0 + hess.diagonal().amax()))?;
        let step = -chol.solve(&grad);
        let decrement = -grad.dot(&step);
        iterations += 1;
        if decrement < 1e-12 {
            // inside the quadratic region KL changes are below rounding, so
            // take plain Newton steps while the gradient keeps shrinking
            let cand = &coef + &step;
            let cand_values = &x * &cand;
            let cand_mom = risk_moments(&weights.rs, &weights.predictor(&cand_values), &x, false);
            let cand_grad = cand_mom.means.row_sum().transpose() / n_fail - target.transpose();
            if cand_grad.amax() >= stationarity {
                converged = stationarity < 1e-8;
                break;
            }
            kl = kl_distance(eta_hat, &cand_values, weights)?;
            coef = cand;
            values = cand_values;
            continue;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &coef + &step * t;
            let cand_values = &x * &cand;
            let cand_kl = kl_distance(eta_hat, &cand_values, weights)?;
            if cand_kl <= kl {
                accepted = Some((cand, cand_values, cand_kl));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((c, v, k)) => {
                coef = c;
                values = v;
                kl = k;
            }
            None => {
                converged = stationarity < 1e-8;
                break;
            }
        }
    }
    if !converged && stationarity < 1e-8 {
        converged = true;
    }
    Ok(Projection {
        structure: reduced.clone(),
        values,
        coef,
        columns,
        kl,
        stationarity,
        converged,
        iterations,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct KLReport {
    pub candidate: String,
    /// `KL(η̂, η̃)`.
    pub kl_full_reduced: f64,
    /// `KL(η̃, η_c)`.
    pub kl_reduced_const: f64,
    /// `KL(η̂, η_c)`.
    pub kl_full_const: f64,
    pub ratio: f64,
    pub feasible: bool,
    /// `KL(η̂,η_c) − KL(η̂,η̃) − KL(η̃,η_c)`; zero for an exact projection.
    pub pythagorean_defect: f64,
    pub converged: bool,
}

/// One report per candidate reduced structure.
pub fn kl_ratio_report(
    eta_hat: &DVector<f64>,
    design: &SplineDesign,
    candidates: &[Structure],
    weights: &BiasedWeights,
    threshold: f64,
) -> Result<Vec<KLReport>> {
    let zero = DVector::zeros(eta_hat.len());
    let kl_full_const = kl_distance(eta_hat, &zero, weights)?;
    candidates
        .iter()
        .map(|cand| {
            let proj = kl_project(eta_hat, design, cand, weights)?;
            let kl_reduced_const = kl_distance(&proj.values, &zero, weights)?;
            let ratio = if kl_full_const > 0.0 { proj.kl / kl_full_const } else { 0.0 };
            Ok(KLReport {
                candidate: cand.to_string(),
                kl_full_reduced: proj.kl,
                kl_reduced_const,
                kl_full_const,
                ratio,
                feasible: ratio < threshold,
                pythagorean_defect: kl_full_const - proj.kl - kl_reduced_const,
                converged: proj.converged,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::{build_basis, select_knots};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(n: usize, d: usize, q: usize, seed: u64) -> SurvivalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times = (0..n).map(|_| (rng.random::<f64>() * 20.0).round()).collect();
        let mut events: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
        events[0] = true;
        let u = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() - 0.5);
        let w = DMatrix::from_fn(n, q, |_, _| rng.random::<f64>());
        SurvivalDataset::with_w_bounds(times, events, u, w, &vec![(0.0, 1.0); q]).unwrap()
    }

    /// Direct evaluation of the averaged KL with explicit weight loops.
    fn kl_two_loop(eta1: &[f64], eta2: &[f64], a: &DMatrix<f64>) -> f64 {
        let (nf, n) = a.shape();
        let mut total = 0.0;
        for p in 0..nf {
            let (mut m1, mut m2, mut num) = (0.0, 0.0, 0.0);
            for k in 0..n {
                m1 += a[(p, k)] * eta1[k].exp() / n as f64;
                m2 += a[(p, k)] * eta2[k].exp() / n as f64;
                num += (eta1[k] - eta2[k]) * a[(p, k)] * eta1[k].exp() / n as f64;
            }
            total += num / m1 - m1.ln() + m2.ln();
        }
        total / nf as f64
    }

    #[test]
    fn hand_value() {
        let ds = SurvivalDataset::with_w_bounds(
            vec![1.0, 1.0],
            vec![true, false],
            DMatrix::zeros(2, 0),
            DMatrix::from_column_slice(2, 1, &[0.2, 0.8]),
            &[(0.0, 1.0)],
        )
        .unwrap();
        let wts = BiasedWeights::new(&ds, &DVector::zeros(0)).unwrap();
        let kl = kl_distance(&DVector::from_vec(vec![0.0, 0.0]), &DVector::from_vec(vec![1.0, -1.0]), &wts).unwrap();
        assert!((kl - 1f64.cosh().ln()).abs() < 1e-14);
        assert!((kl - 0.43378).abs() < 1e-5);
    }

    #[test]
    fn matches_two_loop_oracle() {
        for seed in 0..20 {
            let ds = random_dataset(12, 2, 1, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let beta = DVector::from_fn(2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let e1 = DVector::from_fn(12, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let e2 = DVector::from_fn(12, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let wts = BiasedWeights::new(&ds, &beta).unwrap();
            let fast = kl_distance(&e1, &e2, &wts).unwrap();
            let slow = kl_two_loop(e1.as_slice(), e2.as_slice(), &wts.matrix());
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn weights_invariants() {
        let ds = random_dataset(15, 2, 1, 3);
        let wts = BiasedWeights::new(&ds, &DVector::from_vec(vec![0.3, -0.7])).unwrap();
        let a = wts.matrix();
        assert!(a.iter().all(|v| *v >= 0.0));
        for p in 0..wts.n_failures() {
            assert!(a[(p, wts.risk_set().failure(p))] > 0.0);
        }
    }

    proptest! {
        #[test]
        fn identical_and_shifted_are_zero(seed in 0u64..1000, c in -5.0f64..5.0) {
            let ds = random_dataset(10, 1, 1, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = DVector::from_fn(10, |_, _| rng.random::<f64>() * 3.0 - 1.5);
            let wts = BiasedWeights::new(&ds, &DVector::from_vec(vec![0.5])).unwrap();
            prop_assert!(kl_distance(&e, &e, &wts).unwrap().abs() < 1e-12);
            let shifted = e.add_scalar(c);
            prop_assert!(kl_distance(&e, &shifted, &wts).unwrap().abs() < 1e-12);
            prop_assert!(kl_distance(&shifted, &e, &wts).unwrap().abs() < 1e-12);
        }
    }

    fn additive_setup(seed: u64) -> (SurvivalDataset, SplineDesign, DVector<f64>) {
        let ds = random_dataset(60, 1, 2, seed);
        let design = build_basis(&ds, &select_knots(&ds, seed), &Structure::full()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let b = DVector::from_fn(design.work_dim(), |_, _| (rng.random::<f64>() - 0.5) * 0.5);
        let eta = &design.work * b;
        (ds, design, eta)
    }

    #[test]
    fn projection_properties() {
        let (ds, design, eta) = additive_setup(4);
        let wts = BiasedWeights::new(&ds, &DVector::from_vec(vec![0.4])).unwrap();
        let cands = [Structure::full(), Structure::additive(), Structure::univariate(), Structure::constant()];
        let reports = kl_ratio_report(&eta, &design, &cands, &wts, DEFAULT_THRESHOLD).unwrap();
        assert!(reports[0].kl_full_reduced.abs() < 1e-10);
        assert!(reports[0].feasible);
        assert!((reports[3].ratio - 1.0).abs() < 1e-8);
        assert!(!reports[3].feasible);
        for r in &reports {
            assert!(r.pythagorean_defect.abs() < 1e-6, "{r:?}");
            assert!(r.kl_full_reduced >= -1e-10 && r.kl_reduced_const >= -1e-10);
            assert!(r.ratio >= -1e-8 && r.ratio <= 1.0 + 1e-8);
        }
    }

    #[test]
    fn projection_is_stationary() {
        let (ds, design, eta) = additive_setup(5);
        let wts = BiasedWeights::new(&ds, &DVector::from_vec(vec![-0.2])).unwrap();
        let proj = kl_project(&eta, &design, &Structure::additive(), &wts).unwrap();
        assert!(proj.converged);
        assert!(proj.stationarity < 1e-8);
    }

    #[test]
    fn ratio_is_shift_invariant() {
        let (ds, design, eta) = additive_setup(6);
        let wts = BiasedWeights::new(&ds, &DVector::from_vec(vec![0.1])).unwrap();
        let cands = [Structure::additive()];
        let a = kl_ratio_report(&eta, &design, &cands, &wts, DEFAULT_THRESHOLD).unwrap();
        let b = kl_ratio_report(&eta.add_scalar(2.5), &design, &cands, &wts, DEFAULT_THRESHOLD).unwrap();
        assert!((a[0].ratio - b[0].ratio).abs() < 1e-8);
    }

    #[test]
    fn non_nested_candidate_is_rejected() {
        let ds = random_dataset(30, 1, 2, 8);
        let design = build_basis(&ds, &select_knots(&ds, 8), &Structure::univariate()).unwrap();
        let wts = BiasedWeights::new(&ds, &DVector::from_vec(vec![0.1])).unwrap();
        let eta = DVector::zeros(30);
        assert!(kl_project(&eta, &design, &Structure::additive(), &wts).is_err());
    }
}
