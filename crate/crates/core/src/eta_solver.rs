//! Penalized Newton fit of the nonparametric component for fixed β,
//! smoothing-parameter selection by the cross-validated relative KL score,
//! and Bayesian pointwise confidence bands.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_ridged, solve_lower};
use crate::partial_lik::{log_partial_likelihood, risk_log_norms, LikelihoodContext};
use crate::spline::{EtaCoefficients, SplineDesign, Term};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Ridge added to the Hessian before factorization.
    pub ridge: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
            max_halvings: 30,
            ridge: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EtaFit {
    pub coef: EtaCoefficients,
    /// Coefficients in the working coordinates of the design.
    pub work_coef: DVector<f64>,
    pub lambda: f64,
    /// `η̂(W_i)` at every subject, on the `∫η = 0` scale of the basis.
    pub fitted: DVector<f64>,
    /// Hessian of `n ×` the penalized objective at the optimum, in working
    /// coordinates: `−∇²l + 2nλP`.
    pub hessian: DMatrix<f64>,
    /// Penalized objective `−l/n + λJ` at the optimum.
    pub objective: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn objective_value(ctx: &LikelihoodContext<'_>, design: &SplineDesign, offset: &DVector<f64>, b: &DVector<f64>, lambda: f64) -> f64 {
    let eta = &design.work * b;
    let lp: Vec<f64> = offset.iter().zip(eta.iter()).map(|(a, b)| a + b).collect();
    if lp.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    -log_partial_likelihood(ctx.risk_set(), &lp) / ctx.n() as f64 + lambda * b.dot(&(&design.work_penalty * b))
}

/// Minimizes `−(1/n) l(β, η) + λJ(η)` over the spline coefficients.
pub fn fit_eta(
    ctx: &LikelihoodContext<'_>,
    design: &SplineDesign,
    beta: &DVector<f64>,
    lambda: f64,
    warm_start: Option<&EtaCoefficients>,
) -> Result<EtaFit> {
    let warm = match warm_start {
        Some(w) if w.len() == design.dim() => Some(design.to_working(&w.to_vector())),
        Some(w) => {
            return Err(Error::DimensionMismatch(format!(
                "warm start has {} coefficients, basis has {}",
                w.len(),
                design.dim()
            )))
        }
        None => None,
    };
    fit_eta_work(ctx, design, beta, lambda, warm.as_ref(), &NewtonOptions::default())
}

/// [`fit_eta`] with a warm start given in working coordinates.
pub fn fit_eta_work(
    ctx: &LikelihoodContext<'_>,
    design: &SplineDesign,
    beta: &DVector<f64>,
    lambda: f64,
    warm_start: Option<&DVector<f64>>,
    opts: &NewtonOptions,
) -> Result<EtaFit> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("λ must be positive, got {lambda}")));
    }
    let ds = ctx.dataset();
    if beta.len() != ds.d() {
        return Err(Error::DimensionMismatch(format!("β has length {}, expected {}", beta.len(), ds.d())));
    }
    let m = design.work_dim();
    let mut b = match warm_start {
        Some(w) if w.len() == m => w.clone(),
        Some(w) => {
            return Err(Error::DimensionMismatch(format!(
                "warm start has {} working coefficients, design has {m}",
                w.len()
            )))
        }
        None => DVector::zeros(m),
    };
    let offset = ds.u() * beta;
    let objective = |b: &DVector<f64>| ctx.penalized_objective(&design.work, &design.work_penalty, b, lambda, beta);

    let mut obj = objective(&b)?;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let (chol, _) = cholesky_ridged(&obj.hessian, opts.ridge)?;
        let step = -chol.solve(&obj.gradient);
        let decrement = -obj.gradient.dot(&step);
        if obj.gradient.norm() < opts.tol && step.amax() <= 1e-9 * (1.0 + b.amax()) || decrement < 1e-24 {
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &b + &step * t;
            if objective_value(ctx, design, &offset, &cand, lambda) <= obj.value {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some(c) => {
                b = c;
                obj = objective(&b)?;
            }
            None => break,
        }
    }
    if !converged && obj.gradient.norm() < opts.tol {
        converged = true;
    }

    let n = ctx.n() as f64;
    let fitted = &design.work * &b;
    Ok(EtaFit {
        coef: EtaCoefficients::new(design.from_working(&b), &design.basis)?,
        work_coef: b,
        lambda,
        fitted,
        hessian: obj.hessian * n,
        objective: obj.value,
        gradient_norm: obj.gradient.norm(),
        converged,
        iterations,
    })
}

/// How the Hessian entering the trace correction is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceScale {
    /// Hessian of the objective normalized by the number of failures `N`.
    #[default]
    PerFailure,
    /// Hessian of the objective as written, normalized by `n`.
    PerSubject,
    /// Hessian of the unnormalized objective (`n ×` the written one).
    Unnormalized,
}

impl std::fmt::Display for TraceScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TraceScale::PerFailure => "per-failure",
            TraceScale::PerSubject => "per-subject",
            TraceScale::Unnormalized => "unnormalized",
        })
    }
}

impl std::str::FromStr for TraceScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-failure" => Ok(TraceScale::PerFailure),
            "per-subject" => Ok(TraceScale::PerSubject),
            "unnormalized" => Ok(TraceScale::Unnormalized),
            other => Err(Error::InvalidArgument(format!("unknown trace scale `{other}`"))),
        }
    }
}

/// Plug-in part of the score: `−(1/N) Σ_p {η(W_{i_p}) − log ∫a_p e^η dP_n}`.
pub(crate) fn rkl_fit_term(ctx: &LikelihoodContext<'_>, beta: &DVector<f64>, eta: &DVector<f64>) -> Result<f64> {
    let lp = ctx.linear_predictor(beta, eta)?;
    let rs = ctx.risk_set();
    let log_norm = risk_log_norms(rs, &lp);
    let log_n = (ctx.n() as f64).ln();
    let n_fail = rs.n_failures() as f64;
    let sum: f64 = (0..rs.n_failures())
        .map(|p| eta[rs.failure(p)] - (log_norm[p] - log_n))
        .sum();
    Ok(-sum / n_fail)
}

/// Delete-one cross-validation proxy of the relative KL distance at a fit.
pub fn rkl_score(ctx: &LikelihoodContext<'_>, design: &SplineDesign, beta: &DVector<f64>, fit: &EtaFit) -> Result<f64> {
    rkl_score_scaled(ctx, design, beta, fit, TraceScale::PerFailure)
}

pub fn rkl_score_scaled(
    ctx: &LikelihoodContext<'_>,
    design: &SplineDesign,
    beta: &DVector<f64>,
    fit: &EtaFit,
    scale: TraceScale,
) -> Result<f64> {
    let fit_term = rkl_fit_term(ctx, beta, &fit.fitted)?;
    let rs = ctx.risk_set();
    let n_fail = rs.n_failures();
    if n_fail < 2 {
        return Ok(fit_term);
    }
    let nf = n_fail as f64;
    // Q P1: basis rows at failures, centered across failures
    let mut q = design.work.select_rows(rs.failures());
    let means = q.row_mean();
    for mut row in q.row_iter_mut() {
        row -= &means;
    }
    let hessian_scale = match scale {
        TraceScale::PerFailure => 1.0 / nf,
        TraceScale::PerSubject => 1.0 / ctx.n() as f64,
        TraceScale::Unnormalized => 1.0,
    };
    let h = &fit.hessian * hessian_scale;
    let (chol, _) = cholesky_ridged(&h, 0.0).map_err(|_| Error::Singular("penalized Hessian".into()))?;
    let z = solve_lower(&chol, &q.transpose());
    let trace = z.norm_squared();
    Ok(fit_term + trace / (nf * (nf - 1.0)))
}

/// 20 log-spaced values spanning `[1e-7, 1]`.
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-7, 1.0, 20)
}

pub(crate) fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub fit: EtaFit,
    /// `(λ, score)` for every grid point that could be fitted, ascending in λ.
    pub scores: Vec<(f64, f64)>,
}

/// Picks the grid λ minimizing [`rkl_score`]; ties go to the larger λ.
///
/// The grid is swept from the largest λ down, each fit warm-started from the
/// previous one.
pub fn select_lambda(
    ctx: &LikelihoodContext<'_>,
    design: &SplineDesign,
    beta: &DVector<f64>,
    grid: &[f64],
) -> Result<LambdaSelection> {
    select_lambda_scaled(ctx, design, beta, grid, TraceScale::PerFailure)
}

pub fn select_lambda_scaled(
    ctx: &LikelihoodContext<'_>,
    design: &SplineDesign,
    beta: &DVector<f64>,
    grid: &[f64],
    scale: TraceScale,
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty λ grid".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let opts = NewtonOptions::default();
    let mut best: Option<(f64, EtaFit)> = None;
    let mut scores = Vec::with_capacity(sorted.len());
    let mut warm: Option<DVector<f64>> = None;
    let mut last_err = None;
    for &lambda in &sorted {
        let fit = match fit_eta_work(ctx, design, beta, lambda, warm.as_ref(), &opts) {
            Ok(f) => f,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let score = match rkl_score_scaled(ctx, design, beta, &fit, scale) {
            Ok(s) if s.is_finite() => s,
            Ok(_) => continue,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        scores.push((lambda, score));
        warm = Some(fit.work_coef.clone());
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, fit));
        }
    }
    scores.reverse();
    match best {
        Some((_, fit)) => Ok(LambdaSelection {
            lambda: fit.lambda,
            fit,
            scores,
        }),
        None => Err(Error::AllFitsFailed(
            last_err.map_or_else(|| "no grid point produced a finite score".into(), |e| e.to_string()),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandPoint {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

fn band_from_rows(fit: &EtaFit, rows: &DMatrix<f64>, level: f64) -> Result<Vec<BandPoint>> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} outside (0, 1)")));
    }
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
    let (chol, _) = cholesky_ridged(&fit.hessian, 0.0).map_err(|_| Error::Singular("penalized Hessian".into()))?;
    let estimates = rows * &fit.work_coef;
    let solved = solve_lower(&chol, &rows.transpose());
    Ok((0..rows.nrows())
        .map(|i| {
            let se = solved.column(i).norm();
            let est = estimates[i];
            BandPoint {
                estimate: est,
                se,
                lower: est - z * se,
                upper: est + z * se,
            }
        })
        .collect())
}

/// Pointwise band `η̂(w) ± z·sqrt(ψ(w)ᵀ H⁻¹ ψ(w))` at each row of `points`.
pub fn eta_band(fit: &EtaFit, design: &SplineDesign, points: &DMatrix<f64>, level: f64) -> Result<Vec<BandPoint>> {
    let rows = design.work_rows(points)?;
    band_from_rows(fit, &rows, level)
}

/// Band for a single ANOVA term along a grid of its covariate(s).
///
/// Main effects take a 1-D grid in `[0,1]`; the interaction takes `k × 2`
/// points. Columns of other terms are zeroed.
pub fn term_band(fit: &EtaFit, design: &SplineDesign, term: Term, points: &DMatrix<f64>, level: f64) -> Result<Vec<BandPoint>> {
    let q = design.basis.q();
    let full_points = match term {
        Term::W1W2 => points.clone(),
        Term::W1 | Term::W2 => {
            let var = if term == Term::W1 { 0 } else { 1 };
            DMatrix::from_fn(points.nrows(), q, |i, j| if j == var { points[(i, 0)] } else { 0.5 })
        }
    };
    let mut rows = design.work_rows(&full_points)?;
    let keep = design.work_term_columns(term);
    for j in 0..design.work_dim() {
        if !keep.contains(&j) {
            rows.column_mut(j).fill(0.0);
        }
    }
    band_from_rows(fit, &rows, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SurvivalDataset;
    use crate::spline::{build_basis, select_knots, Structure};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp1};

    fn sim(n: usize, eta0: impl Fn(f64) -> f64, seed: u64) -> SurvivalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut times = Vec::new();
        let mut events = Vec::new();
        let mut w = Vec::new();
        for _ in 0..n {
            let x: f64 = rng.random();
            let e: f64 = Exp1.sample(&mut rng);
            let t = e / eta0(x).exp();
            let c: f64 = Exp1.sample(&mut rng);
            let c = c / 0.3;
            times.push(t.min(c));
            events.push(t <= c);
            w.push(x);
        }
        let w = DMatrix::from_column_slice(n, 1, &w);
        SurvivalDataset::with_w_bounds(times, events, DMatrix::zeros(n, 0), w, &[(0.0, 1.0)]).unwrap()
    }

    fn eta0a(w: f64) -> f64 {
        1.5 * (2.0 * std::f64::consts::PI * w - std::f64::consts::FRAC_PI_2).sin()
    }

    #[test]
    fn huge_lambda_kills_kernel_coefficients() {
        let ds = sim(120, eta0a, 1);
        let ctx = LikelihoodContext::new(&ds);
        let design = build_basis(&ds, &select_knots(&ds, 1), &Structure::univariate()).unwrap();
        let fit = fit_eta(&ctx, &design, &DVector::zeros(0), 1e6, None).unwrap();
        let c = DVector::from_column_slice(fit.coef.kernel());
        assert!(c.norm() < 1e-4, "{}", c.norm());
        assert!(fit.converged);
    }

    #[test]
    fn converges_and_descends_from_warm_start() {
        let ds = sim(150, eta0a, 2);
        let ctx = LikelihoodContext::new(&ds);
        let design = build_basis(&ds, &select_knots(&ds, 2), &Structure::univariate()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = DVector::from_fn(design.dim(), |_, _| rng.random::<f64>() - 0.5);
        let warm = EtaCoefficients::new(start.clone(), &design.basis).unwrap();
        let f0 = ctx
            .penalized_eta_objective(&design, &start, 1e-4, &DVector::zeros(0))
            .unwrap()
            .value;
        let fit = fit_eta(&ctx, &design, &DVector::zeros(0), 1e-4, Some(&warm)).unwrap();
        assert!(fit.converged);
        assert!(fit.gradient_norm < 1e-8);
        assert!(fit.objective <= f0);

        let cold = fit_eta(&ctx, &design, &DVector::zeros(0), 1e-4, None).unwrap();
        let diff = (cold.coef.to_vector() - fit.coef.to_vector()).norm();
        assert!(diff < 1e-6, "{diff}");
        assert!((&cold.fitted - &fit.fitted).amax() < 1e-8);
    }

    #[test]
    fn trace_term_is_positive() {
        let ds = sim(100, eta0a, 4);
        let ctx = LikelihoodContext::new(&ds);
        let design = build_basis(&ds, &select_knots(&ds, 4), &Structure::univariate()).unwrap();
        let beta = DVector::zeros(0);
        let fit = fit_eta(&ctx, &design, &beta, 1e-3, None).unwrap();
        let score = rkl_score(&ctx, &design, &beta, &fit).unwrap();
        let plug_in = rkl_fit_term(&ctx, &beta, &fit.fitted).unwrap();
        assert!(score > plug_in);
    }

    #[test]
    fn singleton_grid() {
        let ds = sim(80, eta0a, 5);
        let ctx = LikelihoodContext::new(&ds);
        let design = build_basis(&ds, &select_knots(&ds, 5), &Structure::univariate()).unwrap();
        let sel = select_lambda(&ctx, &design, &DVector::zeros(0), &[3e-4]).unwrap();
        assert_eq!(sel.lambda, 3e-4);
        assert!(select_lambda(&ctx, &design, &DVector::zeros(0), &[]).is_err());
    }

    #[test]
    fn selected_lambda_minimizes_score() {
        let ds = sim(150, eta0a, 6);
        let ctx = LikelihoodContext::new(&ds);
        let design = build_basis(&ds, &select_knots(&ds, 6), &Structure::univariate()).unwrap();
        let sel = select_lambda(&ctx, &design, &DVector::zeros(0), &default_lambda_grid()).unwrap();
        let best = sel.scores.iter().find(|(l, _)| *l == sel.lambda).unwrap().1;
        assert!(sel.scores.iter().all(|(_, s)| best <= *s));
    }

    #[test]
    fn band_contains_estimate() {
        let ds = sim(150, eta0a, 7);
        let ctx = LikelihoodContext::new(&ds);
        let design = build_basis(&ds, &select_knots(&ds, 7), &Structure::univariate()).unwrap();
        let fit = fit_eta(&ctx, &design, &DVector::zeros(0), 1e-4, None).unwrap();
        let grid = crate::spline::unit_grid(100);
        let pts = DMatrix::from_column_slice(101, 1, &grid);
        let band = eta_band(&fit, &design, &pts, 0.95).unwrap();
        assert_eq!(band.len(), 101);
        for b in &band {
            assert!(b.lower < b.estimate && b.estimate < b.upper);
        }
        let term = term_band(&fit, &design, Term::W1, &pts, 0.95).unwrap();
        for (a, b) in band.iter().zip(&term) {
            assert!((a.estimate - b.estimate).abs() < 1e-12);
        }
        assert!(eta_band(&fit, &design, &pts, 1.5).is_err());
    }

    #[test]
    fn log_grid_endpoints() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 20);
        assert!((g[0] - 1e-7).abs() < 1e-20);
        assert!((g[19] - 1.0).abs() < 1e-12);
    }
}
