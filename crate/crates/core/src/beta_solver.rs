//! One-step penalized update of the parametric coefficients.
//!
//! The log profile partial likelihood is replaced by a quadratic expansion
//! `−½‖y − Vβ‖²` with `VᵀV = I(β)`, the penalty by its local linear
//! approximation at the previous iterate, and the resulting weighted LASSO is
//! solved exactly with LARS after projecting out the unpenalized columns.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::cholesky_ridged;
use crate::partial_lik::{CoxDerivatives, LikelihoodContext};

/// Coefficients below this magnitude after back-scaling are set to zero.
const ZERO_SNAP: f64 = 1e-10;

pub const SCAD_A: f64 = 3.7;

/// SCAD penalty derivative `p′_θ(t)` for `t ≥ 0`.
pub fn scad_deriv(theta: f64, a: f64, t: f64) -> f64 {
    if theta <= 0.0 {
        return 0.0;
    }
    if t <= theta {
        theta
    } else {
        (a * theta - t).max(0.0) / (a - 1.0)
    }
}

/// SCAD penalty `p_θ(t)` for `t ≥ 0`.
pub fn scad_penalty(theta: f64, a: f64, t: f64) -> f64 {
    if t <= theta {
        theta * t
    } else if t <= a * theta {
        -(t * t - 2.0 * a * theta * t + theta * theta) / (2.0 * (a - 1.0))
    } else {
        (a + 1.0) * theta * theta / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum PenaltyKind {
    Scad,
    AdaptiveLasso,
    /// No penalty: the unpenalized profile maximizer.
    None,
}

impl std::fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PenaltyKind::Scad => "scad",
            PenaltyKind::AdaptiveLasso => "alasso",
            PenaltyKind::None => "none",
        })
    }
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scad" => Ok(PenaltyKind::Scad),
            "alasso" | "adaptive-lasso" | "adaptive_lasso" => Ok(PenaltyKind::AdaptiveLasso),
            "none" => Ok(PenaltyKind::None),
            other => Err(Error::InvalidArgument(format!("unknown penalty `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub a: f64,
    /// Per-coefficient `θ_j`; `f64::INFINITY` forces the coefficient to zero.
    pub thetas: Vec<f64>,
}

impl PenaltySpec {
    pub fn scad(theta: f64, d: usize) -> Self {
        Self {
            kind: PenaltyKind::Scad,
            a: SCAD_A,
            thetas: vec![theta; d],
        }
    }

    pub fn adaptive_lasso(thetas: Vec<f64>) -> Self {
        Self {
            kind: PenaltyKind::AdaptiveLasso,
            a: SCAD_A,
            thetas,
        }
    }

    pub fn none(d: usize) -> Self {
        Self {
            kind: PenaltyKind::None,
            a: SCAD_A,
            thetas: vec![0.0; d],
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.thetas.len() != d {
            return Err(Error::DimensionMismatch(format!("{} penalty parameters for {d} coefficients", self.thetas.len())));
        }
        if !(self.a > 2.0) {
            return Err(Error::InvalidArgument(format!("SCAD shape must exceed 2, got {}", self.a)));
        }
        if self.thetas.iter().any(|t| t.is_nan() || *t < 0.0) {
            return Err(Error::InvalidArgument("penalty parameters must be nonnegative".into()));
        }
        Ok(())
    }

    /// `p′_{θ_j}(t)`.
    pub fn deriv(&self, j: usize, t: f64) -> f64 {
        match self.kind {
            PenaltyKind::Scad => scad_deriv(self.thetas[j], self.a, t),
            PenaltyKind::AdaptiveLasso => self.thetas[j],
            PenaltyKind::None => 0.0,
        }
    }

    /// `p_{θ_j}(t)`.
    pub fn penalty(&self, j: usize, t: f64) -> f64 {
        match self.kind {
            PenaltyKind::Scad => scad_penalty(self.thetas[j], self.a, t),
            PenaltyKind::AdaptiveLasso if t == 0.0 => 0.0,
            PenaltyKind::AdaptiveLasso => self.thetas[j] * t,
            PenaltyKind::None => 0.0,
        }
    }
}

/// `θ_j = θ₀ / |β̃_j|`; a zero initial estimate gives an infinite weight.
pub fn adaptive_lasso_thetas(beta_init: &DVector<f64>, theta0: f64) -> Vec<f64> {
    beta_init
        .iter()
        .map(|b| if *b == 0.0 { f64::INFINITY } else { theta0 / b.abs() })
        .collect()
}

/// A log profile likelihood in β with its derivatives.
pub trait Profile {
    fn dim(&self) -> usize;
    /// Sample size multiplying the penalty.
    fn n(&self) -> usize;
    fn derivatives(&self, beta: &DVector<f64>) -> Result<CoxDerivatives>;

    fn loglik(&self, beta: &DVector<f64>) -> Result<f64> {
        Ok(self.derivatives(beta)?.loglik)
    }
}

/// `l_η̂(β)`: the Cox log partial likelihood with η̂ held fixed.
pub struct CoxProfile<'c, 'a> {
    ctx: &'c LikelihoodContext<'a>,
    eta: DVector<f64>,
}

impl<'c, 'a> CoxProfile<'c, 'a> {
    pub fn new(ctx: &'c LikelihoodContext<'a>, eta: DVector<f64>) -> Result<Self> {
        if eta.len() != ctx.n() {
            return Err(Error::DimensionMismatch(format!("η has {} values for {} subjects", eta.len(), ctx.n())));
        }
        Ok(Self { ctx, eta })
    }
}

impl Profile for CoxProfile<'_, '_> {
    fn dim(&self) -> usize {
        self.ctx.dataset().d()
    }

    fn n(&self) -> usize {
        self.ctx.n()
    }

    fn derivatives(&self, beta: &DVector<f64>) -> Result<CoxDerivatives> {
        self.ctx.grad_hess_beta(beta, &self.eta)
    }

    fn loglik(&self, beta: &DVector<f64>) -> Result<f64> {
        self.ctx.log_pl(beta, &self.eta)
    }
}

/// `l(β) = c₀ − ½(β − center)ᵀ I (β − center)`.
#[derive(Debug, Clone)]
pub struct QuadraticProfile {
    pub center: DVector<f64>,
    pub information: DMatrix<f64>,
    pub n: usize,
}

impl Profile for QuadraticProfile {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn n(&self) -> usize {
        self.n
    }

    fn derivatives(&self, beta: &DVector<f64>) -> Result<CoxDerivatives> {
        let diff = beta - &self.center;
        let ig = &self.information * &diff;
        Ok(CoxDerivatives {
            loglik: -0.5 * diff.dot(&ig),
            gradient: -ig,
            information: self.information.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct MaximizerResult {
    pub beta: DVector<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Ridge that had to be added to the information during the last step.
    pub ridge: f64,
}

/// Newton with step-halving for the unpenalized profile maximizer.
pub fn profile_maximizer<P: Profile + ?Sized>(profile: &P, start: &DVector<f64>) -> Result<MaximizerResult> {
    let d = profile.dim();
    if start.len() != d {
        return Err(Error::DimensionMismatch(format!("start has length {}, expected {d}", start.len())));
    }
    let mut beta = start.clone();
    if d == 0 {
        return Ok(MaximizerResult {
            loglik: profile.loglik(&beta)?,
            beta,
            converged: true,
            iterations: 0,
            ridge: 0.0,
        });
    }
    let mut der = profile.derivatives(&beta)?;
    let mut converged = false;
    let mut iterations = 0;
    let mut ridge = 0.0;
    while iterations < 100 {
        let (chol, r) = cholesky_ridged(&der.information, 0.0)?;
        ridge = r;
        let step = chol.solve(&der.gradient);
        let decrement = der.gradient.dot(&step);
        if decrement < 1e-16 * (1.0 + der.loglik.abs()) {
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            if let Ok(ll) = profile.loglik(&cand) {
                if ll.is_finite() && ll >= der.loglik {
                    next = Some(cand);
                    break;
                }
            }
            t *= 0.5;
        }
        iterations += 1;
        match next {
            Some(b) => {
                beta = b;
                der = profile.derivatives(&beta)?;
            }
            None => {
                converged = decrement < 1e-10 * (1.0 + der.loglik.abs());
                break;
            }
        }
    }
    Ok(MaximizerResult {
        loglik: der.loglik,
        beta,
        converged,
        iterations,
        ridge,
    })
}

/// Where the quadratic expansion of the profile likelihood is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub enum Expansion {
    /// At the unpenalized profile maximizer for the current η̂.
    #[default]
    ProfileMaximizer,
    /// At the previous penalized iterate, with `y = Vβ^{(k−1)}` and no
    /// gradient correction.
    Previous,
}

/// `−½‖y − Vβ‖²` approximating the profile log likelihood up to a constant.
#[derive(Debug, Clone)]
pub struct QuadraticApprox {
    pub point: DVector<f64>,
    /// Upper-triangular factor with `VᵀV = I(point)`.
    pub v: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl QuadraticApprox {
    /// Expansion at `point`, `y = V·point + V⁻ᵀ∇l(point)`.
    pub fn at<P: Profile + ?Sized>(profile: &P, point: &DVector<f64>, with_gradient: bool) -> Result<Self> {
        let der = profile.derivatives(point)?;
        let (chol, _) = cholesky_ridged(&der.information, 0.0)?;
        let v = chol.l().transpose();
        let mut y = &v * point;
        if with_gradient {
            let lt = chol.l();
            let corr = lt
                .solve_lower_triangular(&der.gradient)
                .ok_or_else(|| Error::Singular("information factor".into()))?;
            y += corr;
        }
        Ok(Self {
            point: point.clone(),
            v,
            y,
        })
    }

    pub fn build<P: Profile + ?Sized>(profile: &P, beta_prev: &DVector<f64>, expansion: Expansion) -> Result<Self> {
        match expansion {
            Expansion::ProfileMaximizer => {
                let max = profile_maximizer(profile, beta_prev)?;
                Self::at(profile, &max.beta, true)
            }
            Expansion::Previous => Self::at(profile, beta_prev, false),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BetaFit {
    /// Coefficients; dropped coefficients are exactly `0.0`.
    pub beta: Vec<f64>,
    /// Indices with `p′ = 0` at the previous iterate (unpenalized).
    pub unpenalized: Vec<usize>,
    /// Indices with `p′ > 0` at the previous iterate.
    pub penalized: Vec<usize>,
    pub kind: PenaltyKind,
    /// Tuning value selected for the fit (`θ` for SCAD, `θ₀` for adaptive LASSO).
    pub theta: f64,
    pub thetas: Vec<f64>,
    pub a: f64,
    /// Log profile partial likelihood at `beta`.
    pub loglik: f64,
    /// `−2 l_p(β̂) + 2|Â|`.
    pub aic: f64,
}

impl BetaFit {
    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    /// Indices of nonzero coefficients.
    pub fn nonzero(&self) -> Vec<usize> {
        (0..self.beta.len()).filter(|&j| self.beta[j] != 0.0).collect()
    }

    pub fn spec(&self) -> PenaltySpec {
        PenaltySpec {
            kind: self.kind,
            a: self.a,
            thetas: self.thetas.clone(),
        }
    }
}

/// Exact minimizer of `½‖y − Vβ‖² + scale·Σ_j w_j|β_j|`.
///
/// Columns are rescaled to a uniform penalty, the LARS-LASSO path is followed
/// until the maximal absolute correlation drops to `scale`, and the result is
/// unscaled. Columns that are linearly dependent on the current active set are
/// never entered.
pub fn lars_weighted_lasso(y: &DVector<f64>, v: &DMatrix<f64>, weights: &[f64], scale: f64) -> Result<DVector<f64>> {
    let p = v.ncols();
    if v.nrows() != y.len() || weights.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "design {}×{}, response {}, {} weights",
            v.nrows(),
            p,
            y.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("LASSO weights must be positive and finite".into()));
    }
    if !(scale >= 0.0) || v.iter().chain(y.iter()).any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite LASSO input".into()));
    }
    let mut x = v.clone();
    for (j, w) in weights.iter().enumerate() {
        x.column_mut(j).unscale_mut(*w);
    }
    let gamma = lars_lasso(y, &x, scale)?;
    Ok(DVector::from_fn(p, |j, _| if gamma[j] == 0.0 { 0.0 } else { gamma[j] / weights[j] }))
}

/// LARS with the LASSO modification for `½‖y − Xγ‖² + t‖γ‖₁`.
fn lars_lasso(y: &DVector<f64>, x: &DMatrix<f64>, t: f64) -> Result<DVector<f64>> {
    let p = x.ncols();
    let gram = x.transpose() * x;
    let mut corr = x.transpose() * y;
    let mut gamma = DVector::<f64>::zeros(p);
    let mut active: Vec<usize> = Vec::new();
    let mut excluded = vec![false; p];
    let scale = corr.amax().max(1.0);
    let tiny = 1e-12 * scale;

    let max_inactive = |corr: &DVector<f64>, active: &[usize], excluded: &[bool]| {
        (0..p)
            .filter(|j| !active.contains(j) && !excluded[*j])
            .map(|j| (j, corr[j].abs()))
            .fold(None, |best: Option<(usize, f64)>, (j, c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((j, c)),
            })
    };

    let mut c_max = match max_inactive(&corr, &active, &excluded) {
        Some((_, c)) => c,
        None => return Ok(gamma),
    };
    if c_max <= t {
        return Ok(gamma);
    }
    let mut just_dropped: Option<usize> = None;
    let mut enter: Vec<usize> = vec![max_inactive(&corr, &active, &excluded).unwrap().0];

    for _ in 0..(8 * p + 8) {
        for j in enter.drain(..) {
            let mut trial = active.clone();
            trial.push(j);
            if independent(&gram, &trial) {
                active.push(j);
            } else {
                excluded[j] = true;
            }
        }
        if active.is_empty() {
            break;
        }
        let k = active.len();
        let signs = DVector::from_fn(k, |i, _| corr[active[i]].signum());
        let g_aa = DMatrix::from_fn(k, k, |i, j| gram[(active[i], active[j])]);
        let (chol, _) = cholesky_ridged(&g_aa, 0.0)?;
        let dir = chol.solve(&signs);
        // change in correlation per unit step along the path
        let a = DVector::from_fn(p, |j, _| (0..k).map(|i| gram[(j, active[i])] * dir[i]).sum::<f64>());

        let mut step = c_max - t;
        let mut event: Option<(bool, usize)> = None;
        for j in 0..p {
            if active.contains(&j) || excluded[j] {
                continue;
            }
            // a variable just dropped sits on the boundary with its old sign
            // and may only re-enter with the opposite one
            let same_sign_blocked = Some(j) == just_dropped;
            let candidates = [
                (corr[j] > 0.0 && same_sign_blocked, (c_max - corr[j]) / (1.0 - a[j])),
                (corr[j] < 0.0 && same_sign_blocked, (c_max + corr[j]) / (1.0 + a[j])),
            ];
            for (blocked, s) in candidates {
                if !blocked && s.is_finite() && s > tiny / scale && s < step {
                    step = s;
                    event = Some((true, j));
                }
            }
        }
        for (i, &j) in active.iter().enumerate() {
            if dir[i] != 0.0 {
                let s = -gamma[j] / dir[i];
                if s > 0.0 && s < step {
                    step = s;
                    event = Some((false, i));
                }
            }
        }
        for (i, &j) in active.iter().enumerate() {
            gamma[j] += step * dir[i];
        }
        corr -= &a * step;
        c_max -= step;
        just_dropped = None;
        match event {
            None => break,
            Some((true, j)) => enter.push(j),
            Some((false, i)) => {
                let j = active.remove(i);
                gamma[j] = 0.0;
                just_dropped = Some(j);
            }
        }
        if c_max <= t + tiny {
            break;
        }
    }
    Ok(gamma)
}

fn independent(gram: &DMatrix<f64>, cols: &[usize]) -> bool {
    let k = cols.len();
    let g = DMatrix::from_fn(k, k, |i, j| gram[(cols[i], cols[j])]);
    let diag_max = (0..k).map(|i| g[(i, i)]).fold(0.0, f64::max);
    if diag_max <= 0.0 {
        return false;
    }
    match nalgebra::Cholesky::new(g) {
        Some(ch) => {
            let l = ch.l();
            (0..k).all(|i| l[(i, i)] * l[(i, i)] > 1e-10 * diag_max)
        }
        None => false,
    }
}

/// Least-squares coefficients of `b` on the columns of `a`.
fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (chol, _) = cholesky_ridged(&(a.transpose() * a), 0.0)?;
    Ok(chol.solve(&(a.transpose() * b)))
}

/// One-step update from a prepared quadratic expansion.
pub fn one_step_from(approx: &QuadraticApprox, n: usize, beta_prev: &DVector<f64>, spec: &PenaltySpec) -> Result<DVector<f64>> {
    let d = approx.v.ncols();
    spec.validate(d)?;
    if beta_prev.len() != d {
        return Err(Error::DimensionMismatch(format!("β has length {}, expected {d}", beta_prev.len())));
    }
    let derivs: Vec<f64> = (0..d).map(|j| spec.deriv(j, beta_prev[j].abs())).collect();
    let set_a: Vec<usize> = (0..d).filter(|&j| derivs[j] == 0.0).collect();
    let set_b: Vec<usize> = (0..d).filter(|&j| derivs[j] > 0.0 && derivs[j].is_finite()).collect();
    let rows = approx.v.nrows();

    // rescale penalized columns so each carries penalty nθ_j
    let factor: Vec<f64> = set_b
        .iter()
        .map(|&j| {
            let th = spec.thetas[j];
            if th > 0.0 && th.is_finite() {
                th / derivs[j]
            } else {
                1.0 / derivs[j]
            }
        })
        .collect();
    let lasso_weight: Vec<f64> = set_b
        .iter()
        .zip(&factor)
        .map(|(&j, f)| derivs[j] * f)
        .collect();
    let v_b = DMatrix::from_fn(rows, set_b.len(), |i, k| approx.v[(i, set_b[k])] * factor[k]);
    let v_a = approx.v.select_columns(&set_a);

    let (y_star, v_b_star) = if set_a.is_empty() {
        (approx.y.clone(), v_b.clone())
    } else {
        let (chol, _) = cholesky_ridged(&(v_a.transpose() * &v_a), 0.0)?;
        let project = |m: &DMatrix<f64>| -> DMatrix<f64> { m - &v_a * chol.solve(&(v_a.transpose() * m)) };
        let y_mat = DMatrix::from_column_slice(rows, 1, approx.y.as_slice());
        (project(&y_mat).column(0).into_owned(), project(&v_b))
    };

    let beta_b_star = if set_b.is_empty() {
        DVector::zeros(0)
    } else {
        lars_weighted_lasso(&y_star, &v_b_star, &lasso_weight, n as f64)?
    };

    let mut beta = DVector::zeros(d);
    if !set_a.is_empty() {
        let resid = &approx.y - &v_b * &beta_b_star;
        let beta_a = least_squares(&v_a, &resid)?;
        for (k, &j) in set_a.iter().enumerate() {
            beta[j] = beta_a[k];
        }
    }
    for (k, &j) in set_b.iter().enumerate() {
        let b = beta_b_star[k] * factor[k];
        beta[j] = if b.abs() < ZERO_SNAP { 0.0 } else { b };
    }
    Ok(beta)
}

fn make_fit<P: Profile + ?Sized>(profile: &P, beta: DVector<f64>, beta_prev: &DVector<f64>, spec: &PenaltySpec, theta: f64) -> Result<BetaFit> {
    let d = beta.len();
    let loglik = profile.loglik(&beta)?;
    let derivs: Vec<f64> = (0..d).map(|j| spec.deriv(j, beta_prev[j].abs())).collect();
    let nonzero = beta.iter().filter(|b| **b != 0.0).count();
    Ok(BetaFit {
        beta: beta.iter().copied().collect(),
        unpenalized: (0..d).filter(|&j| derivs[j] == 0.0).collect(),
        penalized: (0..d).filter(|&j| derivs[j] > 0.0).collect(),
        kind: spec.kind,
        theta,
        thetas: spec.thetas.clone(),
        a: spec.a,
        loglik,
        aic: -2.0 * loglik + 2.0 * nonzero as f64,
    })
}

/// One penalized update of β given the current η̂ (through `profile`).
pub fn one_step_update<P: Profile + ?Sized>(
    profile: &P,
    beta_prev: &DVector<f64>,
    spec: &PenaltySpec,
    expansion: Expansion,
) -> Result<BetaFit> {
    let approx = QuadraticApprox::build(profile, beta_prev, expansion)?;
    let beta = one_step_from(&approx, profile.n(), beta_prev, spec)?;
    let theta = spec.thetas.iter().copied().filter(|t| t.is_finite()).fold(0.0, f64::max);
    make_fit(profile, beta, beta_prev, spec, theta)
}

/// 30 log-spaced values in `[0.001, 1]·sqrt(log d / n)`.
///
/// `log d` is floored at `log 2` so that `d = 1` still yields a usable grid.
pub fn default_theta_grid(d: usize, n: usize) -> Vec<f64> {
    let s = ((d.max(2) as f64).ln() / n as f64).sqrt();
    crate::eta_solver::log_grid(0.001, 1.0, 30).into_iter().map(|t| t * s).collect()
}

#[derive(Debug, Clone)]
pub struct ThetaSelection {
    pub theta: f64,
    pub fit: BetaFit,
    /// `(θ, AIC, number of nonzero coefficients)` per grid value.
    pub scores: Vec<(f64, f64, usize)>,
}

/// Runs the one-step update for every grid θ and keeps the AIC minimizer.
///
/// SCAD uses one shared θ. The adaptive LASSO uses `θ_j = θ₀/|β̃_j|` with
/// `β̃` the unpenalized profile maximizer at the current η̂. Ties go to the
/// sparser model.
pub fn aic_select_theta<P: Profile + ?Sized>(
    profile: &P,
    beta_prev: &DVector<f64>,
    kind: PenaltyKind,
    grid: &[f64],
    expansion: Expansion,
) -> Result<ThetaSelection> {
    let d = profile.dim();
    if kind == PenaltyKind::None {
        let fit = one_step_update(profile, beta_prev, &PenaltySpec::none(d), Expansion::ProfileMaximizer)?;
        return Ok(ThetaSelection {
            theta: 0.0,
            scores: vec![(0.0, fit.aic, fit.nonzero().len())],
            fit,
        });
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty θ grid".into()));
    }
    let maximizer = profile_maximizer(profile, beta_prev)?;
    let approx = match expansion {
        Expansion::ProfileMaximizer => QuadraticApprox::at(profile, &maximizer.beta, true)?,
        Expansion::Previous => QuadraticApprox::at(profile, beta_prev, false)?,
    };
    let mut best: Option<BetaFit> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for &theta in grid {
        let spec = match kind {
            PenaltyKind::Scad => PenaltySpec::scad(theta, d),
            PenaltyKind::AdaptiveLasso => PenaltySpec::adaptive_lasso(adaptive_lasso_thetas(&maximizer.beta, theta)),
            PenaltyKind::None => unreachable!(),
        };
        let beta = one_step_from(&approx, profile.n(), beta_prev, &spec)?;
        let fit = make_fit(profile, beta, beta_prev, &spec, theta)?;
        let nnz = fit.nonzero().len();
        scores.push((theta, fit.aic, nnz));
        let better = match &best {
            None => true,
            Some(b) => {
                let tol = 1e-9 * (1.0 + b.aic.abs());
                fit.aic < b.aic - tol || ((fit.aic - b.aic).abs() <= tol && nnz < b.nonzero().len())
            }
        };
        if better {
            best = Some(fit);
        }
    }
    let fit = best.expect("grid is nonempty");
    Ok(ThetaSelection {
        theta: fit.theta,
        fit,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scad_derivative_values() {
        assert_eq!(scad_deriv(0.3, 3.7, 0.0), 0.3);
        assert_eq!(scad_deriv(0.2, 3.7, 1.0), 0.0);
        assert!((scad_deriv(0.2, 3.7, 0.4) - 0.2 * (0.74 - 0.4) / (2.7 * 0.2)).abs() < 1e-15);
        assert!((scad_deriv(0.2, 3.7, 0.4) - 0.125_925_925_9).abs() < 1e-9);
    }

    #[test]
    fn scad_penalty_matches_integrated_derivative() {
        let (theta, a) = (0.3, 3.7);
        for &t in &[0.1, 0.3, 0.5, 1.0, 1.11, 2.0] {
            let steps = 20_000;
            let h = t / steps as f64;
            let integral: f64 = (0..steps).map(|i| scad_deriv(theta, a, (i as f64 + 0.5) * h) * h).sum();
            assert!((integral - scad_penalty(theta, a, t)).abs() < 1e-8, "t={t}");
        }
    }

    proptest! {
        #[test]
        fn scad_derivative_is_nonincreasing(theta in 0.01f64..2.0, t1 in 0.0f64..10.0, dt in 0.0f64..5.0) {
            prop_assert!(scad_deriv(theta, 3.7, t1 + dt) <= scad_deriv(theta, 3.7, t1) + 1e-15);
            prop_assert!(scad_deriv(theta, 3.7, t1) >= 0.0);
        }
    }

    #[test]
    fn adaptive_weights() {
        let th = adaptive_lasso_thetas(&DVector::from_vec(vec![2.0, 0.5, 0.0]), 0.1);
        assert!((th[0] - 0.05).abs() < 1e-15);
        assert!((th[1] - 0.2).abs() < 1e-15);
        assert!(th[2].is_infinite());
    }

    #[test]
    fn lars_orthonormal_soft_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = DMatrix::from_fn(6, 4, |_, _| rng.random::<f64>() - 0.5);
        let q = m.qr().q();
        let y = DVector::from_fn(6, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let (n, theta) = (10.0, 0.05);
        let beta = lars_weighted_lasso(&y, &q, &[theta; 4], n).unwrap();
        let z = q.transpose() * &y;
        for j in 0..4 {
            let expected = z[j].signum() * (z[j].abs() - n * theta).max(0.0);
            assert!((beta[j] - expected).abs() < 1e-10, "{j}: {} vs {expected}", beta[j]);
        }
    }

    #[test]
    fn lars_vanishing_penalty_is_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = DMatrix::from_fn(8, 5, |_, _| rng.random::<f64>() - 0.5);
        let y = DVector::from_fn(8, |_, _| rng.random::<f64>());
        let beta = lars_weighted_lasso(&y, &v, &[1e-12; 5], 1.0).unwrap();
        let ls = least_squares(&v, &y).unwrap();
        assert!((beta - ls).amax() < 1e-8);
    }

    #[test]
    fn lars_full_shrinkage() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = DMatrix::from_fn(8, 5, |_, _| rng.random::<f64>() - 0.5);
        let y = DVector::from_fn(8, |_, _| rng.random::<f64>());
        let cmax = (v.transpose() * &y).amax();
        let beta = lars_weighted_lasso(&y, &v, &[cmax; 5], 1.0).unwrap();
        assert!(beta.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn lars_duplicate_column_is_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut v = DMatrix::from_fn(10, 3, |_, _| rng.random::<f64>() - 0.5);
        let c0 = v.column(0).into_owned();
        v.set_column(2, &c0);
        let y = &c0 * 3.0 + DVector::from_fn(10, |_, _| 0.01 * rng.random::<f64>());
        let beta = lars_weighted_lasso(&y, &v, &[0.01; 3], 1.0).unwrap();
        assert!(beta.iter().all(|b| b.is_finite()));
        assert!(beta[0] == 0.0 || beta[2] == 0.0);
    }

    fn kkt_violation(y: &DVector<f64>, v: &DMatrix<f64>, w: &[f64], n: f64, beta: &DVector<f64>) -> f64 {
        let g = v.transpose() * (y - v * beta);
        (0..beta.len())
            .map(|j| {
                if beta[j] == 0.0 {
                    (g[j].abs() - n * w[j]).max(0.0)
                } else {
                    (g[j] - n * w[j] * beta[j].signum()).abs()
                }
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn lars_kkt_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..500 {
            let p = rng.random_range(1..=8);
            let rows = p + rng.random_range(0..5);
            let v = DMatrix::from_fn(rows, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let y = DVector::from_fn(rows, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let w: Vec<f64> = (0..p).map(|_| 0.01 + rng.random::<f64>() * 0.1).collect();
            let beta = lars_weighted_lasso(&y, &v, &w, 5.0).unwrap();
            let viol = kkt_violation(&y, &v, &w, 5.0, &beta);
            assert!(viol < 1e-8, "p={p} rows={rows} viol={viol} beta={beta}");
        }
    }

    #[test]
    fn all_unpenalized_returns_maximizer() {
        let profile = QuadraticProfile {
            center: DVector::from_vec(vec![2.0, -1.5]),
            information: DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
            n: 100,
        };
        let prev = DVector::from_vec(vec![2.0, -1.5]);
        let fit = one_step_update(&profile, &prev, &PenaltySpec::scad(0.1, 2), Expansion::ProfileMaximizer).unwrap();
        assert_eq!(fit.unpenalized, vec![0, 1]);
        assert!((fit.beta_vector() - &profile.center).amax() < 1e-10);
    }

    #[test]
    fn huge_theta_zeroes_everything() {
        let profile = QuadraticProfile {
            center: DVector::from_vec(vec![0.5, -0.3, 0.2]),
            information: DMatrix::identity(3, 3) * 50.0,
            n: 100,
        };
        let fit = one_step_update(&profile, &DVector::zeros(3), &PenaltySpec::scad(1e3, 3), Expansion::ProfileMaximizer).unwrap();
        assert!(fit.beta.iter().all(|b| b.to_bits() == 0));
    }

    #[test]
    fn disabled_penalty_is_a_newton_step_on_quadratics() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let d = rng.random_range(1..6);
            let m = DMatrix::from_fn(d + 2, d, |_, _| rng.random::<f64>() - 0.5);
            let profile = QuadraticProfile {
                center: DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0),
                information: m.transpose() * m + DMatrix::identity(d, d) * 0.1,
                n: 50,
            };
            let start = DVector::from_fn(d, |_, _| rng.random::<f64>());
            let der = profile.derivatives(&start).unwrap();
            let newton = &start + der.information.clone().cholesky().unwrap().solve(&der.gradient);
            let fit = one_step_update(&profile, &start, &PenaltySpec::none(d), Expansion::ProfileMaximizer).unwrap();
            assert!((fit.beta_vector() - newton).amax() < 1e-6);
        }
    }

    #[test]
    fn forced_zero_stays_zero() {
        let profile = QuadraticProfile {
            center: DVector::from_vec(vec![1.0, 1.0]),
            information: DMatrix::identity(2, 2) * 10.0,
            n: 10,
        };
        let spec = PenaltySpec::adaptive_lasso(adaptive_lasso_thetas(&DVector::from_vec(vec![1.0, 0.0]), 0.01));
        let fit = one_step_update(&profile, &DVector::from_vec(vec![1.0, 0.0]), &spec, Expansion::ProfileMaximizer).unwrap();
        assert_eq!(fit.beta[1].to_bits(), 0);
        assert!(fit.beta[0] != 0.0);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let d = 5;
        let m = DMatrix::from_fn(d + 3, d, |_, _| rng.random::<f64>() - 0.5);
        let info = (m.transpose() * m + DMatrix::identity(d, d)) * 20.0;
        let center = DVector::from_vec(vec![0.8, 0.02, -0.5, 0.01, 0.0]);
        let perm = [3, 0, 4, 2, 1];
        let profile = QuadraticProfile {
            center: center.clone(),
            information: info.clone(),
            n: 100,
        };
        let permuted = QuadraticProfile {
            center: DVector::from_fn(d, |i, _| center[perm[i]]),
            information: DMatrix::from_fn(d, d, |i, j| info[(perm[i], perm[j])]),
            n: 100,
        };
        let start = DVector::zeros(d);
        let a = aic_select_theta(&profile, &start, PenaltyKind::Scad, &default_theta_grid(d, 100), Expansion::ProfileMaximizer).unwrap();
        let b = aic_select_theta(&permuted, &start, PenaltyKind::Scad, &default_theta_grid(d, 100), Expansion::ProfileMaximizer).unwrap();
        for i in 0..d {
            assert!((b.fit.beta[i] - a.fit.beta[perm[i]]).abs() < 1e-10);
        }
    }

    #[test]
    fn theta_selection_contract() {
        let profile = QuadraticProfile {
            center: DVector::from_vec(vec![0.9, 0.05, -0.6]),
            information: DMatrix::identity(3, 3) * 40.0,
            n: 100,
        };
        let prev = DVector::from_vec(vec![0.9, 0.05, -0.6]);
        let sel = aic_select_theta(&profile, &prev, PenaltyKind::Scad, &[0.07], Expansion::ProfileMaximizer).unwrap();
        assert_eq!(sel.theta, 0.07);
        let nnz = sel.fit.nonzero().len();
        assert!((sel.fit.aic - (-2.0 * sel.fit.loglik + 2.0 * nnz as f64)).abs() < 1e-12);
        assert!(aic_select_theta(&profile, &prev, PenaltyKind::Scad, &[], Expansion::ProfileMaximizer).is_err());
    }

    #[test]
    fn literal_expansion_stalls_without_penalty() {
        let profile = QuadraticProfile {
            center: DVector::from_vec(vec![1.0, 2.0]),
            information: DMatrix::identity(2, 2) * 5.0,
            n: 10,
        };
        let prev = DVector::from_vec(vec![0.3, 0.4]);
        let fit = one_step_update(&profile, &prev, &PenaltySpec::none(2), Expansion::Previous).unwrap();
        assert!((fit.beta_vector() - prev).amax() < 1e-12);
    }
}
