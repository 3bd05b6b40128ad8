//! Monte-Carlo benchmark: scenario generators, censoring calibration,
//! model error and selection metrics, and a seeded replicate runner whose
//! summaries mirror the parametric-selection, standard-error and
//! nonparametric-selection tables.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backfit::{fit, FitConfig, FitResult};
use crate::beta_solver::{profile_maximizer, CoxProfile, PenaltyKind};
use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::eta_solver::{default_lambda_grid, select_lambda_scaled, term_band, BandPoint, TraceScale};
use crate::inference::sandwich_cov;
use crate::kl_select::{kl_ratio_report, BiasedWeights, DEFAULT_THRESHOLD};
use crate::linalg::{mad_sd, median, quantile};
use crate::partial_lik::LikelihoodContext;
use crate::spline::{build_basis, evaluate, select_knots, unit_grid, Structure, Term};

/// `1.5 sin(2πw − π/2)`.
pub fn eta0a(w: f64) -> f64 {
    1.5 * (2.0 * std::f64::consts::PI * w - std::f64::consts::FRAC_PI_2).sin()
}

/// `4(w − 0.3)² + 4.7e^{−w} − 3.4643`.
pub fn eta0b(w: f64) -> f64 {
    4.0 * (w - 0.3).powi(2) + 4.7 * (-w).exp() - 3.4643
}

pub const BETA0: [f64; 8] = [0.8, 0.0, 0.0, 1.0, 0.0, 0.0, 0.6, 0.0];

/// Monte-Carlo sample size for model errors and censoring calibration.
pub const MC_SIZE: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    A,
    B,
}

impl Shape {
    pub fn eval(self, w: f64) -> f64 {
        match self {
            Shape::A => eta0a(w),
            Shape::B => eta0b(w),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaComponent {
    /// Index of the nonparametric covariate (0 or 1).
    pub var: usize,
    pub shape: Shape,
    pub weight: f64,
}

/// A true nonparametric effect: a weighted sum of univariate shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaTruth {
    /// Number of uniform covariates generated (covariates without a
    /// component are pure noise).
    pub q: usize,
    pub components: Vec<EtaComponent>,
}

impl EtaTruth {
    pub fn univariate(shape: Shape) -> Self {
        Self {
            q: 1,
            components: vec![EtaComponent { var: 0, shape, weight: 1.0 }],
        }
    }

    pub fn eval(&self, w: &[f64]) -> f64 {
        self.components.iter().map(|c| c.weight * c.shape.eval(w[c.var])).sum()
    }

    /// Covariates with a nonzero component.
    pub fn active_vars(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.components.iter().filter(|c| c.weight != 0.0).map(|c| c.var).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Estimation procedures compared in the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Procedure {
    /// True support and true η; only the three nonzero β are estimated.
    M0,
    /// True support, η misspecified as linear in `W`.
    MA,
    /// True support, spline η, no penalty on β.
    MB,
    /// All covariates, spline η, SCAD.
    MC,
    /// All covariates, spline η, adaptive LASSO.
    MD,
    /// Spline η fitted with β fixed at its true value.
    EtaOracleBeta,
}

impl Procedure {
    pub fn label(self) -> &'static str {
        match self {
            Procedure::M0 => "M0",
            Procedure::MA => "MA",
            Procedure::MB => "MB",
            Procedure::MC => "MC",
            Procedure::MD => "MD",
            Procedure::EtaOracleBeta => "eta-oracle-beta",
        }
    }

    fn selects(self) -> bool {
        matches!(self, Procedure::MC | Procedure::MD)
    }
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Procedure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M0" => Ok(Procedure::M0),
            "MA" => Ok(Procedure::MA),
            "MB" => Ok(Procedure::MB),
            "MC" => Ok(Procedure::MC),
            "MD" => Ok(Procedure::MD),
            "ETA-ORACLE-BETA" => Ok(Procedure::EtaOracleBeta),
            other => Err(Error::InvalidArgument(format!("unknown procedure `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub n: usize,
    pub beta0: Vec<f64>,
    pub eta: EtaTruth,
    pub censor_target: f64,
    /// `Cov(U_j, U_k) = rho^{|j−k|}`.
    pub rho: f64,
    pub procedures: Vec<Procedure>,
    /// Structure fitted by the spline procedures, e.g. `W1` or `W1+W2+W1:W2`.
    pub fit_structure: String,
    /// Reduced structures checked by the KL diagnostic; empty to skip it.
    pub candidates: Vec<String>,
    pub kl_threshold: f64,
    pub seed: u64,
    pub mc_size: usize,
}

impl Scenario {
    fn base(name: &str, eta: EtaTruth, censor_target: f64) -> Self {
        Self {
            name: name.to_string(),
            n: 150,
            beta0: BETA0.to_vec(),
            eta,
            censor_target,
            rho: 0.5,
            procedures: vec![Procedure::M0, Procedure::MA, Procedure::MB, Procedure::MC, Procedure::MD],
            fit_structure: "W1".into(),
            candidates: Vec::new(),
            kl_threshold: DEFAULT_THRESHOLD,
            seed: 0,
            mc_size: MC_SIZE,
        }
    }

    /// Built-in scenarios: `table1-a`, `table1-b`, `table2`, `table3-1` … `table3-4`.
    pub fn named(name: &str) -> Result<Self> {
        let noise = |shape| EtaTruth {
            q: 2,
            components: vec![EtaComponent { var: 0, shape, weight: 1.0 }],
        };
        let pair = |wa: f64, wb: f64| EtaTruth {
            q: 2,
            components: vec![
                EtaComponent { var: 0, shape: Shape::A, weight: wa },
                EtaComponent { var: 1, shape: Shape::B, weight: wb },
            ],
        };
        let np = |mut sc: Scenario, fit: &str, cands: &[&str]| {
            sc.procedures = vec![Procedure::MC];
            sc.fit_structure = fit.into();
            sc.candidates = cands.iter().map(|c| c.to_string()).collect();
            sc
        };
        Ok(match name {
            "table1-a" => Self::base(name, EtaTruth::univariate(Shape::A), 0.23),
            "table1-b" => Self::base(name, EtaTruth::univariate(Shape::B), 0.40),
            "table2" => {
                let mut sc = Self::base(name, EtaTruth::univariate(Shape::A), 0.23);
                sc.procedures = vec![Procedure::MC];
                sc
            }
            "table3-1" => np(Self::base(name, noise(Shape::A), 0.23), "W1+W2", &["W1", "W2"]),
            "table3-2" => np(Self::base(name, noise(Shape::B), 0.40), "W1+W2", &["W1", "W2"]),
            "table3-3" => np(Self::base(name, pair(0.7, 0.3), 0.25), "W1+W2+W1:W2", &["W1+W2", "W1", "W2"]),
            "table3-4" => np(Self::base(name, pair(1.0, 1.0), 0.39), "W1+W2+W1:W2", &["W1+W2", "W1", "W2"]),
            other => return Err(Error::InvalidArgument(format!("unknown scenario `{other}`"))),
        })
    }

    pub fn names() -> &'static [&'static str] {
        &["table1-a", "table1-b", "table2", "table3-1", "table3-2", "table3-3", "table3-4"]
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.censor_target) {
            return Err(Error::InvalidArgument(format!("censoring target {} outside [0, 1)", self.censor_target)));
        }
        if self.n < 10 {
            return Err(Error::InvalidArgument(format!("sample size {} is too small", self.n)));
        }
        if !(self.eta.q == 1 || self.eta.q == 2) || self.eta.components.iter().any(|c| c.var >= self.eta.q) {
            return Err(Error::InvalidArgument("nonparametric truth must use one or two covariates".into()));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!("correlation {} outside (−1, 1)", self.rho)));
        }
        if self.procedures.is_empty() {
            return Err(Error::InvalidArgument("no procedures requested".into()));
        }
        if self.mc_size < 1000 {
            return Err(Error::InvalidArgument("Monte-Carlo size must be at least 1000".into()));
        }
        let fit: Structure = self.fit_structure.parse()?;
        if fit.required_q() > self.eta.q {
            return Err(Error::Structure(format!("{fit} needs more covariates than the scenario generates")));
        }
        for c in &self.candidates {
            let s: Structure = c.parse()?;
            if !s.is_subset_of(&fit) {
                return Err(Error::Structure(format!("candidate {s} is not nested in {fit}")));
            }
        }
        let oracle = self.procedures.iter().any(|p| matches!(p, Procedure::M0 | Procedure::MA | Procedure::MB));
        if oracle && self.support().is_empty() {
            return Err(Error::InvalidArgument("oracle procedures need a nonzero coefficient".into()));
        }
        Ok(())
    }

    /// Indices of the nonzero true coefficients.
    pub fn support(&self) -> Vec<usize> {
        (0..self.beta0.len()).filter(|&j| self.beta0[j] != 0.0).collect()
    }

    pub fn d(&self) -> usize {
        self.beta0.len()
    }

    fn covariance_factor(&self) -> Result<DMatrix<f64>> {
        let d = self.d();
        if d == 0 {
            return Ok(DMatrix::zeros(0, 0));
        }
        let cov = DMatrix::from_fn(d, d, |j, k| self.rho.powi((j as i32 - k as i32).abs()));
        cov.cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::Singular("covariate covariance".into()))
    }
}

/// Covariates drawn from the scenario distribution.
#[derive(Debug, Clone)]
pub struct CovariateSample {
    pub u: DMatrix<f64>,
    pub w: DMatrix<f64>,
    /// `Uβ₀ + η₀(W)`.
    pub lp: Vec<f64>,
}

fn draw_covariates(sc: &Scenario, factor: &DMatrix<f64>, size: usize, rng: &mut ChaCha8Rng) -> CovariateSample {
    let d = sc.d();
    let q = sc.eta.q;
    let mut u = DMatrix::zeros(size, d);
    let mut w = DMatrix::zeros(size, q);
    let mut z = DVector::zeros(d);
    let mut lp = Vec::with_capacity(size);
    let mut point = vec![0.0; q];
    for i in 0..size {
        for j in 0..d {
            z[j] = StandardNormal.sample(rng);
        }
        let ui = factor * &z;
        for j in 0..q {
            point[j] = rng.random::<f64>();
            w[(i, j)] = point[j];
        }
        let mut v = sc.eta.eval(&point);
        for j in 0..d {
            u[(i, j)] = ui[j];
            v += ui[j] * sc.beta0[j];
        }
        lp.push(v);
    }
    CovariateSample { u, w, lp }
}

/// Expected censoring fraction `E[r/(r + e^{lp})]` over a covariate sample,
/// the probability that an exponential(`r`) censoring time precedes an
/// exponential(`e^{lp}`) failure time.
fn censoring_fraction(lp: &[f64], rate: f64) -> f64 {
    lp.iter().map(|v| rate / (rate + v.exp())).sum::<f64>() / lp.len() as f64
}

/// Exponential censoring rate giving the target censoring fraction, by
/// bisection on `log r` against a fixed Monte-Carlo covariate sample.
pub fn calibrate_censoring(sc: &Scenario, target: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("censoring target {target} outside [0, 1)")));
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    let factor = sc.covariance_factor()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ 0xC3A5_C85C_97CB_3127);
    let sample = draw_covariates(sc, &factor, sc.mc_size, &mut rng);
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    if censoring_fraction(&sample.lp, lo.exp()) > target || censoring_fraction(&sample.lp, hi.exp()) < target {
        return Err(Error::InvalidArgument(format!("cannot bracket censoring target {target}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if censoring_fraction(&sample.lp, mid.exp()) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Survival data from the scenario with exponential censoring at `rate`.
pub fn gen_data(sc: &Scenario, rate: f64, rng: &mut ChaCha8Rng) -> Result<(SurvivalDataset, CovariateSample)> {
    let factor = sc.covariance_factor()?;
    let cov = draw_covariates(sc, &factor, sc.n, rng);
    let mut times = Vec::with_capacity(sc.n);
    let mut events = Vec::with_capacity(sc.n);
    for i in 0..sc.n {
        let e: f64 = Exp1.sample(rng);
        let t = e / cov.lp[i].exp();
        let c = if rate > 0.0 {
            let e: f64 = Exp1.sample(rng);
            e / rate
        } else {
            f64::INFINITY
        };
        times.push(t.min(c));
        events.push(t <= c);
    }
    let bounds = vec![(0.0, 1.0); sc.eta.q];
    let ds = SurvivalDataset::with_w_bounds(times, events, cov.u.clone(), cov.w.clone(), &bounds)?;
    Ok((ds, cov))
}

/// Fitted relative risk `Uβ̂ + η̂(W)` for a sample of covariates.
pub trait RiskPredictor {
    fn predict(&self, u: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DVector<f64>>;
}

/// Model error `E[(e^{−Uβ̂−η̂(W)} − e^{−Uβ₀−η₀(W)})²]` over `sample`.
pub fn model_error(pred: &DVector<f64>, sample: &CovariateSample) -> f64 {
    pred.iter()
        .zip(&sample.lp)
        .map(|(a, b)| ((-a).exp() - (-b).exp()).powi(2))
        .sum::<f64>()
        / sample.lp.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitClass {
    Under,
    Correct,
    Over,
}

impl fmt::Display for FitClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitClass::Under => "under",
            FitClass::Correct => "correct",
            FitClass::Over => "over",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// Correctly selected nonzero coefficients.
    pub cc: usize,
    /// Incorrectly selected (truly zero) coefficients.
    pub ic: usize,
    pub class: FitClass,
}

/// CC, IC and the under/correct/over class of a fitted coefficient vector.
pub fn classify_fit(beta_hat: &[f64], beta0: &[f64]) -> Result<Selection> {
    if beta_hat.len() != beta0.len() {
        return Err(Error::DimensionMismatch(format!("{} estimates for {} coefficients", beta_hat.len(), beta0.len())));
    }
    let truth = beta0.iter().filter(|b| **b != 0.0).count();
    let cc = beta_hat.iter().zip(beta0).filter(|(h, t)| **t != 0.0 && **h != 0.0).count();
    let ic = beta_hat.iter().zip(beta0).filter(|(h, t)| **t == 0.0 && **h != 0.0).count();
    let class = if cc < truth {
        FitClass::Under
    } else if ic == 0 {
        FitClass::Correct
    } else {
        FitClass::Over
    };
    Ok(Selection { cc, ic, class })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProcedureOutcome {
    pub procedure: Procedure,
    /// Coefficients on all `d` covariates (zeros outside a known support).
    pub beta: Vec<f64>,
    pub se: Vec<Option<f64>>,
    pub model_error: f64,
    /// `ME(M0)/ME(this)`, when M0 ran.
    pub rme: Option<f64>,
    pub selection: Option<Selection>,
    pub lambda: Option<f64>,
    pub theta: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `sqrt(mean (η̂ − η₀)²)` over the 101-point grid for univariate fits.
    pub eta_l2: Option<f64>,
    /// η̂ with 95% band on the 101-point grid for univariate fits.
    #[serde(skip)]
    pub grid: Option<Vec<BandPoint>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NpSelection {
    pub w1: bool,
    pub w2: bool,
    pub interaction: Option<bool>,
    pub class: FitClass,
}

#[derive(Debug, Clone, Serialize)]
pub struct NpOutcome {
    /// `(candidate, ratio)` per candidate.
    pub ratios: Vec<(String, f64)>,
    pub max_pythagorean_defect: f64,
    pub selection: NpSelection,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub censoring: f64,
    pub outcomes: Vec<ProcedureOutcome>,
    /// `(procedure, error)` for procedures that failed.
    pub failures: Vec<(Procedure, String)>,
    pub np: Option<NpOutcome>,
}

impl ReplicateRecord {
    pub fn outcome(&self, p: Procedure) -> Option<&ProcedureOutcome> {
        self.outcomes.iter().find(|o| o.procedure == p)
    }
}

/// Options that are not part of the scenario definition.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub replicates: usize,
    pub jobs: Option<usize>,
    pub lambda_grid: Vec<f64>,
    pub trace_scale: TraceScale,
    /// Compute pointwise bands on the grid for univariate fits.
    pub bands: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            replicates: 1,
            jobs: None,
            lambda_grid: default_lambda_grid(),
            trace_scale: TraceScale::PerFailure,
            bands: true,
        }
    }
}

struct Prepared<'a> {
    sc: &'a Scenario,
    opts: &'a RunOptions,
    rate: f64,
    mc: CovariateSample,
    fit_structure: Structure,
    candidates: Vec<Structure>,
    grid: Vec<f64>,
}

fn pad(beta: &[f64], support: &[usize], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (k, &j) in support.iter().enumerate() {
        out[j] = beta[k];
    }
    out
}

fn linear_predictor_with(beta: &[f64], u: &DMatrix<f64>, eta: &DVector<f64>) -> DVector<f64> {
    let b = DVector::from_column_slice(beta);
    u * b + eta
}

fn grid_points() -> DMatrix<f64> {
    let g = unit_grid(100);
    DMatrix::from_column_slice(g.len(), 1, &g)
}

impl Prepared<'_> {
    fn truth_on_grid(&self) -> Vec<f64> {
        self.grid.iter().map(|&w| self.sc.eta.eval(&[w, 0.5])).collect()
    }

    fn eta_on_mc(&self, res: &FitResult) -> Result<DVector<f64>> {
        evaluate(&res.design.basis, &res.eta_fit.coef, &self.mc.w.columns(0, res.design.basis.q()).into_owned())
    }

    fn univariate_extras(&self, res: &FitResult) -> Result<(Option<f64>, Option<Vec<BandPoint>>)> {
        if res.design.basis.structure() != &Structure::univariate() || self.sc.eta.active_vars().iter().any(|&v| v > 0) {
            return Ok((None, None));
        }
        let pts = grid_points();
        let est = evaluate(&res.design.basis, &res.eta_fit.coef, &pts)?;
        let truth = self.truth_on_grid();
        let l2 = (est.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64).sqrt();
        let band = if self.opts.bands {
            Some(term_band(&res.eta_fit, &res.design, Term::W1, &pts, 0.95)?)
        } else {
            None
        };
        Ok((Some(l2), band))
    }

    fn config(&self, penalty: PenaltyKind, seed: u64, structure: Structure) -> FitConfig {
        FitConfig {
            penalty,
            structure,
            lambda_grid: self.opts.lambda_grid.clone(),
            trace_scale: self.opts.trace_scale,
            seed,
            ..FitConfig::default()
        }
    }

    fn run_procedure(&self, p: Procedure, ds: &SurvivalDataset, cov: &CovariateSample, knot_seed: u64) -> Result<ProcedureOutcome> {
        let sc = self.sc;
        let d = sc.d();
        let support = sc.support();
        let mut out = ProcedureOutcome {
            procedure: p,
            beta: vec![0.0; d],
            se: vec![None; d],
            model_error: f64::NAN,
            rme: None,
            selection: None,
            lambda: None,
            theta: None,
            iterations: 1,
            converged: true,
            eta_l2: None,
            grid: None,
        };
        match p {
            Procedure::M0 => {
                let sub = ds.select_u_columns(&support);
                let ctx = LikelihoodContext::new(&sub);
                let eta0: DVector<f64> = DVector::from_vec(cov.lp.clone()) - &cov.u * DVector::from_column_slice(&sc.beta0);
                let profile = CoxProfile::new(&ctx, eta0)?;
                let max = profile_maximizer(&profile, &DVector::zeros(support.len()))?;
                out.beta = pad(max.beta.as_slice(), &support, d);
                out.converged = max.converged;
                out.iterations = max.iterations;
                let mc_eta = DVector::from_vec(self.mc.lp.clone()) - &self.mc.u * DVector::from_column_slice(&sc.beta0);
                out.model_error = model_error(&linear_predictor_with(&out.beta, &self.mc.u, &mc_eta), &self.mc);
            }
            Procedure::MA => {
                let vars = sc.eta.active_vars();
                let base = ds.select_u_columns(&support);
                let k = support.len();
                let mut u = DMatrix::zeros(ds.n(), k + vars.len());
                u.columns_mut(0, k).copy_from(base.u());
                for (c, &v) in vars.iter().enumerate() {
                    for i in 0..ds.n() {
                        u[(i, k + c)] = ds.w()[(i, v)] - 0.5;
                    }
                }
                let aug = SurvivalDataset::with_w_bounds(
                    ds.times().to_vec(),
                    ds.events().to_vec(),
                    u,
                    ds.w().clone(),
                    ds.w_bounds(),
                )?;
                let ctx = LikelihoodContext::new(&aug);
                let profile = CoxProfile::new(&ctx, DVector::zeros(ds.n()))?;
                let max = profile_maximizer(&profile, &DVector::zeros(k + vars.len()))?;
                out.beta = pad(&max.beta.as_slice()[..k], &support, d);
                out.converged = max.converged;
                out.iterations = max.iterations;
                let mc_eta = DVector::from_fn(self.mc.lp.len(), |i, _| {
                    vars.iter().enumerate().map(|(c, &v)| max.beta[k + c] * (self.mc.w[(i, v)] - 0.5)).sum()
                });
                out.model_error = model_error(&linear_predictor_with(&out.beta, &self.mc.u, &mc_eta), &self.mc);
            }
            Procedure::MB | Procedure::MC | Procedure::MD => {
                let (data, penalty, cols): (std::borrow::Cow<SurvivalDataset>, _, Vec<usize>) = match p {
                    Procedure::MB => (std::borrow::Cow::Owned(ds.select_u_columns(&support)), PenaltyKind::None, support.clone()),
                    Procedure::MC => (std::borrow::Cow::Borrowed(ds), PenaltyKind::Scad, (0..d).collect()),
                    _ => (std::borrow::Cow::Borrowed(ds), PenaltyKind::AdaptiveLasso, (0..d).collect()),
                };
                let res = fit(&data, &self.config(penalty, knot_seed, self.fit_structure.clone()))?;
                out.beta = pad(&res.beta_fit.beta, &cols, d);
                out.lambda = Some(res.lambda);
                out.theta = Some(res.beta_fit.theta);
                out.iterations = res.iterations;
                out.converged = res.converged;
                if p.selects() {
                    out.selection = Some(classify_fit(&out.beta, &sc.beta0)?);
                }
                if p == Procedure::MC && !res.beta_fit.nonzero().is_empty() {
                    let ctx = LikelihoodContext::new(&data);
                    if let Ok(sw) = sandwich_cov(&ctx, &res.eta_fit.fitted, &res.beta_fit) {
                        for (k, &j) in cols.iter().enumerate() {
                            out.se[j] = sw.se[k];
                        }
                    }
                }
                let mc_eta = self.eta_on_mc(&res)?;
                out.model_error = model_error(&linear_predictor_with(&out.beta, &self.mc.u, &mc_eta), &self.mc);
                let (l2, grid) = self.univariate_extras(&res)?;
                out.eta_l2 = l2;
                out.grid = grid;
            }
            Procedure::EtaOracleBeta => {
                let knots = select_knots(ds, knot_seed);
                let design = build_basis(ds, &knots, &self.fit_structure)?;
                let ctx = LikelihoodContext::new(ds);
                let beta0 = DVector::from_column_slice(&sc.beta0);
                let sel = select_lambda_scaled(&ctx, &design, &beta0, &self.opts.lambda_grid, self.opts.trace_scale)?;
                out.beta = sc.beta0.clone();
                out.lambda = Some(sel.lambda);
                out.iterations = sel.fit.iterations;
                out.converged = sel.fit.converged;
                let mc_eta = evaluate(&design.basis, &sel.fit.coef, &self.mc.w.columns(0, design.basis.q()).into_owned())?;
                out.model_error = model_error(&linear_predictor_with(&out.beta, &self.mc.u, &mc_eta), &self.mc);
                let res_like = (design, sel.fit);
                if res_like.0.basis.structure() == &Structure::univariate() && self.sc.eta.active_vars().iter().all(|&v| v == 0) {
                    let pts = grid_points();
                    let est = evaluate(&res_like.0.basis, &res_like.1.coef, &pts)?;
                    let truth = self.truth_on_grid();
                    out.eta_l2 = Some((est.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64).sqrt());
                    if self.opts.bands {
                        out.grid = Some(term_band(&res_like.1, &res_like.0, Term::W1, &pts, 0.95)?);
                    }
                }
            }
        }
        Ok(out)
    }

    fn np_outcome(&self, ds: &SurvivalDataset, knot_seed: u64) -> Result<NpOutcome> {
        let res = fit(ds, &self.config(PenaltyKind::Scad, knot_seed, self.fit_structure.clone()))?;
        let weights = BiasedWeights::new(ds, &res.beta())?;
        let reports = kl_ratio_report(&res.eta_fit.fitted, &res.design, &self.candidates, &weights, self.sc.kl_threshold)?;
        let infeasible = |s: &Structure| reports.iter().zip(&self.candidates).find(|(_, c)| *c == s).map(|(r, _)| !r.feasible);
        // a term is selected when the candidate without it is infeasible
        let w1 = infeasible(&Structure::new(vec![Term::W2])?).unwrap_or(true);
        let w2 = infeasible(&Structure::univariate()).unwrap_or(self.fit_structure.contains(Term::W2));
        let interaction = if self.fit_structure.contains(Term::W1W2) {
            infeasible(&Structure::additive())
        } else {
            None
        };
        let active = self.sc.eta.active_vars();
        let truth_w1 = active.contains(&0);
        let truth_w2 = active.contains(&1);
        let under = (truth_w1 && !w1) || (truth_w2 && !w2);
        let extra = (!truth_w1 && w1) || (!truth_w2 && w2) || interaction == Some(true);
        let class = if under {
            FitClass::Under
        } else if extra {
            FitClass::Over
        } else {
            FitClass::Correct
        };
        Ok(NpOutcome {
            ratios: reports.iter().map(|r| (r.candidate.clone(), r.ratio)).collect(),
            max_pythagorean_defect: reports.iter().map(|r| r.pythagorean_defect.abs()).fold(0.0, f64::max),
            selection: NpSelection { w1, w2, interaction, class },
        })
    }

    fn replicate(&self, index: usize) -> ReplicateRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(self.sc.seed);
        rng.set_stream(index as u64 + 1);
        let knot_seed: u64 = rng.random();
        let mut record = ReplicateRecord {
            index,
            censoring: f64::NAN,
            outcomes: Vec::new(),
            failures: Vec::new(),
            np: None,
        };
        let (ds, cov) = match gen_data(self.sc, self.rate, &mut rng) {
            Ok(v) => v,
            Err(e) => {
                record.failures = self.sc.procedures.iter().map(|p| (*p, e.to_string())).collect();
                return record;
            }
        };
        record.censoring = ds.censoring_rate();
        if !self.candidates.is_empty() {
            match self.np_outcome(&ds, knot_seed) {
                Ok(np) => record.np = Some(np),
                Err(e) => record.failures.push((Procedure::MC, e.to_string())),
            }
            return record;
        }
        for &p in &self.sc.procedures {
            match self.run_procedure(p, &ds, &cov, knot_seed) {
                Ok(o) => record.outcomes.push(o),
                Err(e) => record.failures.push((p, e.to_string())),
            }
        }
        if let Some(me0) = record.outcome(Procedure::M0).map(|o| o.model_error) {
            for o in &mut record.outcomes {
                o.rme = Some(me0 / o.model_error);
            }
        }
        record
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProcedureSummary {
    pub procedure: Procedure,
    pub replicates: usize,
    pub failed: usize,
    pub median_rme: Option<f64>,
    pub mean_cc: Option<f64>,
    pub mean_ic: Option<f64>,
    pub under: Option<f64>,
    pub correct: Option<f64>,
    pub over: Option<f64>,
    pub converged: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeSummary {
    pub coefficient: usize,
    /// MAD/0.6745 of the nonzero estimates.
    pub sd: f64,
    /// Median estimated standard error.
    pub sd_median: f64,
    /// MAD/0.6745 of the estimated standard errors.
    pub sd_mad: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct NpSummary {
    pub replicates: usize,
    pub failed: usize,
    pub w1: f64,
    pub w2: f64,
    pub interaction: Option<f64>,
    pub under: f64,
    pub correct: f64,
    pub over: f64,
    pub max_pythagorean_defect: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GridRow {
    pub w: f64,
    pub truth: f64,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Fraction of replicates whose band covers the truth.
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    pub procedure: Procedure,
    pub rows: Vec<GridRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationTable {
    pub scenario: Scenario,
    pub censoring_rate: f64,
    pub mean_censoring: f64,
    pub replicates: Vec<ReplicateRecord>,
    pub procedures: Vec<ProcedureSummary>,
    pub se: Vec<SeSummary>,
    pub np: Option<NpSummary>,
    pub grids: Vec<GridSummary>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize_procedure(p: Procedure, recs: &[ReplicateRecord]) -> ProcedureSummary {
    let ok: Vec<&ProcedureOutcome> = recs.iter().filter_map(|r| r.outcome(p)).collect();
    let failed = recs.len() - ok.len();
    let rmes: Vec<f64> = ok.iter().filter_map(|o| o.rme).filter(|v| v.is_finite()).collect();
    let sels: Vec<Selection> = ok.iter().filter_map(|o| o.selection).collect();
    let frac = |c: FitClass| sels.iter().filter(|s| s.class == c).count() as f64 / sels.len() as f64;
    let has_sel = p.selects() && !sels.is_empty();
    ProcedureSummary {
        procedure: p,
        replicates: ok.len(),
        failed,
        median_rme: (!rmes.is_empty()).then(|| median(&rmes)),
        mean_cc: has_sel.then(|| mean(&sels.iter().map(|s| s.cc as f64).collect::<Vec<_>>())),
        mean_ic: has_sel.then(|| mean(&sels.iter().map(|s| s.ic as f64).collect::<Vec<_>>())),
        under: has_sel.then(|| frac(FitClass::Under)),
        correct: has_sel.then(|| frac(FitClass::Correct)),
        over: has_sel.then(|| frac(FitClass::Over)),
        converged: ok.iter().filter(|o| o.converged).count() as f64 / ok.len().max(1) as f64,
    }
}

fn summarize_se(sc: &Scenario, recs: &[ReplicateRecord]) -> Vec<SeSummary> {
    let ok: Vec<&ProcedureOutcome> = recs.iter().filter_map(|r| r.outcome(Procedure::MC)).collect();
    if ok.is_empty() {
        return Vec::new();
    }
    sc.support()
        .into_iter()
        .filter_map(|j| {
            let est: Vec<f64> = ok.iter().map(|o| o.beta[j]).filter(|b| *b != 0.0).collect();
            let ses: Vec<f64> = ok.iter().filter_map(|o| o.se[j]).collect();
            (!est.is_empty() && !ses.is_empty()).then(|| SeSummary {
                coefficient: j,
                sd: mad_sd(&est),
                sd_median: median(&ses),
                sd_mad: mad_sd(&ses),
                count: est.len(),
            })
        })
        .collect()
}

fn summarize_np(recs: &[ReplicateRecord]) -> Option<NpSummary> {
    let ok: Vec<&NpOutcome> = recs.iter().filter_map(|r| r.np.as_ref()).collect();
    if ok.is_empty() {
        return None;
    }
    let k = ok.len() as f64;
    let frac = |f: &dyn Fn(&NpOutcome) -> bool| ok.iter().filter(|o| f(o)).count() as f64 / k;
    let has_int = ok.iter().any(|o| o.selection.interaction.is_some());
    Some(NpSummary {
        replicates: ok.len(),
        failed: recs.len() - ok.len(),
        w1: frac(&|o| o.selection.w1),
        w2: frac(&|o| o.selection.w2),
        interaction: has_int.then(|| frac(&|o| o.selection.interaction == Some(true))),
        under: frac(&|o| o.selection.class == FitClass::Under),
        correct: frac(&|o| o.selection.class == FitClass::Correct),
        over: frac(&|o| o.selection.class == FitClass::Over),
        max_pythagorean_defect: ok.iter().map(|o| o.max_pythagorean_defect).fold(0.0, f64::max),
    })
}

fn summarize_grid(p: Procedure, truth: &[f64], grid: &[f64], recs: &[ReplicateRecord]) -> Option<GridSummary> {
    let bands: Vec<&Vec<BandPoint>> = recs.iter().filter_map(|r| r.outcome(p)).filter_map(|o| o.grid.as_ref()).collect();
    if bands.is_empty() {
        return None;
    }
    let rows = (0..grid.len())
        .map(|g| {
            let est: Vec<f64> = bands.iter().map(|b| b[g].estimate).collect();
            let lo: Vec<f64> = bands.iter().map(|b| b[g].lower).collect();
            let hi: Vec<f64> = bands.iter().map(|b| b[g].upper).collect();
            let covered = bands.iter().filter(|b| b[g].lower <= truth[g] && truth[g] <= b[g].upper).count();
            GridRow {
                w: grid[g],
                truth: truth[g],
                mean: mean(&est),
                q025: quantile(&est, 0.025),
                q975: quantile(&est, 0.975),
                ci_lo: mean(&lo),
                ci_hi: mean(&hi),
                coverage: covered as f64 / bands.len() as f64,
            }
        })
        .collect();
    Some(GridSummary { procedure: p, rows })
}

/// Runs `opts.replicates` seeded replicates of the scenario in parallel and
/// summarizes them. Results depend only on the scenario seed, never on the
/// number of threads.
pub fn run_table(sc: &Scenario, opts: &RunOptions) -> Result<SimulationTable> {
    sc.validate()?;
    if opts.replicates == 0 {
        return Err(Error::InvalidArgument("at least one replicate is required".into()));
    }
    let rate = calibrate_censoring(sc, sc.censor_target)?;
    let factor = sc.covariance_factor()?;
    let mut mc_rng = ChaCha8Rng::seed_from_u64(sc.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mc = draw_covariates(sc, &factor, sc.mc_size, &mut mc_rng);
    let prepared = Prepared {
        sc,
        opts,
        rate,
        mc,
        fit_structure: sc.fit_structure.parse()?,
        candidates: sc.candidates.iter().map(|c| c.parse()).collect::<Result<_>>()?,
        grid: unit_grid(100),
    };
    let run = || -> Vec<ReplicateRecord> { (0..opts.replicates).into_par_iter().map(|i| prepared.replicate(i)).collect() };
    let replicates = match opts.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(run),
        None => run(),
    };

    let procedures = if prepared.candidates.is_empty() {
        sc.procedures.iter().map(|&p| summarize_procedure(p, &replicates)).collect()
    } else {
        Vec::new()
    };
    let truth = prepared.truth_on_grid();
    let grids = sc
        .procedures
        .iter()
        .filter_map(|&p| summarize_grid(p, &truth, &prepared.grid, &replicates))
        .collect();
    let cens: Vec<f64> = replicates.iter().map(|r| r.censoring).filter(|c| c.is_finite()).collect();
    Ok(SimulationTable {
        censoring_rate: rate,
        mean_censoring: if cens.is_empty() { f64::NAN } else { mean(&cens) },
        se: summarize_se(sc, &replicates),
        np: summarize_np(&replicates),
        procedures,
        grids,
        scenario: sc.clone(),
        replicates,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// Summary CSV: one row per procedure, or one row of nonparametric
/// selection proportions for KL scenarios, followed by standard-error rows.
pub fn write_summary_csv<W: Write>(table: &SimulationTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(np) = &table.np {
        w.write_record(["scenario", "replicates", "failed", "W1", "W2", "W1:W2", "under", "correct", "over"])?;
        w.write_record([
            table.scenario.name.clone(),
            np.replicates.to_string(),
            np.failed.to_string(),
            format!("{}", np.w1),
            format!("{}", np.w2),
            opt(np.interaction),
            format!("{}", np.under),
            format!("{}", np.correct),
            format!("{}", np.over),
        ])?;
    } else {
        w.write_record([
            "scenario", "procedure", "replicates", "failed", "median_rme", "cc", "ic", "under", "correct", "over", "converged",
        ])?;
        for s in &table.procedures {
            w.write_record([
                table.scenario.name.clone(),
                s.procedure.to_string(),
                s.replicates.to_string(),
                s.failed.to_string(),
                opt(s.median_rme),
                opt(s.mean_cc),
                opt(s.mean_ic),
                opt(s.under),
                opt(s.correct),
                opt(s.over),
                format!("{}", s.converged),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Standard-error CSV: `coefficient, sd, sd_m, sd_mad, count`.
pub fn write_se_csv<W: Write>(table: &SimulationTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["coefficient", "sd", "sd_m", "sd_mad", "count"])?;
    for s in &table.se {
        w.write_record([
            format!("beta{}", s.coefficient + 1),
            format!("{}", s.sd),
            format!("{}", s.sd_median),
            format!("{}", s.sd_mad),
            s.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-replicate CSV, one row per replicate.
pub fn write_replicates_csv<W: Write>(table: &SimulationTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = table.scenario.d();
    let mut header = vec!["replicate".to_string(), "censoring".to_string(), "failures".to_string()];
    let procs = if table.np.is_some() || !table.scenario.candidates.is_empty() {
        Vec::new()
    } else {
        table.scenario.procedures.clone()
    };
    for p in &procs {
        for field in ["me", "rme", "cc", "ic", "class", "lambda", "theta", "iterations", "converged"] {
            header.push(format!("{p}_{field}"));
        }
        for j in 0..d {
            header.push(format!("{p}_beta{}", j + 1));
        }
    }
    for c in &table.scenario.candidates {
        header.push(format!("ratio_{c}"));
    }
    if !table.scenario.candidates.is_empty() {
        header.extend(["select_w1", "select_w2", "select_w1w2", "np_class"].map(String::from));
    }
    w.write_record(&header)?;
    for r in &table.replicates {
        let mut row = vec![
            r.index.to_string(),
            format!("{}", r.censoring),
            r.failures.iter().map(|(p, e)| format!("{p}: {e}")).collect::<Vec<_>>().join("; "),
        ];
        for p in &procs {
            match r.outcome(*p) {
                Some(o) => {
                    row.push(format!("{}", o.model_error));
                    row.push(opt(o.rme));
                    row.push(o.selection.map_or_else(String::new, |s| s.cc.to_string()));
                    row.push(o.selection.map_or_else(String::new, |s| s.ic.to_string()));
                    row.push(o.selection.map_or_else(String::new, |s| s.class.to_string()));
                    row.push(opt(o.lambda));
                    row.push(opt(o.theta));
                    row.push(o.iterations.to_string());
                    row.push(o.converged.to_string());
                    row.extend(o.beta.iter().map(|b| format!("{b}")));
                }
                None => row.extend(std::iter::repeat_n(String::new(), 9 + d)),
            }
        }
        if !table.scenario.candidates.is_empty() {
            match &r.np {
                Some(np) => {
                    row.extend(np.ratios.iter().map(|(_, v)| format!("{v}")));
                    row.push(np.selection.w1.to_string());
                    row.push(np.selection.w2.to_string());
                    row.push(np.selection.interaction.map_or_else(String::new, |b| b.to_string()));
                    row.push(np.selection.class.to_string());
                }
                None => row.extend(std::iter::repeat_n(String::new(), table.scenario.candidates.len() + 4)),
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Pointwise curve summaries: `procedure, w, mean, q025, q975, ci_lo, ci_hi`.
pub fn write_grid_csv<W: Write>(table: &SimulationTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["procedure", "w", "truth", "mean", "q025", "q975", "ci_lo", "ci_hi", "coverage"])?;
    for g in &table.grids {
        for r in &g.rows {
            w.write_record([
                g.procedure.to_string(),
                format!("{}", r.w),
                format!("{}", r.truth),
                format!("{}", r.mean),
                format!("{}", r.q025),
                format!("{}", r.q975),
                format!("{}", r.ci_lo),
                format!("{}", r.ci_hi),
                format!("{}", r.coverage),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_values() {
        assert!(eta0a(0.25).abs() < 1e-15);
        assert!((eta0a(0.5) - 1.5).abs() < 1e-15);
        let steps = 100_000;
        let h = 1.0 / steps as f64;
        let ia: f64 = (0..steps).map(|i| eta0a((i as f64 + 0.5) * h) * h).sum();
        let ib: f64 = (0..steps).map(|i| eta0b((i as f64 + 0.5) * h) * h).sum();
        assert!(ia.abs() < 1e-8);
        assert!(ib.abs() < 1e-3);
    }

    #[test]
    fn classify() {
        let b0 = BETA0;
        let s = classify_fit(&b0, &b0).unwrap();
        assert_eq!((s.cc, s.ic, s.class), (3, 0, FitClass::Correct));
        let s = classify_fit(&[1.0; 8], &b0).unwrap();
        assert_eq!((s.cc, s.ic, s.class), (3, 5, FitClass::Over));
        let s = classify_fit(&[0.0; 8], &b0).unwrap();
        assert_eq!((s.cc, s.class), (0, FitClass::Under));
        assert!(classify_fit(&[0.0; 3], &b0).is_err());
    }

    #[test]
    fn model_error_zero_at_truth() {
        let sc = Scenario::named("table1-a").unwrap();
        let factor = sc.covariance_factor().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = draw_covariates(&sc, &factor, 2000, &mut rng);
        let pred = DVector::from_vec(s.lp.clone());
        assert_eq!(model_error(&pred, &s), 0.0);
        assert!(model_error(&pred.add_scalar(0.1), &s) > 0.0);
    }

    #[test]
    fn censoring_calibration() {
        let mut sc = Scenario::named("table1-a").unwrap();
        sc.mc_size = 20_000;
        let rate = calibrate_censoring(&sc, 0.23).unwrap();
        let rate_hi = calibrate_censoring(&sc, 0.4).unwrap();
        assert!(rate_hi > rate);
        assert_eq!(calibrate_censoring(&sc, 0.0).unwrap(), 0.0);
        // independent sample, simulated censoring indicators
        let factor = sc.covariance_factor().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        sc.n = 100_000;
        let (ds, _) = gen_data(&sc, rate, &mut rng).unwrap();
        assert!((ds.censoring_rate() - 0.23).abs() < 0.01, "{}", ds.censoring_rate());
        let _ = factor;
    }

    #[test]
    fn zero_replicates_rejected() {
        let sc = Scenario::named("table1-a").unwrap();
        let opts = RunOptions {
            replicates: 0,
            ..RunOptions::default()
        };
        assert!(run_table(&sc, &opts).is_err());
        assert!(Scenario::named("table9").is_err());
    }

    #[test]
    fn single_replicate_is_deterministic() {
        let mut sc = Scenario::named("table1-a").unwrap();
        sc.mc_size = 5_000;
        sc.n = 80;
        sc.seed = 3;
        let opts = RunOptions {
            replicates: 1,
            jobs: Some(1),
            ..RunOptions::default()
        };
        let a = run_table(&sc, &opts).unwrap();
        let b = run_table(&sc, &opts).unwrap();
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_replicates_csv(&a, &mut ca).unwrap();
        write_replicates_csv(&b, &mut cb).unwrap();
        assert_eq!(ca, cb);
        let m0 = a.replicates[0].outcome(Procedure::M0).unwrap();
        assert!((m0.rme.unwrap() - 1.0).abs() < 1e-15);
        let text = String::from_utf8(ca).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}
