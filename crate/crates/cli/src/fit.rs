//! `semicox fit`: one dataset in, report, curves and a reloadable artifact out.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use nalgebra::{DMatrix, DVector};
use semicox::eta_solver::term_band;
use semicox::inference::sandwich_cov;
use semicox::partial_lik::LikelihoodContext;
use semicox::{fit, load_dataset, ColumnSchema, FitConfig, FitResult, PenaltyKind, Structure, SurvivalDataset, Term};
use serde::{Deserialize, Serialize};

use crate::output::{self, num, KeyValues};
use crate::{usage, FitArgs};

/// Points per main-effect curve.
const CURVE_POINTS: usize = 101;
/// Points per side of the interaction surface grid.
const SURFACE_POINTS: usize = 21;

pub const ARTIFACT_VERSION: u32 = 1;

/// Everything `diagnose` needs to rebuild a fit without refitting.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitArtifact {
    pub version: u32,
    pub data: PathBuf,
    pub time: String,
    pub status: String,
    pub parametric: Vec<String>,
    pub nonparametric: Vec<String>,
    pub structure: String,
    pub penalty: String,
    pub seed: u64,
    pub knots: Vec<usize>,
    pub lambda: f64,
    pub theta: f64,
    pub beta: Vec<f64>,
    /// `η̂` at every retained data row.
    pub eta_fitted: Vec<f64>,
    pub n: usize,
    pub failures: usize,
}

impl FitArtifact {
    pub fn schema(&self) -> ColumnSchema {
        ColumnSchema {
            time: self.time.clone(),
            status: self.status.clone(),
            parametric: self.parametric.clone(),
            nonparametric: self.nonparametric.clone(),
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let art: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if art.version != ARTIFACT_VERSION {
            anyhow::bail!("fit artifact version {} is not supported", art.version);
        }
        Ok(art)
    }
}

fn config(args: &FitArgs, q: usize) -> anyhow::Result<FitConfig> {
    let structure: Structure = match &args.structure {
        Some(s) => s.parse().map_err(|e| usage(format!("--structure: {e}")))?,
        None if q >= 2 => Structure::additive(),
        None => Structure::univariate(),
    };
    if structure.required_q() > q {
        return Err(usage(format!("--structure {structure} needs two --nonparametric columns")));
    }
    if let Some(l) = args.lambda {
        if !(l > 0.0 && l.is_finite()) {
            return Err(usage("--lambda must be positive"));
        }
    }
    if let Some(g) = &args.theta_grid {
        if g.is_empty() || g.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(usage("--theta-grid values must be positive"));
        }
    }
    if !(0.0 < args.level && args.level < 1.0) {
        return Err(usage("--level must lie in (0, 1)"));
    }
    Ok(FitConfig {
        penalty: args.penalty.into(),
        structure,
        lambda_grid: args.lambda_grid.grid()?,
        theta_grid: args.theta_grid.clone(),
        lambda: args.lambda,
        expansion: args.expansion.into(),
        trace_scale: args.lambda_grid.trace_scale.into(),
        seed: args.seed,
        tol: args.tol,
        max_iter: args.max_iter,
    })
}

pub fn run(args: &FitArgs) -> anyhow::Result<()> {
    if args.nonparametric.is_empty() || args.nonparametric.len() > 2 {
        return Err(usage("--nonparametric takes one or two columns"));
    }
    let schema = ColumnSchema {
        time: args.time.clone(),
        status: args.status.clone(),
        parametric: args.parametric.clone(),
        nonparametric: args.nonparametric.clone(),
    };
    let cfg = config(args, args.nonparametric.len())?;
    let ds = load_dataset(&args.data, &schema).with_context(|| format!("loading {}", args.data.display()))?;
    let result = fit(&ds, &cfg).context("fitting")?;

    output::prepare_dir(&args.out)?;
    let ctx = LikelihoodContext::new(&ds);
    let cov = sandwich_cov(&ctx, &result.eta_fit.fitted, &result.beta_fit).context("sandwich covariance")?;

    let report = render_report(&ds, &cfg, &result, &cov.se);
    fs::write(args.out.join("report.txt"), &report)?;
    print!("{report}");
    report_kv(&ds, &cfg, &result, &cov.se).write(&args.out.join("report.kv"))?;

    write_curves(&args.out.join("eta_curve.csv"), &ds, &result, args.level)?;
    if cfg.structure.contains(Term::W1W2) {
        write_surface(&args.out.join("eta_surface.csv"), &ds, &result, args.level)?;
    }

    let artifact = FitArtifact {
        version: ARTIFACT_VERSION,
        data: args.data.clone(),
        time: args.time.clone(),
        status: args.status.clone(),
        parametric: args.parametric.clone(),
        nonparametric: args.nonparametric.clone(),
        structure: cfg.structure.to_string(),
        penalty: penalty_label(cfg.penalty).to_string(),
        seed: cfg.seed,
        knots: result.knots.clone(),
        lambda: result.lambda,
        theta: result.beta_fit.theta,
        beta: result.beta_fit.beta.clone(),
        eta_fitted: result.eta_fit.fitted.iter().copied().collect(),
        n: ds.n(),
        failures: ds.n_failures(),
    };
    fs::write(args.out.join("fit.json"), serde_json::to_string_pretty(&artifact)?)?;

    let mut m = output::manifest("fit");
    m.put("data", args.data.display())
        .put("structure", &cfg.structure)
        .put("penalty", &artifact.penalty)
        .put("expansion", format!("{:?}", cfg.expansion))
        .put("trace_scale", cfg.trace_scale)
        .put("seed", cfg.seed)
        .put("tol", cfg.tol)
        .put("max_iter", cfg.max_iter)
        .put("level", args.level)
        .put("lambda_fixed", num(args.lambda))
        .put("theta_grid", cfg.theta_grid.as_ref().map_or_else(|| "default".to_string(), |g| g.iter().map(|t| format!("{t:e}")).collect::<Vec<_>>().join(",")))
        .list("lambda_grid", &cfg.lambda_grid.iter().map(|l| format!("{l:e}")).collect::<Vec<_>>())
        .put(
            "files",
            if cfg.structure.contains(Term::W1W2) {
                "report.txt,report.kv,eta_curve.csv,eta_surface.csv,fit.json"
            } else {
                "report.txt,report.kv,eta_curve.csv,fit.json"
            },
        );
    m.write(&args.out.join("manifest.kv"))?;
    Ok(())
}

fn penalty_label(kind: PenaltyKind) -> &'static str {
    match kind {
        PenaltyKind::Scad => "scad",
        PenaltyKind::AdaptiveLasso => "alasso",
        PenaltyKind::None => "none",
    }
}

fn coef_name(ds: &SurvivalDataset, j: usize) -> String {
    ds.u_names().get(j).cloned().unwrap_or_else(|| format!("U{}", j + 1))
}

fn render_report(ds: &SurvivalDataset, cfg: &FitConfig, r: &FitResult, se: &[Option<f64>]) -> String {
    let b = &r.beta_fit;
    let mut s = String::new();
    let _ = writeln!(s, "subjects        {} ({} failures, {} rows dropped)", ds.n(), ds.n_failures(), ds.dropped_rows());
    let _ = writeln!(s, "structure       {}", cfg.structure);
    let _ = writeln!(s, "penalty         {}", penalty_label(cfg.penalty));
    let _ = writeln!(s, "lambda          {:.6e}", r.lambda);
    let _ = writeln!(s, "theta           {:.6e}", b.theta);
    let _ = writeln!(s, "log PL          {:.6}", b.loglik);
    let _ = writeln!(s, "AIC             {:.6}", b.aic);
    let _ = writeln!(s, "iterations      {} (converged: {})", r.iterations, r.converged);
    let _ = writeln!(s);
    let width = (0..ds.d()).map(|j| coef_name(ds, j).len()).max().unwrap_or(0).max(9);
    let _ = writeln!(s, "{:<width$}  {:>12}  {:>10}", "covariate", "estimate", "se");
    for (j, beta) in b.beta.iter().enumerate() {
        let name = coef_name(ds, j);
        match se[j] {
            Some(e) if *beta != 0.0 => {
                let _ = writeln!(s, "{name:<width$}  {beta:>12.5}  {e:>10.5}");
            }
            _ => {
                let _ = writeln!(s, "{name:<width$}  {:>12}  {:>10}", "0", "(-)");
            }
        }
    }
    let active: Vec<String> = b.nonzero().iter().map(|&j| coef_name(ds, j)).collect();
    let _ = writeln!(s);
    let _ = writeln!(s, "active set      {}", if active.is_empty() { "(none)".to_string() } else { active.join(", ") });
    s
}

fn report_kv(ds: &SurvivalDataset, cfg: &FitConfig, r: &FitResult, se: &[Option<f64>]) -> KeyValues {
    let b = &r.beta_fit;
    let mut kv = KeyValues::new();
    kv.put("n", ds.n())
        .put("failures", ds.n_failures())
        .put("dropped_rows", ds.dropped_rows())
        .put("structure", &cfg.structure)
        .put("lambda", r.lambda)
        .put("theta", b.theta)
        .put("loglik", b.loglik)
        .put("aic", b.aic)
        .put("iterations", r.iterations)
        .put("converged", r.converged);
    for (j, beta) in b.beta.iter().enumerate() {
        let name = coef_name(ds, j);
        kv.put(format!("beta.{name}"), beta).put(format!("se.{name}"), num(se[j]));
    }
    let active: Vec<String> = b.nonzero().iter().map(|&j| coef_name(ds, j)).collect();
    kv.put("active", active.join(","));
    kv
}

fn write_curves(path: &Path, ds: &SurvivalDataset, r: &FitResult, level: f64) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(output::create(path)?);
    w.write_record(["term", "w", "w_unit", "estimate", "se", "lower", "upper"])?;
    let grid = semicox::spline::unit_grid(CURVE_POINTS - 1);
    let points = DMatrix::from_column_slice(grid.len(), 1, &grid);
    for (var, term) in [(0, Term::W1), (1, Term::W2)] {
        if !r.design.basis.structure().contains(term) {
            continue;
        }
        let band = term_band(&r.eta_fit, &r.design, term, &points, level)?;
        for (u, p) in grid.iter().zip(&band) {
            w.write_record([
                term.to_string(),
                ds.original_w(var, *u).to_string(),
                u.to_string(),
                p.estimate.to_string(),
                p.se.to_string(),
                p.lower.to_string(),
                p.upper.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_surface(path: &Path, ds: &SurvivalDataset, r: &FitResult, level: f64) -> anyhow::Result<()> {
    let grid = semicox::spline::unit_grid(SURFACE_POINTS - 1);
    let k = grid.len();
    let points = DMatrix::from_fn(k * k, 2, |i, j| if j == 0 { grid[i / k] } else { grid[i % k] });
    let band = term_band(&r.eta_fit, &r.design, Term::W1W2, &points, level)?;
    let mut w = csv::Writer::from_writer(output::create(path)?);
    w.write_record(["w1", "w2", "w1_unit", "w2_unit", "estimate", "se", "lower", "upper"])?;
    for (i, p) in band.iter().enumerate() {
        let (u1, u2) = (points[(i, 0)], points[(i, 1)]);
        w.write_record([
            ds.original_w(0, u1).to_string(),
            ds.original_w(1, u2).to_string(),
            u1.to_string(),
            u2.to_string(),
            p.estimate.to_string(),
            p.se.to_string(),
            p.lower.to_string(),
            p.upper.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `η̂` at the data rows as a vector.
pub fn fitted_vector(art: &FitArtifact) -> DVector<f64> {
    DVector::from_column_slice(&art.eta_fitted)
}
