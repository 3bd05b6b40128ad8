//! `semicox` command line: fit a dataset, run simulation benchmarks, and
//! produce KL diagnostics for reduced nonparametric structures.

mod diagnose;
mod fit;
mod output;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use semicox::beta_solver::Expansion;
use semicox::eta_solver::TraceScale;
use semicox::PenaltyKind;

/// Raised for invalid flag combinations that clap cannot catch; exits 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "semicox", version, about = "Cox models with semiparametric relative risk")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a dataset and write a report, curves with bands, and a fit artifact.
    Fit(FitArgs),
    /// Run a simulation scenario and write summary and per-replicate tables.
    Simulate(SimulateArgs),
    /// KL feasibility of reduced nonparametric structures for a saved fit.
    Diagnose(DiagnoseArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum PenaltyArg {
    /// SCAD with one shared θ chosen by AIC.
    Scad,
    /// Adaptive LASSO with weights from the unpenalized estimate.
    Alasso,
    /// No penalty; every coefficient stays in the model.
    None,
}

impl From<PenaltyArg> for PenaltyKind {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::Scad => PenaltyKind::Scad,
            PenaltyArg::Alasso => PenaltyKind::AdaptiveLasso,
            PenaltyArg::None => PenaltyKind::None,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum ExpansionArg {
    /// Expand at the unpenalized profile maximizer.
    Maximizer,
    /// Expand at the previous penalized iterate.
    Previous,
}

impl From<ExpansionArg> for Expansion {
    fn from(e: ExpansionArg) -> Self {
        match e {
            ExpansionArg::Maximizer => Expansion::ProfileMaximizer,
            ExpansionArg::Previous => Expansion::Previous,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum TraceScaleArg {
    PerFailure,
    PerSubject,
    Unnormalized,
}

impl From<TraceScaleArg> for TraceScale {
    fn from(t: TraceScaleArg) -> Self {
        match t {
            TraceScaleArg::PerFailure => TraceScale::PerFailure,
            TraceScaleArg::PerSubject => TraceScale::PerSubject,
            TraceScaleArg::Unnormalized => TraceScale::Unnormalized,
        }
    }
}

/// Smoothing-parameter grid shared by `fit` and `simulate`.
#[derive(Args, Debug, Clone)]
pub struct LambdaArgs {
    /// Smallest λ of the log-spaced selection grid.
    #[arg(long, default_value_t = 1e-7)]
    pub lambda_min: f64,
    /// Largest λ of the selection grid.
    #[arg(long, default_value_t = 1.0)]
    pub lambda_max: f64,
    /// Number of grid points.
    #[arg(long, default_value_t = 20)]
    pub lambda_count: usize,
    /// Normalization of the Hessian in the λ-selection trace term.
    #[arg(long, value_enum, default_value_t = TraceScaleArg::PerFailure)]
    pub trace_scale: TraceScaleArg,
}

impl LambdaArgs {
    pub fn grid(&self) -> anyhow::Result<Vec<f64>> {
        if !(self.lambda_min > 0.0 && self.lambda_max >= self.lambda_min && self.lambda_count >= 1) {
            return Err(usage("λ grid needs 0 < --lambda-min <= --lambda-max and --lambda-count >= 1"));
        }
        if self.lambda_count == 1 {
            return Ok(vec![self.lambda_max]);
        }
        let (lo, hi) = (self.lambda_min.ln(), self.lambda_max.ln());
        let k = self.lambda_count - 1;
        Ok((0..=k).map(|i| (lo + (hi - lo) * i as f64 / k as f64).exp()).collect())
    }
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Follow-up time column.
    #[arg(long)]
    pub time: String,
    /// Event indicator column (1 = failure, 0 = censored).
    #[arg(long)]
    pub status: String,
    /// Comma-separated parametric covariate columns.
    #[arg(long, value_delimiter = ',')]
    pub parametric: Vec<String>,
    /// Comma-separated nonparametric covariate columns (one or two).
    #[arg(long, value_delimiter = ',', required = true)]
    pub nonparametric: Vec<String>,
    /// Penalty on the parametric coefficients.
    #[arg(long, value_enum, default_value_t = PenaltyArg::Scad)]
    pub penalty: PenaltyArg,
    /// ANOVA structure over W1/W2, e.g. `W1+W2+W1:W2`; defaults to all main effects.
    #[arg(long)]
    pub structure: Option<String>,
    /// Fixed smoothing parameter; skips λ selection.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    pub lambda_grid: LambdaArgs,
    /// Comma-separated θ grid; defaults to 30 log-spaced values scaled by sqrt(log d / n).
    #[arg(long, value_delimiter = ',')]
    pub theta_grid: Option<Vec<f64>>,
    /// Expansion point of the quadratic approximation in the one-step update.
    #[arg(long, value_enum, default_value_t = ExpansionArg::Maximizer)]
    pub expansion: ExpansionArg,
    /// Seed for knot selection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Convergence tolerance of the backfitting loop.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Maximum number of backfitting iterations.
    #[arg(long, default_value_t = 20)]
    pub max_iter: usize,
    /// Confidence level of the curve bands.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Output directory.
    #[arg(long, default_value = "semicox-fit")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Built-in scenario: table1-a, table1-b, table2, table3-1 … table3-4.
    #[arg(long, required_unless_present = "scenario_file", conflicts_with = "scenario_file")]
    pub scenario: Option<String>,
    /// JSON scenario definition instead of a built-in name.
    #[arg(long)]
    pub scenario_file: Option<PathBuf>,
    /// Number of Monte-Carlo replicates.
    #[arg(long, default_value_t = 100)]
    pub replicates: usize,
    /// Master seed; replicate i uses stream i+1 of this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the sample size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Comma-separated procedures (M0, MA, MB, MC, MD, eta-oracle-beta).
    #[arg(long, value_delimiter = ',')]
    pub procedures: Option<Vec<String>>,
    /// Monte-Carlo draws for model errors and censoring calibration.
    #[arg(long)]
    pub mc_size: Option<usize>,
    #[command(flatten)]
    pub lambda_grid: LambdaArgs,
    /// Skip pointwise bands on the curve grid.
    #[arg(long)]
    pub no_bands: bool,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "semicox-sim")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// `fit.json` written by `semicox fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Dataset path; defaults to the one recorded in the fit artifact.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated reduced structures, e.g. `W1,W2,W1+W2`; `1` is the constant model.
    #[arg(long, value_delimiter = ',', required = true)]
    pub candidates: Vec<String>,
    /// Feasibility threshold for the KL ratio.
    #[arg(long, default_value_t = semicox::kl_select::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Output directory.
    #[arg(long, default_value = "semicox-diagnose")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => fit::run(&a),
        Command::Simulate(a) => simulate::run(&a),
        Command::Diagnose(a) => diagnose::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
