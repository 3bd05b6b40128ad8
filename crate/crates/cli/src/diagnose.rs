//! `semicox diagnose`: KL ratios of reduced structures against a saved fit.

use anyhow::Context;
use nalgebra::DVector;
use semicox::kl_select::{kl_ratio_report, BiasedWeights};
use semicox::spline::build_basis;
use semicox::{load_dataset, Structure};

use crate::fit::{fitted_vector, FitArtifact};
use crate::output;
use crate::{usage, DiagnoseArgs};

pub fn run(args: &DiagnoseArgs) -> anyhow::Result<()> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(usage("--threshold must lie in (0, 1)"));
    }
    let art = FitArtifact::load(&args.fit)?;
    let full: Structure = art.structure.parse().context("structure recorded in the fit artifact")?;
    let candidates = args
        .candidates
        .iter()
        .map(|c| {
            let s: Structure = c.parse().map_err(|e| usage(format!("--candidates `{c}`: {e}")))?;
            if !s.is_subset_of(&full) {
                return Err(usage(format!("candidate {s} is not contained in the fitted structure {full}")));
            }
            Ok(s)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let data = args.data.clone().unwrap_or_else(|| art.data.clone());
    let ds = load_dataset(&data, &art.schema()).with_context(|| format!("loading {}", data.display()))?;
    if ds.n() != art.n || ds.n_failures() != art.failures {
        anyhow::bail!(
            "{} has {} subjects and {} failures, the fit was made on {} and {}",
            data.display(),
            ds.n(),
            ds.n_failures(),
            art.n,
            art.failures
        );
    }
    let design = build_basis(&ds, &art.knots, &full).context("rebuilding the spline basis")?;
    let beta = DVector::from_column_slice(&art.beta);
    let weights = BiasedWeights::new(&ds, &beta)?;
    let reports = kl_ratio_report(&fitted_vector(&art), &design, &candidates, &weights, args.threshold)?;

    output::prepare_dir(&args.out)?;
    let mut w = csv::Writer::from_writer(output::create(&args.out.join("kl_report.csv"))?);
    w.write_record(["candidate", "kl_full_reduced", "kl_reduced_const", "kl_full_const", "ratio", "feasible", "pythagorean_defect", "converged"])?;
    println!("{:<14} {:>12} {:>12} {:>10}  feasible (ratio < {})", "candidate", "KL(full,red)", "KL(full,1)", "ratio", args.threshold);
    for r in &reports {
        w.write_record([
            r.candidate.clone(),
            r.kl_full_reduced.to_string(),
            r.kl_reduced_const.to_string(),
            r.kl_full_const.to_string(),
            r.ratio.to_string(),
            r.feasible.to_string(),
            r.pythagorean_defect.to_string(),
            r.converged.to_string(),
        ])?;
        println!(
            "{:<14} {:>12.4e} {:>12.4e} {:>10.4}  {}",
            r.candidate,
            r.kl_full_reduced,
            r.kl_full_const,
            r.ratio,
            if r.feasible { "yes" } else { "no" }
        );
    }
    w.flush()?;

    let mut m = output::manifest("diagnose");
    m.put("fit", args.fit.display())
        .put("data", data.display())
        .put("structure", &full)
        .list("candidates", &candidates.iter().map(|c| c.to_string()).collect::<Vec<_>>())
        .put("threshold", args.threshold)
        .put("files", "kl_report.csv");
    m.write(&args.out.join("manifest.kv"))?;
    Ok(())
}
