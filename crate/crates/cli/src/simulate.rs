//! `semicox simulate`: run a scenario and write its tables.

use std::fs;
use std::io::BufWriter;

use anyhow::Context;
use semicox::simbench::{
    run_table, write_grid_csv, write_replicates_csv, write_se_csv, write_summary_csv, Procedure, RunOptions, Scenario,
    SimulationTable,
};

use crate::output;
use crate::{usage, SimulateArgs};

fn scenario(args: &SimulateArgs) -> anyhow::Result<Scenario> {
    let mut sc = match (&args.scenario, &args.scenario_file) {
        (Some(name), _) => Scenario::named(name).map_err(|_| {
            usage(format!("unknown scenario `{name}`; built-in: {}", Scenario::names().join(", ")))
        })?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing scenario {}", path.display()))?
        }
        (None, None) => return Err(usage("one of --scenario or --scenario-file is required")),
    };
    if let Some(seed) = args.seed {
        sc.seed = seed;
    }
    if let Some(n) = args.n {
        sc.n = n;
    }
    if let Some(m) = args.mc_size {
        sc.mc_size = m;
    }
    if let Some(p) = &args.procedures {
        sc.procedures = p
            .iter()
            .map(|s| s.parse::<Procedure>())
            .collect::<Result<_, _>>()
            .map_err(|e| usage(format!("--procedures: {e}")))?;
    }
    sc.validate().map_err(|e| usage(format!("invalid scenario: {e}")))?;
    Ok(sc)
}

pub fn run(args: &SimulateArgs) -> anyhow::Result<()> {
    if args.replicates == 0 {
        return Err(usage("--replicates must be at least 1"));
    }
    if args.jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    let sc = scenario(args)?;
    let opts = RunOptions {
        replicates: args.replicates,
        jobs: args.jobs,
        lambda_grid: args.lambda_grid.grid()?,
        trace_scale: args.lambda_grid.trace_scale.into(),
        bands: !args.no_bands,
    };
    let table = run_table(&sc, &opts).context("running the scenario")?;

    output::prepare_dir(&args.out)?;
    write_summary_csv(&table, BufWriter::new(output::create(&args.out.join("summary.csv"))?))?;
    write_replicates_csv(&table, BufWriter::new(output::create(&args.out.join("replicates.csv"))?))?;
    write_se_csv(&table, BufWriter::new(output::create(&args.out.join("se.csv"))?))?;
    write_grid_csv(&table, BufWriter::new(output::create(&args.out.join("eta_grid.csv"))?))?;
    fs::write(args.out.join("scenario.json"), serde_json::to_string_pretty(&sc)?)?;

    let labels: Vec<&str> = sc.procedures.iter().map(|p| p.label()).collect();
    let mut m = output::manifest("simulate");
    m.put("scenario", &sc.name)
        .put("n", sc.n)
        .put("seed", sc.seed)
        .put("replicates", args.replicates)
        .list("procedures", &labels)
        .put("mc_size", sc.mc_size)
        .put("censor_target", sc.censor_target)
        .put("censoring_rate_parameter", table.censoring_rate)
        .put("mean_censoring", table.mean_censoring)
        .put("trace_scale", opts.trace_scale)
        .list("lambda_grid", &opts.lambda_grid.iter().map(|l| format!("{l:e}")).collect::<Vec<_>>())
        .put("bands", opts.bands)
        .put("files", "summary.csv,replicates.csv,se.csv,eta_grid.csv,scenario.json");
    m.write(&args.out.join("manifest.kv"))?;

    print_summary(&table);
    Ok(())
}

fn print_summary(t: &SimulationTable) {
    println!(
        "{}: n={}, {} replicates, censoring {:.3} (target {:.3})",
        t.scenario.name,
        t.scenario.n,
        t.replicates.len(),
        t.mean_censoring,
        t.scenario.censor_target
    );
    if let Some(np) = &t.np {
        let inter = np.interaction.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        println!("selection   W1 {:.3}  W2 {:.3}  W1:W2 {inter}", np.w1, np.w2);
        println!("fit class   under {:.3}  correct {:.3}  over {:.3}", np.under, np.correct, np.over);
        return;
    }
    println!("{:<16} {:>8} {:>7} {:>7} {:>7} {:>8} {:>7} {:>7}", "procedure", "MRME", "CC", "IC", "under", "correct", "over", "failed");
    for p in &t.procedures {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        println!(
            "{:<16} {:>8} {:>7} {:>7} {:>7} {:>8} {:>7} {:>7}",
            p.procedure.label(),
            f(p.median_rme),
            f(p.mean_cc),
            f(p.mean_ic),
            f(p.under),
            f(p.correct),
            f(p.over),
            p.failed
        );
    }
    for s in &t.se {
        println!("beta{:<3} SD {:.3}  SD_m {:.3}  SD_mad {:.3}", s.coefficient + 1, s.sd, s.sd_median, s.sd_mad);
    }
}
