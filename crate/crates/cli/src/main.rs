//! `armcal`: simulate cable-length datasets, calibrate DH tables against
//! them, and compare calibration methods.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use armcal_core::check::run_checks;
use armcal_core::optimizer::write_trace_csv;
use armcal_core::particle_filter::write_pf_trace_csv;
use armcal_core::pipeline::{ComparisonRow, COMPARISON_HEADER};
use armcal_core::simdata::{demo_table, simulate_measurements};
use armcal_core::{
    compare, metrics, residuals, CalibrationMethod, CalibrationReport, Dataset, DeviationLayout, DeviationVector,
    DhTable, Metrics,
};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use config::{seed_or_fresh, ConfigFile, PipelineArgs, ScenarioArgs};

#[derive(Parser, Debug)]
#[command(name = "armcal", version, about = "Kinematic calibration from cable-length measurements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a DH table.
    Simulate {
        /// Nominal DH table (`a d theta_offset alpha` per row).
        #[arg(long)]
        dh: PathBuf,
        /// Dataset CSV to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// JSON config file; flags take precedence over it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Calibrate a DH table against a measured dataset.
    Calibrate {
        #[arg(long)]
        method: CalibrationMethod,
        /// Dataset CSV.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dh: PathBuf,
        /// Report JSON to write.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Also write convergence traces into this directory.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Run several methods over one or more seeds and tabulate held-out
    /// metrics.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "bas,cibas,pf,pf-cibas")]
        methods: Vec<CalibrationMethod>,
        /// Number of seeds; run k uses seed + k.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        seeds: u64,
        /// Calibrate this dataset for every seed instead of simulating one
        /// per seed.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Nominal DH table; the built-in 6R demo arm when omitted.
        #[arg(long)]
        dh: Option<PathBuf>,
        #[arg(long, default_value = "compare_out")]
        out_dir: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Run the numeric self-checks.
    Check {
        /// Use this DH table for the kinematic checks.
        #[arg(long)]
        dh: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the worst error of every check.
        #[arg(long)]
        verbose: bool,
    },
}

/// Bad arguments detected after parsing; exits with status 2 like clap's
/// own errors.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Simulate {
            dh,
            out,
            scenario,
            config,
            seed,
        } => simulate(&dh, &out, &scenario, config.as_deref(), seed),
        Command::Calibrate {
            method,
            data,
            dh,
            out,
            trace_dir,
            pipeline,
        } => calibrate(method, &data, &dh, &out, trace_dir.as_deref(), &pipeline),
        Command::Compare {
            methods,
            seeds,
            data,
            dh,
            out_dir,
            scenario,
            pipeline,
        } => compare_cmd(&methods, seeds, data.as_deref(), dh.as_deref(), &out_dir, &scenario, &pipeline),
        Command::Check { dh, seed, verbose } => check(dh.as_deref(), seed, verbose),
    }
}

fn read_table(path: &Path) -> Result<DhTable> {
    DhTable::read(path).with_context(|| format!("reading DH table {}", path.display()))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn ensure_distinct(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    if inputs.iter().any(|i| canon(i) == canon(out)) {
        return Err(usage(format!("refusing to overwrite input file {}", out.display())));
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn simulate(dh: &Path, out: &Path, args: &ScenarioArgs, config: Option<&Path>, seed: Option<u64>) -> Result<ExitCode> {
    ensure_distinct(out, &[dh])?;
    let file = ConfigFile::load(config).map_err(|e| usage(format!("{e:#}")))?;
    let table = read_table(dh)?;
    let seed = seed_or_fresh(seed);
    let cfg = args.resolve(&file.scenario, table.joint_count(), seed);
    cfg.validate().map_err(|e| usage(format!("invalid scenario: {e}")))?;
    let ds = simulate_measurements(&table, &cfg)?;
    ds.write(out).with_context(|| format!("writing {}", out.display()))?;
    let m = nominal_metrics(&ds, &table)?;
    println!(
        "wrote {} samples to {}; pre-calibration rmse {:.4} mm, std {:.4} mm, max {:.4} mm",
        ds.measurements.len(),
        out.display(),
        m.rmse_mm,
        m.std_mm,
        m.max_mm
    );
    Ok(ExitCode::SUCCESS)
}

fn nominal_metrics(ds: &Dataset, table: &DhTable) -> Result<Metrics> {
    let zero = DeviationVector::zeros(DeviationLayout::new(table.joint_count(), false));
    Ok(metrics(&residuals(&ds.measurements, table, &zero)?)?)
}

fn calibrate(
    method: CalibrationMethod,
    data: &Path,
    dh: &Path,
    out: &Path,
    trace_dir: Option<&Path>,
    args: &PipelineArgs,
) -> Result<ExitCode> {
    ensure_distinct(out, &[data, dh])?;
    let file = ConfigFile::load(args.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    let table = read_table(dh)?;
    let ds = read_dataset(data)?;
    let cfg = args.resolve(&file, seed_or_fresh(args.seed)).map_err(|e| usage(format!("{e:#}")))?;
    let report = armcal_core::calibrate(method, &ds.measurements, &table, &cfg)?;
    std::fs::write(out, report.to_json()?).with_context(|| format!("writing {}", out.display()))?;
    if let Some(dir) = trace_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_traces(&report, dir)?;
    }
    print_report(&report);
    Ok(ExitCode::SUCCESS)
}

fn print_report(r: &CalibrationReport) {
    println!(
        "{} seed {}: {} train / {} held-out samples, {} evaluations{}",
        r.method,
        r.seed,
        r.train_indices.len(),
        r.test_indices.len(),
        r.eval_count,
        if r.pf_rejected { " (filter estimate rejected)" } else { "" }
    );
    println!("{:<8} {:>12} {:>12} {:>12}", "held-out", "rmse_mm", "std_mm", "max_mm");
    for (name, m) in [("before", r.metrics_before.test), ("after", r.metrics_after.test)] {
        println!("{:<8} {:>12.5} {:>12.5} {:>12.5}", name, m.rmse_mm, m.std_mm, m.max_mm);
    }
}

/// Trace files for one report: `<method>_seed<k>_search.csv` and/or
/// `<method>_seed<k>_pf.csv`, whichever stages ran.
fn write_traces(r: &CalibrationReport, dir: &Path) -> Result<()> {
    let stem = format!("{}_seed{}", r.method, r.seed);
    if !r.search_trace.is_empty() {
        let path = dir.join(format!("{stem}_search.csv"));
        let mut w = create(&path)?;
        write_trace_csv(&r.search_trace, &mut w)?;
        w.flush()?;
    }
    if !r.pf_trace.is_empty() {
        let path = dir.join(format!("{stem}_pf.csv"));
        let mut w = create(&path)?;
        write_pf_trace_csv(&r.pf_trace, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[allow(clippy::too_many_arguments)]
fn compare_cmd(
    methods: &[CalibrationMethod],
    seeds: u64,
    data: Option<&Path>,
    dh: Option<&Path>,
    out_dir: &Path,
    scenario: &ScenarioArgs,
    args: &PipelineArgs,
) -> Result<ExitCode> {
    let mut methods = methods.to_vec();
    methods.dedup();
    if methods.is_empty() {
        return Err(usage("--methods is empty"));
    }
    let file = ConfigFile::load(args.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    let table = match dh {
        Some(p) => read_table(p)?,
        None => demo_table(),
    };
    let fixed = data.map(read_dataset).transpose()?;
    let base = seed_or_fresh(args.seed);
    let run_seeds: Vec<u64> = (0..seeds).map(|k| base.wrapping_add(k)).collect();
    // Validate everything up front so a bad flag fails before any work.
    args.resolve(&file, base).map_err(|e| usage(format!("{e:#}")))?;
    if fixed.is_none() {
        scenario
            .resolve(&file.scenario, table.joint_count(), base)
            .validate()
            .map_err(|e| usage(format!("invalid scenario: {e}")))?;
    }

    let reports_dir = out_dir.join("reports");
    let traces_dir = out_dir.join("traces");
    for d in [&reports_dir, &traces_dir] {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    if fixed.is_none() {
        std::fs::create_dir_all(out_dir.join("data"))?;
    }

    let per_seed: Vec<Result<(u64, armcal_core::pipeline::Comparison)>> = run_seeds
        .par_iter()
        .map(|&seed| {
            let cfg = args.resolve(&file, seed)?;
            let ds = match &fixed {
                Some(ds) => ds.clone(),
                None => {
                    let sc = scenario.resolve(&file.scenario, table.joint_count(), seed);
                    let ds = simulate_measurements(&table, &sc)?;
                    ds.write(out_dir.join("data").join(format!("seed{seed}.csv")))?;
                    ds
                }
            };
            let cmp = compare(&methods, &ds.measurements, &table, &cfg)?;
            for (_, outcome) in &cmp.outcomes {
                if let Ok(r) = outcome {
                    let path = reports_dir.join(format!("{}_seed{}.json", r.method, r.seed));
                    std::fs::write(&path, r.to_json()?).with_context(|| format!("writing {}", path.display()))?;
                    write_traces(r, &traces_dir)?;
                }
            }
            Ok((seed, cmp))
        })
        .collect();

    // Assemble the tables serially in seed order.
    let mut runs = create(&out_dir.join("runs.csv"))?;
    writeln!(runs, "seed,{COMPARISON_HEADER}")?;
    let mut failed = false;
    let mut rows_by_method: Vec<Vec<ComparisonRow>> = vec![Vec::new(); methods.len()];
    for outcome in per_seed {
        let (seed, cmp) = match outcome {
            Ok(v) => v,
            Err(e) => {
                eprintln!("error: {e:#}");
                failed = true;
                continue;
            }
        };
        for (m, e) in cmp.failures() {
            eprintln!("error: {m} seed {seed}: {e}");
            failed = true;
        }
        for row in cmp.rows() {
            writeln!(runs, "{seed},{row}")?;
            let k = methods.iter().position(|m| *m == row.method).expect("requested method");
            rows_by_method[k].push(row);
        }
    }
    runs.flush()?;

    let mut summary = create(&out_dir.join("summary.csv"))?;
    writeln!(summary, "{COMPARISON_HEADER}")?;
    println!("{COMPARISON_HEADER}");
    for (method, rows) in methods.iter().zip(&rows_by_method) {
        if rows.is_empty() {
            continue;
        }
        let col = |f: fn(&ComparisonRow) -> f64| median(rows.iter().map(f).collect());
        let timed: Option<Vec<f64>> = rows.iter().map(|r| r.wall_s).collect();
        let row = ComparisonRow {
            method: *method,
            rmse_mm: col(|r| r.rmse_mm),
            std_mm: col(|r| r.std_mm),
            max_mm: col(|r| r.max_mm),
            evals: col(|r| r.evals as f64).round() as usize,
            wall_s: timed.map(median),
        };
        writeln!(summary, "{row}")?;
        println!("{row}");
    }
    summary.flush()?;
    eprintln!("wrote {}", out_dir.display());
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn check(dh: Option<&Path>, seed: u64, verbose: bool) -> Result<ExitCode> {
    let table = dh.map(read_table).transpose()?;
    let outcomes = run_checks(table.as_ref(), seed)?;
    let mut all = true;
    for c in &outcomes {
        all &= c.passed;
        let status = if c.passed { "PASS" } else { "FAIL" };
        if verbose {
            let rel = if c.lower_bound { ">=" } else { "<=" };
            println!("{status} {:<26} {:.3e} (need {rel} {:.1e})", c.name, c.max_error, c.tolerance);
        } else {
            println!("{status} {}", c.name);
        }
    }
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
