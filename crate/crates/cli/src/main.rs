use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use codag_core::data::{write_csv_domain, DomainSequence};
use codag_core::evaluate::{AccuracyMatrix, MetricsReport, Role};
use codag_core::orchestrate::{format_summary, run_experiment, summarize_runs};
use codag_core::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "codag",
    about = "Continual domain adaptation and generalization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over the configured domain sequence for every seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `section.field=value`, applied after the file is parsed.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Seeds run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Continue from stages already saved under `--out`.
        #[arg(long)]
        resume: bool,
        /// Replaces the configured seed list with this single seed.
        #[arg(long, env = "CODAG_SEED")]
        seed: Option<u64>,
    },
    /// Write the configured domains as CSV files.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean ± std per variant across every results.json under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
    /// Metrics of a stored accuracy matrix pair.
    EvalMatrix {
        #[arg(long)]
        file: PathBuf,
    },
    Version,
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(path: &Path, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(UsageError(format!("config file not found: {}", path.display())).into());
    }
    let cfg = ExperimentConfig::load(path)?;
    Ok(cfg.with_overrides(overrides)?)
}

fn cmd_run(
    config: &Path,
    overrides: &[String],
    out: &Path,
    jobs: usize,
    resume: bool,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config, overrides)?;
    if let Some(seed) = seed {
        cfg.run.seeds = vec![seed];
    }
    let results = run_experiment(&cfg, Some(out), jobs, resume)?;
    println!("config digest {}", results.config_digest);
    for s in &results.seeds {
        let m = &s.metrics;
        println!(
            "seed {:<6} TDA {:.4}  TDG {}  FA {}  All {:.4}",
            s.seed,
            m.tda_mean,
            fmt_opt(m.tdg_mean),
            fmt_opt(m.fa_mean),
            m.all
        );
    }
    println!("results written to {}", out.join("results.json").display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn cmd_gen_data(config: &Path, overrides: &[String], out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(config, overrides)?;
    let seq = DomainSequence::build(&cfg.sequence)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, test) in seq.test_sets.iter().enumerate() {
        if i == 0 {
            // The source training split keeps its labels.
            let train = &seq.train_sets[0];
            write_csv_domain(train, &out.join("domain_0_train.csv"))?;
            write_csv_domain(test, &out.join("domain_0_test.csv"))?;
        } else {
            write_csv_domain(test, &out.join(format!("domain_{i}.csv")))?;
        }
    }
    println!("wrote {} domains to {}", seq.len(), out.display());
    Ok(())
}

fn cmd_report(runs: &Path) -> anyhow::Result<()> {
    let rows = summarize_runs(runs)?;
    let table = format_summary(&rows);
    print!("{table}");
    std::fs::write(runs.join("report.txt"), &table)
        .with_context(|| format!("writing report in {}", runs.display()))?;
    std::fs::write(runs.join("report.json"), serde_json::to_vec_pretty(&rows)?)
        .with_context(|| format!("writing report in {}", runs.display()))?;
    Ok(())
}

/// Accepts a list of `{role, values}` objects holding at most one matrix
/// per role. A lone DG matrix also serves as the DA matrix.
fn parse_matrices(text: &str, path: &Path) -> anyhow::Result<(AccuracyMatrix, AccuracyMatrix)> {
    let raw: Vec<AccuracyMatrix> =
        serde_json::from_str(text).with_context(|| format!("parsing {}", path.display()))?;
    let mut da = None;
    let mut dg = None;
    for m in raw {
        let checked = AccuracyMatrix::from_rows(m.role, m.values)
            .with_context(|| format!("in {}", path.display()))?;
        let slot = match checked.role {
            Role::Da => &mut da,
            Role::Dg => &mut dg,
        };
        if slot.replace(checked).is_some() {
            bail!(
                "{}: more than one matrix with the same role",
                path.display()
            );
        }
    }
    let dg = dg.with_context(|| format!("{}: no dg matrix", path.display()))?;
    let da = da.unwrap_or_else(|| dg.clone());
    if da.n() != dg.n() {
        bail!("{}: da and dg matrices differ in size", path.display());
    }
    Ok((da, dg))
}

fn cmd_eval_matrix(file: &Path) -> anyhow::Result<()> {
    let text =
        std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let (da, dg) = parse_matrices(&text, file)?;
    let m = MetricsReport::compute(&da, &dg)?;
    println!("TDA {:.6}", m.tda_mean);
    println!(
        "TDG {}",
        m.tdg_mean.map_or("-".into(), |v| format!("{v:.6}"))
    );
    println!(
        "FA  {}",
        m.fa_mean.map_or("-".into(), |v| format!("{v:.6}"))
    );
    println!("All {:.6}", m.all);
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run {
            config,
            overrides,
            out,
            jobs,
            resume,
            seed,
        } => cmd_run(config, overrides, out, *jobs, *resume, *seed),
        Command::GenData {
            config,
            overrides,
            out,
        } => cmd_gen_data(config, overrides, out),
        Command::Report { runs } => cmd_report(runs),
        Command::EvalMatrix { file } => cmd_eval_matrix(file),
        Command::Version => {
            println!("codag {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
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
