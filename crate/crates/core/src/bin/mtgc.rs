use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mtgc::analysis::{MetricTrace, ThresholdMetric};
use mtgc::config::{load_config, load_sweep};
use mtgc::experiment::{compare_report, expand_sweep, run_experiment, run_sweep, RunOptions};
use mtgc::Error;

/// Hierarchical federated learning simulator.
///
/// Exit status: 0 success, 1 configuration error, 2 numerical divergence, 3 I/O error.
#[derive(Parser)]
#[command(name = "mtgc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment for every seed.
    Run(RunArgs),
    /// Run the Cartesian product of the `[sweep]` axes.
    Sweep(RunArgs),
    /// Compare metric CSVs by rounds-to-threshold.
    Compare(CompareArgs),
    /// Check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print reference values from the built-in oracle checks.
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Grad,
    Loss,
}

impl From<MetricArg> for ThresholdMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Grad => ThresholdMetric::Grad,
            MetricArg::Loss => ThresholdMetric::Loss,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            seeds: self.seed.clone(),
            output_dir: self.out.clone(),
            threads: self.threads,
            threshold: self.threshold,
            metric: self.metric.map(Into::into),
        }
    }
}

#[derive(Args)]
struct CompareArgs {
    /// Metric CSVs; the first is the baseline.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// One label per trace (defaults to the file paths).
    #[arg(long)]
    label: Vec<String>,
    #[arg(long, default_value_t = 1e-8)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "grad")]
    metric: MetricArg,
    /// Emit CSV instead of a text table.
    #[arg(long)]
    csv: bool,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => {
            let mut spec = load_config(&args.config)?;
            args.options().apply(&mut spec)?;
            let report = run_experiment(&spec)?;
            println!("{}", report.dir.display());
            println!(
                "{}: rounds to {} <= {:e}: {}",
                report.label,
                spec.metrics.metric.name(),
                spec.metrics.threshold,
                report.summary.display()
            );
        }
        Command::Sweep(args) => {
            let mut sweep = load_sweep(&args.config)?;
            args.options().apply(&mut sweep.base)?;
            println!("{} cells", expand_sweep(&sweep)?.len());
            let report = run_sweep(&sweep)?;
            print!("{}", std::fs::read_to_string(&report.summary_path)?);
            println!("{}", report.summary_path.display());
        }
        Command::Compare(args) => {
            let traces = args
                .traces
                .iter()
                .map(MetricTrace::read_csv)
                .collect::<Result<Vec<_>, _>>()?;
            let labels = if args.label.is_empty() {
                args.traces.iter().map(|p| p.display().to_string()).collect()
            } else {
                args.label.clone()
            };
            let report = compare_report(&traces, &labels, args.threshold, args.metric.into())?;
            if args.csv {
                print!("{}", report.to_csv());
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Validate { config } => {
            let sweep = load_sweep(&config)?;
            println!("ok: spec {}", sweep.base.spec_hash());
            if !sweep.axes.is_empty() {
                println!("sweep: {} cells", sweep.axes.cell_count());
            }
        }
        Command::Oracle => {
            for (k, v) in mtgc::oracle::oracle_report()? {
                println!("{k} = {v}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are configuration errors, not divergence
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
