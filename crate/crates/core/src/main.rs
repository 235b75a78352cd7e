use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use widesim::config::ExperimentConfig;
use widesim::experiment::{self, Overrides, RunOutput, SweepAxis};
use widesim::report::{Report, ReportRow};

#[derive(Parser)]
#[command(name = "widesim", version, about = "Plan and simulate wide-and-deep training optimizations")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the first configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for CSV/JSON reports and traces.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the number of measured steps.
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Stdout format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Emit pack and interleave plan summaries without simulating.
    Plan,
    /// Generate, plan, simulate and measure the configured pipeline.
    Run,
    /// Compare full optimization against each optimization removed.
    Ablate,
    /// Sweep one axis and report the series.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Run the functional equivalence and invariant suites.
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Groups,
    Scale,
    HotStorage,
    MicroBatch,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> SweepAxis {
        match a {
            Axis::Groups => SweepAxis::Groups,
            Axis::Scale => SweepAxis::Scale,
            Axis::HotStorage => SweepAxis::HotStorage,
            Axis::MicroBatch => SweepAxis::MicroBatch,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> widesim::Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| {
        widesim::Error::Config("--config <path> is required for this command".into())
    })?;
    ExperimentConfig::load(path)
}

fn attach(row: &mut ReportRow, out: &RunOutput) {
    row.pack_shards = out.n_pack_shards;
    row.groups = out.n_groups;
    row.micro_batch = out.micro_batch;
    row.dag_nodes = out.dag_nodes;
}

fn run(cli: Cli) -> widesim::Result<ExitCode> {
    let cfg = load_config(&cli)?;
    let seed = cli.seed.unwrap_or(cfg.seeds[0]);
    let strategy = format!("{:?}", cfg.strategy).to_lowercase();
    let ov = Overrides { steps: cli.steps, ..Default::default() };

    let mut report = Report::default();
    let mut exit = ExitCode::SUCCESS;

    match cli.command {
        Command::Plan => {
            let out = experiment::run_once(&cfg, seed, &Overrides { steps: Some(1), ..ov })?;
            report.plan_summary = format!("{}{}", out.pack_report, out.interleave_report);
            let mut row = ReportRow::from_metrics(
                &cfg.name,
                "plan",
                seed,
                &strategy,
                &out.metrics,
                cfg.config_hash(seed),
            );
            attach(&mut row, &out);
            report.rows.push(row);
            println!("{}", report.plan_summary);
        }
        Command::Run => {
            let out = experiment::run_once(&cfg, seed, &Overrides { keep_traces: true, ..ov })?;
            report.plan_summary = format!("{}{}", out.pack_report, out.interleave_report);
            if let Some(passed) = out.audit_passed {
                report.notes.push(format!(
                    "functional equivalence audit: {}",
                    if passed { "pass" } else { "FAIL" }
                ));
                if !passed {
                    exit = ExitCode::FAILURE;
                }
            }
            std::fs::create_dir_all(&cli.out)?;
            if let Some(trace) = out.traces.last() {
                let path = cli.out.join(format!("{}_{}_trace.csv", cfg.name, seed));
                let mut f = std::fs::File::create(&path)?;
                trace.export(&mut f)?;
                report.trace_paths.push(path);
            }
            let mut row = ReportRow::from_metrics(
                &cfg.name,
                "run",
                seed,
                &strategy,
                &out.metrics,
                cfg.config_hash(seed),
            );
            attach(&mut row, &out);
            report.rows.push(row);
        }
        Command::Ablate => {
            for (variant, out) in experiment::ablate(&cfg, seed, &ov)? {
                let mut row = ReportRow::from_metrics(
                    &cfg.name,
                    &variant,
                    seed,
                    &strategy,
                    &out.metrics,
                    cfg.config_hash(seed),
                );
                attach(&mut row, &out);
                report.rows.push(row);
            }
        }
        Command::Sweep { axis } => {
            for (label, _, out) in experiment::sweep(&cfg, axis.into(), seed, &ov)? {
                let mut row = ReportRow::from_metrics(
                    &cfg.name,
                    &label,
                    seed,
                    &strategy,
                    &out.metrics,
                    cfg.config_hash(seed),
                );
                attach(&mut row, &out);
                report.rows.push(row);
            }
        }
        Command::Verify => {
            let result = experiment::verify(&cfg, seed)?;
            let passed = result.checks.iter().filter(|c| c.passed).count();
            for c in &result.checks {
                println!("{} {}  {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{passed}/{} checks passed", result.checks.len());
            if !result.all_passed() {
                exit = ExitCode::FAILURE;
            }
            return Ok(exit);
        }
    }

    match cli.format {
        Format::Table => print!("{}", report.render_table()),
        Format::Csv => {
            let path = cli.out.join("stdout.csv");
            std::fs::create_dir_all(&cli.out)?;
            report.write_csv(&path)?;
            print!("{}", std::fs::read_to_string(&path)?);
        }
        Format::Json => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report)
                    .map_err(|e| widesim::Error::Config(e.to_string()))?
            );
        }
    }

    std::fs::create_dir_all(&cli.out)?;
    report.write_csv(&cli.out.join(format!("{}_report.csv", cfg.name)))?;
    report.write_json(&cli.out.join(format!("{}_report.json", cfg.name)))?;
    Ok(exit)
}
