//! `fedsim` — command-line front end for the federated-learning simulator.
//!
//! Subcommands:
//!   run        execute an experiment and print the metric summary
//!   export     turn a finished run's logs into plottable CSV series
//!   partition  dry-run the client partition a config would produce
//!   validate   parse and check a config without running anything
//!
//! Run directories default to `$FEDSIM_RUNS_DIR/<config name>`, falling back
//! to `./runs/<config name>` when the variable is unset.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fedsim_core::config::{parse_config, ExperimentConfig};
use fedsim_core::engine::{
    plan_partition, read_detections, read_rounds, run_experiment, PhaseSchedule, RoundRecord,
    RunOptions, RunPaths, RunSummary,
};

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Deterministic federated-learning simulator for backdoor attacks and defenses",
    after_help = "Environment:\n  FEDSIM_RUNS_DIR  root for default run directories (default: ./runs)"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment end to end and print the metric summary
    Run(RunArgs),
    /// Export a finished run's series and detections to CSV files
    Export(ExportArgs),
    /// Write the per-client class histogram a config would produce
    Partition(PartitionArgs),
    /// Parse and validate a config, printing the normalized form
    Validate(ConfigArgs),
}

/// Flags shared by every config-consuming subcommand.
#[derive(Args)]
struct ConfigArgs {
    /// Path to the experiment config (TOML)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Dotted-path override, e.g. --set defense.rule=median (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker thread count (shorthand for --set workers=N)
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Master seed (shorthand for --set master_seed=S)
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, String> {
        let mut overrides = self.set.clone();
        if let Some(w) = self.workers {
            overrides.push(format!("workers={w}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("master_seed={s}"));
        }
        parse_config(&self.config, &overrides)
            .map_err(|err| format!("{}: {err}", self.config.display()))
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory (default: $FEDSIM_RUNS_DIR/<name> or ./runs/<name>)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replace the run directory if it already exists
    #[arg(long)]
    force: bool,
    /// Continue a paused run from the checkpoint with this many completed rounds
    #[arg(long, value_name = "ROUNDS", conflicts_with = "force")]
    resume: Option<u64>,
    /// Pause after this many completed rounds (writes a resumable checkpoint)
    #[arg(long, value_name = "ROUNDS")]
    stop_after: Option<u64>,
    /// Suppress the per-round progress lines
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ExportArgs {
    /// The run directory to export from
    run_dir: PathBuf,
    /// Which files to produce
    #[arg(long, value_enum, default_value_t = ExportWhat::All)]
    what: ExportWhat,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ExportWhat {
    All,
    Asr,
    Acc,
    Detections,
}

#[derive(Args)]
struct PartitionArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Write the CSV here instead of stdout
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Export(args) => cmd_export(args),
        Command::Partition(args) => cmd_partition(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn default_runs_root() -> PathBuf {
    std::env::var_os("FEDSIM_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn round_line(record: &RoundRecord, total: u64) -> String {
    let mut line = format!(
        "round {:>4}/{}  {:<8}  acc {:.4}  asr {:.4}",
        record.round,
        total,
        record.phase.as_str(),
        record.acc,
        record.asr
    );
    if !record.malicious_selected.is_empty() {
        let _ = write!(line, "  attackers {}", record.malicious_selected.len());
    }
    if let Some(flagged) = &record.detection {
        let _ = write!(line, "  flagged {}", flagged.len());
    }
    if record.empty_round {
        line.push_str("  (no updates)");
    }
    line
}

/// The end-of-run table. Fixed row order; absent metrics print as `-`.
fn summary_table(run_dir: &Path, summary: &RunSummary) -> String {
    let m = &summary.metrics;
    let float = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let count = |v: Option<u64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
    let mut out = String::new();
    let _ = writeln!(out, "run        {}", run_dir.display());
    let _ = writeln!(out, "rounds     {}", summary.total_rounds);
    let _ = writeln!(out, "acc_final  {}", float(m.acc_final));
    let _ = writeln!(out, "asr_t      {}  (t = {})", float(m.asr_t), m.t);
    let _ = writeln!(out, "h_asr      {}", float(m.h_asr));
    let _ = writeln!(
        out,
        "lifespan   {}  (threshold {})",
        count(m.lifespan),
        m.lifespan_threshold
    );
    let _ = writeln!(out, "precision  {}", float(m.precision));
    let _ = writeln!(out, "recall     {}", float(m.recall));
    let _ = writeln!(out, "fpr        {}", float(m.fpr));
    out
}

fn cmd_run(args: RunArgs) -> Result<(), String> {
    let cfg = args.config.load()?;
    let run_dir = args
        .out
        .clone()
        .unwrap_or_else(|| default_runs_root().join(&cfg.name));
    let total = PhaseSchedule::from_rounds(&cfg.rounds).total();
    let opts = RunOptions {
        run_dir,
        force: args.force,
        resume_from: args.resume,
        stop_after: args.stop_after,
    };

    let mut completed = args.resume.unwrap_or(0);
    let outcome = run_experiment(cfg, &opts, |record| {
        completed = record.round;
        if !args.quiet {
            println!("{}", round_line(record, total));
        }
    })
    .map_err(|err| format!("run failed after {completed} completed rounds: {err}"))?;

    match &outcome.summary {
        Some(summary) => print!("{}", summary_table(&outcome.run_dir, summary)),
        None => println!(
            "paused at {}/{} rounds; continue with --resume {}",
            outcome.completed_rounds, outcome.total_rounds, outcome.completed_rounds
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

fn write_file(path: &Path, contents: &str, rows: usize) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|err| format!("{}: {err}", path.display()))?;
    println!("wrote {} ({rows} rows)", path.display());
    Ok(())
}

/// One `round,phase,value` series from the round log. Values print in
/// shortest round-trip form, so re-exports are byte-identical.
fn series_csv(records: &[RoundRecord], pick: impl Fn(&RoundRecord) -> f64) -> String {
    let mut csv = String::from("round,phase,value\n");
    for r in records {
        let _ = writeln!(csv, "{},{},{}", r.round, r.phase.as_str(), pick(r));
    }
    csv
}

fn cmd_export(args: ExportArgs) -> Result<(), String> {
    let paths = RunPaths::new(&args.run_dir);
    let records = read_rounds(&paths.rounds()).map_err(|err| err.to_string())?;

    let wanted = |what: ExportWhat| args.what == ExportWhat::All || args.what == what;
    if wanted(ExportWhat::Asr) {
        let csv = series_csv(&records, |r| r.asr);
        write_file(&args.run_dir.join("asr_series.csv"), &csv, records.len())?;
    }
    if wanted(ExportWhat::Acc) {
        let csv = series_csv(&records, |r| r.acc);
        write_file(&args.run_dir.join("acc_series.csv"), &csv, records.len())?;
    }
    if wanted(ExportWhat::Detections) {
        let detections = read_detections(&paths.detections()).map_err(|err| err.to_string())?;
        let join = |ids: &[usize]| {
            ids.iter()
                .map(|id| id.to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        let mut csv = String::from("round,flagged,truth,selected\n");
        for d in &detections {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                d.round,
                join(&d.flagged),
                join(&d.truth),
                join(&d.selected)
            );
        }
        write_file(&args.run_dir.join("detections.csv"), &csv, detections.len())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// partition
// ---------------------------------------------------------------------------

fn cmd_partition(args: PartitionArgs) -> Result<(), String> {
    let cfg = args.config.load()?;
    let (train, _test, partition) =
        plan_partition(&cfg).map_err(|err| format!("{}: {err}", args.config.config.display()))?;

    // One row per (client, class) with a nonzero sample count, both ascending.
    let mut csv = String::from("client_id,class,count\n");
    for client in 0..partition.n_clients() {
        let mut counts = vec![0usize; train.n_classes()];
        for &i in partition.client_indices(client) {
            counts[train.label(i)] += 1;
        }
        for (class, &count) in counts.iter().enumerate() {
            if count > 0 {
                let _ = writeln!(csv, "{client},{class},{count}");
            }
        }
    }
    match &args.out {
        Some(path) => {
            let rows = csv.lines().count() - 1;
            write_file(path, &csv, rows)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

fn cmd_validate(args: ConfigArgs) -> Result<(), String> {
    let cfg = args.load()?;
    let normalized =
        toml::to_string_pretty(&cfg).map_err(|err| format!("could not serialize: {err}"))?;
    print!("{normalized}");
    eprintln!("config ok: {} ({} clients)", cfg.name, cfg.num_clients);
    Ok(())
}
