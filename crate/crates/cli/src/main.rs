mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use fedsim::engine::{latest_checkpoint, load_result, resume, run_experiment, ExperimentConfig};
use fedsim::metrics::{
    compare, export_report, format_comparison, summarize, write_comparison_csv, ReportFormat,
};
use fedsim::{Error, Strategy};

/// Federated learning simulator with similarity-weighted aggregation.
///
/// Any config field can also be set with `--set path=value` or directly as
/// `--path value`, e.g. `--aggregation.epsilon 1e-4` or `--eval-every 2`.
///
/// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
#[derive(Debug, Parser)]
#[command(name = "fedsim", version)]
struct Cli {
    /// Log more (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment, writing checkpoints and reports to the output directory.
    Run(RunArgs),
    /// Generate the synthetic shards of a config and write them to disk.
    Partition(PartitionArgs),
    /// Print the collaborator schedule a run would use, one JSON round per line.
    Schedule(ScheduleArgs),
    /// Run several configs over several seeds and tabulate final metrics.
    Compare(CompareArgs),
    /// Export summary and per-round tables from a finished run directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `local.learning_rate=0.01`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Number of federation rounds.
    #[arg(long)]
    rounds: Option<u32>,
    /// Aggregation strategy: fedavg, plain_mean, simagg or regsimagg.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Master seed from which every random stream is derived.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg =
            config::apply_overrides(config::load(self.config.as_deref())?, &self.overrides)?;
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        if let Some(s) = self.strategy {
            cfg.aggregation.strategy = s;
        }
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        Ok(cfg)
    }
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse::<ReportFormat>().map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for checkpoints, records and reports.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Worker threads for local training (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Continue from a `round_<k>` checkpoint directory.
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
    /// Report files to write: csv, json or both.
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: ReportFormat,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for `shards.json`, `shards/<id>.bin` and `validation.bin`.
    #[arg(short, long)]
    output_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Roster size (overrides `partition.num_collaborators`).
    #[arg(long)]
    roster_size: Option<usize>,
    /// Window fraction (overrides `scheduler.window_fraction`).
    #[arg(long)]
    fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Configs to compare (two or more).
    #[arg(short, long = "config", required = true, num_args = 1..)]
    configs: Vec<PathBuf>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Override applied to every config. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Number of rounds for every config.
    #[arg(long)]
    rounds: Option<u32>,
    /// Directory for `comparison.csv`, `comparison.txt` and `comparison.json`.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Worker threads for local training (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directory (containing `round_<k>/`) or a single checkpoint directory.
    #[arg(long)]
    run_dir: PathBuf,
    /// Where to write the report (default: the run directory).
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Report files to write: csv, json or both.
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: ReportFormat,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::BadConfig(_)
        | Error::BadFraction(_)
        | Error::BadSpec(_)
        | Error::ConfigMismatch(_)
        | Error::IncomparableConfigs(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn print_plan(out: &mut impl Write, value: &fedsim::RoundPlan) -> Result<(), Error> {
    serde_json::to_writer(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let mut cfg = args.config.resolve()?;
    if args.output_dir.is_some() {
        cfg.output_dir = args.output_dir.clone();
    }
    cfg.validate()?;
    info!(
        "running {} for {} rounds ({})",
        cfg.name, cfg.rounds, cfg.aggregation.strategy
    );
    let result = match &args.resume {
        Some(ckpt) => resume(ckpt, cfg, args.workers)?,
        None => run_experiment(cfg, args.workers)?,
    };
    let summary = summarize(&result)?;
    if let Some(dir) = &result.config.output_dir {
        export_report(&result, dir, args.format)?;
    }
    let mut out = io::stdout().lock();
    writeln!(out, "rounds: {}", summary.rounds_completed)?;
    writeln!(out, "strategy: {}", summary.strategy)?;
    if let Some(c) = &summary.convergence {
        writeln!(out, "final val_loss: {:.6}", c.final_val_loss)?;
        writeln!(out, "final val_acc: {:.4}", c.final_val_acc)?;
        writeln!(out, "accuracy auc: {:.4}", c.accuracy_auc)?;
    }
    writeln!(out, "communication cost: {:.6}", summary.communication_cost)?;
    if let Some(dir) = &result.config.output_dir {
        writeln!(out, "artifacts: {}", dir.display())?;
    }
    Ok(())
}

fn cmd_partition(args: PartitionArgs) -> Result<(), Error> {
    let cfg = args.config.resolve()?;
    let data = cfg.build_data()?;
    let dir = &args.output_dir;
    fs::create_dir_all(dir.join("shards"))?;
    fs::write(
        dir.join("shards.json"),
        serde_json::to_vec_pretty(&data.specs)?,
    )?;
    for (spec, shard) in data.specs.iter().zip(&data.shards) {
        shard.save(&dir.join("shards").join(format!("{}.bin", spec.collab_id)))?;
    }
    data.validation.save(&dir.join("validation.bin"))?;
    let mut out = io::stdout().lock();
    writeln!(out, "{:<8} {:>7}  label mixture", "id", "samples")?;
    for spec in &data.specs {
        let mix: Vec<String> = spec
            .label_mixture
            .iter()
            .map(|p| format!("{p:.3}"))
            .collect();
        writeln!(
            out,
            "{:<8} {:>7}  {}",
            spec.collab_id,
            spec.sample_count,
            mix.join(" ")
        )?;
    }
    writeln!(out, "validation: {} samples", data.validation.len())?;
    Ok(())
}

fn cmd_schedule(args: ScheduleArgs) -> Result<(), Error> {
    let mut cfg = args.config.resolve()?;
    if let Some(n) = args.roster_size {
        cfg.partition.num_collaborators = n;
    }
    if let Some(f) = args.fraction {
        cfg.scheduler.window_fraction = f;
    }
    let mut state = cfg.initial_scheduler()?;
    let mut out = io::BufWriter::new(io::stdout().lock());
    for _ in 0..cfg.rounds {
        print_plan(&mut out, &state.next_round())?;
    }
    out.flush()?;
    Ok(())
}

fn compare_labels(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    stems
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if stems.iter().filter(|t| *t == s).count() > 1 {
                format!("{s}#{}", i + 1)
            } else {
                s.clone()
            }
        })
        .collect()
}

fn cmd_compare(args: CompareArgs) -> Result<(), Error> {
    if args.configs.len() < 2 {
        return Err(Error::BadConfig(
            "compare needs at least two configs".into(),
        ));
    }
    let labels = compare_labels(&args.configs);
    let mut runs = Vec::new();
    for (label, path) in labels.into_iter().zip(&args.configs) {
        let mut cfg = config::apply_overrides(config::load(Some(path))?, &args.overrides)?;
        if let Some(r) = args.rounds {
            cfg.rounds = r;
        }
        cfg.validate()?;
        runs.push((label, cfg));
    }
    let rows = compare(&runs, &args.seeds, args.workers)?;
    let table = format_comparison(&rows);
    if let Some(dir) = &args.output_dir {
        fs::create_dir_all(dir)?;
        write_comparison_csv(&dir.join("comparison.csv"), &rows)?;
        fs::write(dir.join("comparison.txt"), &table)?;
        fs::write(
            dir.join("comparison.json"),
            serde_json::to_vec_pretty(&rows)?,
        )?;
    }
    io::stdout().lock().write_all(table.as_bytes())?;
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Error> {
    let ckpt = if args.run_dir.join("config.json").exists() {
        args.run_dir.clone()
    } else {
        latest_checkpoint(&args.run_dir)?
    };
    let result = load_result(&ckpt)?;
    let dir = args
        .output_dir
        .as_deref()
        .unwrap_or(Path::new(&args.run_dir));
    for f in export_report(&result, dir, args.format)? {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv = config::rewrite_overrides(std::env::args().collect());
    let cli = Cli::parse_from(argv);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Partition(a) => cmd_partition(a),
        Command::Schedule(a) => cmd_schedule(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
