//! Command-line front end: run presets or configs, generate corpora, and
//! render reports from run artifacts.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand};

use moemarket::data::{generate_synthetic_domain, SynthKind};
use moemarket::experiment::{
    load_run_dir, run_experiment, write_run_dir, DomainSource, RunConfig, PRESET_NAMES,
};
use moemarket::report::{render_compare, render_report_csv, render_report_text, render_svg};
use moemarket::Error;

#[derive(Parser)]
#[command(name = "moemarket", version, about = "Market-managed MoE training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its artifacts
    Run(RunArgs),
    /// Render a report from a completed run directory
    Report(ReportArgs),
    /// Compare several run directories side by side
    Compare(CompareArgs),
    /// Generate a synthetic corpus file
    GenData(GenDataArgs),
    /// List the bundled run presets
    Presets,
}

#[derive(Args)]
struct RunArgs {
    /// Preset name (see `presets`)
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Path to a full run-config JSON file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (default: runs/<name>-s<seed>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override: total training steps
    #[arg(long)]
    steps: Option<u64>,
    /// Override: model width
    #[arg(long)]
    d_model: Option<usize>,
    /// Override: attention heads
    #[arg(long)]
    heads: Option<usize>,
    /// Override: context length
    #[arg(long)]
    context: Option<usize>,
    /// Override: sequences per batch
    #[arg(long)]
    batch: Option<usize>,
    /// Override: experts routed per token (1 or 2)
    #[arg(long)]
    k: Option<usize>,
    /// Override: grace period in market steps
    #[arg(long)]
    grace: Option<u64>,
    /// Override: training steps between market evaluations
    #[arg(long)]
    market_interval: Option<u64>,
    /// Override: warmup steps before market actions
    #[arg(long)]
    warmup: Option<u64>,
    /// Override: synthetic corpus length in characters
    #[arg(long)]
    corpus_length: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing the artifact files
    run_dir: PathBuf,
    /// Output format (text, csv or svg)
    #[arg(long, default_value = "text")]
    format: String,
    /// Write to a file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more run directories
    #[arg(required = true, num_args = 2..)]
    run_dirs: Vec<PathBuf>,
    /// Output format (text or csv)
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct GenDataArgs {
    /// Corpus kind: prose_like or code_like
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum corpus length in characters
    #[arg(long, default_value_t = 100_000)]
    length: usize,
    /// Output file path
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
        Command::Compare(args) => cmd_compare(args),
        Command::GenData(args) => cmd_gen_data(args),
        Command::Presets => cmd_presets(),
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, Error> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), None) => RunConfig::preset(name, args.seed)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Usage(format!("cannot read config {}: {}", path.display(), e)))?;
            let mut cfg = RunConfig::from_json(&text)?;
            cfg.seed = args.seed;
            cfg
        }
        _ => {
            return Err(Error::Usage(format!(
                "exactly one of --preset or --config is required (presets: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };

    if let Some(v) = args.steps {
        cfg.total_steps = v;
    }
    if let Some(v) = args.d_model {
        // keep expert widths proportional to the model size
        cfg.d_model = v;
        cfg.base_width = 2 * v;
        cfg.newborn_width_choices = vec![v, 2 * v, 3 * v];
    }
    if let Some(v) = args.heads {
        cfg.n_heads = v;
    }
    if let Some(v) = args.context {
        cfg.context = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = args.k {
        cfg.top_k = v;
    }
    if let Some(v) = args.grace {
        cfg.grace_steps = v;
    }
    if let Some(v) = args.market_interval {
        cfg.market_interval = v;
    }
    if let Some(v) = args.warmup {
        cfg.warmup_steps = v;
    }
    if let Some(v) = args.corpus_length {
        for d in &mut cfg.domains {
            if let DomainSource::Synthetic { length, .. } = &mut d.source {
                *length = v;
            }
        }
    }
    cfg.validate()?;

    let out_dir =
        args.out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-s{}", cfg.name, cfg.seed)));
    let artifacts = run_experiment(&cfg)?;
    write_run_dir(&out_dir, &artifacts)?;

    let final_loss = artifacts.loss.last().map(|p| p.eval_loss);
    if artifacts.valid {
        println!(
            "run {} seed {}: {} replacements, final eval loss {} -> {}",
            cfg.name,
            cfg.seed,
            artifacts.replacement_count(),
            final_loss.map_or("-".into(), |l| format!("{:.4}", l)),
            out_dir.display()
        );
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "run {} seed {} aborted: {} (partial artifacts in {})",
            cfg.name,
            cfg.seed,
            artifacts.abort.as_deref().unwrap_or("unknown"),
            out_dir.display()
        );
        Ok(ExitCode::from(2))
    }
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode, Error> {
    let artifacts = load_run_dir(&args.run_dir)?;
    let rendered = match args.format.as_str() {
        "text" => render_report_text(&artifacts),
        "csv" => render_report_csv(&artifacts),
        "svg" => render_svg(&artifacts),
        other => {
            return Err(Error::Usage(format!(
                "unknown format '{}', expected text, csv or svg",
                other
            )))
        }
    };
    match args.out {
        Some(path) => std::fs::write(path, rendered)?,
        None => print!("{}", rendered),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(args: CompareArgs) -> Result<ExitCode, Error> {
    let csv = match args.format.as_str() {
        "text" => false,
        "csv" => true,
        other => {
            return Err(Error::Usage(format!("unknown format '{}', expected text or csv", other)))
        }
    };
    let loaded: Vec<_> =
        args.run_dirs.iter().map(|d| load_run_dir(d)).collect::<Result<_, _>>()?;
    let mismatch =
        loaded.windows(2).any(|w| w[0].config.shift_schedule != w[1].config.shift_schedule);
    if mismatch {
        eprintln!("warning: shift schedules differ across runs; recovery columns blanked");
    }
    let refs: Vec<&_> = loaded.iter().collect();
    print!("{}", render_compare(&refs, csv));
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<ExitCode, Error> {
    let kind = SynthKind::parse(&args.kind)?;
    let domain = generate_synthetic_domain(kind, args.seed, args.length);
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, &domain.corpus)?;
    println!("wrote {} chars of {} to {}", domain.corpus.len(), kind.as_str(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_presets() -> Result<ExitCode, Error> {
    println!("{:<6} {:>4} {:>5}  {}", "name", "mode", "grace", "shift schedule");
    for name in PRESET_NAMES {
        let cfg = RunConfig::preset(name, 0)?;
        let shifts: Vec<String> =
            cfg.shift_schedule.iter().map(|s| format!("{}->{}", s.step, s.domain)).collect();
        println!(
            "{:<6} {:>4} {:>5}  {}",
            cfg.name,
            cfg.fitness_mode.as_str(),
            cfg.grace_steps,
            shifts.join(", ")
        );
    }
    Ok(ExitCode::SUCCESS)
}
