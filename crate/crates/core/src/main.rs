use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use frametag::harness::{
    compare_with_manifest, emit_report, gen_workload, parse_trace, run_trace, write_trace,
    ArenaSize, GenParams, Manifest, ReportFormat, RunConfig, SizeDistribution,
};

/// Replay allocation/access traces through the tagged-pointer checker.
///
/// Every flag can also be set through an environment variable with the
/// `FRAMETAG_` prefix, e.g. `FRAMETAG_PAD=2`.
#[derive(Parser)]
#[command(name = "frametag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a trace file and report verdicts and space overhead.
    Run(RunArgs),
    /// Generate a synthetic workload and its ground-truth manifest.
    Gen(GenArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Trace file, or `-` for stdin.
    trace: PathBuf,
    /// Emit the report as JSON.
    #[arg(long, env = "FRAMETAG_JSON")]
    json: bool,
    /// Arena size in bytes (multiple of 65536), or `auto`.
    #[arg(long, env = "FRAMETAG_ARENA_SIZE", default_value = "auto")]
    arena_size: ArenaSize,
    /// Fake padding bytes added when choosing wrapper frames.
    #[arg(long, env = "FRAMETAG_PAD", default_value_t = 1)]
    pad: u64,
    /// Check for out-of-frame pointers at `ptr_add`.
    #[arg(long, env = "FRAMETAG_ARITH_CHECKS")]
    arith_checks: bool,
    /// Exit with status 1 when any violation is found.
    #[arg(long, env = "FRAMETAG_FAIL_ON_VIOLATION")]
    fail_on_violation: bool,
    /// Compare violations with a manifest written by `gen`.
    #[arg(long, env = "FRAMETAG_MANIFEST")]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, env = "FRAMETAG_SEED")]
    seed: u64,
    #[arg(long, env = "FRAMETAG_OBJECTS")]
    objects: usize,
    /// Fault probability per access and per free.
    #[arg(long, env = "FRAMETAG_FAULTS", default_value_t = 0.0)]
    faults: f64,
    /// Object sizes: fixed:N, uniform:MIN:MAX or log:MIN:MAX (within [1, 2^20]).
    #[arg(long, env = "FRAMETAG_SIZES", default_value = "log:1:4096")]
    sizes: SizeDistribution,
    /// Accesses per object.
    #[arg(long, env = "FRAMETAG_ACCESSES", default_value_t = 8)]
    accesses: usize,
    /// Add a past-end and a pre-base byte store to every object.
    #[arg(long, env = "FRAMETAG_BOUNDARY_PROBES")]
    boundary_probes: bool,
    /// Trace output file (stdout when absent).
    #[arg(long, env = "FRAMETAG_OUT")]
    out: Option<PathBuf>,
    /// Manifest output file (JSON).
    #[arg(long, env = "FRAMETAG_MANIFEST_OUT")]
    manifest: Option<PathBuf>,
}

fn read_input(path: &PathBuf) -> Result<String> {
    if path.as_os_str() == "-" {
        return io::read_to_string(io::stdin()).context("reading trace from stdin");
    }
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let text = read_input(&args.trace)?;
    let events = parse_trace(&text).with_context(|| format!("parsing {}", args.trace.display()))?;
    let config = RunConfig {
        arena_size: args.arena_size,
        pad_bytes: args.pad,
        arith_checks: args.arith_checks,
        fail_on_violation: args.fail_on_violation,
        ..RunConfig::default()
    };
    let report = run_trace(&events, &config)?;
    let format = if args.json {
        ReportFormat::Json
    } else {
        ReportFormat::Text
    };
    let mut out = io::stdout().lock();
    out.write_all(emit_report(&report, format).as_bytes())?;

    let mut code = report.exit_code(&config);
    if let Some(path) = &args.manifest {
        let manifest: Manifest = serde_json::from_str(&read_input(path)?)
            .with_context(|| format!("parsing manifest {}", path.display()))?;
        let cmp = compare_with_manifest(&report, &manifest);
        if !cmp.agrees() {
            code = code.max(2);
        }
        writeln!(
            io::stderr(),
            "manifest: {} matched, {} missed, {} spurious",
            cmp.matched,
            cmp.missed.len(),
            cmp.spurious.len()
        )?;
    }
    Ok(ExitCode::from(code as u8))
}

fn gen(args: GenArgs) -> Result<ExitCode> {
    let params = GenParams {
        objects: args.objects,
        sizes: args.sizes,
        accesses_per_object: args.accesses,
        fault_rate: args.faults,
        boundary_probes: args.boundary_probes,
    };
    let workload = gen_workload(args.seed, &params)?;
    let trace = write_trace(&workload.events);
    match &args.out {
        Some(path) => {
            fs::write(path, trace).with_context(|| format!("writing {}", path.display()))?
        }
        None => io::stdout().lock().write_all(trace.as_bytes())?,
    }
    if let Some(path) = &args.manifest {
        let json = serde_json::to_string_pretty(&workload.manifest)? + "\n";
        fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Gen(args) => gen(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(64)
        }
    }
}
