use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use cotrack::commands::{
    cmd_evaluate, cmd_fuse_demo, cmd_simulate, cmd_sweep, cmd_track, FuseDemoOptions,
};
use cotrack::io::{RunConfig, Source};
use cotrack::pipeline::SweepParam;
use cotrack::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "cotrack", version, about = "Multi-agent 3D tracking toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a scenario and write detections, ground truth and embeddings.
    Simulate(RunArgs),
    /// Run the tracker and write tracks and the event log.
    Track {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        tracker: TrackerArgs,
        /// Read detections from this directory instead of simulating.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score a track file against ground truth.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding frames, ground truth and detections.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory holding the track file (defaults to --input).
        #[arg(long)]
        tracks: Option<PathBuf>,
    },
    /// Run the tracker over a parameter grid and write a CSV.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        tracker: TrackerArgs,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        param: Param,
        #[arg(long, allow_negative_numbers = true)]
        start: f64,
        #[arg(long, allow_negative_numbers = true)]
        end: f64,
        #[arg(long)]
        step: f64,
    },
    /// Run the attention fusion kernel on random maps and check invariants.
    FuseDemo {
        /// Map shape as HxWxC.
        #[arg(long, default_value = "16x16x8", value_parser = parse_shape)]
        shape: [usize; 3],
        #[arg(long, default_value_t = 3)]
        agents: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run config file (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Canned scenario name.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; relative paths resolve against COTRACK_OUT_ROOT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrackerArgs {
    /// Fixed max age and no appearance matching.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    no_reid: bool,
    /// Disable velocity-adaptive track termination.
    #[arg(long)]
    no_vatm: bool,
    #[arg(long)]
    alpha: Option<f64>,
    /// First-stage association threshold (GIoU).
    #[arg(long, allow_negative_numbers = true)]
    iou_thresh: Option<f64>,
    /// Appearance similarity threshold.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Param {
    Alpha,
    IouThresh,
    Beta,
}

impl From<Param> for SweepParam {
    fn from(p: Param) -> Self {
        match p {
            Param::Alpha => SweepParam::Alpha,
            Param::IouThresh => SweepParam::IouThresh,
            Param::Beta => SweepParam::Beta,
        }
    }
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(format!("expected HxWxC, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| format!("bad dimension {p:?} in {s:?}"))?;
        if *o == 0 {
            return Err(format!("zero dimension in {s:?}"));
        }
    }
    Ok(out)
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &args.scenario {
        cfg.source = Source::Canned { name: name.clone() };
    }
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn apply_tracker_args(cfg: &mut RunConfig, t: &TrackerArgs) {
    let tc = &mut cfg.tracker;
    if t.baseline {
        tc.alpha = 0.0;
        tc.reid_enabled = false;
    }
    if t.no_reid {
        tc.reid_enabled = false;
    }
    if t.no_vatm {
        tc.alpha = 0.0;
    }
    if let Some(a) = t.alpha {
        tc.alpha = a;
    }
    if let Some(v) = t.iou_thresh {
        tc.set_iou_thresh(v);
    }
    if let Some(b) = t.beta {
        tc.reid.sim_thresh = b;
    }
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Invariant(format!("serialization failed: {e}")))?;
    emit(&text)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(run) => {
            let cfg = run_config(&run)?;
            print_json(&cmd_simulate(&cfg)?)?;
        }
        Command::Track {
            run,
            tracker,
            input,
        } => {
            let mut cfg = run_config(&run)?;
            apply_tracker_args(&mut cfg, &tracker);
            print_json(&cmd_track(&cfg, input.as_deref())?)?;
        }
        Command::Evaluate { run, input, tracks } => {
            let cfg = run_config(&run)?;
            let report = cmd_evaluate(&cfg, input.as_deref(), tracks.as_deref())?;
            print_json(&report)?;
        }
        Command::Sweep {
            run,
            tracker,
            input,
            param,
            start,
            end,
            step,
        } => {
            let mut cfg = run_config(&run)?;
            apply_tracker_args(&mut cfg, &tracker);
            let (path, rows) = cmd_sweep(&cfg, input.as_deref(), param.into(), start, end, step)?;
            emit(&format!("wrote {} rows to {}", rows.len(), path.display()))?;
        }
        Command::FuseDemo {
            shape,
            agents,
            seed,
        } => {
            let mut opts = FuseDemoOptions {
                agents,
                height: shape[0],
                width: shape[1],
                seed,
                ..Default::default()
            };
            opts.gsaf.channels = shape[2];
            let report = cmd_fuse_demo(&opts)?;
            print_json(&report)?;
            emit(if report.passed { "PASS" } else { "FAIL" })?;
            if !report.passed {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
