use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use csiga::cs_iga::InitMode;
use csiga::harness::{
    parse_snr_list, render, render_timing_csv, run_sweep, timing_scan, write_outputs, DetectorKind,
    ExperimentConfig, OutputFormat,
};
use csiga::model::ChannelModel;

/// Monte Carlo driver for the CS-IGA / NCS-IGA detectors and their baselines.
#[derive(Debug, Parser)]
#[command(name = "csiga", version)]
struct Args {
    /// cs-iga, ncs-iga, lmmse, mf or exact
    #[arg(long, default_value = "cs-iga", value_parser = parse_detector)]
    detector: DetectorKind,

    /// Receive antennas M
    #[arg(long, default_value_t = 64)]
    antennas: usize,

    /// Users N
    #[arg(long, default_value_t = 16)]
    users: usize,

    /// Constellation order (4, 16 or 64)
    #[arg(long = "mod", default_value_t = 4)]
    order: usize,

    /// SNR grid in dB: `a:b:step` or a comma-separated list
    #[arg(long, default_value = "0:10:2")]
    snr: String,

    /// Iterations T
    #[arg(long, default_value_t = 10)]
    iters: usize,

    /// Damping factor (default 0.7 for cs-iga, 0.5 for ncs-iga)
    #[arg(long)]
    damping: Option<f64>,

    #[arg(long, default_value_t = 100)]
    trials: usize,

    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// zero or paper
    #[arg(long, default_value = "zero", value_parser = parse_init)]
    init: InitMode,

    /// Redraw channels whose H^H H condition number exceeds this
    #[arg(long)]
    cond_max: Option<f64>,

    /// Exponential correlation between adjacent user columns
    #[arg(long)]
    correlation: Option<f64>,

    /// Output file (stdout when absent; no manifest then)
    #[arg(long)]
    out: Option<PathBuf>,

    /// csv or json
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: OutputFormat,

    /// Record per-iteration wall time
    #[arg(long)]
    timing: bool,

    /// Run a per-iteration timing scan over these user counts instead of a sweep
    #[arg(long, value_delimiter = ',')]
    scan_users: Option<Vec<usize>>,
}

fn parse_detector(s: &str) -> Result<DetectorKind, String> {
    s.parse().map_err(|e: csiga::Error| e.to_string())
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    s.parse().map_err(|e: csiga::Error| e.to_string())
}

fn parse_init(s: &str) -> Result<InitMode, String> {
    match s {
        "zero" => Ok(InitMode::Zero),
        "paper" => Ok(InitMode::NegativeUnit),
        _ => Err(format!("unknown init mode {s:?}")),
    }
}

fn run(args: Args, raw: Vec<String>) -> csiga::Result<()> {
    let snr_db = parse_snr_list(&args.snr)?;
    if let Some(users) = &args.scan_users {
        let snr = snr_db[0];
        let table = timing_scan(
            args.detector,
            args.antennas,
            users,
            args.order,
            snr,
            15,
            args.seed,
        )?;
        let body = render_timing_csv(&table);
        match &args.out {
            Some(path) => std::fs::write(path, body)?,
            None => print!("{body}"),
        }
        eprintln!("log-log slope: {:.3}", table.slope);
        return Ok(());
    }

    let config = ExperimentConfig {
        detector: args.detector,
        antennas: args.antennas,
        users: args.users,
        order: args.order,
        snr_db,
        iters: args.iters,
        damping: args.damping,
        trials: args.trials,
        seed: args.seed,
        cond_max: args.cond_max,
        init: args.init,
        channel: ChannelModel {
            correlation: args.correlation,
            ..Default::default()
        },
        out: args.out.clone(),
        format: args.format,
        timing: args.timing,
    };
    let record = run_sweep(&config)?;
    match &args.out {
        Some(path) => write_outputs(&record, &config, path, raw)?,
        None => print!("{}", render(&record, config.format)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let raw: Vec<String> = std::env::args().collect();
    let args = Args::parse();
    match run(args, raw) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
