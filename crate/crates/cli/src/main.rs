//! `sketch <scenario> [flags]` runs one scenario and writes its metrics CSV.
//! `sketch serve --addr <addr>` hosts the HTTP service; `--server <url>`
//! sends a run there instead of running in-process.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sketch_client::{Client, ClientError};
use sketch_core::bench::{run_scenario, Baseline, Input, RunConfig, RunOutput, Scenario, DEFAULT_ORACLE_CAP, DEFAULT_QUERY_EVERY};
use sketch_core::streams::GenKind;
use sketch_core::Error;

#[derive(Parser, Debug)]
#[command(name = "sketch", version, about = "Streaming matrix sketch benchmark harness")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sliding-window covariance sketch.
    Sw(RunArgs),
    /// Persistent (historical prefix) covariance sketch.
    Attp(RunArgs),
    /// Sliding-window matrix product sketch.
    Amm(RunArgs),
    /// Distributed covariance tracking.
    Dist(RunArgs),
    /// Distributed sliding-window covariance tracking.
    DistSw(RunArgs),
    /// Plain Frequent Directions.
    Fd(RunArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum GenArg {
    Uniform,
    Noisy,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BaselineArg {
    Svd,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["input", "gen"]))]
struct RunArgs {
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    dim: usize,
    /// Width of the second factor (amm); defaults to --dim.
    #[arg(long)]
    dim_y: Option<usize>,
    #[arg(long)]
    window: Option<u64>,
    /// Bound on the squared row norm; taken from the data when absent.
    #[arg(long)]
    rmax: Option<f64>,
    #[arg(long, default_value_t = 1)]
    sites: usize,
    /// Failure probability for the amplified update.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_QUERY_EVERY)]
    query_every: u64,
    /// Stream file (.csv, anything else is read as AERO binary).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    gen: Option<GenArg>,
    #[arg(long, requires = "gen")]
    rows: Option<usize>,
    /// Noise divisor for --gen noisy.
    #[arg(long, default_value_t = 1.0)]
    zeta: f64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rescale rows so the smallest squared norm is 1.
    #[arg(long)]
    normalize: bool,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    #[arg(long, default_value_t = DEFAULT_ORACLE_CAP)]
    oracle_cap: usize,
    /// Message delay in ticks (dist, dist-sw).
    #[arg(long, default_value_t = 0)]
    latency: u64,
    /// Run on a sketch service instead of in-process. Input paths are
    /// resolved on the server.
    #[arg(long)]
    server: Option<String>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        if e.is_bad_request() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn config(scenario: Scenario, a: &RunArgs) -> Result<RunConfig, Failure> {
    let input = match (&a.input, a.gen) {
        (Some(path), None) => Input::File { path: path.clone() },
        (None, Some(g)) => Input::Gen {
            kind: match g {
                GenArg::Uniform => GenKind::UniformRandom,
                GenArg::Noisy => GenKind::RandomNoisy,
            },
            rows: a.rows.ok_or_else(|| Failure::Config("--gen needs --rows".into()))?,
            zeta: a.zeta,
        },
        _ => return Err(Failure::Config("give exactly one of --input or --gen".into())),
    };
    let cfg = RunConfig {
        scenario,
        eps: a.eps,
        dim: a.dim,
        dim_y: a.dim_y,
        window: a.window,
        r_max: a.rmax,
        sites: a.sites,
        delta: a.delta,
        seed: a.seed,
        query_every: a.query_every,
        input,
        normalize: a.normalize,
        baseline: a.baseline.map(|BaselineArg::Svd| Baseline::Svd),
        oracle_cap: a.oracle_cap,
        latency: a.latency,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(format!("cannot start runtime: {e}")))
}

fn run(scenario: Scenario, a: RunArgs) -> Result<(), Failure> {
    let mut cfg = config(scenario, &a)?;
    let out: RunOutput = match &a.server {
        None => run_scenario(&cfg)?,
        Some(url) => {
            if let Input::File { path } = &mut cfg.input {
                if let Ok(abs) = std::path::absolute(&*path) {
                    *path = abs;
                }
            }
            let client = Client::new(url)?;
            runtime()?.block_on(client.run(&cfg))?
        }
    };
    let csv = out.to_csv();
    match &a.out {
        Some(path) => std::fs::write(path, &csv).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?,
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| Failure::Runtime(e.to_string()))?,
    }
    for note in &out.notes {
        eprintln!("note: {note}");
    }
    match out.max_error() {
        Some(e) => eprintln!("{scenario}: {} probes, max error {e:.6}", out.reports.len()),
        None => eprintln!("{scenario}: {} probes", out.reports.len()),
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), Failure> {
    runtime()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| Failure::Config(format!("cannot bind {}: {e}", a.addr)))?;
        let addr = listener.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?;
        println!("listening on http://{addr}");
        std::io::stdout().flush().ok();
        let shutdown = async {
            tokio::signal::ctrl_c().await.ok();
        };
        sketch_service::serve(listener, shutdown)
            .await
            .map_err(|e| Failure::Runtime(e.to_string()))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(level).init();
    let result = match cli.command {
        Command::Sw(a) => run(Scenario::Sw, a),
        Command::Attp(a) => run(Scenario::Attp, a),
        Command::Amm(a) => run(Scenario::Amm, a),
        Command::Dist(a) => run(Scenario::Dist, a),
        Command::DistSw(a) => run(Scenario::DistSw, a),
        Command::Fd(a) => run(Scenario::Fd, a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Config(m) | Failure::Runtime(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
