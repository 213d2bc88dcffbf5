use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use resectsim_core::evaluation::format_table;
use resectsim_core::executor::{
    run_in_dir, AutoApprove, ExecError, ExecutorConfig, RejectAll, METRICS_FILE, RunManifest, RunRecord, Supervisor,
    TerminalSupervisor,
};
use resectsim_core::pcd::read_pcd_bytes;
use resectsim_core::phantom::PhantomSpec;
use resectsim_core::surface::{reports_to_csv, sweep_models, MAX_DEGREE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_SUPERVISOR_ABORT: i32 = 2;
pub const EXIT_PERFORATION: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

/// Environment variable naming the data directory.
pub const DATA_ENV: &str = "RESECTSIM_DATA";
pub const DEFAULT_DATA_DIR: &str = "resectsim-data";

#[derive(Debug, Parser)]
#[command(name = "resectsim", version, about = "Supervised autonomous resection simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one procedure on a phantom.
    Run {
        /// Phantom spec JSON. Without it the default phantom varied by seed is used.
        #[arg(long)]
        phantom: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Executor config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// No terminal prompts; requests are rejected unless --auto-approve is set.
        #[arg(long)]
        headless: bool,
        #[arg(long)]
        auto_approve: bool,
        #[arg(long, value_name = "MM", allow_negative_numbers = true)]
        gate_threshold: Option<f64>,
        /// Run directory. Defaults to `run-seed-<N>` under the data directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = DATA_ENV)]
        data: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = DATA_ENV, default_value = DEFAULT_DATA_DIR)]
        data: PathBuf,
    },
    /// Fit every polynomial surface model up to a degree and write the report CSV.
    SweepFit {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long, default_value_t = MAX_DEGREE)]
        max_degree: u32,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the metrics of a finished run.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn config_error(message: impl ToString) -> Failure {
    Failure { code: EXIT_CONFIG, message: message.to_string() }
}

fn failure(message: impl ToString) -> Failure {
    Failure { code: EXIT_FAILURE, message: message.to_string() }
}

impl From<ExecError> for Failure {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::Config(_) => config_error(e),
            _ => failure(e),
        }
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run { phantom, seed, config, headless, auto_approve, gate_threshold, out, data } => {
            run(RunArgs { phantom, seed, config, headless, auto_approve, gate_threshold, out, data })
        }
        Command::Serve { port, host, data } => serve(&host, port, data),
        Command::SweepFit { cloud, max_degree, out } => sweep_fit(&cloud, max_degree, out.as_deref()),
        Command::Eval { run } => eval(&run),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

struct RunArgs {
    phantom: Option<PathBuf>,
    seed: u64,
    config: Option<PathBuf>,
    headless: bool,
    auto_approve: bool,
    gate_threshold: Option<f64>,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn run(args: RunArgs) -> Result<i32, Failure> {
    let phantom = match &args.phantom {
        Some(p) => PhantomSpec::from_json(&read_text(p)?).map_err(config_error)?,
        None => PhantomSpec::default().variant(args.seed),
    };
    let mut config = match &args.config {
        Some(p) => ExecutorConfig::from_json(&read_text(p)?)?,
        None => ExecutorConfig::default(),
    };
    config.seed = args.seed;
    if let Some(t) = args.gate_threshold {
        config.gate_threshold_mm = t;
    }
    config.validate()?;
    let dir = match (args.out, args.data) {
        (Some(out), _) => out,
        (None, Some(data)) => data.join(format!("run-seed-{}", args.seed)),
        (None, None) => PathBuf::from(DEFAULT_DATA_DIR).join(format!("run-seed-{}", args.seed)),
    };
    let run_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| config_error("output directory needs a name"))?;
    let manifest = RunManifest { run_id, phantom, config };

    let mut supervisor: Box<dyn Supervisor> = if args.auto_approve {
        Box::new(AutoApprove)
    } else if args.headless {
        Box::new(RejectAll)
    } else {
        Box::new(TerminalSupervisor::new(std::io::stdin().lock()))
    };
    let outcome = run_in_dir(&dir, &manifest, supervisor.as_mut(), Vec::new())?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "run {} in {}", manifest.run_id, dir.display());
    let _ = writeln!(stdout, "status {}", status_name(&outcome.status));
    if let Some(reason) = &outcome.reason {
        let _ = writeln!(stdout, "reason {reason}");
    }
    let _ = write!(stdout, "{}", format_table(&outcome.metrics));
    Ok(outcome.status.exit_code(outcome.metrics.perforated))
}

fn status_name<T: serde::Serialize>(status: &T) -> String {
    serde_json::to_value(status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn serve(host: &str, port: u16, data: PathBuf) -> Result<i32, Failure> {
    let addr: SocketAddr = format!("{host}:{port}").parse().map_err(config_error)?;
    let runtime = tokio::runtime::Runtime::new().map_err(failure)?;
    runtime.block_on(crate::server::serve(data, addr)).map_err(failure)?;
    Ok(EXIT_OK)
}

fn sweep_fit(cloud: &Path, max_degree: u32, out: Option<&Path>) -> Result<i32, Failure> {
    let bytes = std::fs::read(cloud).map_err(|e| config_error(format!("{}: {e}", cloud.display())))?;
    let (_, points) = read_pcd_bytes(&bytes).map_err(config_error)?;
    let reports = sweep_models(&points, max_degree).map_err(config_error)?;
    let csv = reports_to_csv(&reports, true);
    match out {
        Some(path) => std::fs::write(path, csv).map_err(failure)?,
        None => print!("{csv}"),
    }
    Ok(EXIT_OK)
}

fn eval(dir: &Path) -> Result<i32, Failure> {
    let record = RunRecord::load(dir)?;
    println!("status {}", status_name(&record.status));
    println!("cycles {}", record.cycles.len());
    match &record.metrics {
        Some(m) => {
            print!("{}", format_table(m));
            let text = serde_json::to_string_pretty(m).map_err(failure)?;
            std::fs::write(dir.join(METRICS_FILE), text).map_err(failure)?;
        }
        None => println!("run did not finish; no metrics"),
    }
    Ok(EXIT_OK)
}
