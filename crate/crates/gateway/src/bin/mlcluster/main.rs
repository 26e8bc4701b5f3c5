mod client;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "mlcluster",
    version,
    about = "Client and server for the mlcluster control plane"
)]
pub struct Cli {
    /// Gateway base URL.
    #[arg(long, global = true, env = "NSML_HOST")]
    pub host: Option<String>,

    /// Bearer token; defaults to the one saved by `login`.
    #[arg(long, global = true, env = "NSML_TOKEN", hide_env_values = true)]
    pub token: Option<String>,

    /// Print the raw API response.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a token and remember it.
    Login {
        token: String,
    },
    /// Forget the saved token.
    Logout,
    /// Show your credit, or set someone's (admin).
    Credit {
        #[arg(long, num_args = 2, value_names = ["USER", "CREDIT"])]
        grant: Option<Vec<String>>,
    },
    /// Start a session from a workload descriptor.
    Run(RunArgs),
    Stop {
        session: String,
    },
    /// Delete a finished session.
    Rm {
        session: String,
    },
    Resume {
        session: String,
    },
    /// Warm-start a new session from another's latest checkpoint.
    Fork {
        session: String,
        /// Override a hyperparameter, `name=value`.
        #[arg(short = 'a', long = "arg")]
        args: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List sessions.
    Ps {
        #[arg(long)]
        owner: Option<String>,
        #[arg(long)]
        state: Option<String>,
        #[arg(short = 'd', long)]
        dataset: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        offset: Option<usize>,
    },
    Logs {
        session: String,
        /// Keep streaming until the session finishes.
        #[arg(short = 'f', long)]
        follow: bool,
    },
    /// Print a session's canonical id.
    Getid {
        session: String,
    },
    /// Compare hyperparameters of two or more sessions.
    Diff {
        session: String,
        #[arg(required = true)]
        others: Vec<String>,
    },
    /// Save one checkpoint record to a file.
    Download {
        session: String,
        checkpoint: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Archive a session bundle as a tar file.
    Backup {
        session: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Unpack a session bundle into a directory.
    Pull {
        session: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    Events {
        session: String,
        #[command(flatten)]
        filter: EventArgs,
        #[arg(short = 'f', long)]
        follow: bool,
    },
    Eventlen {
        session: String,
        #[command(flatten)]
        filter: EventArgs,
    },
    /// Attach a note to a session.
    Memo {
        session: String,
        text: String,
    },
    /// List a session's checkpoints.
    Model {
        session: String,
    },
    /// Draw metric curves in the terminal.
    Plot {
        session: String,
        #[command(flatten)]
        filter: EventArgs,
        #[arg(long, default_value_t = 60)]
        width: usize,
        #[arg(long, default_value_t = 12)]
        height: usize,
    },
    /// Submit a checkpoint to the dataset leaderboard.
    Submit {
        session: String,
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Put a Done session into Serving.
    Serve {
        session: String,
        #[arg(long)]
        checkpoint: Option<String>,
    },
    Infer {
        session: String,
        /// JSON payload; read from stdin when omitted.
        payload: Option<String>,
    },
    Leaderboard {
        dataset: String,
    },
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Cluster-wide GPU utilization ratios.
    Gpustat {
        /// Trailing window in virtual milliseconds.
        #[arg(long)]
        window: Option<u64>,
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
    },
    /// Latest per-GPU samples.
    Gpumonitor,
    Status,
    #[command(subcommand)]
    Automl(AutomlCommand),
    #[command(subcommand)]
    User(UserCommand),
    #[command(subcommand)]
    Admin(AdminCommand),
    /// Run the gateway.
    Server {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Override a config key, `a.b=value`.
        #[arg(short = 'o', long = "set")]
        overrides: Vec<String>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(short = 'd', long)]
    pub dataset: String,
    /// Workload profile JSON, or a scenario JSON as `file.json#workload`.
    #[arg(short = 'w', long)]
    pub workload: String,
    #[arg(short = 'g', long, default_value_t = 1)]
    pub gpus: u32,
    /// Memory in bytes; defaults to the workload's peak.
    #[arg(short = 'm', long)]
    pub memory: Option<u64>,
    #[arg(short = 'a', long = "arg")]
    pub args: Vec<String>,
    #[arg(long, default_value = "default")]
    pub image: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub team: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EventArgs {
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long = "from-step")]
    pub from_step: Option<u64>,
    #[arg(long = "to-step")]
    pub to_step: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    Push {
        dataset: String,
        #[arg(long)]
        size: u64,
        /// Restrict to a team.
        #[arg(long)]
        team: Option<String>,
        /// Leaderboard metric, e.g. `acc` or `mse`.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        path: Option<String>,
    },
    List,
}

#[derive(Debug, Subcommand)]
pub enum AutomlCommand {
    /// Launch a sweep from a `{spec, template}` JSON file.
    Run {
        file: PathBuf,
    },
    Status {
        sweep: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum UserCommand {
    Add {
        user: String,
        #[arg(long, default_value = "user")]
        role: String,
        #[arg(long, default_value_t = 0)]
        credit: u64,
        #[arg(long)]
        team: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AdminCommand {
    /// Move a manual clock forward.
    Advance {
        ms: u64,
    },
    /// Inject a fault given as JSON.
    Fault {
        spec: String,
    },
    Audit,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
