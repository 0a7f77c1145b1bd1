use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mosden_node::{run_node, NodeConfig};

/// Runs a mosden edge node.
#[derive(Parser)]
#[command(name = "node", version)]
struct Args {
    /// Node configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[tokio::main]
async fn main() -> ExitCode {
    mosden_runtime::init_logging();
    let args = Args::parse();
    let cfg = match NodeConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_node(cfg).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("node: {e:#}");
            ExitCode::FAILURE
        }
    }
}
