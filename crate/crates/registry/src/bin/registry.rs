use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mosden_registry::{run_registry, DEFAULT_LIVENESS_MS};

/// Runs the mosden sensor registry.
#[derive(Parser)]
#[command(name = "registry", version)]
struct Args {
    /// Address to listen on, e.g. 127.0.0.1:7000.
    #[arg(long)]
    listen: SocketAddr,
    /// Directory for the snapshot, result logs and quarantine log.
    #[arg(long)]
    data: PathBuf,
    /// Base URL nodes use to reach this registry. Defaults to
    /// http://<listen address>.
    #[arg(long)]
    public_url: Option<String>,
    /// Records not refreshed within this many milliseconds are not matched.
    #[arg(long, default_value_t = DEFAULT_LIVENESS_MS)]
    liveness_ms: i64,
}

#[tokio::main]
async fn main() -> ExitCode {
    mosden_runtime::init_logging();
    let args = Args::parse();
    match run_registry(args.listen, args.data, args.public_url, args.liveness_ms).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("registry: {e:#}");
            ExitCode::FAILURE
        }
    }
}
