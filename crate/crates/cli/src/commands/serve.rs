use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use capreward_service::{serve, shutdown_signal, AppState, ServiceConfig};
use clap::Args;
use tokio::net::TcpListener;

use crate::{data, usage, CliError, EXIT_OK};

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the port of the configured bind address; 0 picks a free one.
    #[arg(long)]
    pub port: Option<u16>,
}

pub async fn run(args: ServeArgs) -> Result<i32, CliError> {
    let mut config = ServiceConfig::load(&args.config).map_err(usage)?;
    if let Some(port) = args.port {
        let host = config.bind.rsplit_once(':').map_or("127.0.0.1", |(h, _)| h).to_string();
        config.bind = format!("{host}:{port}");
    }
    let state = AppState::from_config(&config).map_err(usage)?;
    let listener = TcpListener::bind(&config.bind).await.map_err(|e| usage(format!("bind {}: {e}", config.bind)))?;
    let addr = listener.local_addr().map_err(data)?;
    println!("listening on http://{addr}");
    let _ = std::io::stdout().flush();
    serve(listener, Arc::new(state), shutdown_signal(), Duration::from_millis(config.drain_deadline_ms))
        .await
        .map_err(data)?;
    eprintln!("capreward: shut down");
    Ok(EXIT_OK)
}
