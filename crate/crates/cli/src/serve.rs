use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, ValueEnum};
use sitefleet_core::bus::BrokerConfig;
use sitefleet_core::coordinator::{Command, Reply};
use sitefleet_core::scenario::Scenario;
use sitefleet_service::coordinator_service::{self, subscribe_fleet};
use sitefleet_service::{BrokerServer, BusClient, CoordinatorTask, SimOptions, SimRole, COORDINATOR_CLIENT_ID};
use tokio::net::TcpListener;
use tracing::{info, warn};

use crate::run::load_scenario;
use crate::{CliResult, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Broker,
    Coordinator,
    Sim,
    /// Broker, coordinator and simulator in one process, over TCP.
    All,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_enum)]
    pub role: Role,
    /// Scenario supplying the map, coordinator settings and fleet.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Bus broker address to listen on or connect to.
    #[arg(long, default_value = "127.0.0.1:8883")]
    pub bus_addr: String,
    /// Shorthand for a bus address on 127.0.0.1.
    #[arg(long)]
    pub bus_port: Option<u16>,
    /// API listen address.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub api_addr: SocketAddr,
    /// Coordinator loop period.
    #[arg(long, default_value_t = 100)]
    pub tick_ms: u64,
    /// Simulated seconds per wall second for the sim role.
    #[arg(long, default_value_t = 1.0)]
    pub time_scale: f64,
    /// Stop the simulator after this many simulated seconds.
    #[arg(long)]
    pub max_sim_time: Option<f64>,
    /// Submit the scenario's operation once the coordinator is up.
    #[arg(long)]
    pub submit: bool,
}

impl ServeArgs {
    fn bus_addr(&self) -> String {
        match self.bus_port {
            Some(p) => format!("127.0.0.1:{p}"),
            None => self.bus_addr.clone(),
        }
    }

    fn scenario(&self) -> Result<Scenario, Failure> {
        let path = self.scenario.as_ref().ok_or_else(|| Failure::invalid("--scenario is required for this role"))?;
        load_scenario(path, None, None, None)
    }
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
    info!("shutting down");
}

/// Retries while the broker is still starting.
async fn connect_bus(addr: &str, client_id: &str) -> Result<BusClient, Failure> {
    let mut last = None;
    for _ in 0..50 {
        match BusClient::connect(addr, client_id).await {
            Ok(c) => return Ok(c),
            Err(e) => last = Some(e),
        }
        tokio::time::sleep(Duration::from_millis(200)).await;
    }
    Err(Failure::runtime(format!("cannot reach bus at {addr}: {}", last.map(|e| e.to_string()).unwrap_or_default())))
}

async fn start_broker(addr: &str) -> Result<BrokerServer, Failure> {
    let addr: SocketAddr = addr.parse().map_err(|e| Failure::invalid(format!("bus address {addr:?}: {e}")))?;
    BrokerServer::bind(addr, BrokerConfig::default()).await.map_err(|e| Failure::runtime(format!("bind {addr}: {e}")))
}

async fn start_coordinator(args: &ServeArgs, scenario: &Scenario) -> Result<CoordinatorTask, Failure> {
    if args.tick_ms == 0 {
        return Err(Failure::invalid("--tick-ms must be positive"));
    }
    let coordinator = sitefleet_service::coordinator_for(scenario).map_err(Failure::runtime)?;
    let mut bus = connect_bus(&args.bus_addr(), COORDINATOR_CLIENT_ID).await?;
    subscribe_fleet(&mut bus, &coordinator.config().manufacturer).await.map_err(Failure::runtime)?;
    let task = coordinator_service::spawn(coordinator, Some(bus), Duration::from_millis(args.tick_ms));
    let listener = TcpListener::bind(args.api_addr).await.map_err(|e| Failure::runtime(format!("bind {}: {e}", args.api_addr)))?;
    info!(addr = %args.api_addr, "supervisor API listening");
    let handle = task.handle.clone();
    tokio::spawn(async move {
        if let Err(e) = sitefleet_service::serve_api(listener, handle, shutdown_signal()).await {
            warn!(%e, "API server stopped");
        }
    });
    if args.submit {
        match task.handle.command(Command::SubmitOperation { doc: scenario.doc.operation.clone() }).await.map_err(Failure::runtime)? {
            Ok(Reply::OperationSubmitted { operation, tasks }) => info!(%operation, tasks = tasks.len(), "operation submitted"),
            Ok(_) => {}
            Err(e) => return Err(Failure::invalid(e)),
        }
    }
    Ok(task)
}

async fn run_sim(args: &ServeArgs, scenario: &Scenario) -> CliResult {
    if !(args.time_scale.is_finite() && args.time_scale > 0.0) {
        return Err(Failure::invalid("--time-scale must be positive"));
    }
    let options = SimOptions { time_scale: args.time_scale, max_sim_time_s: args.max_sim_time };
    let addr = args.bus_addr();
    let mut attempts = 0;
    let sim = loop {
        match SimRole::connect(scenario, addr.as_str(), options).await {
            Ok(s) => break s,
            Err(e) if attempts < 50 => {
                attempts += 1;
                tracing::debug!(%e, "waiting for bus");
                tokio::time::sleep(Duration::from_millis(200)).await;
            }
            Err(e) => return Err(Failure::runtime(e)),
        }
    };
    let summary = sim.run(shutdown_signal()).await.map_err(Failure::runtime)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Failure::runtime)?);
    Ok(())
}

pub async fn serve(args: ServeArgs) -> CliResult {
    match args.role {
        Role::Broker => {
            let _broker = start_broker(&args.bus_addr()).await?;
            shutdown_signal().await;
            Ok(())
        }
        Role::Coordinator => {
            let scenario = args.scenario()?;
            let _task = start_coordinator(&args, &scenario).await?;
            shutdown_signal().await;
            Ok(())
        }
        Role::Sim => {
            let scenario = args.scenario()?;
            run_sim(&args, &scenario).await
        }
        Role::All => {
            let scenario = args.scenario()?;
            let _broker = start_broker(&args.bus_addr()).await?;
            let _task = start_coordinator(&args, &scenario).await?;
            run_sim(&args, &scenario).await
        }
    }
}
