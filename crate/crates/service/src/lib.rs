//! Networked roles: the TCP bus broker, the coordinator loop with its HTTP
//! supervisor API, and the simulated fleet as a bus client.

pub mod api;
pub mod broker_server;
pub mod bus_client;
pub mod coordinator_service;
pub mod sim;

use std::time::{SystemTime, UNIX_EPOCH};

use sitefleet_core::coordinator::Coordinator;
use sitefleet_core::scenario::Scenario;
use thiserror::Error;
use tokio::net::TcpListener;

pub use broker_server::BrokerServer;
pub use bus_client::{BusClient, BusClientError};
pub use coordinator_service::{CoordinatorHandle, CoordinatorTask};
pub use sim::{SimOptions, SimRole, SimSummary};

pub const DEFAULT_BUS_PORT: u16 = 8883;
pub const DEFAULT_API_PORT: u16 = 8080;
pub const COORDINATOR_CLIENT_ID: &str = "coordinator";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Bus(#[from] BusClientError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("coordinator loop has stopped")]
    Stopped,
}

pub fn epoch_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Coordinator configured from a scenario's map, overrides and calibration seed.
pub fn coordinator_for(scenario: &Scenario) -> Result<Coordinator, ServiceError> {
    let model = scenario.calibrated_model().map_err(|e| ServiceError::Setup(e.to_string()))?;
    Coordinator::new(scenario.coordinator_config(), scenario.map.clone(), model).map_err(|e| ServiceError::Setup(e.to_string()))
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve_api(
    listener: TcpListener,
    handle: CoordinatorHandle,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, api::router(handle)).with_graceful_shutdown(shutdown).await
}
