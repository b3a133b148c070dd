//! Simulated fleet as a separate bus participant. Each vehicle gets its own
//! session, named after the vehicle, and follows orders from its order topic.

use std::time::Duration;

use sitefleet_core::bus::topic::{topic_for, TopicKind};
use sitefleet_core::bus::Qos;
use sitefleet_core::scenario::{Publication, Scenario, SimFleet};
use sitefleet_core::vehicle_sim::SimClock;
use tokio::net::ToSocketAddrs;
use tracing::{info, warn};

use crate::bus_client::BusClient;
use crate::ServiceError;

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Simulated seconds per wall second.
    pub time_scale: f64,
    /// Stop after this much simulated time; run until cancelled when `None`.
    pub max_sim_time_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct SimSummary {
    pub sim_time_s: f64,
    pub ticks: u64,
    pub orders_accepted: u64,
    pub orders_rejected: u64,
    pub reports_published: u64,
}

pub struct SimRole {
    fleet: SimFleet,
    clients: Vec<BusClient>,
    clock: SimClock,
    time_base_ms: u64,
    manufacturer: String,
    options: SimOptions,
}

impl SimRole {
    /// Connects one bus session per vehicle and announces the fleet.
    pub async fn connect(scenario: &Scenario, addr: impl ToSocketAddrs + Clone, options: SimOptions) -> Result<Self, ServiceError> {
        let model = scenario.calibrated_model().map_err(|e| ServiceError::Setup(e.to_string()))?;
        let time_base_ms = crate::epoch_ms();
        let fleet = SimFleet::new(scenario, model).map_err(|e| ServiceError::Setup(e.to_string()))?.with_time_base(time_base_ms);
        let manufacturer = scenario.coordinator_config().manufacturer;
        let clock = SimClock::new(scenario.doc.sim.dt, options.time_scale).map_err(|e| ServiceError::Setup(e.to_string()))?;
        let mut clients = Vec::new();
        for v in fleet.vehicles() {
            let id = v.id().as_str();
            let mut c = BusClient::connect(addr.clone(), id).await?;
            let topic = topic_for(&manufacturer, id, TopicKind::Order).map_err(|e| ServiceError::Setup(e.to_string()))?;
            c.subscribe(&topic, Qos::AtLeastOnce).await?;
            clients.push(c);
        }
        let mut role = Self { fleet, clients, clock, time_base_ms, manufacturer, options };
        let hello = role.fleet.announce(0);
        role.publish(hello)?;
        info!(vehicles = role.clients.len(), time_scale = options.time_scale, "simulated fleet online");
        Ok(role)
    }

    pub fn fleet(&self) -> &SimFleet {
        &self.fleet
    }

    fn publish(&mut self, pubs: Vec<Publication>) -> Result<(), ServiceError> {
        let now = self.time_base_ms + self.clock.now_ms();
        for p in pubs {
            let Some(c) = self.clients.iter_mut().find(|c| c.client_id() == p.vehicle().as_str()) else { continue };
            let (topic, qos) = (p.topic(&self.manufacturer), p.qos());
            c.publish(&topic, qos, p.into_payload(), now)?;
        }
        Ok(())
    }

    /// One tick: apply received orders, move, publish.
    pub fn step(&mut self) -> Result<(), ServiceError> {
        self.clock.advance();
        for c in &mut self.clients {
            while let Some(env) = c.try_recv() {
                self.fleet.deliver(&env);
            }
        }
        let pubs = self.fleet.tick(&self.clock);
        self.publish(pubs)
    }

    /// Paced loop until the time limit, a lost connection, or `stop` resolves.
    pub async fn run(mut self, stop: impl std::future::Future<Output = ()>) -> Result<SimSummary, ServiceError> {
        let period = Duration::from_secs_f64(self.clock.dt / self.options.time_scale);
        let mut ticker = tokio::time::interval(period);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Burst);
        let limit_ms = self.options.max_sim_time_s.map(|s| (s * 1000.0).round() as u64);
        tokio::pin!(stop);
        loop {
            tokio::select! {
                _ = &mut stop => break,
                _ = ticker.tick() => {
                    if limit_ms.is_some_and(|l| self.clock.now_ms() >= l) {
                        break;
                    }
                    if self.clients.iter().any(BusClient::is_closed) {
                        warn!("bus connection lost; stopping simulation");
                        break;
                    }
                    self.step()?;
                }
            }
        }
        let s = self.fleet.stats();
        let summary = SimSummary {
            sim_time_s: self.clock.now_ms() as f64 / 1000.0,
            ticks: self.clock.tick,
            orders_accepted: s.orders_accepted,
            orders_rejected: s.orders_rejected,
            reports_published: s.reports_published,
        };
        for c in self.clients {
            c.disconnect().await;
        }
        info!(sim_time_s = summary.sim_time_s, "simulation stopped");
        Ok(summary)
    }
}
