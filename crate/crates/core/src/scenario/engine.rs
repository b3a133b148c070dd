use std::collections::HashMap;
use std::time::{Duration, Instant};

use tracing::{info, warn};

use super::fleet::SimFleet;
use super::metrics::{mm, LatencySummary, MetricsReport, ReplanCounts, ReportMetrics, VehicleMetrics, METRICS_SCHEMA_VERSION};
use super::{Scenario, ScenarioError};
use crate::bus::schema::{ObjectsMsg, Payload};
use crate::bus::topic::{fleet_filter, topic_for, TopicKind};
use crate::bus::{BrokerConfig, FaultInjector, LocalBus, Qos};
use crate::coordinator::{Command, CommandError, Coordinator, PathKind, Reply};
use crate::fleet::{VehicleId, VehicleKind};
use crate::geolocator::ObjectReport;
use crate::sitemap::blocks_polyline;
use crate::tasking::{OperationId, OperationStatus, TaskStatus};
use crate::vehicle_sim::SimClock;

const COORDINATOR_CLIENT: &str = "coordinator";
const OBSERVER_CLIENT: &str = "observer";

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed,
    Failed(String),
    DeadlineExceeded,
    InvariantBreach(String),
}

impl RunOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            RunOutcome::Completed => "completed",
            RunOutcome::Failed(_) => "failed",
            RunOutcome::DeadlineExceeded => "deadline_exceeded",
            RunOutcome::InvariantBreach(_) => "invariant_breach",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            RunOutcome::Completed => 0,
            _ => 1,
        }
    }
}

/// Broker, coordinator and simulated fleet in one process, advanced on a
/// single simulated clock.
pub struct Engine {
    scenario: Scenario,
    coordinator: Coordinator,
    bus: LocalBus,
    fleet: SimFleet,
    clock: SimClock,
    operation: Option<OperationId>,
    last_update: HashMap<String, u64>,
    breaches: Vec<String>,
    outcome: Option<RunOutcome>,
}

impl Engine {
    /// Boots everything and submits the scenario's operation.
    pub fn new(scenario: Scenario) -> Result<Self, ScenarioError> {
        let mut engine = Self::boot(scenario)?;
        let doc = engine.scenario.doc.operation.clone();
        match engine.coordinator.apply(Command::SubmitOperation { doc }) {
            Ok(Reply::OperationSubmitted { operation, .. }) => engine.operation = Some(operation),
            Ok(other) => return Err(ScenarioError::Runtime(format!("unexpected reply {other:?}"))),
            Err(e) => return Err(ScenarioError::Runtime(e.to_string())),
        }
        Ok(engine)
    }

    /// Boots without submitting anything.
    pub fn boot(scenario: Scenario) -> Result<Self, ScenarioError> {
        let runtime = |e: &dyn std::fmt::Display| ScenarioError::Runtime(e.to_string());
        let model = scenario.calibrated_model()?;
        let cfg = scenario.coordinator_config();
        let coordinator = Coordinator::new(cfg.clone(), scenario.map.clone(), model.clone()).map_err(|e| runtime(&e))?;
        let fleet = SimFleet::new(&scenario, model)?;
        let sim = scenario.doc.sim;
        let clock = SimClock::new(sim.dt, sim.time_scale).map_err(|e| runtime(&e))?;
        let mut bus = LocalBus::new(BrokerConfig::default());
        if sim.bus_drop_rate > 0.0 {
            bus = bus.with_faults(FaultInjector::new(sim.bus_drop_rate, scenario.doc.seed, true));
        }
        bus.connect(COORDINATOR_CLIENT).map_err(|e| runtime(&e))?;
        bus.connect(OBSERVER_CLIENT).map_err(|e| runtime(&e))?;
        for kind in [TopicKind::Connection, TopicKind::State, TopicKind::Objects] {
            bus.subscribe(COORDINATOR_CLIENT, &fleet_filter(&cfg.manufacturer, kind), Qos::AtLeastOnce).map_err(|e| runtime(&e))?;
        }
        for v in fleet.vehicles() {
            let id = v.id().as_str();
            bus.connect(id).map_err(|e| runtime(&e))?;
            let topic = topic_for(&cfg.manufacturer, id, TopicKind::Order).map_err(|e| runtime(&e))?;
            bus.subscribe(id, &topic, Qos::AtLeastOnce).map_err(|e| runtime(&e))?;
        }
        let mut engine =
            Self { scenario, coordinator, bus, fleet, clock, operation: None, last_update: HashMap::new(), breaches: Vec::new(), outcome: None };
        let hello = engine.fleet.announce(0);
        engine.publish_fleet(hello)?;
        engine.coordinator_cycle()?;
        Ok(engine)
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coordinator
    }

    pub fn fleet(&self) -> &SimFleet {
        &self.fleet
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn operation(&self) -> Option<OperationId> {
        self.operation
    }

    pub fn breaches(&self) -> &[String] {
        &self.breaches
    }

    /// Applies a supervisor command between ticks.
    pub fn command(&mut self, command: Command) -> Result<Reply, CommandError> {
        let reply = self.coordinator.apply(command)?;
        if let Reply::OperationSubmitted { operation, .. } = &reply {
            self.operation.get_or_insert(*operation);
        }
        Ok(reply)
    }

    /// Publishes object reports as an external observer would.
    pub fn publish_reports(&mut self, reporter: &VehicleId, objects: Vec<ObjectReport>) -> Result<(), ScenarioError> {
        let topic = topic_for(&self.coordinator.config().manufacturer, reporter.as_str(), TopicKind::Objects)
            .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        let payload = Payload::Objects(ObjectsMsg { reporter: reporter.clone(), objects });
        self.bus.publish(OBSERVER_CLIENT, &topic, Qos::AtLeastOnce, payload).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        Ok(())
    }

    fn publish_fleet(&mut self, pubs: Vec<super::Publication>) -> Result<(), ScenarioError> {
        let mfr = self.coordinator.config().manufacturer.clone();
        for p in pubs {
            let (client, topic, qos) = (p.vehicle().to_string(), p.topic(&mfr), p.qos());
            self.bus.publish(&client, &topic, qos, p.into_payload()).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        }
        Ok(())
    }

    fn coordinator_cycle(&mut self) -> Result<(), ScenarioError> {
        let now = self.clock.now_ms();
        for env in self.bus.drain(COORDINATOR_CLIENT) {
            self.coordinator.handle_envelope(&env);
        }
        let orders = self.coordinator.step(now);
        let live = self.coordinator.live_obstacles();
        let floor = self.coordinator.config().clearance_floor;
        for o in orders {
            if o.kind == PathKind::Navigate && blocks_polyline(&o.waypoints, &live, floor) {
                self.breach(format!("{} update {} issued through an obstacle", o.order.order_id, o.order.update_id));
            }
            let last = self.last_update.insert(o.order.order_id.clone(), o.order.update_id);
            if last.is_some_and(|l| o.order.update_id <= l) {
                self.breach(format!("{} update_id {} not above {}", o.order.order_id, o.order.update_id, last.unwrap_or(0)));
            }
            self.bus
                .publish(COORDINATOR_CLIENT, &o.topic, Qos::AtLeastOnce, Payload::Order(o.order))
                .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        }
        Ok(())
    }

    fn breach(&mut self, what: String) {
        warn!(%what, "invariant breach");
        self.breaches.push(what);
    }

    /// One simulation tick: deliver orders, move vehicles, publish, run the coordinator.
    pub fn step(&mut self) -> Result<(), ScenarioError> {
        self.clock.advance();
        let now = self.clock.now_ms();
        self.bus.advance_to(now).map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        let ids: Vec<String> = self.fleet.vehicles().iter().map(|v| v.id().to_string()).collect();
        for id in &ids {
            for env in self.bus.drain(id) {
                self.fleet.deliver(&env);
            }
        }
        let pubs = self.fleet.tick(&self.clock);
        self.publish_fleet(pubs)?;
        self.coordinator_cycle()
    }

    pub fn operation_status(&self) -> Option<OperationStatus> {
        self.operation.and_then(|id| self.coordinator.board().operation(id)).map(|op| op.status)
    }

    /// Runs until the operation settles or the simulated deadline passes.
    /// With `pace`, sleeps so simulated time advances at `time_scale` times wall time.
    pub fn run(&mut self, pace: bool) -> Result<RunOutcome, ScenarioError> {
        let sim = self.scenario.doc.sim;
        let deadline_ms = (sim.max_sim_time_s * 1000.0).round() as u64;
        let started = Instant::now();
        let outcome = loop {
            if !self.breaches.is_empty() {
                break RunOutcome::InvariantBreach(self.breaches.join("; "));
            }
            match self.operation_status() {
                Some(OperationStatus::Done) => break RunOutcome::Completed,
                Some(s @ (OperationStatus::Failed | OperationStatus::Cancelled)) => {
                    let reason = self.first_failure().unwrap_or_else(|| format!("operation {s:?}"));
                    break RunOutcome::Failed(reason);
                }
                _ => {}
            }
            if self.clock.now_ms() >= deadline_ms {
                break RunOutcome::DeadlineExceeded;
            }
            self.step()?;
            if pace {
                let target = Duration::from_secs_f64(self.clock.now_ms() as f64 / 1000.0 / sim.time_scale);
                if let Some(wait) = target.checked_sub(started.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
        };
        info!(outcome = outcome.label(), sim_time_s = self.clock.now_ms() as f64 / 1000.0, "scenario finished");
        self.outcome = Some(outcome.clone());
        Ok(outcome)
    }

    fn first_failure(&self) -> Option<String> {
        let op = self.coordinator.board().operation(self.operation?)?;
        op.tasks
            .iter()
            .filter_map(|t| self.coordinator.board().task(*t))
            .find_map(|t| t.failure.as_ref().map(|f| format!("{}: {f}", t.id)))
    }

    pub fn metrics(&self) -> MetricsReport {
        let board = self.coordinator.board();
        let tasks: Vec<_> = self
            .operation
            .and_then(|id| board.operation(id))
            .map(|op| op.tasks.iter().filter_map(|t| board.task(*t)).collect())
            .unwrap_or_default();
        let vehicles: Vec<VehicleMetrics> = self
            .fleet
            .vehicles()
            .iter()
            .map(|v| {
                let p = v.position3();
                VehicleMetrics {
                    id: v.id().clone(),
                    kind: v.spec.kind,
                    distance_m: mm(v.distance_travelled),
                    final_position: [mm(p.east), mm(p.north), mm(p.up)],
                }
            })
            .collect();
        let combined = self
            .fleet
            .vehicles()
            .iter()
            .filter(|v| matches!(v.spec.kind, VehicleKind::Excavator | VehicleKind::Ugv))
            .map(|v| v.distance_travelled)
            .sum::<f64>();
        let stats = self.coordinator.stats();
        let fs = self.fleet.stats();
        let profile = self.fleet.profile();
        let outcome = self.outcome.clone();
        MetricsReport {
            schema_version: METRICS_SCHEMA_VERSION,
            scenario: self.scenario.doc.name.clone(),
            seed: self.scenario.doc.seed,
            outcome: outcome.as_ref().map_or("running", RunOutcome::label).to_string(),
            detail: match outcome {
                Some(RunOutcome::Failed(d) | RunOutcome::InvariantBreach(d)) => Some(d),
                _ => None,
            },
            sim_time_s: mm(self.clock.now_ms() as f64 / 1000.0),
            ticks: self.clock.tick,
            operation_status: self.operation_status(),
            tasks_done: tasks.iter().filter(|t| t.status == TaskStatus::Done).count(),
            tasks_failed: tasks.iter().filter(|t| t.status == TaskStatus::Failed).count(),
            vehicles,
            combined_ground_distance_m: mm(combined),
            replans: ReplanCounts { triggered: stats.replans, halts: stats.halts },
            orders_issued: stats.orders_issued,
            reports: ReportMetrics {
                detector: profile.name.clone(),
                fps: profile.fps,
                frames: fs.frames,
                detections: fs.detections,
                published: fs.reports_published,
                received: stats.reports_received,
                rejected: stats.reports_rejected,
                actors_total: self.fleet.actors().len(),
                actors_reported: fs.actors_reported.len(),
                latency_ms: LatencySummary::from_samples(&stats.report_latency_ms),
            },
            min_actor_separation_m: fs.min_actor_separation.map(mm),
            bus: self.bus.broker_stats(),
            last_event_seq: self.coordinator.log().latest_seq(),
            invariant_breaches: self.breaches.clone(),
        }
    }
}
