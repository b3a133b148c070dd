//! The coordination loop: vehicle state intake, obstacle registry upkeep,
//! replanning, task dispatch, and the supervisor command surface.
//!
//! [`Coordinator`] does no I/O. A driver feeds it bus envelopes and commands,
//! calls [`Coordinator::step`] once per loop iteration, and publishes the
//! orders it returns.

pub mod events;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

pub use events::{
    EventBody, EventLog, EventRecord, ExpiryReason, OperationView, PathKind, PathView, ReplanOutcome, TaskView, VehicleView, WorldView,
};

use crate::bus::schema::{ActionStatus, ConnectionMsg, ConnectionState, Envelope, OrderAction, OrderMsg, OrderNode, Payload, StateMsg};
use crate::bus::topic::{topic_for, TopicKind, DEFAULT_MANUFACTURER};
use crate::fleet::{ActionKind, VehicleId, VehicleKind};
use crate::geo::{enu_to_geodetic, planar_distance, EnuPoint, Pose2D};
use crate::geolocator::{ImageSize, ObjectClass, ObjectReport, DEFAULT_CONFIDENCE_FLOOR};
use crate::planner::{build_graph, plan, polyline_length, PlanError, PlannedPath, PlannerConfig, VoronoiGraph};
use crate::scale_model::ScaleModel;
use crate::sitemap::{blocks_polyline, DynamicObstacle, IngestOutcome, ObstacleId, ObstacleRegistry, RegistryConfig, SiteMap};
use crate::tasking::{OperationDoc, OperationId, OperationStatus, Step, StepTicket, TaskBoard, TaskId, TaskStatus, TaskTransition, ValidationError, VehicleStatus, VehicleUpdate};
use crate::vehicle_sim::survey_route;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorConfig {
    pub manufacturer: String,
    pub clearance_floor: f64,
    /// Loop iterations between route checks.
    pub replan_check_period: u64,
    /// A vehicle without a route for this long has its task failed.
    pub unreachable_timeout_ms: u64,
    pub confidence_floor: f64,
    pub event_retention: usize,
    /// Minimum spacing of pose-only vehicle_state events per vehicle.
    pub state_event_interval_ms: u64,
    pub registry: RegistryConfig,
    pub planner: PlannerConfig,
    pub image: ImageSize,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            manufacturer: DEFAULT_MANUFACTURER.to_string(),
            clearance_floor: 2.0,
            replan_check_period: 5,
            unreachable_timeout_ms: 60_000,
            confidence_floor: DEFAULT_CONFIDENCE_FLOOR,
            event_retention: events::DEFAULT_RETENTION,
            state_event_interval_ms: 500,
            registry: RegistryConfig::default(),
            planner: PlannerConfig::default(),
            image: ImageSize::default(),
        }
    }
}

impl CoordinatorConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.replan_check_period == 0 {
            return Err(ValidationError::new("replan_check_period", "must be positive"));
        }
        if !(self.clearance_floor.is_finite() && self.clearance_floor > 0.0) {
            return Err(ValidationError::new("clearance_floor", "must be positive"));
        }
        if self.unreachable_timeout_ms == 0 {
            return Err(ValidationError::new("unreachable_timeout_ms", "must be positive"));
        }
        if self.event_retention == 0 {
            return Err(ValidationError::new("event_retention", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(ValidationError::new("confidence_floor", "must be within [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutboundOrder {
    pub vehicle: VehicleId,
    pub topic: String,
    pub kind: PathKind,
    /// Route in ENU, as planned.
    pub waypoints: Vec<EnuPoint>,
    pub order: OrderMsg,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorStats {
    pub replans: u64,
    pub halts: u64,
    pub orders_issued: u64,
    pub reports_received: u64,
    pub reports_rejected: u64,
    /// Ingest time minus capture time, per accepted report.
    pub report_latency_ms: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectRequest {
    pub position: EnuPoint,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub class: Option<ObjectClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    SubmitOperation { doc: OperationDoc },
    CancelOperation { operation: OperationId },
    InjectObstacle(InjectRequest),
    ClearObstacle { obstacle: ObstacleId },
    PauseVehicle { vehicle: VehicleId },
    ResumeVehicle { vehicle: VehicleId },
    PlanPreview { start: EnuPoint, goal: EnuPoint },
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "snake_case")]
pub enum Reply {
    OperationSubmitted { operation: OperationId, tasks: Vec<TaskId> },
    OperationCancelled { operation: OperationId, failed_tasks: Vec<TaskId> },
    ObstacleInjected { obstacle: DynamicObstacle },
    ObstacleCleared { obstacle: ObstacleId },
    VehiclePaused { vehicle: VehicleId },
    VehicleResumed { vehicle: VehicleId },
    Plan { path: PlannedPath },
    Snapshot { snapshot: Box<WorldView> },
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum CommandError {
    #[error("{0}")]
    Validation(ValidationError),
    #[error("not found: {what}")]
    NotFound { what: String },
    #[error("planning failed: {message}")]
    Plan { message: String },
}

impl From<ValidationError> for CommandError {
    fn from(e: ValidationError) -> Self {
        CommandError::Validation(e)
    }
}

#[derive(Debug, Clone)]
struct Route {
    ticket: Option<StepTicket>,
    order_id: String,
    update_id: u64,
    kind: PathKind,
    waypoints: Vec<EnuPoint>,
    node_ids: Vec<String>,
    goal: Option<EnuPoint>,
    length: f64,
}

#[derive(Debug, Clone)]
struct Halt {
    since_ms: u64,
    ticket: StepTicket,
    goal: EnuPoint,
}

#[derive(Debug, Clone)]
struct VehicleRuntime {
    kind: VehicleKind,
    connection: ConnectionState,
    latest: Option<StateMsg>,
    pose: Option<Pose2D>,
    altitude: f64,
    route: Option<Route>,
    halt: Option<Halt>,
}

pub struct Coordinator {
    cfg: CoordinatorConfig,
    map: SiteMap,
    scale_model: ScaleModel,
    board: TaskBoard,
    registry: ObstacleRegistry,
    graph: Option<VoronoiGraph>,
    graph_generation: u64,
    graph_dirty: bool,
    vehicles: BTreeMap<VehicleId, VehicleRuntime>,
    inbox_states: VecDeque<StateMsg>,
    inbox_objects: VecDeque<ObjectReport>,
    update_ids: HashMap<String, u64>,
    cleared: BTreeSet<ObstacleId>,
    log: EventLog,
    view: WorldView,
    fresh: VecDeque<EventRecord>,
    state_event_at: HashMap<VehicleId, u64>,
    outbox: Vec<OutboundOrder>,
    cycle: u64,
    now_ms: u64,
    stats: CoordinatorStats,
}

impl Coordinator {
    /// `scale_model` is the calibrated altitude model used to lay out surveys.
    pub fn new(cfg: CoordinatorConfig, map: SiteMap, scale_model: ScaleModel) -> Result<Self, ValidationError> {
        cfg.validate()?;
        let registry = ObstacleRegistry::new(cfg.registry);
        let log = EventLog::new(cfg.event_retention);
        Ok(Self {
            cfg,
            map,
            scale_model,
            board: TaskBoard::new(),
            registry,
            graph: None,
            graph_generation: 0,
            graph_dirty: true,
            vehicles: BTreeMap::new(),
            inbox_states: VecDeque::new(),
            inbox_objects: VecDeque::new(),
            update_ids: HashMap::new(),
            cleared: BTreeSet::new(),
            log,
            view: WorldView::default(),
            fresh: VecDeque::new(),
            state_event_at: HashMap::new(),
            outbox: Vec::new(),
            cycle: 0,
            now_ms: 0,
            stats: CoordinatorStats::default(),
        })
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.cfg
    }

    pub fn map(&self) -> &SiteMap {
        &self.map
    }

    pub fn board(&self) -> &TaskBoard {
        &self.board
    }

    pub fn stats(&self) -> &CoordinatorStats {
        &self.stats
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn snapshot(&self) -> WorldView {
        self.view.clone()
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    /// Events emitted since the previous call, for live fan-out.
    pub fn take_new_events(&mut self) -> Vec<EventRecord> {
        std::mem::take(&mut self.fresh).into()
    }

    pub fn live_obstacles(&self) -> Vec<DynamicObstacle> {
        self.registry.live_obstacles(self.now_ms)
    }

    /// Remaining polyline of the vehicle's current navigation route.
    pub fn active_route(&self, vehicle: &VehicleId) -> Option<Vec<EnuPoint>> {
        let rt = self.vehicles.get(vehicle)?;
        let route = rt.route.as_ref().filter(|r| r.kind == PathKind::Navigate)?;
        Some(remaining(rt, route))
    }

    /// Queues a bus message for the next loop iteration.
    pub fn handle_envelope(&mut self, env: &Envelope) {
        match &env.payload {
            Payload::Connection(c) => self.on_connection(c),
            Payload::State(s) => self.inbox_states.push_back(s.clone()),
            Payload::Objects(o) => self.inbox_objects.extend(o.objects.iter().cloned()),
            Payload::Order(_) | Payload::Raw(_) => {}
        }
    }

    fn on_connection(&mut self, c: &ConnectionMsg) {
        let id = c.vehicle_id.clone();
        match c.connection_state {
            ConnectionState::Online => {
                let kind = match (c.vehicle_kind, self.vehicles.get(&id)) {
                    (Some(k), _) => k,
                    (None, Some(rt)) => rt.kind,
                    (None, None) => {
                        warn!(vehicle = %id, "online without vehicle_kind; ignored");
                        return;
                    }
                };
                let rt = self.vehicles.entry(id.clone()).or_insert_with(|| VehicleRuntime {
                    kind,
                    connection: ConnectionState::Online,
                    latest: None,
                    pose: None,
                    altitude: 0.0,
                    route: None,
                    halt: None,
                });
                rt.connection = ConnectionState::Online;
                if let (Some(_), Some(pose)) = (self.board.vehicle(&id), rt.pose) {
                    self.board.vehicle_online(id.clone(), kind, pose);
                }
                info!(vehicle = %id, ?kind, "vehicle online");
            }
            state => {
                let Some(rt) = self.vehicles.get_mut(&id) else { return };
                rt.connection = state;
                rt.halt = None;
                let had_route = rt.route.take().is_some();
                let transitions = self.board.vehicle_offline(&id, "connection lost");
                self.emit_transitions(transitions);
                if had_route {
                    self.emit(EventBody::PathCleared { vehicle: id.clone(), reason: "vehicle offline".into() });
                }
                info!(vehicle = %id, ?state, "vehicle disconnected");
            }
        }
    }

    /// Moves the clock forward without running a cycle, so commands applied
    /// between ticks are stamped with the current time. Never goes backwards.
    pub fn advance_clock(&mut self, now_ms: u64) {
        self.now_ms = self.now_ms.max(now_ms);
    }

    /// One loop iteration at time `now_ms`. Returns orders to publish.
    pub fn step(&mut self, now_ms: u64) -> Vec<OutboundOrder> {
        self.now_ms = self.now_ms.max(now_ms);
        self.cycle += 1;
        while let Some(s) = self.inbox_states.pop_front() {
            self.on_state(s);
        }
        while let Some(r) = self.inbox_objects.pop_front() {
            self.on_object(&r);
        }
        if !self.registry.expire(self.now_ms).is_empty() {
            self.graph_dirty = true;
        }
        self.publish_obstacle_diffs();
        if self.cycle.is_multiple_of(self.cfg.replan_check_period) {
            self.check_routes();
        }
        let (_, released) = self.board.release_barriers();
        self.emit_transitions(released);
        let assigned = self.board.assign();
        self.emit_transitions(assigned.into_iter().map(|a| a.2).collect());
        self.dispatch();
        self.publish_diffs();
        std::mem::take(&mut self.outbox)
    }

    fn on_state(&mut self, s: StateMsg) {
        let id = s.vehicle_id.clone();
        let Some(rt) = self.vehicles.get_mut(&id) else {
            debug!(vehicle = %id, "state from unknown vehicle dropped");
            return;
        };
        if rt.connection != ConnectionState::Online {
            return;
        }
        if rt.latest.as_ref().is_some_and(|l| s.timestamp < l.timestamp) {
            return;
        }
        let Ok(enu) = self.map.to_enu(&s.position) else {
            warn!(vehicle = %id, "state with unusable position dropped");
            return;
        };
        let pose = Pose2D::new(enu.ground(), s.yaw);
        rt.pose = Some(pose);
        rt.altitude = if rt.kind.is_ground() { 0.0 } else { enu.up };
        let completed = rt.route.as_ref().filter(|r| r.kind != PathKind::Halt).and_then(|r| {
            let finished = s.order_id.as_deref() == Some(r.order_id.as_str())
                && s.order_update_id == r.update_id
                && s.last_node_id.as_deref() == r.node_ids.last().map(String::as_str)
                && !s.driving
                && s.action_states.iter().all(|a| a.status == ActionStatus::Finished);
            if finished {
                r.ticket
            } else {
                None
            }
        });
        let error = s.errors.first().map(|e| format!("{}: {}", e.code, e.message));
        let kind = rt.kind;
        let timestamp = s.timestamp;
        rt.latest = Some(s);
        if completed.is_some() || error.is_some() {
            rt.route = None;
            rt.halt = None;
        }
        if self.board.vehicle(&id).is_none() {
            self.board.vehicle_online(id.clone(), kind, pose);
        }
        let update = VehicleUpdate { vehicle: id.clone(), pose, timestamp, completed, error: error.clone() };
        match self.board.on_vehicle_state(&update) {
            Ok(transitions) => self.emit_transitions(transitions),
            Err(e) => warn!(%e, "state not applied"),
        }
        if completed.is_some() {
            self.emit(EventBody::PathCleared { vehicle: id, reason: "completed".into() });
        } else if let Some(e) = error {
            self.emit(EventBody::PathCleared { vehicle: id, reason: e });
        }
    }

    fn on_object(&mut self, r: &ObjectReport) {
        self.stats.reports_received += 1;
        if r.confidence < self.cfg.confidence_floor {
            self.stats.reports_rejected += 1;
            return;
        }
        match self.registry.ingest_report(&self.map, r, self.now_ms) {
            IngestOutcome::Created(_) | IngestOutcome::Merged(_) => {
                self.graph_dirty = true;
                self.stats.report_latency_ms.push(self.now_ms.saturating_sub(r.source_ts));
            }
            IngestOutcome::Dropped(_) => self.stats.reports_rejected += 1,
        }
    }

    fn ensure_graph(&mut self) -> Result<&VoronoiGraph, PlanError> {
        if self.graph_dirty || self.graph.is_none() {
            let obstacles = self.registry.live_obstacles(self.now_ms);
            let mut planner = self.cfg.planner;
            planner.clearance_floor = self.cfg.clearance_floor;
            let graph = build_graph(&self.map, &obstacles, &planner, self.graph_generation + 1)?;
            self.graph_generation += 1;
            self.graph_dirty = false;
            let (nodes, edges) = (graph.nodes.len(), graph.edges.len());
            self.graph = Some(graph);
            self.emit(EventBody::GraphRebuilt { generation: self.graph_generation, nodes, edges });
        }
        Ok(self.graph.as_ref().expect("built above"))
    }

    fn plan_between(&mut self, start: EnuPoint, goal: EnuPoint) -> Result<PlannedPath, PlanError> {
        self.ensure_graph()?;
        let obstacles = self.registry.live_obstacles(self.now_ms);
        let mut planner = self.cfg.planner;
        planner.clearance_floor = self.cfg.clearance_floor;
        let graph = self.graph.as_ref().expect("ensured");
        plan(graph, &self.map, &obstacles, start, goal, &planner).map(|o| o.path)
    }

    fn next_update(&mut self, order_id: &str) -> u64 {
        let u = self.update_ids.entry(order_id.to_string()).or_insert(0);
        *u += 1;
        *u
    }

    /// Builds, records and queues an order; returns the path view for the event.
    #[allow(clippy::too_many_arguments)]
    fn issue(
        &mut self,
        vehicle: &VehicleId,
        kind: PathKind,
        ticket: Option<StepTicket>,
        waypoints: Vec<EnuPoint>,
        action: Option<(ActionKind, f64)>,
        goal: Option<EnuPoint>,
        min_clearance: Option<f64>,
    ) -> PathView {
        let order_id = match ticket {
            Some(t) => t.order_id(),
            None => format!("halt-{vehicle}"),
        };
        let update_id = self.next_update(&order_id);
        let last = waypoints.len().saturating_sub(1);
        let node_ids: Vec<String> = (0..waypoints.len()).map(|i| format!("u{update_id}-n{i}")).collect();
        let nodes = waypoints
            .iter()
            .enumerate()
            .map(|(i, p)| OrderNode {
                node_id: node_ids[i].clone(),
                sequence_id: 2 * i as u32,
                position: enu_to_geodetic(&self.map.origin, p).unwrap_or(self.map.origin),
                action: action.filter(|_| i == last).map(|(kind, duration_s)| OrderAction {
                    action_id: format!("{order_id}-{kind}"),
                    kind,
                    duration_s,
                }),
            })
            .collect();
        let order = OrderMsg::chain(order_id.clone(), update_id, nodes);
        let topic = topic_for(&self.cfg.manufacturer, vehicle.as_str(), TopicKind::Order).expect("vehicle ids are topic-safe");
        self.outbox.push(OutboundOrder { vehicle: vehicle.clone(), topic, kind, waypoints: waypoints.clone(), order });
        self.stats.orders_issued += 1;
        let length = polyline_length(&waypoints) + 0.0;
        let view = PathView {
            vehicle: vehicle.clone(),
            order_id: order_id.clone(),
            update_id,
            kind,
            ticket,
            waypoints: waypoints.clone(),
            length,
            min_clearance,
            graph_generation: self.graph_generation,
        };
        if let Some(rt) = self.vehicles.get_mut(vehicle) {
            rt.route = Some(Route { ticket, order_id, update_id, kind, waypoints, node_ids, goal, length });
        }
        view
    }

    fn issue_halt(&mut self, vehicle: &VehicleId, ticket: Option<StepTicket>) -> Option<PathView> {
        let pose = self.vehicles.get(vehicle)?.pose?;
        let altitude = self.vehicles[vehicle].altitude;
        Some(self.issue(vehicle, PathKind::Halt, ticket, vec![pose.position.with_up(altitude)], None, None, None))
    }

    fn check_routes(&mut self) {
        let live = self.registry.live_obstacles(self.now_ms);
        let ids: Vec<VehicleId> = self.vehicles.keys().cloned().collect();
        for id in ids {
            if self.board.vehicle(&id).is_some_and(|v| v.paused) {
                continue;
            }
            let rt = &self.vehicles[&id];
            if let Some(halt) = rt.halt.clone() {
                self.retry_halted(&id, halt);
                continue;
            }
            let Some(route) = rt.route.as_ref().filter(|r| r.kind == PathKind::Navigate) else { continue };
            let rest = remaining(rt, route);
            let blocking: Vec<ObstacleId> =
                live.iter().filter(|o| blocks_polyline(&rest, std::slice::from_ref(*o), self.cfg.clearance_floor)).map(|o| o.id).collect();
            if blocking.is_empty() {
                continue;
            }
            let (ticket, goal, previous) = (route.ticket, route.goal, route.length);
            let (Some(ticket), Some(goal), Some(pose)) = (ticket, goal, rt.pose) else { continue };
            info!(vehicle = %id, ?blocking, "route blocked; replanning");
            self.stats.replans += 1;
            match self.plan_between(pose.position, goal) {
                Ok(path) => {
                    let view = self.issue(&id, PathKind::Navigate, Some(ticket), path.waypoints, None, Some(goal), Some(path.min_clearance));
                    self.emit(EventBody::Replan { path: view, outcome: ReplanOutcome::Rerouted, previous_length: Some(previous), blocking });
                }
                Err(e) => {
                    debug!(vehicle = %id, %e, "no route; halting");
                    self.stats.halts += 1;
                    if let Some(view) = self.issue_halt(&id, Some(ticket)) {
                        self.emit(EventBody::Replan { path: view, outcome: ReplanOutcome::Halted, previous_length: Some(previous), blocking });
                    }
                    if let Some(rt) = self.vehicles.get_mut(&id) {
                        rt.halt = Some(Halt { since_ms: self.now_ms, ticket, goal });
                    }
                }
            }
        }
    }

    fn retry_halted(&mut self, id: &VehicleId, halt: Halt) {
        if self.now_ms.saturating_sub(halt.since_ms) >= self.cfg.unreachable_timeout_ms {
            if let Some(rt) = self.vehicles.get_mut(id) {
                rt.halt = None;
            }
            let transitions = self.board.fail_task(halt.ticket.task, "no route within timeout");
            self.emit_transitions(transitions);
            return;
        }
        let Some(pose) = self.vehicles[id].pose else { return };
        if let Ok(path) = self.plan_between(pose.position, halt.goal) {
            if let Some(rt) = self.vehicles.get_mut(id) {
                rt.halt = None;
            }
            self.stats.replans += 1;
            let view = self.issue(id, PathKind::Navigate, Some(halt.ticket), path.waypoints, None, Some(halt.goal), Some(path.min_clearance));
            self.emit(EventBody::Replan { path: view, outcome: ReplanOutcome::Rerouted, previous_length: None, blocking: Vec::new() });
        }
    }

    fn dispatch(&mut self) {
        let ids: Vec<VehicleId> = self.vehicles.keys().cloned().collect();
        for id in ids {
            let Some(rec) = self.board.vehicle(&id) else { continue };
            if rec.paused || rec.status != VehicleStatus::Busy {
                continue;
            }
            let Some(tid) = rec.current_task else { continue };
            let rt = &self.vehicles[&id];
            if rt.halt.is_some() || rt.route.as_ref().is_some_and(|r| r.kind != PathKind::Halt) {
                continue;
            }
            let Some(pose) = rt.pose else { continue };
            let altitude = rt.altitude;
            if self.board.task(tid).is_some_and(|t| t.status == TaskStatus::Assigned) {
                let tr = self.board.activate(tid);
                self.emit_transitions(tr.into_iter().collect());
            }
            let Some(task) = self.board.task(tid) else { continue };
            let ticket = StepTicket { task: tid, step: task.cursor };
            match task.current_step().cloned() {
                None | Some(Step::WaitFor { .. }) => {}
                Some(Step::Navigate { target, .. }) => match self.plan_between(pose.position, target) {
                    Ok(path) => {
                        let view = self.issue(&id, PathKind::Navigate, Some(ticket), path.waypoints, None, Some(target), Some(path.min_clearance));
                        self.emit(EventBody::PlanIssued(view));
                    }
                    Err(e) => {
                        debug!(vehicle = %id, %e, "no route at dispatch; holding");
                        self.stats.halts += 1;
                        if let Some(view) = self.issue_halt(&id, Some(ticket)) {
                            self.emit(EventBody::PlanIssued(view));
                        }
                        if let Some(rt) = self.vehicles.get_mut(&id) {
                            rt.halt = Some(Halt { since_ms: self.now_ms, ticket, goal: target });
                        }
                    }
                },
                Some(Step::Act { action, duration_s }) => {
                    let view = self.issue(&id, PathKind::Action, Some(ticket), vec![pose.position.with_up(altitude)], Some((action, duration_s)), None, None);
                    self.emit(EventBody::PlanIssued(view));
                }
                Some(Step::Survey { params }) => {
                    match survey_route(&self.map, &self.scale_model, self.cfg.image, params.altitude_m, params.overlap) {
                        Ok(route) => {
                            let view = self.issue(&id, PathKind::Survey, Some(ticket), route, None, None, None);
                            self.emit(EventBody::PlanIssued(view));
                        }
                        Err(e) => {
                            let transitions = self.board.fail_task(tid, &format!("survey: {e}"));
                            self.emit_transitions(transitions);
                        }
                    }
                }
            }
        }
    }

    /// Applies a supervisor command.
    pub fn apply(&mut self, command: Command) -> Result<Reply, CommandError> {
        let reply = match command {
            Command::SubmitOperation { doc } => {
                let id = self.board.submit(doc, &self.map)?;
                let op = self.board.operation(id).expect("just submitted").clone();
                let tasks: Vec<TaskView> = op.tasks.iter().filter_map(|t| self.board.task(*t)).map(TaskView::from).collect();
                let ids = op.tasks.clone();
                self.emit(EventBody::OperationSubmitted {
                    operation: OperationView { id, doc: op.doc, tasks: op.tasks, status: op.status },
                    tasks,
                });
                Reply::OperationSubmitted { operation: id, tasks: ids }
            }
            Command::CancelOperation { operation } => {
                let transitions = self.board.cancel(operation).map_err(|e| CommandError::NotFound { what: e.to_string() })?;
                let failed: Vec<TaskId> = transitions.iter().map(|t| t.task).collect();
                let halted: Vec<VehicleId> = transitions.iter().filter_map(|t| t.vehicle.clone()).collect();
                self.emit_transitions(transitions);
                for v in halted {
                    if let Some(rt) = self.vehicles.get_mut(&v) {
                        rt.halt = None;
                    }
                    let ticket = self.vehicles.get(&v).and_then(|rt| rt.route.as_ref()).and_then(|r| r.ticket);
                    if let Some(view) = self.issue_halt(&v, ticket) {
                        self.emit(EventBody::PlanIssued(view));
                    }
                }
                Reply::OperationCancelled { operation, failed_tasks: failed }
            }
            Command::InjectObstacle(req) => {
                if !req.position.is_finite() || !self.map.contains(&req.position) {
                    return Err(ValidationError::new("position", "must be inside the site boundary").into());
                }
                let class = req.class.unwrap_or(ObjectClass::Person);
                let radius = req.radius.unwrap_or_else(|| self.registry.config().radius_for(class));
                if !(radius.is_finite() && radius > 0.0) {
                    return Err(ValidationError::new("radius", "must be positive").into());
                }
                let obstacle = self.registry.inject(req.position, radius, class, self.now_ms);
                self.graph_dirty = true;
                Reply::ObstacleInjected { obstacle }
            }
            Command::ClearObstacle { obstacle } => {
                self.registry.clear(obstacle).ok_or_else(|| CommandError::NotFound { what: obstacle.to_string() })?;
                self.cleared.insert(obstacle);
                self.graph_dirty = true;
                Reply::ObstacleCleared { obstacle }
            }
            Command::PauseVehicle { vehicle } => {
                self.board.set_paused(&vehicle, true).map_err(|e| CommandError::NotFound { what: e.to_string() })?;
                let rt = self.vehicles.get(&vehicle);
                if let Some(route) = rt.and_then(|r| r.route.as_ref()).filter(|r| r.kind != PathKind::Halt) {
                    let ticket = route.ticket;
                    if let Some(view) = self.issue_halt(&vehicle, ticket) {
                        self.emit(EventBody::PlanIssued(view));
                    }
                }
                Reply::VehiclePaused { vehicle }
            }
            Command::ResumeVehicle { vehicle } => {
                self.board.set_paused(&vehicle, false).map_err(|e| CommandError::NotFound { what: e.to_string() })?;
                Reply::VehicleResumed { vehicle }
            }
            Command::PlanPreview { start, goal } => {
                let path = self.plan_between(start, goal).map_err(|e| CommandError::Plan { message: e.to_string() })?;
                Reply::Plan { path }
            }
            Command::Snapshot => Reply::Snapshot { snapshot: Box::new(self.snapshot()) },
        };
        self.publish_diffs();
        Ok(reply)
    }

    fn emit(&mut self, body: EventBody) {
        let record = self.log.push(self.now_ms, body).clone();
        self.view.apply(&record);
        // Nobody may be draining; anything older than retention is in no log either.
        if self.fresh.len() >= self.cfg.event_retention {
            self.fresh.pop_front();
        }
        self.fresh.push_back(record);
    }

    fn emit_transitions(&mut self, transitions: Vec<TaskTransition>) {
        for tr in transitions {
            let Some(task) = self.board.task(tr.task) else { continue };
            let mut view = TaskView::from(task);
            view.status = tr.to;
            view.vehicle = tr.vehicle.clone();
            view.failure = if tr.to == TaskStatus::Failed { tr.reason.clone() } else { None };
            self.emit(EventBody::TaskTransition { task: view, from: tr.from, reason: tr.reason });
        }
    }

    fn vehicle_view(&self, id: &VehicleId, rt: &VehicleRuntime) -> VehicleView {
        let rec = self.board.vehicle(id);
        VehicleView {
            id: id.clone(),
            kind: rt.kind,
            connection: rt.connection,
            status: rec.map(|r| r.status),
            current_task: rec.and_then(|r| r.current_task),
            paused: rec.is_some_and(|r| r.paused),
            pose: rt.pose,
            altitude: rt.altitude,
            battery: rt.latest.as_ref().map_or(1.0, |s| s.battery),
            driving: rt.latest.as_ref().is_some_and(|s| s.driving),
            errors: rt.latest.as_ref().map(|s| s.errors.iter().map(|e| e.code.clone()).collect()).unwrap_or_default(),
            reported_at: rt.latest.as_ref().map(|s| s.timestamp),
        }
    }

    /// Emits events for differences between internal state and the view.
    fn publish_diffs(&mut self) {
        self.publish_obstacle_diffs();
        self.publish_vehicle_diffs();
        self.publish_operation_diffs();
    }

    fn publish_obstacle_diffs(&mut self) {
        let live = self.registry.live_obstacles(self.now_ms);
        let live_ids: BTreeSet<ObstacleId> = live.iter().map(|o| o.id).collect();
        let gone: Vec<DynamicObstacle> = self.view.obstacles.values().filter(|o| !live_ids.contains(&o.id)).cloned().collect();
        for obstacle in gone {
            let reason = if self.cleared.remove(&obstacle.id) { ExpiryReason::Cleared } else { ExpiryReason::Ttl };
            self.emit(EventBody::ObstacleExpired { obstacle, reason });
        }
        self.cleared.clear();
        for o in live {
            match self.view.obstacles.get(&o.id) {
                None => self.emit(EventBody::ObstacleAdded(o)),
                Some(prev) if *prev != o => self.emit(EventBody::ObstacleUpdated(o)),
                _ => {}
            }
        }
    }

    fn publish_vehicle_diffs(&mut self) {
        let views: Vec<VehicleView> = self.vehicles.iter().map(|(id, rt)| self.vehicle_view(id, rt)).collect();
        for v in views {
            let due = match self.view.vehicles.get(&v.id) {
                None => true,
                Some(prev) if !prev.same_discrete(&v) => true,
                Some(prev) => {
                    prev != &v
                        && self.state_event_at.get(&v.id).is_none_or(|t| self.now_ms.saturating_sub(*t) >= self.cfg.state_event_interval_ms)
                }
            };
            if due {
                self.state_event_at.insert(v.id.clone(), self.now_ms);
                self.emit(EventBody::VehicleState(v));
            }
        }
    }

    fn publish_operation_diffs(&mut self) {
        let finished: Vec<OperationView> = self
            .board
            .operations()
            .filter(|op| op.status != OperationStatus::Running)
            .filter(|op| self.view.operations.get(&op.id).is_some_and(|v| v.status != op.status))
            .map(|op| OperationView { id: op.id, doc: op.doc.clone(), tasks: op.tasks.clone(), status: op.status })
            .collect();
        for op in finished {
            self.emit(EventBody::OperationDone(op));
        }
    }
}

/// Current pose followed by the route nodes not yet reached.
fn remaining(rt: &VehicleRuntime, route: &Route) -> Vec<EnuPoint> {
    let reached = rt
        .latest
        .as_ref()
        .filter(|s| s.order_id.as_deref() == Some(route.order_id.as_str()) && s.order_update_id == route.update_id)
        .and_then(|s| s.last_node_id.as_ref())
        .and_then(|n| route.node_ids.iter().position(|id| id == n));
    let from = reached.map_or(0, |i| i + 1);
    let mut out = Vec::with_capacity(route.waypoints.len() + 1);
    if let Some(p) = rt.pose {
        out.push(p.position);
    }
    out.extend(route.waypoints[from.min(route.waypoints.len())..].iter().map(|p| p.ground()));
    if out.len() >= 2 && planar_distance(&out[0], &out[1]) < 1e-9 {
        out.remove(1);
    }
    out
}

#[cfg(test)]
mod tests;
