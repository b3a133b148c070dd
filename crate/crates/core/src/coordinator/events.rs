//! Event records, the retained event log, and the world view folded from them.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::bus::schema::ConnectionState;
use crate::fleet::{Capability, VehicleId, VehicleKind};
use crate::geo::{EnuPoint, Pose2D};
use crate::sitemap::{DynamicObstacle, ObstacleId};
use crate::tasking::{OperationDoc, OperationId, OperationStatus, StepTicket, Task, TaskId, TaskStatus, VehicleStatus};

pub const DEFAULT_RETENTION: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleView {
    pub id: VehicleId,
    pub kind: VehicleKind,
    pub connection: ConnectionState,
    /// `None` until the first state report registers the vehicle with tasking.
    pub status: Option<VehicleStatus>,
    pub current_task: Option<TaskId>,
    pub paused: bool,
    pub pose: Option<Pose2D>,
    pub altitude: f64,
    pub battery: f64,
    pub driving: bool,
    pub errors: Vec<String>,
    /// Timestamp of the state report the pose came from.
    pub reported_at: Option<u64>,
}

impl VehicleView {
    /// Equal apart from continuously varying telemetry.
    pub fn same_discrete(&self, other: &VehicleView) -> bool {
        self.id == other.id
            && self.kind == other.kind
            && self.connection == other.connection
            && self.status == other.status
            && self.current_task == other.current_task
            && self.paused == other.paused
            && self.driving == other.driving
            && self.errors == other.errors
            && self.pose.is_some() == other.pose.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Navigate,
    Action,
    Survey,
    Halt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathView {
    pub vehicle: VehicleId,
    pub order_id: String,
    pub update_id: u64,
    pub kind: PathKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ticket: Option<StepTicket>,
    pub waypoints: Vec<EnuPoint>,
    pub length: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_clearance: Option<f64>,
    pub graph_generation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub id: TaskId,
    pub operation: OperationId,
    pub capability: Capability,
    pub status: TaskStatus,
    pub vehicle: Option<VehicleId>,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl From<&Task> for TaskView {
    fn from(t: &Task) -> Self {
        Self {
            id: t.id,
            operation: t.operation,
            capability: t.capability,
            status: t.status,
            vehicle: t.vehicle.clone(),
            steps: t.steps.len(),
            failure: t.failure.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationView {
    pub id: OperationId,
    pub doc: OperationDoc,
    pub tasks: Vec<TaskId>,
    pub status: OperationStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpiryReason {
    Ttl,
    Cleared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplanOutcome {
    Rerouted,
    /// No route exists; the vehicle was ordered to stop in place.
    Halted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    VehicleState(VehicleView),
    ObstacleAdded(DynamicObstacle),
    ObstacleUpdated(DynamicObstacle),
    ObstacleExpired { obstacle: DynamicObstacle, reason: ExpiryReason },
    GraphRebuilt { generation: u64, nodes: usize, edges: usize },
    PlanIssued(PathView),
    Replan { path: PathView, outcome: ReplanOutcome, previous_length: Option<f64>, blocking: Vec<ObstacleId> },
    PathCleared { vehicle: VehicleId, reason: String },
    TaskTransition { task: TaskView, from: TaskStatus, reason: Option<String> },
    OperationSubmitted { operation: OperationView, tasks: Vec<TaskView> },
    OperationDone(OperationView),
    /// Stream marker: events before `oldest_available` were evicted.
    Gap { requested: u64, oldest_available: u64 },
}

impl EventBody {
    pub fn kind_name(&self) -> &'static str {
        match self {
            EventBody::VehicleState(_) => "vehicle_state",
            EventBody::ObstacleAdded(_) => "obstacle_added",
            EventBody::ObstacleUpdated(_) => "obstacle_updated",
            EventBody::ObstacleExpired { .. } => "obstacle_expired",
            EventBody::GraphRebuilt { .. } => "graph_rebuilt",
            EventBody::PlanIssued(_) => "plan_issued",
            EventBody::Replan { .. } => "replan",
            EventBody::PathCleared { .. } => "path_cleared",
            EventBody::TaskTransition { .. } => "task_transition",
            EventBody::OperationSubmitted { .. } => "operation_submitted",
            EventBody::OperationDone(_) => "operation_done",
            EventBody::Gap { .. } => "gap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub timestamp: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

/// Bounded in-memory log; sequence numbers start at 1 and never repeat.
#[derive(Debug, Clone)]
pub struct EventLog {
    capacity: usize,
    records: VecDeque<EventRecord>,
    next_seq: u64,
}

impl EventLog {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), records: VecDeque::new(), next_seq: 1 }
    }

    pub fn push(&mut self, timestamp: u64, body: EventBody) -> &EventRecord {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(EventRecord { seq: self.next_seq, timestamp, body });
        self.next_seq += 1;
        self.records.back().expect("just pushed")
    }

    /// Highest assigned seq; 0 before the first event.
    pub fn latest_seq(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn oldest_seq(&self) -> Option<u64> {
        self.records.front().map(|r| r.seq)
    }

    /// Retained events with `seq >= from_seq`. When some of those were
    /// evicted, the result starts with a gap marker numbered just below the
    /// oldest retained event.
    pub fn since(&self, from_seq: u64) -> Vec<EventRecord> {
        let mut out = Vec::new();
        if let Some(oldest) = self.oldest_seq() {
            if oldest > 1 && from_seq < oldest {
                out.push(EventRecord {
                    seq: oldest - 1,
                    timestamp: self.records.front().map(|r| r.timestamp).unwrap_or(0),
                    body: EventBody::Gap { requested: from_seq, oldest_available: oldest },
                });
            }
        }
        out.extend(self.records.iter().filter(|r| r.seq >= from_seq).cloned());
        out
    }
}

impl Default for EventLog {
    fn default() -> Self {
        Self::new(DEFAULT_RETENTION)
    }
}

/// Everything the supervisor sees, reconstructible as a fold over events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldView {
    pub seq: u64,
    pub vehicles: BTreeMap<VehicleId, VehicleView>,
    pub obstacles: BTreeMap<ObstacleId, DynamicObstacle>,
    pub paths: BTreeMap<VehicleId, PathView>,
    pub tasks: BTreeMap<TaskId, TaskView>,
    pub operations: BTreeMap<OperationId, OperationView>,
    pub graph_generation: u64,
}

impl WorldView {
    pub fn apply(&mut self, event: &EventRecord) {
        self.seq = self.seq.max(event.seq);
        match &event.body {
            EventBody::VehicleState(v) => {
                self.vehicles.insert(v.id.clone(), v.clone());
            }
            EventBody::ObstacleAdded(o) | EventBody::ObstacleUpdated(o) => {
                self.obstacles.insert(o.id, o.clone());
            }
            EventBody::ObstacleExpired { obstacle, .. } => {
                self.obstacles.remove(&obstacle.id);
            }
            EventBody::GraphRebuilt { generation, .. } => self.graph_generation = *generation,
            EventBody::PlanIssued(p) | EventBody::Replan { path: p, .. } => {
                self.paths.insert(p.vehicle.clone(), p.clone());
            }
            EventBody::PathCleared { vehicle, .. } => {
                self.paths.remove(vehicle);
            }
            EventBody::TaskTransition { task, .. } => {
                self.tasks.insert(task.id, task.clone());
            }
            EventBody::OperationSubmitted { operation, tasks } => {
                self.operations.insert(operation.id, operation.clone());
                for t in tasks {
                    self.tasks.insert(t.id, t.clone());
                }
            }
            EventBody::OperationDone(op) => {
                self.operations.insert(op.id, op.clone());
            }
            EventBody::Gap { .. } => {}
        }
    }
}
