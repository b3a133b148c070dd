//! Operations, their task decomposition, and proximity-based assignment.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::fleet::{ActionKind, Capability, VehicleId, VehicleKind};
use crate::geo::{planar_distance, EnuPoint, Pose2D};
use crate::geolocator::DEFAULT_SURVEY_ALTITUDE_M;
use crate::sitemap::SiteMap;

pub const LOAD_DURATION_S: f64 = 30.0;
pub const DUMP_DURATION_S: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{field}: {message}")]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "-{}"), self.0)
            }
        }
    };
}

id_type!(OperationId, "op");
id_type!(TaskId, "task");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationKind {
    LoadDump,
    Survey,
}

/// Submission document. Fields not used by `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationDoc {
    pub kind: OperationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_zone: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_zone: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survey_altitude_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survey_overlap: Option<f64>,
}

impl OperationDoc {
    pub fn load_dump(load_zone: &str, dump_zone: &str, cycles: i64) -> Self {
        Self {
            kind: OperationKind::LoadDump,
            load_zone: Some(load_zone.into()),
            dump_zone: Some(dump_zone.into()),
            cycles: Some(cycles),
            survey_altitude_m: None,
            survey_overlap: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurveyParams {
    pub altitude_m: f64,
    pub overlap: f64,
}

impl Default for SurveyParams {
    fn default() -> Self {
        Self { altitude_m: DEFAULT_SURVEY_ALTITUDE_M, overlap: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Step {
    Navigate { zone: String, target: EnuPoint },
    Act { action: ActionKind, duration_s: f64 },
    /// Barrier: blocks until `step` of `task` is done.
    WaitFor { task: TaskId, step: usize },
    Survey { params: SurveyParams },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Assigned,
    Active,
    Done,
    Failed,
}

impl TaskStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Done | TaskStatus::Failed)
    }

    /// pending → assigned → active → done, and any non-terminal state → failed.
    pub fn can_become(self, next: TaskStatus) -> bool {
        use TaskStatus::*;
        matches!((self, next), (Pending, Assigned) | (Assigned, Active) | (Active, Done)) || (!self.is_terminal() && next == Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub operation: OperationId,
    pub capability: Capability,
    pub steps: Vec<Step>,
    /// Index of the step in progress; equals `steps.len()` once all are done.
    pub cursor: usize,
    pub status: TaskStatus,
    pub vehicle: Option<VehicleId>,
    /// Where the task starts, for proximity assignment.
    pub anchor: EnuPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Task {
    pub fn current_step(&self) -> Option<&Step> {
        self.steps.get(self.cursor)
    }

    pub fn step_done(&self, step: usize) -> bool {
        self.cursor > step || self.status == TaskStatus::Done
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationStatus {
    Running,
    Done,
    Failed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Operation {
    pub id: OperationId,
    pub doc: OperationDoc,
    pub tasks: Vec<TaskId>,
    pub status: OperationStatus,
}

/// Tasks for a validated operation; ids are assigned from `first_id` upwards.
pub fn parse_operation(op: OperationId, doc: &OperationDoc, map: &SiteMap, first_id: u64) -> Result<Vec<Task>, ValidationError> {
    let zone = |field: &str, value: &Option<String>| -> Result<(String, EnuPoint), ValidationError> {
        let name = value.as_deref().ok_or_else(|| ValidationError::new(field, "required"))?;
        let p = map.zone(name).ok_or_else(|| ValidationError::new(field, format!("unknown zone {name:?}")))?;
        Ok((name.to_string(), p))
    };
    let survey_params = || -> Result<SurveyParams, ValidationError> {
        let d = SurveyParams::default();
        let params = SurveyParams { altitude_m: doc.survey_altitude_m.unwrap_or(d.altitude_m), overlap: doc.survey_overlap.unwrap_or(d.overlap) };
        if !(params.altitude_m.is_finite() && params.altitude_m > 0.0) {
            return Err(ValidationError::new("survey_altitude_m", "must be positive"));
        }
        if !(0.0..1.0).contains(&params.overlap) {
            return Err(ValidationError::new("survey_overlap", "must be within [0, 1)"));
        }
        Ok(params)
    };
    let (min_e, min_n, _, _) = map.bounding_box();
    let survey_task = |id: u64, params| Task {
        id: TaskId(id),
        operation: op,
        capability: Capability::Survey,
        steps: vec![Step::Survey { params }],
        cursor: 0,
        status: TaskStatus::Pending,
        vehicle: None,
        anchor: EnuPoint::planar(min_e, min_n),
        failure: None,
    };
    match doc.kind {
        OperationKind::Survey => Ok(vec![survey_task(first_id, survey_params()?)]),
        OperationKind::LoadDump => {
            let (load_name, load) = zone("load_zone", &doc.load_zone)?;
            let (dump_name, dump) = zone("dump_zone", &doc.dump_zone)?;
            let cycles = doc.cycles.ok_or_else(|| ValidationError::new("cycles", "required"))?;
            if cycles < 1 {
                return Err(ValidationError::new("cycles", "must be at least 1"));
            }
            let params = survey_params()?;
            let (exc_id, haul_id) = (TaskId(first_id), TaskId(first_id + 1));
            let mut exc_steps = Vec::new();
            let mut haul_steps = Vec::new();
            for _ in 0..cycles {
                exc_steps.push(Step::Navigate { zone: load_name.clone(), target: load });
                exc_steps.push(Step::Act { action: ActionKind::Load, duration_s: LOAD_DURATION_S });
                let load_step = exc_steps.len() - 1;
                haul_steps.push(Step::Navigate { zone: load_name.clone(), target: load });
                haul_steps.push(Step::WaitFor { task: exc_id, step: load_step });
                haul_steps.push(Step::Navigate { zone: dump_name.clone(), target: dump });
                haul_steps.push(Step::Act { action: ActionKind::Dump, duration_s: DUMP_DURATION_S });
            }
            let task = |id, capability, steps| Task {
                id,
                operation: op,
                capability,
                steps,
                cursor: 0,
                status: TaskStatus::Pending,
                vehicle: None,
                anchor: load,
                failure: None,
            };
            Ok(vec![
                task(exc_id, Capability::Excavate, exc_steps),
                task(haul_id, Capability::Haul, haul_steps),
                survey_task(first_id + 2, params),
            ])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleStatus {
    Idle,
    Busy,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: VehicleId,
    pub kind: VehicleKind,
    pub capabilities: Vec<Capability>,
    pub pose: Pose2D,
    pub status: VehicleStatus,
    pub current_task: Option<TaskId>,
    /// Paused vehicles keep their task but receive no new ones.
    #[serde(default)]
    pub paused: bool,
    pub last_update: Option<u64>,
}

impl VehicleRecord {
    pub fn new(id: VehicleId, kind: VehicleKind, pose: Pose2D) -> Self {
        Self { id, kind, capabilities: kind.capabilities(), pose, status: VehicleStatus::Idle, current_task: None, paused: false, last_update: None }
    }

    fn is_available_for(&self, cap: Capability) -> bool {
        self.status == VehicleStatus::Idle && !self.paused && self.capabilities.contains(&cap)
    }
}

/// Identifies one dispatched step; carried in order ids as `task-N.sK`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepTicket {
    pub task: TaskId,
    pub step: usize,
}

impl StepTicket {
    pub fn order_id(&self) -> String {
        format!("{}.s{}", self.task, self.step)
    }

    pub fn parse(order_id: &str) -> Option<Self> {
        let rest = order_id.strip_prefix("task-")?;
        let (task, step) = rest.split_once(".s")?;
        Some(Self { task: TaskId(task.parse().ok()?), step: step.parse().ok()? })
    }
}

/// A vehicle report as seen by tasking.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleUpdate {
    pub vehicle: VehicleId,
    pub pose: Pose2D,
    pub timestamp: u64,
    pub completed: Option<StepTicket>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTransition {
    pub task: TaskId,
    pub operation: OperationId,
    pub from: TaskStatus,
    pub to: TaskStatus,
    pub vehicle: Option<VehicleId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskingError {
    #[error("unknown operation {0}")]
    UnknownOperation(OperationId),
    #[error("unknown vehicle {0}")]
    UnknownVehicle(VehicleId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskBoard {
    operations: BTreeMap<OperationId, Operation>,
    tasks: BTreeMap<TaskId, Task>,
    pending: VecDeque<TaskId>,
    vehicles: BTreeMap<VehicleId, VehicleRecord>,
    next_operation: u64,
    next_task: u64,
}

impl TaskBoard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn operations(&self) -> impl Iterator<Item = &Operation> {
        self.operations.values()
    }

    pub fn operation(&self, id: OperationId) -> Option<&Operation> {
        self.operations.get(&id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn task(&self, id: TaskId) -> Option<&Task> {
        self.tasks.get(&id)
    }

    pub fn vehicles(&self) -> impl Iterator<Item = &VehicleRecord> {
        self.vehicles.values()
    }

    pub fn vehicle(&self, id: &VehicleId) -> Option<&VehicleRecord> {
        self.vehicles.get(id)
    }

    pub fn pending(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.pending.iter().copied()
    }

    /// Validates and queues an operation. Equal documents yield independent operations.
    pub fn submit(&mut self, doc: OperationDoc, map: &SiteMap) -> Result<OperationId, ValidationError> {
        let id = OperationId(self.next_operation + 1);
        let tasks = parse_operation(id, &doc, map, self.next_task + 1)?;
        self.next_operation += 1;
        self.next_task += tasks.len() as u64;
        let ids = tasks.iter().map(|t| t.id).collect();
        for t in tasks {
            self.pending.push_back(t.id);
            self.tasks.insert(t.id, t);
        }
        self.operations.insert(id, Operation { id, doc, tasks: ids, status: OperationStatus::Running });
        Ok(id)
    }

    /// Registers a vehicle or brings a known one back online.
    pub fn vehicle_online(&mut self, id: VehicleId, kind: VehicleKind, pose: Pose2D) -> &VehicleRecord {
        let rec = self.vehicles.entry(id.clone()).or_insert_with(|| VehicleRecord::new(id, kind, pose));
        if rec.status == VehicleStatus::Offline {
            rec.status = if rec.current_task.is_some() { VehicleStatus::Busy } else { VehicleStatus::Idle };
        }
        rec
    }

    /// Marks a vehicle offline, failing its task.
    pub fn vehicle_offline(&mut self, id: &VehicleId, reason: &str) -> Vec<TaskTransition> {
        let Some(rec) = self.vehicles.get_mut(id) else { return Vec::new() };
        rec.status = VehicleStatus::Offline;
        let task = rec.current_task.take();
        let mut out = Vec::new();
        if let Some(t) = task {
            self.transition(t, TaskStatus::Failed, Some(reason.to_string()), &mut out);
        }
        out
    }

    pub fn set_paused(&mut self, id: &VehicleId, paused: bool) -> Result<(), TaskingError> {
        let rec = self.vehicles.get_mut(id).ok_or_else(|| TaskingError::UnknownVehicle(id.clone()))?;
        rec.paused = paused;
        Ok(())
    }

    fn transition(&mut self, id: TaskId, to: TaskStatus, reason: Option<String>, out: &mut Vec<TaskTransition>) {
        let Some(task) = self.tasks.get_mut(&id) else { return };
        let from = task.status;
        if from == to || !from.can_become(to) {
            return;
        }
        task.status = to;
        if to == TaskStatus::Failed {
            task.failure = reason.clone();
        }
        out.push(TaskTransition { task: id, operation: task.operation, from, to, vehicle: task.vehicle.clone(), reason });
        if to.is_terminal() {
            self.pending.retain(|t| *t != id);
            if let Some(v) = task.vehicle.clone() {
                if let Some(rec) = self.vehicles.get_mut(&v) {
                    if rec.current_task == Some(id) {
                        rec.current_task = None;
                        if rec.status == VehicleStatus::Busy {
                            rec.status = VehicleStatus::Idle;
                        }
                    }
                }
            }
            self.settle_operation(task_operation(&self.tasks, id));
        }
    }

    fn settle_operation(&mut self, op: Option<OperationId>) {
        let Some(op) = op.and_then(|o| self.operations.get_mut(&o)) else { return };
        if op.status != OperationStatus::Running {
            return;
        }
        let statuses: Vec<TaskStatus> = op.tasks.iter().filter_map(|t| self.tasks.get(t)).map(|t| t.status).collect();
        if statuses.iter().all(|s| *s == TaskStatus::Done) {
            op.status = OperationStatus::Done;
        } else if statuses.iter().all(|s| s.is_terminal()) {
            op.status = OperationStatus::Failed;
        }
    }

    /// Pending tasks in FIFO order, each to the nearest idle capable vehicle
    /// (ties to the smaller vehicle id).
    pub fn assign(&mut self) -> Vec<(TaskId, VehicleId, TaskTransition)> {
        let mut out = Vec::new();
        let queue: Vec<TaskId> = self.pending.iter().copied().collect();
        for tid in queue {
            let task = &self.tasks[&tid];
            let best = self
                .vehicles
                .values()
                .filter(|v| v.is_available_for(task.capability))
                .map(|v| (planar_distance(&v.pose.position, &task.anchor), &v.id))
                .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
                .map(|(_, id)| id.clone());
            let Some(vid) = best else { continue };
            self.tasks.get_mut(&tid).expect("queued task exists").vehicle = Some(vid.clone());
            let rec = self.vehicles.get_mut(&vid).expect("candidate exists");
            rec.status = VehicleStatus::Busy;
            rec.current_task = Some(tid);
            self.pending.retain(|t| *t != tid);
            let mut tr = Vec::new();
            self.transition(tid, TaskStatus::Assigned, None, &mut tr);
            debug!(task = %tid, vehicle = %vid, "assigned");
            out.push((tid, vid, tr.remove(0)));
        }
        out
    }

    /// Marks an assigned task as running.
    pub fn activate(&mut self, id: TaskId) -> Option<TaskTransition> {
        let mut out = Vec::new();
        self.transition(id, TaskStatus::Active, None, &mut out);
        out.pop()
    }

    pub fn fail_task(&mut self, id: TaskId, reason: &str) -> Vec<TaskTransition> {
        let mut out = Vec::new();
        self.transition(id, TaskStatus::Failed, Some(reason.to_string()), &mut out);
        out
    }

    /// Advances past barriers whose dependency has completed, and fails tasks
    /// waiting on a dependency that failed first. Returns the tasks whose
    /// cursor moved and the resulting status transitions.
    pub fn release_barriers(&mut self) -> (Vec<TaskId>, Vec<TaskTransition>) {
        let mut moved = Vec::new();
        let mut out = Vec::new();
        loop {
            let waiting: Vec<(TaskId, TaskId, usize)> = self
                .tasks
                .values()
                .filter(|t| t.status == TaskStatus::Active)
                .filter_map(|t| match t.current_step() {
                    Some(Step::WaitFor { task, step }) => Some((t.id, *task, *step)),
                    _ => None,
                })
                .collect();
            let mut progressed = false;
            for (id, dep, step) in waiting {
                let Some(d) = self.tasks.get(&dep) else { continue };
                if d.step_done(step) {
                    let task = self.tasks.get_mut(&id).expect("listed");
                    task.cursor += 1;
                    moved.push(id);
                    progressed = true;
                    if task.cursor == task.steps.len() {
                        self.transition(id, TaskStatus::Done, None, &mut out);
                    }
                } else if d.status == TaskStatus::Failed {
                    self.transition(id, TaskStatus::Failed, Some(format!("dependency {dep} failed")), &mut out);
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        (moved, out)
    }

    /// Applies a vehicle report. Returns the resulting transitions; stale
    /// reports (older than the last applied) and unknown vehicles change nothing.
    pub fn on_vehicle_state(&mut self, update: &VehicleUpdate) -> Result<Vec<TaskTransition>, TaskingError> {
        let rec = self.vehicles.get_mut(&update.vehicle).ok_or_else(|| TaskingError::UnknownVehicle(update.vehicle.clone()))?;
        if rec.last_update.is_some_and(|last| update.timestamp < last) {
            return Ok(Vec::new());
        }
        rec.last_update = Some(update.timestamp);
        rec.pose = update.pose;
        let current = rec.current_task;
        let mut out = Vec::new();
        if let Some(err) = &update.error {
            out.extend(self.vehicle_offline(&update.vehicle, err));
            return Ok(out);
        }
        if let (Some(ticket), Some(tid)) = (update.completed, current) {
            let task = self.tasks.get_mut(&tid).expect("vehicle task exists");
            if ticket.task == tid && ticket.step == task.cursor && task.status == TaskStatus::Active {
                task.cursor += 1;
                if task.cursor == task.steps.len() {
                    self.transition(tid, TaskStatus::Done, None, &mut out);
                }
            }
        }
        Ok(out)
    }

    /// Fails every unfinished task of the operation. Returns the transitions;
    /// vehicles that held those tasks are listed in them.
    pub fn cancel(&mut self, id: OperationId) -> Result<Vec<TaskTransition>, TaskingError> {
        let op = self.operations.get(&id).ok_or(TaskingError::UnknownOperation(id))?;
        let tasks = op.tasks.clone();
        let mut out = Vec::new();
        for t in tasks {
            self.transition(t, TaskStatus::Failed, Some("cancelled".into()), &mut out);
        }
        if let Some(op) = self.operations.get_mut(&id) {
            if op.status != OperationStatus::Done {
                op.status = OperationStatus::Cancelled;
            }
        }
        Ok(out)
    }
}

fn task_operation(tasks: &BTreeMap<TaskId, Task>, id: TaskId) -> Option<OperationId> {
    tasks.get(&id).map(|t| t.operation)
}
