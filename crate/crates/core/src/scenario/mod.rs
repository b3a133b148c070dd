//! Scenario files, the simulated fleet, and the lockstep engine that runs a
//! scenario end to end over the in-process bus.

mod engine;
mod fleet;
mod metrics;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use engine::{Engine, RunOutcome};
pub use fleet::{ActorState, Publication, SimFleet};
pub use metrics::{LatencySummary, MetricsReport, ReplanCounts, ReportMetrics, VehicleMetrics, METRICS_SCHEMA_VERSION};

use crate::coordinator::CoordinatorConfig;
use crate::fleet::{VehicleId, VehicleKind};
use crate::geo::{EnuPoint, Pose2D};
use crate::geolocator::{builtin_presets, select_profile, DetectorProfile, ImageSize, NoiseConfig, ObjectClass, Processor};
use crate::scale_model::{fit_ransac, study_fit_config, PinholeGenerator, ScaleModel};
use crate::sitemap::{MapDocument, SiteMap};
use crate::tasking::{OperationDoc, TaskBoard, ValidationError};
use crate::vehicle_sim::VehicleSpec;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("invalid scenario: {0}")]
    Validation(ValidationError),
    #[error("{0}")]
    Runtime(String),
}

impl ScenarioError {
    /// 2 for bad input, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Runtime(_) => 1,
            _ => 2,
        }
    }
}

impl From<ValidationError> for ScenarioError {
    fn from(e: ValidationError) -> Self {
        ScenarioError::Validation(e)
    }
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation(ValidationError::new(field, message))
}

/// A map file path (relative to the scenario file) or an inline map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MapSource {
    Path(String),
    Inline(MapDocument),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleEntry {
    pub id: VehicleId,
    pub kind: VehicleKind,
    /// `[east, north]` in meters.
    pub start: [f64; 2],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub max_speed: Option<f64>,
    #[serde(default)]
    pub turn_rate: Option<f64>,
}

impl VehicleEntry {
    pub fn spec(&self) -> VehicleSpec {
        let mut spec = VehicleSpec::defaults(self.id.clone(), self.kind);
        if let Some(v) = self.max_speed {
            spec.max_speed = v;
        }
        if let Some(v) = self.turn_rate {
            spec.turn_rate = v;
        }
        spec
    }

    pub fn start_pose(&self) -> Pose2D {
        Pose2D::new(EnuPoint::planar(self.start[0], self.start[1]), self.yaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorEntry {
    pub profile: String,
    pub processor: String,
    #[serde(default)]
    pub noise: NoiseConfig,
}

impl DetectorEntry {
    pub fn resolve(&self) -> Result<DetectorProfile, ScenarioError> {
        let processor: Processor = self.processor.parse().map_err(|e| invalid("detector.processor", format!("{e}")))?;
        select_profile(&builtin_presets(), &self.profile, processor).map_err(|e| invalid("detector.profile", format!("{e}")))
    }
}

/// A scripted ground actor: absent before `appear_at`, then walks `path`
/// from `pos` at `speed` and stays at the last point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorEntry {
    pub pos: [f64; 2],
    #[serde(default = "default_class")]
    pub class: ObjectClass,
    /// Seconds of simulated time.
    #[serde(default)]
    pub appear_at: f64,
    #[serde(default)]
    pub path: Vec<[f64; 2]>,
    #[serde(default = "default_walk_speed")]
    pub speed: f64,
    #[serde(default)]
    pub leave_at: Option<f64>,
}

fn default_class() -> ObjectClass {
    ObjectClass::Person
}

fn default_walk_speed() -> f64 {
    1.2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    pub dt: f64,
    pub time_scale: f64,
    pub max_sim_time_s: f64,
    /// Frame drop rate on the in-process bus.
    pub bus_drop_rate: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self { dt: 0.1, time_scale: 20.0, max_sim_time_s: 900.0, bus_drop_rate: 0.0 }
    }
}

/// Coordinator knobs a scenario may override.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoordinatorOverrides {
    pub clearance_floor: Option<f64>,
    pub replan_check_period: Option<u64>,
    pub confidence_floor: Option<f64>,
    pub obstacle_ttl_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub name: String,
    pub map: MapSource,
    pub vehicles: Vec<VehicleEntry>,
    pub detector: DetectorEntry,
    #[serde(default)]
    pub actors: Vec<ActorEntry>,
    pub operation: OperationDoc,
    pub seed: u64,
    #[serde(default)]
    pub image: ImageSize,
    #[serde(default)]
    pub sim: SimSettings,
    #[serde(default)]
    pub coordinator: CoordinatorOverrides,
}

/// A parsed, validated scenario with its map resolved.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub doc: ScenarioDoc,
    pub map: SiteMap,
    pub detector: DetectorProfile,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), &base)
    }

    /// `origin` names the source in error messages; relative map paths resolve against `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self, ScenarioError> {
        let doc: ScenarioDoc = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::from_doc(doc, base)
    }

    pub fn from_doc(doc: ScenarioDoc, base: &Path) -> Result<Self, ScenarioError> {
        let map = match &doc.map {
            MapSource::Inline(m) => SiteMap::from_document(m.clone()).map_err(|e| invalid("map", e.to_string()))?,
            MapSource::Path(p) => {
                let full: PathBuf = base.join(p);
                SiteMap::load(&full).map_err(|e| invalid("map", format!("{}: {e}", full.display())))?
            }
        };
        let detector = doc.detector.resolve()?;
        validate(&doc, &map)?;
        Ok(Self { doc, map, detector })
    }

    pub fn coordinator_config(&self) -> CoordinatorConfig {
        let mut cfg = CoordinatorConfig { image: self.doc.image, ..CoordinatorConfig::default() };
        let o = &self.doc.coordinator;
        if let Some(v) = o.clearance_floor {
            cfg.clearance_floor = v;
        }
        if let Some(v) = o.replan_check_period {
            cfg.replan_check_period = v;
        }
        if let Some(v) = o.confidence_floor {
            cfg.confidence_floor = v;
        }
        if let Some(v) = o.obstacle_ttl_s {
            cfg.registry.ttl_ms = (v * 1000.0).round() as u64;
        }
        cfg
    }

    /// Camera used by the simulated detector: the synthetic pinhole truth.
    pub fn camera(&self) -> PinholeGenerator {
        PinholeGenerator::default()
    }

    /// Scale model calibrated from seeded synthetic samples of [`Scenario::camera`].
    pub fn calibrated_model(&self) -> Result<ScaleModel, ScenarioError> {
        calibrated_model(&self.camera(), self.doc.seed)
    }
}

pub fn calibrated_model(camera: &PinholeGenerator, seed: u64) -> Result<ScaleModel, ScenarioError> {
    let set = camera.training(seed);
    fit_ransac(&set.samples, 3, &study_fit_config(camera, seed)).map_err(|e| ScenarioError::Runtime(format!("scale calibration: {e}")))
}

fn positive(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, "must be positive"))
    }
}

fn validate(doc: &ScenarioDoc, map: &SiteMap) -> Result<(), ScenarioError> {
    if doc.name.trim().is_empty() {
        return Err(invalid("name", "must not be empty"));
    }
    if doc.vehicles.is_empty() {
        return Err(invalid("vehicles", "at least one vehicle is required"));
    }
    let mut ids = BTreeSet::new();
    for (i, v) in doc.vehicles.iter().enumerate() {
        let field = |f: &str| format!("vehicles[{i}].{f}");
        if !ids.insert(v.id.clone()) {
            return Err(invalid(field("id"), format!("duplicate id {}", v.id)));
        }
        let start = EnuPoint::planar(v.start[0], v.start[1]);
        if !start.is_finite() || !map.is_free(&start) {
            return Err(invalid(field("start"), "must be a free point inside the site"));
        }
        if !v.yaw.is_finite() {
            return Err(invalid(field("yaw"), "must be finite"));
        }
        v.spec().validate().map_err(|e| invalid(field("spec"), e.to_string()))?;
    }
    for (i, a) in doc.actors.iter().enumerate() {
        let field = |f: &str| format!("actors[{i}].{f}");
        for p in std::iter::once(&a.pos).chain(&a.path) {
            if !map.contains(&EnuPoint::planar(p[0], p[1])) {
                return Err(invalid(field("path"), "points must lie inside the site boundary"));
            }
        }
        if !(a.appear_at.is_finite() && a.appear_at >= 0.0) {
            return Err(invalid(field("appear_at"), "must be non-negative"));
        }
        positive(&field("speed"), a.speed)?;
        if a.leave_at.is_some_and(|t| !(t > a.appear_at)) {
            return Err(invalid(field("leave_at"), "must be after appear_at"));
        }
    }
    positive("sim.dt", doc.sim.dt)?;
    positive("sim.time_scale", doc.sim.time_scale)?;
    positive("sim.max_sim_time_s", doc.sim.max_sim_time_s)?;
    if !(0.0..1.0).contains(&doc.sim.bus_drop_rate) {
        return Err(invalid("sim.bus_drop_rate", "must be within [0, 1)"));
    }
    if doc.image.width == 0 || doc.image.height == 0 {
        return Err(invalid("image", "dimensions must be positive"));
    }
    if let Some(t) = doc.coordinator.obstacle_ttl_s {
        positive("coordinator.obstacle_ttl_s", t)?;
    }
    let mut cfg = CoordinatorConfig::default();
    if let Some(p) = doc.coordinator.replan_check_period {
        cfg.replan_check_period = p;
    }
    if let Some(c) = doc.coordinator.clearance_floor {
        cfg.clearance_floor = c;
    }
    if let Some(c) = doc.coordinator.confidence_floor {
        cfg.confidence_floor = c;
    }
    cfg.validate().map_err(|e| invalid(format!("coordinator.{}", e.field), e.message))?;
    TaskBoard::new().submit(doc.operation.clone(), map).map_err(|e| invalid(format!("operation.{}", e.field), e.message))?;
    Ok(())
}
