//! Site geometry (boundary, static obstacles, named zones) and the registry of
//! dynamic obstacles built from geolocated object reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::geo::{geodetic_to_enu, planar_distance, EnuPoint, GeoPoint};
use crate::geolocator::{ObjectClass, ObjectReport};
use crate::geometry::{self, point_in_polygon, point_segment_distance};
use crate::planner::PlannedPath;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("map document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> MapError {
    MapError::Invalid { field: field.into(), message: message.into() }
}

/// On-disk layout of a site map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDocument {
    pub origin: GeoPoint,
    pub boundary: Vec<[f64; 2]>,
    #[serde(default)]
    pub static_obstacles: Vec<Vec<[f64; 2]>>,
    #[serde(default)]
    pub zones: BTreeMap<String, [f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteMap {
    pub origin: GeoPoint,
    /// Counter-clockwise outer ring.
    pub boundary: Vec<EnuPoint>,
    /// Counter-clockwise rings.
    pub static_obstacles: Vec<Vec<EnuPoint>>,
    pub zones: BTreeMap<String, EnuPoint>,
}

fn ring(points: &[[f64; 2]]) -> Vec<EnuPoint> {
    points.iter().map(|[e, n]| EnuPoint::planar(*e, *n)).collect()
}

impl SiteMap {
    pub fn from_document(doc: MapDocument) -> Result<Self, MapError> {
        doc.origin.validate().map_err(|e| invalid("origin", e.to_string()))?;
        let boundary = ring(&doc.boundary);
        if boundary.len() < 3 {
            return Err(invalid("boundary", "needs at least 3 vertices"));
        }
        if boundary.iter().any(|p| !p.is_finite()) {
            return Err(invalid("boundary", "non-finite vertex"));
        }
        if !geometry::is_simple(&boundary) {
            return Err(invalid("boundary", "polygon self-intersects"));
        }
        if geometry::signed_area(&boundary) <= 0.0 {
            return Err(invalid("boundary", "vertices must be counter-clockwise"));
        }
        let mut static_obstacles = Vec::with_capacity(doc.static_obstacles.len());
        for (i, raw) in doc.static_obstacles.iter().enumerate() {
            let field = format!("static_obstacles[{i}]");
            let mut poly = ring(raw);
            if poly.len() < 3 || poly.iter().any(|p| !p.is_finite()) {
                return Err(invalid(field, "needs at least 3 finite vertices"));
            }
            if !geometry::is_simple(&poly) {
                return Err(invalid(field, "polygon self-intersects"));
            }
            if poly.iter().any(|p| !point_in_polygon(p, &boundary)) {
                return Err(invalid(field, "vertex outside boundary"));
            }
            if geometry::signed_area(&poly) < 0.0 {
                poly.reverse();
            }
            static_obstacles.push(poly);
        }
        let map = SiteMap { origin: doc.origin, boundary, static_obstacles, zones: BTreeMap::new() };
        let mut zones = BTreeMap::new();
        for (name, [e, n]) in doc.zones {
            let p = EnuPoint::planar(e, n);
            if !map.is_free(&p) {
                return Err(invalid(format!("zones.{name}"), "must be inside the boundary and outside obstacles"));
            }
            zones.insert(name, p);
        }
        Ok(SiteMap { zones, ..map })
    }

    pub fn to_document(&self) -> MapDocument {
        let flat = |ring: &[EnuPoint]| ring.iter().map(|p| [p.east, p.north]).collect::<Vec<_>>();
        MapDocument {
            origin: self.origin,
            boundary: flat(&self.boundary),
            static_obstacles: self.static_obstacles.iter().map(|r| flat(r)).collect(),
            zones: self.zones.iter().map(|(k, p)| (k.clone(), [p.east, p.north])).collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, MapError> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let text = std::fs::read_to_string(path).map_err(|source| MapError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    /// Inside the boundary (edges included).
    pub fn contains(&self, p: &EnuPoint) -> bool {
        point_in_polygon(p, &self.boundary) || geometry::distance_to_outline(p, &self.boundary) < 1e-9
    }

    /// Inside the boundary and outside every static obstacle.
    pub fn is_free(&self, p: &EnuPoint) -> bool {
        self.contains(p) && !self.static_obstacles.iter().any(|o| point_in_polygon(p, o))
    }

    pub fn zone(&self, name: &str) -> Option<EnuPoint> {
        self.zones.get(name).copied()
    }

    pub fn to_enu(&self, p: &GeoPoint) -> Result<EnuPoint, crate::geo::GeoError> {
        geodetic_to_enu(&self.origin, p)
    }

    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        geometry::bounding_box(&self.boundary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObstacleId(pub u64);

impl fmt::Display for ObstacleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "obs-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObstacleSource {
    Detected,
    Supervisor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicObstacle {
    pub id: ObstacleId,
    pub position: EnuPoint,
    pub radius: f64,
    pub class: ObjectClass,
    /// Milliseconds.
    pub last_seen: u64,
    /// Lifetime after `last_seen` in milliseconds; `None` lives until cleared.
    pub ttl: Option<u64>,
    pub source: ObstacleSource,
}

impl DynamicObstacle {
    pub fn is_live(&self, now: u64) -> bool {
        match self.ttl {
            Some(ttl) => now.saturating_sub(self.last_seen) <= ttl,
            None => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistryConfig {
    pub ttl_ms: u64,
    pub merge_distance: f64,
    /// Weight of the new report in exponential smoothing.
    pub smoothing: f64,
    pub person_radius: f64,
    pub cone_radius: f64,
    pub vehicle_radius: f64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            ttl_ms: 10_000,
            merge_distance: 2.0,
            smoothing: 0.5,
            person_radius: 1.0,
            cone_radius: 0.5,
            vehicle_radius: 3.0,
        }
    }
}

impl RegistryConfig {
    pub fn radius_for(&self, class: ObjectClass) -> f64 {
        match class {
            ObjectClass::Person => self.person_radius,
            ObjectClass::Cone => self.cone_radius,
            ObjectClass::Vehicle => self.vehicle_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IngestOutcome {
    Created(DynamicObstacle),
    Merged(DynamicObstacle),
    Dropped(String),
}

/// Live and pinned obstacles keyed by id. Expired entries are removed by
/// [`ObstacleRegistry::expire`] and never returned by queries in between.
#[derive(Debug, Clone, Default)]
pub struct ObstacleRegistry {
    cfg: RegistryConfig,
    obstacles: BTreeMap<ObstacleId, DynamicObstacle>,
    next_id: u64,
}

impl ObstacleRegistry {
    pub fn new(cfg: RegistryConfig) -> Self {
        Self { cfg, obstacles: BTreeMap::new(), next_id: 1 }
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.cfg
    }

    fn allocate(&mut self) -> ObstacleId {
        let id = ObstacleId(self.next_id.max(1));
        self.next_id = id.0 + 1;
        id
    }

    pub fn ingest_report(&mut self, map: &SiteMap, report: &ObjectReport, now: u64) -> IngestOutcome {
        let position = match map.to_enu(&report.position) {
            Ok(p) => p.ground(),
            Err(e) => return self.drop_report(format!("unusable position: {e}")),
        };
        if !map.contains(&position) {
            return self.drop_report(format!("outside site boundary at ({:.1}, {:.1})", position.east, position.north));
        }
        let nearest = self
            .obstacles
            .values()
            .filter(|o| o.source == ObstacleSource::Detected && o.class == report.class && o.is_live(now))
            .map(|o| (planar_distance(&o.position, &position), o.id))
            .filter(|(d, _)| *d <= self.cfg.merge_distance)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((_, id)) = nearest {
            let alpha = self.cfg.smoothing;
            let o = self.obstacles.get_mut(&id).expect("present");
            o.position = EnuPoint::planar(
                alpha * position.east + (1.0 - alpha) * o.position.east,
                alpha * position.north + (1.0 - alpha) * o.position.north,
            );
            o.last_seen = o.last_seen.max(now);
            return IngestOutcome::Merged(o.clone());
        }
        let obstacle = DynamicObstacle {
            id: self.allocate(),
            position,
            radius: self.cfg.radius_for(report.class),
            class: report.class,
            last_seen: now,
            ttl: Some(self.cfg.ttl_ms),
            source: ObstacleSource::Detected,
        };
        self.obstacles.insert(obstacle.id, obstacle.clone());
        IngestOutcome::Created(obstacle)
    }

    fn drop_report(&self, reason: String) -> IngestOutcome {
        debug!(%reason, "object report dropped");
        IngestOutcome::Dropped(reason)
    }

    /// Supervisor override; lives until cleared.
    pub fn inject(&mut self, position: EnuPoint, radius: f64, class: ObjectClass, now: u64) -> DynamicObstacle {
        let obstacle = DynamicObstacle {
            id: self.allocate(),
            position: position.ground(),
            radius,
            class,
            last_seen: now,
            ttl: None,
            source: ObstacleSource::Supervisor,
        };
        self.obstacles.insert(obstacle.id, obstacle.clone());
        obstacle
    }

    pub fn clear(&mut self, id: ObstacleId) -> Option<DynamicObstacle> {
        self.obstacles.remove(&id)
    }

    pub fn get(&self, id: ObstacleId) -> Option<&DynamicObstacle> {
        self.obstacles.get(&id)
    }

    /// Obstacles alive at `now`, ordered by id.
    pub fn live_obstacles(&self, now: u64) -> Vec<DynamicObstacle> {
        self.obstacles.values().filter(|o| o.is_live(now)).cloned().collect()
    }

    /// Removes and returns everything expired at `now`.
    pub fn expire(&mut self, now: u64) -> Vec<DynamicObstacle> {
        let dead: Vec<ObstacleId> = self.obstacles.values().filter(|o| !o.is_live(now)).map(|o| o.id).collect();
        dead.into_iter().filter_map(|id| self.obstacles.remove(&id)).collect()
    }
}

/// Whether any path segment passes strictly closer than `radius + clearance`
/// to an obstacle center.
pub fn blocks_path(path: &PlannedPath, obstacles: &[DynamicObstacle], clearance: f64) -> bool {
    blocks_polyline(&path.waypoints, obstacles, clearance)
}

pub fn blocks_polyline(waypoints: &[EnuPoint], obstacles: &[DynamicObstacle], clearance: f64) -> bool {
    obstacles.iter().any(|o| {
        let limit = o.radius + clearance;
        match waypoints {
            [] => false,
            [only] => planar_distance(only, &o.position) < limit,
            _ => waypoints.windows(2).any(|w| point_segment_distance(&o.position, &w[0], &w[1]) < limit),
        }
    })
}
