use std::collections::{BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ActorEntry, Scenario, ScenarioError};
use crate::bus::schema::{ConnectionMsg, ConnectionState, Envelope, ObjectsMsg, Payload, StateMsg};
use crate::bus::topic::{topic_for, vehicle_of, TopicKind};
use crate::bus::Qos;
use crate::fleet::{VehicleId, VehicleKind};
use crate::geo::{enu_to_geodetic, planar_distance, EnuPoint, GeoPoint};
use crate::geolocator::{simulate_detections, to_report, DetectorClock, DetectorProfile, DroneFix, GroundActor, ImageSize, NoiseConfig, ObjectReport};
use crate::scale_model::{PinholeGenerator, ScaleModel};
use crate::vehicle_sim::{SimClock, SimVehicle};

/// A message the fleet wants published, attributed to a vehicle.
#[derive(Debug, Clone, PartialEq)]
pub enum Publication {
    Connection(ConnectionMsg),
    State(StateMsg),
    Objects(ObjectsMsg),
}

impl Publication {
    pub fn vehicle(&self) -> &VehicleId {
        match self {
            Publication::Connection(c) => &c.vehicle_id,
            Publication::State(s) => &s.vehicle_id,
            Publication::Objects(o) => &o.reporter,
        }
    }

    pub fn topic(&self, manufacturer: &str) -> String {
        let kind = match self {
            Publication::Connection(_) => TopicKind::Connection,
            Publication::State(_) => TopicKind::State,
            Publication::Objects(_) => TopicKind::Objects,
        };
        topic_for(manufacturer, self.vehicle().as_str(), kind).expect("vehicle ids are topic-safe")
    }

    /// States are superseded by the next one; everything else must arrive.
    pub fn qos(&self) -> Qos {
        match self {
            Publication::State(_) => Qos::AtMostOnce,
            _ => Qos::AtLeastOnce,
        }
    }

    pub fn into_payload(self) -> Payload {
        match self {
            Publication::Connection(c) => Payload::Connection(c),
            Publication::State(s) => Payload::State(s),
            Publication::Objects(o) => Payload::Objects(o),
        }
    }
}

/// Scripted actor position at `t_s`; `None` while absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorState {
    pub entry: ActorEntry,
}

impl ActorState {
    pub fn position_at(&self, t_s: f64) -> Option<EnuPoint> {
        let a = &self.entry;
        if t_s < a.appear_at || a.leave_at.is_some_and(|t| t_s >= t) {
            return None;
        }
        let mut remaining = (t_s - a.appear_at) * a.speed;
        let mut at = EnuPoint::planar(a.pos[0], a.pos[1]);
        for p in &a.path {
            let next = EnuPoint::planar(p[0], p[1]);
            let leg = planar_distance(&at, &next);
            if remaining <= leg {
                return Some(if leg > 0.0 { at.lerp(next, remaining / leg) } else { next });
            }
            remaining -= leg;
            at = next;
        }
        Some(at)
    }
}

#[derive(Debug, Clone)]
struct PendingFrame {
    ready_ms: u64,
    reports: Vec<ObjectReport>,
}

#[derive(Debug, Clone)]
struct Camera {
    vehicle: usize,
    clock: DetectorClock,
    pending: VecDeque<PendingFrame>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FleetStats {
    pub frames: u64,
    pub detections: u64,
    pub reports_published: u64,
    /// Indices of actors with at least one report geolocated within 3 m.
    pub actors_reported: BTreeSet<usize>,
    pub orders_accepted: u64,
    pub orders_rejected: u64,
    /// Ticks where a vehicle moved farther than max_speed * dt.
    pub speed_breaches: u64,
    /// Closest ground-vehicle to visible-actor distance.
    pub min_actor_separation: Option<f64>,
}

/// Simulated vehicles, scripted actors and the UAV detector, advanced in
/// lockstep. Publications come out in vehicle-id order.
pub struct SimFleet {
    vehicles: Vec<SimVehicle>,
    actors: Vec<ActorState>,
    cameras: Vec<Camera>,
    origin: GeoPoint,
    model: ScaleModel,
    truth: PinholeGenerator,
    image: ImageSize,
    noise: NoiseConfig,
    confidence_floor: f64,
    profile: DetectorProfile,
    rng: ChaCha8Rng,
    stats: FleetStats,
    time_base_ms: u64,
}

/// Reports farther than this from every actor are not credited to one.
const MATCH_RADIUS_M: f64 = 3.0;

impl SimFleet {
    pub fn new(scenario: &Scenario, model: ScaleModel) -> Result<Self, ScenarioError> {
        let map = &scenario.map;
        let mut entries = scenario.doc.vehicles.clone();
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        let boundary = map.boundary.clone();
        let mut vehicles = Vec::with_capacity(entries.len());
        for e in &entries {
            let v = SimVehicle::new(e.spec(), map.origin, e.start_pose()).map_err(|err| ScenarioError::Runtime(format!("{}: {err}", e.id)))?;
            vehicles.push(v.with_boundary(boundary.clone()));
        }
        let cameras = vehicles
            .iter()
            .enumerate()
            .filter(|(_, v)| v.spec.kind == VehicleKind::Uav)
            .map(|(i, _)| Camera { vehicle: i, clock: DetectorClock::new(&scenario.detector, 0), pending: VecDeque::new() })
            .collect();
        Ok(Self {
            vehicles,
            actors: scenario.doc.actors.iter().cloned().map(|entry| ActorState { entry }).collect(),
            cameras,
            origin: map.origin,
            model,
            truth: scenario.camera(),
            image: scenario.doc.image,
            noise: scenario.doc.detector.noise,
            confidence_floor: scenario.coordinator_config().confidence_floor,
            profile: scenario.detector.clone(),
            // Separate stream from the calibration data drawn with the same seed.
            rng: ChaCha8Rng::seed_from_u64(scenario.doc.seed ^ 0xde7e_c70a),
            stats: FleetStats::default(),
            time_base_ms: 0,
        })
    }

    /// Offset added to every published timestamp, for runs against a
    /// wall-clock coordinator. Simulation time itself is unaffected.
    pub fn with_time_base(mut self, base_ms: u64) -> Self {
        self.time_base_ms = base_ms;
        self
    }

    pub fn vehicles(&self) -> &[SimVehicle] {
        &self.vehicles
    }

    pub fn vehicle(&self, id: &VehicleId) -> Option<&SimVehicle> {
        self.vehicles.iter().find(|v| v.id() == id)
    }

    pub fn actors(&self) -> &[ActorState] {
        &self.actors
    }

    pub fn stats(&self) -> &FleetStats {
        &self.stats
    }

    pub fn profile(&self) -> &DetectorProfile {
        &self.profile
    }

    /// Online announcements followed by an initial state, per vehicle.
    pub fn announce(&self, now_ms: u64) -> Vec<Publication> {
        let mut out = Vec::new();
        for v in &self.vehicles {
            out.push(Publication::Connection(ConnectionMsg {
                vehicle_id: v.id().clone(),
                connection_state: ConnectionState::Online,
                vehicle_kind: Some(v.spec.kind),
                timestamp: now_ms + self.time_base_ms,
            }));
            out.push(Publication::State(v.state(now_ms + self.time_base_ms)));
        }
        out
    }

    /// Applies an order envelope addressed to one of the fleet's vehicles.
    pub fn deliver(&mut self, env: &Envelope) {
        let Payload::Order(order) = &env.payload else { return };
        let Some(target) = vehicle_of(&env.topic) else { return };
        let Some(v) = self.vehicles.iter_mut().find(|v| v.id().as_str() == target) else { return };
        match v.accept_order(order) {
            Ok(()) => self.stats.orders_accepted += 1,
            Err(e) => {
                tracing::debug!(vehicle = target, order = %order.order_id, ?e, "order rejected");
                self.stats.orders_rejected += 1;
            }
        }
    }

    /// Advances every vehicle by one tick of `clock` (already advanced).
    pub fn tick(&mut self, clock: &SimClock) -> Vec<Publication> {
        let now = clock.now_ms();
        let t_s = now as f64 / 1000.0;
        let actors: Vec<(usize, GroundActor)> = self
            .actors
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.position_at(t_s).map(|p| (i, GroundActor { position: p, class: a.entry.class })))
            .collect();
        let mut per_vehicle: Vec<Vec<Publication>> = vec![Vec::new(); self.vehicles.len()];
        for (i, v) in self.vehicles.iter_mut().enumerate() {
            let before = v.position3();
            let state = v.tick(clock);
            let after = v.position3();
            let moved = ((after.east - before.east).powi(2) + (after.north - before.north).powi(2) + (after.up - before.up).powi(2)).sqrt();
            if moved > v.spec.max_speed * clock.dt + 1e-12 {
                self.stats.speed_breaches += 1;
            }
            if v.spec.kind.is_ground() {
                for (_, a) in &actors {
                    let d = planar_distance(&after, &a.position);
                    self.stats.min_actor_separation = Some(self.stats.min_actor_separation.map_or(d, |m| m.min(d)));
                }
            }
            if let Some(mut s) = state {
                s.timestamp += self.time_base_ms;
                per_vehicle[i].push(Publication::State(s));
            }
        }
        for c in 0..self.cameras.len() {
            if let Some(objects) = self.camera_tick(c, now, &actors) {
                let i = self.cameras[c].vehicle;
                per_vehicle[i].push(Publication::Objects(objects));
            }
        }
        per_vehicle.into_iter().flatten().collect()
    }

    /// Captures a frame when the detector is free; a frame's reports are
    /// published one inference period after capture.
    fn camera_tick(&mut self, c: usize, now: u64, actors: &[(usize, GroundActor)]) -> Option<ObjectsMsg> {
        let vehicle = &self.vehicles[self.cameras[c].vehicle];
        let drone = vehicle.position3();
        let (lo, hi) = self.model.validity_range();
        let airborne = drone.up >= lo && drone.up <= hi;
        if self.cameras[c].clock.poll(now) && airborne {
            self.stats.frames += 1;
            let ppm = self.truth.true_ppm(drone.up);
            let ground: Vec<GroundActor> = actors.iter().map(|(_, a)| *a).collect();
            // Camera held image-up north regardless of flight direction.
            let detections = simulate_detections(&ground, drone, 0.0, ppm, self.image, &self.noise, &mut self.rng);
            self.stats.detections += detections.len() as u64;
            let fix = DroneFix {
                position: enu_to_geodetic(&self.origin, &drone).unwrap_or(self.origin),
                yaw: 0.0,
                altitude_agl: drone.up,
                timestamp: now + self.time_base_ms,
            };
            let mut reports = Vec::new();
            for d in &detections {
                let Ok(Some(r)) = to_report(d, &fix, &self.model, self.image, &self.origin, self.confidence_floor) else { continue };
                if let Ok(p) = crate::geo::geodetic_to_enu(&self.origin, &r.position) {
                    let nearest = actors
                        .iter()
                        .map(|(i, a)| (planar_distance(&p, &a.position), *i))
                        .filter(|(d, _)| *d <= MATCH_RADIUS_M)
                        .min_by(|a, b| a.0.total_cmp(&b.0));
                    if let Some((_, i)) = nearest {
                        self.stats.actors_reported.insert(i);
                    }
                }
                reports.push(r);
            }
            let period = self.profile.frame_period_ms().round() as u64;
            self.cameras[c].pending.push_back(PendingFrame { ready_ms: now + period, reports });
        }
        let camera = &mut self.cameras[c];
        let mut objects = Vec::new();
        while camera.pending.front().is_some_and(|f| f.ready_ms <= now) {
            objects.extend(camera.pending.pop_front().expect("checked").reports);
        }
        if objects.is_empty() {
            return None;
        }
        self.stats.reports_published += objects.len() as u64;
        Some(ObjectsMsg { reporter: self.vehicles[camera.vehicle].id().clone(), objects })
    }
}
