//! Fixed-step kinematic vehicles that follow orders and report state.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::schema::{ActionState, ActionStatus, OrderMsg, StateMsg, VehicleFault};
use crate::fleet::{ActionKind, VehicleId, VehicleKind};
use crate::geo::{enu_to_geodetic, geodetic_to_enu, normalize_angle, EnuPoint, GeoPoint, Pose2D};
use crate::geolocator::{footprint_m, ImageSize};
use crate::geometry::point_in_polygon;
use crate::scale_model::{predict_ppm, ScaleError, ScaleModel};
use crate::sitemap::SiteMap;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("survey overlap must be within [0, 1), got {0}")]
    Overlap(f64),
    #[error("survey altitude: {0}")]
    Altitude(#[from] ScaleError),
    #[error("order: {0}")]
    Order(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub id: VehicleId,
    pub kind: VehicleKind,
    /// m/s
    pub max_speed: f64,
    /// rad/s; unused by the point-mass UAV.
    pub turn_rate: f64,
    pub arrival_tolerance: f64,
    pub state_rate_hz: f64,
}

impl VehicleSpec {
    pub fn defaults(id: VehicleId, kind: VehicleKind) -> Self {
        let (max_speed, turn_rate) = match kind {
            VehicleKind::Excavator => (1.5, 0.6),
            VehicleKind::Ugv => (2.5, 1.2),
            VehicleKind::Uav => (5.0, 3.0),
        };
        Self { id, kind, max_speed, turn_rate, arrival_tolerance: 0.5, state_rate_hz: 10.0 }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("max_speed", self.max_speed),
            ("turn_rate", self.turn_rate),
            ("arrival_tolerance", self.arrival_tolerance),
            ("state_rate_hz", self.state_rate_hz),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::NonPositive(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimClock {
    pub tick: u64,
    /// Seconds of simulated time per tick.
    pub dt: f64,
    /// Simulated seconds per wall-clock second when paced.
    pub time_scale: f64,
}

impl SimClock {
    pub fn new(dt: f64, time_scale: f64) -> Result<Self, SimError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(SimError::NonPositive("dt"));
        }
        if !(time_scale.is_finite() && time_scale > 0.0) {
            return Err(SimError::NonPositive("time_scale"));
        }
        Ok(Self { tick: 0, dt, time_scale })
    }

    pub fn advance(&mut self) {
        self.tick += 1;
    }

    pub fn now_ms(&self) -> u64 {
        (self.tick as f64 * self.dt * 1000.0).round() as u64
    }

    pub fn ticks_for(&self, seconds: f64) -> u64 {
        (seconds / self.dt - 1e-9).ceil().max(0.0) as u64
    }
}

impl Default for SimClock {
    fn default() -> Self {
        Self { tick: 0, dt: 0.1, time_scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderRejection {
    /// update_id not newer than the last accepted for the order.
    Stale { last: u64 },
    Invalid,
}

#[derive(Debug, Clone, PartialEq)]
struct RouteNode {
    node_id: String,
    target: EnuPoint,
    action: Option<(String, ActionKind, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
struct ActiveOrder {
    order_id: String,
    update_id: u64,
    nodes: Vec<RouteNode>,
    cursor: usize,
    /// Ticks left on the running action at `cursor`.
    action_ticks: Option<u64>,
    finished_actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimVehicle {
    pub spec: VehicleSpec,
    origin: GeoPoint,
    pub pose: Pose2D,
    /// Height above the origin; 0 for ground vehicles.
    pub altitude: f64,
    order: Option<ActiveOrder>,
    accepted: HashMap<String, u64>,
    last_node_id: Option<String>,
    driving: bool,
    battery: f64,
    boundary: Option<Vec<EnuPoint>>,
    pub distance_travelled: f64,
}

impl SimVehicle {
    pub fn new(spec: VehicleSpec, origin: GeoPoint, start: Pose2D) -> Result<Self, SimError> {
        spec.validate()?;
        Ok(Self {
            spec,
            origin,
            pose: start,
            altitude: 0.0,
            order: None,
            accepted: HashMap::new(),
            last_node_id: None,
            driving: false,
            battery: 1.0,
            boundary: None,
            distance_travelled: 0.0,
        })
    }

    /// Ground vehicles leaving this polygon report a boundary fault.
    pub fn with_boundary(mut self, boundary: Vec<EnuPoint>) -> Self {
        self.boundary = Some(boundary);
        self
    }

    pub fn id(&self) -> &VehicleId {
        &self.spec.id
    }

    pub fn position3(&self) -> EnuPoint {
        self.pose.position.with_up(self.altitude)
    }

    pub fn current_order(&self) -> Option<(&str, u64)> {
        self.order.as_ref().map(|o| (o.order_id.as_str(), o.update_id))
    }

    pub fn is_idle(&self) -> bool {
        self.order.as_ref().is_none_or(|o| o.cursor >= o.nodes.len())
    }

    /// Replaces the route iff `order.update_id` is newer than the last one
    /// accepted for the same order id.
    pub fn accept_order(&mut self, order: &OrderMsg) -> Result<(), OrderRejection> {
        if let Some(&last) = self.accepted.get(&order.order_id) {
            if order.update_id <= last {
                return Err(OrderRejection::Stale { last });
            }
        }
        if order.validate().is_err() {
            return Err(OrderRejection::Invalid);
        }
        let mut nodes = Vec::with_capacity(order.nodes.len());
        for n in &order.nodes {
            let target = geodetic_to_enu(&self.origin, &n.position).map_err(|_| OrderRejection::Invalid)?;
            let target = if self.spec.kind.is_ground() { target.ground() } else { target };
            nodes.push(RouteNode {
                node_id: n.node_id.clone(),
                target,
                action: n.action.as_ref().map(|a| (a.action_id.clone(), a.kind, a.duration_s)),
            });
        }
        self.accepted.insert(order.order_id.clone(), order.update_id);
        // Actions already finished under an earlier update stay finished.
        let finished = match &self.order {
            Some(o) if o.order_id == order.order_id => o.finished_actions.clone(),
            _ => Vec::new(),
        };
        let mut active = ActiveOrder { order_id: order.order_id.clone(), update_id: order.update_id, nodes, cursor: 0, action_ticks: None, finished_actions: finished };
        while let Some(n) = active.nodes.get(active.cursor) {
            match &n.action {
                Some((id, _, _)) if active.finished_actions.contains(id) => active.cursor += 1,
                _ => break,
            }
        }
        self.order = Some(active);
        Ok(())
    }

    /// Advances one tick; returns a state report on publishing ticks.
    pub fn tick(&mut self, clock: &SimClock) -> Option<StateMsg> {
        let dt = clock.dt;
        let before = self.position3();
        self.driving = false;
        if let Some(order) = self.order.as_mut() {
            step_order(order, &mut self.last_node_id, &self.spec, &mut self.pose, &mut self.altitude, &mut self.driving, clock);
        }
        let after = self.position3();
        let moved = ((after.east - before.east).powi(2) + (after.north - before.north).powi(2) + (after.up - before.up).powi(2)).sqrt();
        self.distance_travelled += moved;
        self.battery = (self.battery - moved * 1e-5 - dt * 1e-5).max(0.0);
        let period = ((1.0 / self.spec.state_rate_hz) / dt - 1e-9).ceil().max(1.0) as u64;
        clock.tick.is_multiple_of(period).then(|| self.state(clock.now_ms()))
    }

    pub fn state(&self, now_ms: u64) -> StateMsg {
        let mut errors = Vec::new();
        if let Some(b) = &self.boundary {
            if self.spec.kind.is_ground() && !point_in_polygon(&self.pose.position, b) {
                errors.push(VehicleFault { code: "boundary_breach".into(), message: "vehicle left the site boundary".into() });
            }
        }
        let position = enu_to_geodetic(&self.origin, &self.position3()).unwrap_or(self.origin);
        let (order_id, order_update_id, action_states) = match &self.order {
            Some(o) => (
                Some(o.order_id.clone()),
                o.update_id,
                o.nodes
                    .iter()
                    .enumerate()
                    .filter_map(|(i, n)| {
                        let (id, kind, _) = n.action.as_ref()?;
                        let status = if o.finished_actions.contains(id) {
                            ActionStatus::Finished
                        } else if i == o.cursor && o.action_ticks.is_some() {
                            ActionStatus::Running
                        } else {
                            ActionStatus::Waiting
                        };
                        Some(ActionState { action_id: id.clone(), kind: *kind, status })
                    })
                    .collect(),
            ),
            None => (None, 0, Vec::new()),
        };
        StateMsg {
            vehicle_id: self.spec.id.clone(),
            order_id,
            order_update_id,
            position,
            yaw: self.pose.yaw,
            last_node_id: self.last_node_id.clone(),
            driving: self.driving,
            action_states,
            battery: self.battery,
            errors,
            timestamp: now_ms,
        }
    }
}

fn step_order(
    order: &mut ActiveOrder,
    last_node_id: &mut Option<String>,
    spec: &VehicleSpec,
    pose: &mut Pose2D,
    altitude: &mut f64,
    driving: &mut bool,
    clock: &SimClock,
) {
    let dt = clock.dt;
    // Consume arrivals and finished dwells, then move toward the next target.
    loop {
        let Some(node) = order.nodes.get(order.cursor) else { return };
        if let Some(left) = order.action_ticks.as_mut() {
            *left = left.saturating_sub(1);
            if *left > 0 {
                return;
            }
            let (id, _, _) = node.action.clone().expect("dwell implies action");
            order.finished_actions.push(id);
            order.action_ticks = None;
            order.cursor += 1;
            return;
        }
        let here = pose.position.with_up(*altitude);
        if distance3(&here, &node.target) > spec.arrival_tolerance {
            break;
        }
        *last_node_id = Some(node.node_id.clone());
        match &node.action {
            Some((_, _, duration)) => {
                let ticks = clock.ticks_for(*duration);
                if ticks == 0 {
                    let (id, _, _) = node.action.clone().expect("matched");
                    order.finished_actions.push(id);
                    order.cursor += 1;
                    continue;
                }
                order.action_ticks = Some(ticks);
                return;
            }
            None => order.cursor += 1,
        }
    }
    let target = order.nodes[order.cursor].target;
    *driving = true;
    if spec.kind.is_ground() {
        let (dx, dy) = (target.east - pose.position.east, target.north - pose.position.north);
        let d = dx.hypot(dy);
        let err = normalize_angle(dy.atan2(dx) - pose.yaw);
        let turn = err.clamp(-spec.turn_rate * dt, spec.turn_rate * dt);
        pose.yaw = normalize_angle(pose.yaw + turn);
        let residual = normalize_angle(dy.atan2(dx) - pose.yaw);
        let step = (spec.max_speed * residual.cos().max(0.0) * dt).min(d);
        let (s, c) = pose.yaw.sin_cos();
        pose.position = EnuPoint::planar(pose.position.east + step * c, pose.position.north + step * s);
    } else {
        let here = pose.position.with_up(*altitude);
        let d = distance3(&here, &target);
        let step = (spec.max_speed * dt).min(d);
        if d > 0.0 {
            let t = step / d;
            let next = here.lerp(target, t);
            pose.position = next.ground();
            *altitude = next.up;
        }
    }
}

fn distance3(a: &EnuPoint, b: &EnuPoint) -> f64 {
    ((a.east - b.east).powi(2) + (a.north - b.north).powi(2) + (a.up - b.up).powi(2)).sqrt()
}

/// Swath spacing of the survey pattern: the camera's north-south ground
/// extent (image height, since the camera is held with image-up north),
/// reduced by the overlap.
pub fn survey_swath(model: &ScaleModel, image: ImageSize, altitude: f64, overlap: f64) -> Result<(f64, f64), SimError> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(SimError::Overlap(overlap));
    }
    let ppm = predict_ppm(model, altitude)?;
    let (along, across) = footprint_m(image, ppm);
    Ok((across * (1.0 - overlap), along))
}

/// East-west lawnmower passes over the boundary's bounding box at `altitude`.
pub fn survey_route(map: &SiteMap, model: &ScaleModel, image: ImageSize, altitude: f64, overlap: f64) -> Result<Vec<EnuPoint>, SimError> {
    let (spacing, along) = survey_swath(model, image, altitude, overlap)?;
    let (min_e, min_n, max_e, max_n) = map.bounding_box();
    let height = max_n - min_n;
    let passes = ((height / spacing) - 1e-9).ceil().max(1.0) as usize;
    let first = min_n + (height - (passes - 1) as f64 * spacing) / 2.0;
    let inset = (along / 2.0).min((max_e - min_e) / 2.0);
    let (west, east) = (min_e + inset, max_e - inset);
    let mut route = Vec::with_capacity(passes * 2);
    for k in 0..passes {
        let n = first + k as f64 * spacing;
        let (a, b) = if k % 2 == 0 { (west, east) } else { (east, west) };
        route.push(EnuPoint::new(a, n, altitude));
        route.push(EnuPoint::new(b, n, altitude));
    }
    Ok(route)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::schema::{OrderAction, OrderNode};

    fn origin() -> GeoPoint {
        GeoPoint { lat: 40.0, lon: 29.0, alt: 0.0 }
    }

    fn node(id: &str, seq: u32, e: f64, n: f64, action: Option<OrderAction>) -> OrderNode {
        OrderNode { node_id: id.into(), sequence_id: seq, position: enu_to_geodetic(&origin(), &EnuPoint::planar(e, n)).unwrap(), action }
    }

    fn ugv(speed: f64) -> SimVehicle {
        let mut spec = VehicleSpec::defaults(VehicleId::new("ugv1").unwrap(), VehicleKind::Ugv);
        spec.max_speed = speed;
        SimVehicle::new(spec, origin(), Pose2D::new(EnuPoint::ORIGIN, 0.0)).unwrap()
    }

    #[test]
    fn straight_segment_step_length() {
        let mut v = ugv(1.0);
        v.accept_order(&OrderMsg::chain("o", 1, vec![node("a", 0, 10.0, 0.0, None)])).unwrap();
        let mut clock = SimClock::default();
        clock.advance();
        v.tick(&clock);
        assert!((v.pose.position.east - 0.1).abs() < 1e-6, "{}", v.pose.position.east);
        assert!(v.pose.position.north.abs() < 1e-6);
    }

    #[test]
    fn idle_vehicle_still_reports() {
        let mut v = ugv(1.0);
        let mut clock = SimClock::default();
        for _ in 0..3 {
            clock.advance();
            assert!(v.tick(&clock).is_some());
        }
        assert_eq!(v.pose.position, EnuPoint::ORIGIN);
    }

    #[test]
    fn waypoint_cursor_and_dwell() {
        let mut v = ugv(2.5);
        let act = OrderAction { action_id: "dump-1".into(), kind: ActionKind::Dump, duration_s: 1.0 };
        v.accept_order(&OrderMsg::chain("o", 1, vec![node("a", 0, 0.3, 0.0, None), node("b", 2, 2.0, 0.0, Some(act))])).unwrap();
        let mut clock = SimClock::default();
        let mut last = None;
        for _ in 0..40 {
            clock.advance();
            last = v.tick(&clock);
        }
        let st = last.unwrap();
        assert_eq!(st.last_node_id.as_deref(), Some("b"));
        assert_eq!(st.action_states[0].status, ActionStatus::Finished);
        assert!(v.is_idle());
    }

    #[test]
    fn stale_orders_rejected() {
        let mut v = ugv(1.0);
        let o = |u| OrderMsg::chain("o", u, vec![node("a", 0, 5.0, 0.0, None)]);
        assert!(v.accept_order(&o(2)).is_ok());
        assert_eq!(v.accept_order(&o(1)), Err(OrderRejection::Stale { last: 2 }));
        assert_eq!(v.accept_order(&o(2)), Err(OrderRejection::Stale { last: 2 }));
        assert!(v.accept_order(&o(3)).is_ok());
    }

    #[test]
    fn replacement_redirects_next_tick() {
        let mut v = ugv(1.0);
        v.accept_order(&OrderMsg::chain("o", 1, vec![node("a", 0, 10.0, 0.0, None)])).unwrap();
        let mut clock = SimClock::default();
        clock.advance();
        v.tick(&clock);
        let p0 = v.pose.position;
        v.accept_order(&OrderMsg::chain("o", 2, vec![node("z", 0, p0.east - 10.0, 0.0, None)])).unwrap();
        clock.advance();
        v.tick(&clock);
        // Target now lies straight behind: the vehicle turns in place toward it.
        assert!((v.pose.yaw.abs() - v.spec.turn_rate * clock.dt).abs() < 1e-9);
        assert!((v.pose.position.east - p0.east).abs() < 1e-9);
    }

    #[test]
    fn clock_tick_math() {
        let c = SimClock::default();
        assert_eq!(c.ticks_for(30.0), 300);
        assert_eq!(c.ticks_for(0.05), 1);
        assert!(SimClock::new(0.0, 1.0).is_err());
    }
}
