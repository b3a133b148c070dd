//! Coordinator loop behavior driven through the in-process engine.

use std::path::Path;

use sitefleet_core::coordinator::{Command, CommandError, EventBody, EventRecord, PathKind, Reply, ReplanOutcome, WorldView};
use sitefleet_core::fleet::VehicleId;
use sitefleet_core::geo::{enu_to_geodetic, EnuPoint};
use sitefleet_core::geolocator::{ObjectClass, ObjectReport};
use sitefleet_core::scenario::{Engine, Scenario};
use sitefleet_core::sitemap::blocks_polyline;
use sitefleet_core::tasking::{OperationDoc, OperationStatus, TaskStatus};

const PERIOD: u64 = 5;

fn scenario(extra_vehicles: &str) -> Scenario {
    let text = format!(
        r#"{{
          "name": "loop",
          "map": {{"origin": {{"lat": 40.7865, "lon": 29.45}},
                   "boundary": [[-50,-25],[50,-25],[50,25],[-50,25]],
                   "static_obstacles": [[[-4,-4],[4,-4],[4,4],[-4,4]]],
                   "zones": {{"load": [-30, 0], "dump": [30, 0]}}}},
          "vehicles": [{{"id": "exc1", "kind": "excavator", "start": [-25, 15]}},
                       {{"id": "ugv1", "kind": "ugv", "start": [35, -15]}}{extra_vehicles}],
          "detector": {{"profile": "YoloLC-192", "processor": "m7"}},
          "operation": {{"kind": "load_dump", "load_zone": "load", "dump_zone": "dump", "cycles": 1}},
          "seed": 11,
          "coordinator": {{"replan_check_period": {PERIOD}}}
        }}"#
    );
    Scenario::parse(&text, "loop.json", Path::new(".")).unwrap()
}

fn ugv() -> VehicleId {
    VehicleId::new("ugv1").unwrap()
}

fn run_until(e: &mut Engine, max_ticks: u64, mut done: impl FnMut(&Engine) -> bool) -> bool {
    for _ in 0..max_ticks {
        if done(e) {
            return true;
        }
        e.step().unwrap();
    }
    done(e)
}

fn events_after(e: &Engine, seq: u64) -> Vec<EventRecord> {
    e.coordinator().log().since(seq + 1)
}

fn person_report(e: &Engine, at: EnuPoint) -> ObjectReport {
    let origin = e.scenario().map.origin;
    ObjectReport { position: enu_to_geodetic(&origin, &at).unwrap(), class: ObjectClass::Person, confidence: 0.9, source_ts: e.now_ms() }
}

/// Point halfway along the remaining polyline.
fn midpoint(route: &[EnuPoint]) -> EnuPoint {
    let lens: Vec<f64> = route.windows(2).map(|w| (w[1].east - w[0].east).hypot(w[1].north - w[0].north)).collect();
    let mut half = lens.iter().sum::<f64>() / 2.0;
    for (w, len) in route.windows(2).zip(&lens) {
        if half <= *len {
            return w[0].lerp(w[1], half / len);
        }
        half -= len;
    }
    *route.last().unwrap()
}

fn replans(events: &[EventRecord]) -> Vec<(u64, ReplanOutcome, Vec<EnuPoint>)> {
    events
        .iter()
        .filter_map(|r| match &r.body {
            EventBody::Replan { path, outcome, .. } => Some((r.seq, *outcome, path.waypoints.clone())),
            _ => None,
        })
        .collect()
}

#[test]
fn fresh_snapshot_has_no_vehicles_until_connection() {
    let s = scenario("");
    let doc = s.doc.clone();
    let model = s.calibrated_model().unwrap();
    let c = sitefleet_core::coordinator::Coordinator::new(s.coordinator_config(), s.map.clone(), model).unwrap();
    assert!(c.snapshot().vehicles.is_empty());
    assert_eq!(c.log().latest_seq(), 0);

    let mut e = Engine::boot(scenario("")).unwrap();
    let snap = e.coordinator().snapshot();
    let v = &snap.vehicles[&ugv()];
    let pose = v.pose.unwrap();
    assert!((pose.position.east - 35.0).abs() < 1e-6 && (pose.position.north + 15.0).abs() < 1e-6);
    assert!(snap.seq <= e.coordinator().log().latest_seq());

    // Duplicate submissions are independent operations.
    let a = e.command(Command::SubmitOperation { doc: doc.operation.clone() }).unwrap();
    let b = e.command(Command::SubmitOperation { doc: doc.operation }).unwrap();
    match (a, b) {
        (Reply::OperationSubmitted { operation: x, tasks: tx }, Reply::OperationSubmitted { operation: y, tasks: ty }) => {
            assert_ne!(x, y);
            assert_eq!((tx.len(), ty.len()), (3, 3));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn submit_reports_field_level_errors() {
    let mut e = Engine::boot(scenario("")).unwrap();
    let err = e.command(Command::SubmitOperation { doc: OperationDoc::load_dump("pit", "dump", 1) }).unwrap_err();
    assert!(matches!(&err, CommandError::Validation(v) if v.field == "load_zone"), "{err}");
    let err = e.command(Command::SubmitOperation { doc: OperationDoc::load_dump("load", "dump", 0) }).unwrap_err();
    assert!(matches!(&err, CommandError::Validation(v) if v.field == "cycles"), "{err}");
    let err = e
        .command(Command::InjectObstacle(sitefleet_core::coordinator::InjectRequest { position: EnuPoint::planar(80.0, 0.0), radius: None, class: None }))
        .unwrap_err();
    assert!(matches!(&err, CommandError::Validation(v) if v.field == "position"), "{err}");
}

#[test]
fn report_on_route_triggers_replan_within_two_periods() {
    let mut e = Engine::new(scenario("")).unwrap();
    assert!(run_until(&mut e, 200, |e| e.coordinator().active_route(&ugv()).is_some_and(|r| r.len() >= 2)));
    // Let the vehicle get under way so the obstacle sits ahead of it.
    for _ in 0..20 {
        e.step().unwrap();
    }
    let route = e.coordinator().active_route(&ugv()).unwrap();
    let block_at = midpoint(&route);
    let mark = e.coordinator().log().latest_seq();
    let start = e.coordinator().snapshot().vehicles[&ugv()].pose.unwrap().position;
    let goal = *route.last().unwrap();
    e.publish_reports(&VehicleId::new("uav9").unwrap(), vec![person_report(&e, block_at)]).unwrap();

    let mut ticks = 0;
    while replans(&events_after(&e, mark)).is_empty() && ticks < 2 * PERIOD {
        e.step().unwrap();
        ticks += 1;
    }
    let found = replans(&events_after(&e, mark));
    assert!(!found.is_empty(), "no replan within {} ticks", 2 * PERIOD);
    let (_, outcome, waypoints) = &found[0];
    assert_eq!(*outcome, ReplanOutcome::Rerouted);
    let live = e.coordinator().live_obstacles();
    assert_eq!(live.len(), 1);
    assert!(!blocks_polyline(waypoints, &live, e.coordinator().config().clearance_floor));

    // With the obstacle live the corridor is closed; once it expires the
    // same query is shorter again.
    let preview = |e: &mut Engine| match e.command(Command::PlanPreview { start, goal }).unwrap() {
        Reply::Plan { path } => path.length,
        other => panic!("{other:?}"),
    };
    let blocked = preview(&mut e);
    let ttl_ticks = e.coordinator().config().registry.ttl_ms / 100 + 2;
    for _ in 0..ttl_ticks {
        e.step().unwrap();
    }
    assert!(e.coordinator().live_obstacles().is_empty());
    assert!(events_after(&e, mark).iter().any(|r| matches!(r.body, EventBody::ObstacleExpired { .. })));
    let reopened = preview(&mut e);
    assert!(reopened < blocked - 1e-6, "reopened {reopened} vs blocked {blocked}");
    assert!(e.breaches().is_empty(), "{:?}", e.breaches());
}

#[test]
fn replan_sequence_is_deterministic() {
    let trace = || {
        let mut e = Engine::new(scenario("")).unwrap();
        run_until(&mut e, 200, |e| e.coordinator().active_route(&ugv()).is_some());
        for _ in 0..20 {
            e.step().unwrap();
        }
        let at = midpoint(&e.coordinator().active_route(&ugv()).unwrap());
        e.publish_reports(&VehicleId::new("uav9").unwrap(), vec![person_report(&e, at)]).unwrap();
        for _ in 0..300 {
            e.step().unwrap();
        }
        serde_json::to_string(&e.coordinator().log().since(0)).unwrap()
    };
    assert_eq!(trace(), trace());
}

#[test]
fn obstacle_off_route_causes_no_replan() {
    let mut e = Engine::new(scenario("")).unwrap();
    run_until(&mut e, 200, |e| e.coordinator().active_route(&ugv()).is_some());
    let mark = e.coordinator().log().latest_seq();
    // Far corner, well away from both vehicles' routes.
    e.publish_reports(&VehicleId::new("uav9").unwrap(), vec![person_report(&e, EnuPoint::planar(-45.0, 21.0))]).unwrap();
    for _ in 0..4 * PERIOD {
        e.step().unwrap();
    }
    let events = events_after(&e, mark);
    assert!(events.iter().any(|r| matches!(r.body, EventBody::ObstacleAdded(_))));
    assert!(replans(&events).is_empty());
}

#[test]
fn update_ids_increase_per_order() {
    let mut e = Engine::new(scenario("")).unwrap();
    run_until(&mut e, 200, |e| e.coordinator().active_route(&ugv()).is_some());
    let reporter = VehicleId::new("uav9").unwrap();
    for _ in 0..3 {
        for _ in 0..15 {
            e.step().unwrap();
        }
        if let Some(route) = e.coordinator().active_route(&ugv()) {
            let at = midpoint(&route);
            e.publish_reports(&reporter, vec![person_report(&e, at)]).unwrap();
        }
    }
    for _ in 0..50 {
        e.step().unwrap();
    }
    let mut last: std::collections::HashMap<String, u64> = Default::default();
    let mut rerouted = 0;
    for r in e.coordinator().log().since(0) {
        let path = match &r.body {
            EventBody::PlanIssued(p) => p,
            EventBody::Replan { path, .. } => {
                rerouted += 1;
                path
            }
            _ => continue,
        };
        if let Some(prev) = last.insert(path.order_id.clone(), path.update_id) {
            assert!(path.update_id > prev, "{} went {prev} -> {}", path.order_id, path.update_id);
        }
    }
    assert!(rerouted >= 2);
    assert!(e.breaches().is_empty());
}

#[test]
fn snapshot_equals_fold_of_events() {
    let mut e = Engine::new(scenario(r#", {"id": "uav1", "kind": "uav", "start": [-45, 20]}"#)).unwrap();
    for _ in 0..400 {
        e.step().unwrap();
    }
    let at = e.coordinator().active_route(&ugv()).map(|r| midpoint(&r)).unwrap_or(EnuPoint::planar(10.0, 10.0));
    e.publish_reports(&VehicleId::new("uav1").unwrap(), vec![person_report(&e, at)]).unwrap();
    for _ in 0..200 {
        e.step().unwrap();
    }
    let json = serde_json::to_string(&e.coordinator().log().since(0)).unwrap();
    let records: Vec<EventRecord> = serde_json::from_str(&json).unwrap();
    let mut folded = WorldView::default();
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.seq, i as u64 + 1, "seq must be gapless");
        folded.apply(r);
    }
    assert_eq!(folded, e.coordinator().snapshot());

    // A mid-run snapshot plus the tail reconstructs the end state too.
    let mut partial = WorldView::default();
    for r in &records[..records.len() / 2] {
        partial.apply(r);
    }
    for r in e.coordinator().log().since(partial.seq + 1) {
        partial.apply(&r);
    }
    assert_eq!(partial, e.coordinator().snapshot());
}

#[test]
fn unreachable_goal_halts_then_fails_after_timeout() {
    let mut e = Engine::boot(scenario(r#", {"id": "uav1", "kind": "uav", "start": [-45, 20]}"#)).unwrap();
    let load = e.scenario().map.zone("load").unwrap();
    e.command(Command::InjectObstacle(sitefleet_core::coordinator::InjectRequest { position: load, radius: Some(2.0), class: None })).unwrap();
    let op = match e.command(Command::SubmitOperation { doc: OperationDoc::load_dump("load", "dump", 1) }).unwrap() {
        Reply::OperationSubmitted { operation, .. } => operation,
        other => panic!("{other:?}"),
    };
    for _ in 0..5 {
        e.step().unwrap();
    }
    let halts = e
        .coordinator()
        .log()
        .since(0)
        .into_iter()
        .filter(|r| matches!(&r.body, EventBody::PlanIssued(p) if p.kind == PathKind::Halt))
        .count();
    assert!(halts >= 1);
    let timeout = e.coordinator().config().unreachable_timeout_ms;
    let timed_out = |e: &Engine| {
        let board = e.coordinator().board();
        board.operation(op).unwrap().tasks.iter().any(|t| board.task(*t).unwrap().failure.as_deref() == Some("no route within timeout"))
    };
    assert!(run_until(&mut e, timeout / 100 + 50, timed_out));
    assert!(e.now_ms() >= timeout && e.now_ms() <= timeout + 1000, "failed at {} ms", e.now_ms());
    // The haul task waits on the excavator's load, so it fails with it; the
    // survey still finishes before the operation settles.
    assert!(run_until(&mut e, 3000, |e| e.operation_status() == Some(OperationStatus::Failed)));
    let snap = e.coordinator().snapshot();
    assert_eq!(snap.operations[&op].status, OperationStatus::Failed);
    assert_eq!(snap.tasks.values().filter(|t| t.status == TaskStatus::Failed).count(), 2);
}

#[test]
fn pause_halts_and_resume_redispatches() {
    let mut e = Engine::new(scenario("")).unwrap();
    run_until(&mut e, 200, |e| e.coordinator().active_route(&ugv()).is_some());
    for _ in 0..20 {
        e.step().unwrap();
    }
    let mark = e.coordinator().log().latest_seq();
    e.command(Command::PauseVehicle { vehicle: ugv() }).unwrap();
    for _ in 0..30 {
        e.step().unwrap();
    }
    let held = e.fleet().vehicle(&ugv()).unwrap().pose.position;
    for _ in 0..30 {
        e.step().unwrap();
    }
    let still = e.fleet().vehicle(&ugv()).unwrap().pose.position;
    assert!((held.east - still.east).hypot(held.north - still.north) < 1e-9);
    assert!(events_after(&e, mark).iter().any(|r| matches!(&r.body, EventBody::PlanIssued(p) if p.kind == PathKind::Halt)));
    assert!(e.coordinator().snapshot().vehicles[&ugv()].paused);

    let mark = e.coordinator().log().latest_seq();
    e.command(Command::ResumeVehicle { vehicle: ugv() }).unwrap();
    e.step().unwrap();
    assert!(events_after(&e, mark).iter().any(|r| matches!(&r.body, EventBody::PlanIssued(p) if p.kind == PathKind::Navigate && p.vehicle == ugv())));
}

#[test]
fn cancel_fails_tasks_and_settles_operation() {
    let mut e = Engine::new(scenario("")).unwrap();
    for _ in 0..30 {
        e.step().unwrap();
    }
    let op = e.operation().unwrap();
    match e.command(Command::CancelOperation { operation: op }).unwrap() {
        Reply::OperationCancelled { failed_tasks, .. } => assert_eq!(failed_tasks.len(), 3),
        other => panic!("{other:?}"),
    }
    assert_eq!(e.operation_status(), Some(OperationStatus::Cancelled));
    let snap = e.coordinator().snapshot();
    assert_eq!(snap.operations[&op].status, OperationStatus::Cancelled);
    assert!(snap.tasks.values().all(|t| t.status == TaskStatus::Failed));
    assert!(snap.paths.get(&ugv()).is_some_and(|p| p.kind == PathKind::Halt));
}
