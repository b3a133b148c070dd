use std::collections::HashMap;

use proptest::prelude::*;
use sitefleet_core::fleet::{VehicleId, VehicleKind};
use sitefleet_core::geo::{planar_distance, EnuPoint, GeoPoint, Pose2D};
use sitefleet_core::sitemap::{MapDocument, SiteMap};
use sitefleet_core::tasking::{OperationDoc, StepTicket, TaskBoard, TaskId, TaskStatus, VehicleStatus, VehicleUpdate};

fn map() -> SiteMap {
    SiteMap::from_document(MapDocument {
        origin: GeoPoint { lat: 40.0, lon: 29.0, alt: 0.0 },
        boundary: vec![[-50.0, -25.0], [50.0, -25.0], [50.0, 25.0], [-50.0, 25.0]],
        static_obstacles: vec![],
        zones: [("load".to_string(), [-40.0, 0.0]), ("dump".to_string(), [40.0, 0.0])].into(),
    })
    .unwrap()
}

const NAMES: [&str; 5] = ["exc1", "ugv1", "ugv2", "uav1", "ugv3"];
const KINDS: [VehicleKind; 5] = [VehicleKind::Excavator, VehicleKind::Ugv, VehicleKind::Ugv, VehicleKind::Uav, VehicleKind::Ugv];

#[derive(Debug, Clone)]
enum Event {
    Submit(i64),
    Assign,
    Activate(usize),
    Complete(usize),
    Error(usize),
    Reconnect(usize),
    Cancel(u64),
    Barriers,
    Move(usize, i32, i32),
}

fn event() -> impl Strategy<Value = Event> {
    prop_oneof![
        1 => (1i64..3).prop_map(Event::Submit),
        3 => Just(Event::Assign),
        3 => (0usize..5).prop_map(Event::Activate),
        6 => (0usize..5).prop_map(Event::Complete),
        1 => (0usize..5).prop_map(Event::Error),
        1 => (0usize..5).prop_map(Event::Reconnect),
        1 => (1u64..4).prop_map(Event::Cancel),
        2 => Just(Event::Barriers),
        2 => (0usize..5, -50i32..50, -25i32..25).prop_map(|(v, e, n)| Event::Move(v, e, n)),
    ]
}

fn vid(i: usize) -> VehicleId {
    VehicleId::new(NAMES[i]).unwrap()
}

fn check_invariants(b: &TaskBoard) -> Result<(), TestCaseError> {
    let mut holders: HashMap<TaskId, usize> = HashMap::new();
    for v in b.vehicles() {
        prop_assert_eq!(v.status == VehicleStatus::Busy, v.current_task.is_some(), "busy iff task for {}", v.id);
        if let Some(t) = v.current_task {
            *holders.entry(t).or_default() += 1;
            let task = b.task(t).unwrap();
            prop_assert!(!task.status.is_terminal());
            prop_assert_eq!(task.vehicle.as_ref(), Some(&v.id));
        }
    }
    prop_assert!(holders.values().all(|&n| n == 1));
    Ok(())
}

proptest! {
    #[test]
    fn random_interleavings_respect_lattice(events in prop::collection::vec(event(), 1..80)) {
        let m = map();
        let mut b = TaskBoard::new();
        for i in 0..5 {
            b.vehicle_online(vid(i), KINDS[i], Pose2D::new(EnuPoint::planar(i as f64 * 7.0 - 20.0, 3.0), 0.0));
        }
        let mut last: HashMap<TaskId, TaskStatus> = HashMap::new();
        let mut ts = 0u64;
        for ev in events {
            ts += 1;
            let mut transitions = Vec::new();
            match ev {
                Event::Submit(c) => { b.submit(OperationDoc::load_dump("load", "dump", c), &m).unwrap(); }
                Event::Assign => {
                    let idle: Vec<_> = b.vehicles().filter(|v| v.status == VehicleStatus::Idle && !v.paused).cloned().collect();
                    let pending: Vec<TaskId> = b.pending().collect();
                    let assigned = b.assign();
                    let mut used = Vec::new();
                    for tid in pending {
                        let task = b.task(tid).unwrap().clone();
                        let cands: Vec<_> = idle.iter().filter(|v| v.capabilities.contains(&task.capability) && !used.contains(&v.id)).collect();
                        let got = assigned.iter().find(|a| a.0 == tid).map(|a| a.1.clone());
                        match cands.iter().min_by(|a, b2| {
                            planar_distance(&a.pose.position, &task.anchor)
                                .total_cmp(&planar_distance(&b2.pose.position, &task.anchor))
                                .then_with(|| a.id.cmp(&b2.id))
                        }) {
                            Some(best) => {
                                prop_assert_eq!(got.as_ref(), Some(&best.id));
                                used.push(best.id.clone());
                            }
                            None => prop_assert!(got.is_none()),
                        }
                    }
                    transitions.extend(assigned.into_iter().map(|a| a.2));
                }
                Event::Activate(i) => {
                    if let Some(t) = b.vehicle(&vid(i)).and_then(|v| v.current_task) {
                        transitions.extend(b.activate(t));
                    }
                }
                Event::Complete(i) => {
                    let completed = b.vehicle(&vid(i)).and_then(|v| v.current_task).map(|t| StepTicket { task: t, step: b.task(t).unwrap().cursor });
                    let upd = VehicleUpdate { vehicle: vid(i), pose: Pose2D::new(EnuPoint::planar(0.0, 0.0), 0.0), timestamp: ts, completed, error: None };
                    transitions.extend(b.on_vehicle_state(&upd).unwrap());
                }
                Event::Error(i) => {
                    let upd = VehicleUpdate { vehicle: vid(i), pose: Pose2D::new(EnuPoint::planar(0.0, 0.0), 0.0), timestamp: ts, completed: None, error: Some("fault".into()) };
                    transitions.extend(b.on_vehicle_state(&upd).unwrap());
                }
                Event::Reconnect(i) => { b.vehicle_online(vid(i), KINDS[i], Pose2D::new(EnuPoint::planar(0.0, 0.0), 0.0)); }
                Event::Cancel(op) => {
                    if let Ok(t) = b.cancel(sitefleet_core::tasking::OperationId(op)) { transitions.extend(t); }
                }
                Event::Barriers => { b.release_barriers(); }
                Event::Move(i, e, n) => {
                    let upd = VehicleUpdate { vehicle: vid(i), pose: Pose2D::new(EnuPoint::planar(e as f64, n as f64), 0.0), timestamp: ts, completed: None, error: None };
                    transitions.extend(b.on_vehicle_state(&upd).unwrap());
                }
            }
            for tr in &transitions {
                prop_assert!(tr.from.can_become(tr.to), "{:?} -> {:?}", tr.from, tr.to);
            }
            for task in b.tasks() {
                let prev = last.insert(task.id, task.status).unwrap_or(TaskStatus::Pending);
                prop_assert!(!prev.is_terminal() || prev == task.status);
                prop_assert!(prev <= task.status, "{} went {:?} -> {:?}", task.id, prev, task.status);
            }
            check_invariants(&b)?;
        }
    }
}
