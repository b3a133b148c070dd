//! Acceptance checks. Prints one `[PASS]` or `[FAIL]` line per criterion and
//! exits non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sitefleet_core::bus::broker::BrokerConfig;
use sitefleet_core::bus::local::{FaultInjector, LocalBus};
use sitefleet_core::bus::{Payload, Qos};
use sitefleet_core::coordinator::{Command, EventBody, Reply, ReplanOutcome};
use sitefleet_core::fleet::VehicleId;
use sitefleet_core::geo::{enu_to_geodetic, geodetic_to_enu, EnuPoint, GeoPoint};
use sitefleet_core::geolocator::{ObjectClass, ObjectReport};
use sitefleet_core::planner::{self, build_graph, plan, ClearanceField, PlannerConfig};
use sitefleet_core::scale_model::{degree_study, study_fit_config, PinholeGenerator, STUDY_ALTITUDES};
use sitefleet_core::scenario::{Engine, RunOutcome, Scenario};
use sitefleet_core::sitemap::blocks_polyline;

/// Ties in the degree study are judged at the report's precision.
const TIE_CM: f64 = 0.1;
const STUDY_SEEDS: u64 = 50;
const SCENES: u64 = 100;
const CLEARANCE_SLACK_M: f64 = 0.5;
const REPLAN_PERIOD: u64 = 5;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn within(limit: Duration, took: Duration, v: Verdict) -> Verdict {
    let ok = took < limit;
    let mut detail = format!("{}; {:.2} s (limit {} s)", v.detail, took.as_secs_f64(), limit.as_secs());
    if !ok {
        detail.push_str(" over time");
    }
    Verdict { pass: v.pass && ok, detail }
}

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/scenarios/openairlab_load_dump.json")
}

fn meridian_arc(lat0_deg: f64, lat1_deg: f64) -> f64 {
    let a = 6_378_137.0_f64;
    let f = 1.0 / 298.257_223_563;
    let e2 = f * (2.0 - f);
    let m = |phi: f64| a * (1.0 - e2) / (1.0 - e2 * phi.sin().powi(2)).powf(1.5);
    let (p0, p1) = (lat0_deg.to_radians(), lat1_deg.to_radians());
    let n = 1000;
    let h = (p1 - p0) / n as f64;
    let mut sum = m(p0) + m(p1);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * m(p0 + i as f64 * h);
    }
    sum * h / 3.0
}

fn geodesy() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_deg = 0.0_f64;
    for _ in 0..10_000 {
        let origin = GeoPoint::new(rng.random_range(-80.0..80.0), rng.random_range(-179.0..179.0), rng.random_range(-100.0..3000.0)).unwrap();
        // Uniform in a 1 km disc.
        let r = 1000.0 * rng.random::<f64>().sqrt();
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let offset = EnuPoint::new(r * t.cos(), r * t.sin(), rng.random_range(-50.0..50.0));
        let g = enu_to_geodetic(&origin, &offset).unwrap();
        let back = enu_to_geodetic(&origin, &geodetic_to_enu(&origin, &g).unwrap()).unwrap();
        worst_deg = worst_deg.max((back.lat - g.lat).abs()).max((back.lon - g.lon).abs());
    }
    let origin = GeoPoint::new(0.0, 0.0, 0.0).unwrap();
    let north = geodetic_to_enu(&origin, &GeoPoint::new(0.001, 0.0, 0.0).unwrap()).unwrap().north;
    let arc = meridian_arc(0.0, 0.001);
    let arc_err = (north - arc).abs();
    let pass = worst_deg < 1e-9 && arc_err < 0.01 && (arc - 110.574).abs() < 0.001;
    within(
        Duration::from_secs(1),
        started.elapsed(),
        Verdict::new(pass, format!("10000 round trips, worst {worst_deg:.2e} deg; 0.001 deg north = {north:.4} m vs arc {arc:.4} m ({:.2} mm)", arc_err * 1000.0)),
    )
}

fn scale_study() -> Verdict {
    let started = Instant::now();
    let generator = PinholeGenerator::default();
    let cols = STUDY_ALTITUDES.len();
    let mut sum = [[0.0; 4]; 2];
    let mut per_seed_cubic_le_linear = 0;
    let mut cubic_best = 0;
    for seed in 1..=STUDY_SEEDS {
        let training = generator.training(seed);
        let heldout = generator.heldout(&STUDY_ALTITUDES, seed);
        let table = match degree_study(&training.samples, &heldout, &[1, 2, 3, 4], &study_fit_config(&generator, seed)) {
            Ok(t) => t,
            Err(e) => return Verdict::new(false, format!("seed {seed}: {e}")),
        };
        let linear = &table.row(1).unwrap().rmse_cm;
        let cubic = &table.row(3).unwrap().rmse_cm;
        for c in 0..cols {
            sum[0][c] += linear[c];
            sum[1][c] += cubic[c];
        }
        if (0..cols).all(|c| cubic[c] <= linear[c]) {
            per_seed_cubic_le_linear += 1;
        }
        if (0..cols).filter(|&c| table.is_best_or_tied(3, c, TIE_CM)).count() >= 3 {
            cubic_best += 1;
        }
    }
    let n = STUDY_SEEDS as f64;
    let mean = |d: usize| -> Vec<String> { sum[d].iter().map(|s| format!("{:.2}", s / n)).collect() };
    let mean_ok = (0..cols).all(|c| sum[1][c] <= sum[0][c]);
    let needed = (0.8 * n).ceil() as u64;
    let pass = mean_ok && cubic_best >= needed;
    within(
        Duration::from_secs(30),
        started.elapsed(),
        Verdict::new(
            pass,
            format!(
                "mean RMSE cm cubic [{}] vs linear [{}] ({}); cubic <= linear at every altitude in {per_seed_cubic_le_linear}/{STUDY_SEEDS} seeds; \
                 cubic best-or-tied (tie {TIE_CM} cm) at >=3 altitudes in {cubic_best}/{STUDY_SEEDS} seeds, need {needed}",
                mean(1).join(", "),
                mean(0).join(", "),
                if mean_ok { "ok" } else { "violated" }
            ),
        ),
    )
}

fn dijkstra_cost(aug: &planner::AugmentedGraph) -> Option<f64> {
    let mut g = UnGraph::<(), f64>::new_undirected();
    let ids: Vec<NodeIndex> = aug.positions.iter().map(|_| g.add_node(())).collect();
    for (a, adj) in aug.adjacency.iter().enumerate() {
        for &(b, w) in adj {
            if a < b {
                g.add_edge(ids[a], ids[b], w);
            }
        }
    }
    dijkstra(&g, ids[aug.start], Some(ids[aug.goal]), |e| *e.weight()).get(&ids[aug.goal]).copied()
}

fn planner_scenes() -> (Verdict, Verdict) {
    let started = Instant::now();
    let cfg = PlannerConfig::default();
    let mut planned = 0;
    let mut violations = Vec::new();
    let mut worst = f64::INFINITY;
    let mut mismatches = Vec::new();
    for seed in 0..SCENES {
        let scene = common::random_scene(seed, cfg.clearance_floor);
        let graph = build_graph(&scene.map, &[], &cfg, 1).unwrap();
        let field = ClearanceField::new(&scene.map, &[]);
        if let Ok(aug) = planner::augment(&graph, &field, scene.start, scene.goal, &cfg) {
            let astar = aug.astar_traced(&mut Vec::new()).map(|(_, c)| c);
            if astar != dijkstra_cost(&aug) {
                mismatches.push(seed);
            }
        }
        if let Ok(out) = plan(&graph, &scene.map, &[], scene.start, scene.goal, &cfg) {
            planned += 1;
            let c = common::sampled_min_clearance(&out.path.waypoints, &scene.map, &[], 0.05);
            worst = worst.min(c);
            if c < cfg.clearance_floor - CLEARANCE_SLACK_M {
                violations.push(seed);
            }
        }
    }
    let took = started.elapsed();
    let safety = within(
        Duration::from_secs(60),
        took,
        Verdict::new(
            violations.is_empty() && planned > 0,
            format!(
                "{planned}/{SCENES} scenes planned, worst sampled clearance {worst:.3} m (floor {} m, slack {CLEARANCE_SLACK_M} m), violations {violations:?}",
                cfg.clearance_floor
            ),
        ),
    );
    let optimality = Verdict::new(mismatches.is_empty(), format!("A* cost == Dijkstra cost on {SCENES} scenes, mismatches {mismatches:?}"));
    (safety, optimality)
}

fn loop_scenario() -> Scenario {
    let text = format!(
        r#"{{
          "name": "replan-loop",
          "map": {{"origin": {{"lat": 40.7865, "lon": 29.45}},
                   "boundary": [[-50,-25],[50,-25],[50,25],[-50,25]],
                   "static_obstacles": [[[-4,-4],[4,-4],[4,4],[-4,4]]],
                   "zones": {{"load": [-30, 0], "dump": [30, 0]}}}},
          "vehicles": [{{"id": "exc1", "kind": "excavator", "start": [-25, 15]}},
                       {{"id": "ugv1", "kind": "ugv", "start": [35, -15]}}],
          "detector": {{"profile": "YoloLC-192", "processor": "m7"}},
          "operation": {{"kind": "load_dump", "load_zone": "load", "dump_zone": "dump", "cycles": 1}},
          "seed": 11,
          "coordinator": {{"replan_check_period": {REPLAN_PERIOD}}}
        }}"#
    );
    Scenario::parse(&text, "replan-loop.json", Path::new(".")).unwrap()
}

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

/// Drives the scripted replan and returns the verdict plus the full event log.
fn replan_trace() -> Result<(String, String), String> {
    let ugv = VehicleId::new("ugv1").unwrap();
    let mut e = Engine::new(loop_scenario()).map_err(|e| e.to_string())?;
    let mut ticks = 0;
    while !e.coordinator().active_route(&ugv).is_some_and(|r| r.len() >= 2) {
        if ticks == 200 {
            return Err("UGV never received a route".into());
        }
        e.step().map_err(|e| e.to_string())?;
        ticks += 1;
    }
    for _ in 0..20 {
        e.step().map_err(|e| e.to_string())?;
    }
    let route = e.coordinator().active_route(&ugv).unwrap();
    let at = midpoint(&route);
    let start = e.coordinator().snapshot().vehicles[&ugv].pose.unwrap().position;
    let goal = *route.last().unwrap();
    let mark = e.coordinator().log().latest_seq();
    let report = ObjectReport {
        position: enu_to_geodetic(&e.scenario().map.origin, &at).unwrap(),
        class: ObjectClass::Person,
        confidence: 0.9,
        source_ts: e.now_ms(),
    };
    e.publish_reports(&VehicleId::new("uav9").unwrap(), vec![report]).map_err(|e| e.to_string())?;

    let find_replan = |e: &Engine| {
        e.coordinator().log().since(mark + 1).into_iter().find_map(|r| match r.body {
            EventBody::Replan { path, outcome, .. } => Some((outcome, path.waypoints)),
            _ => None,
        })
    };
    let mut waited = 0;
    while find_replan(&e).is_none() && waited < 2 * REPLAN_PERIOD {
        e.step().map_err(|e| e.to_string())?;
        waited += 1;
    }
    let (outcome, waypoints) = find_replan(&e).ok_or(format!("no replan within {} ticks", 2 * REPLAN_PERIOD))?;
    if outcome != ReplanOutcome::Rerouted {
        return Err(format!("replan outcome {outcome:?}"));
    }
    let live = e.coordinator().live_obstacles();
    if blocks_polyline(&waypoints, &live, e.coordinator().config().clearance_floor) {
        return Err("new route is blocked".into());
    }

    let preview = |e: &mut Engine| match e.command(Command::PlanPreview { start, goal }) {
        Ok(Reply::Plan { path }) => Ok(path.length),
        other => Err(format!("preview: {other:?}")),
    };
    let blocked = preview(&mut e)?;
    let ttl_ticks = e.coordinator().config().registry.ttl_ms / 100 + 2;
    for _ in 0..ttl_ticks {
        e.step().map_err(|e| e.to_string())?;
    }
    if !e.coordinator().live_obstacles().is_empty() {
        return Err("obstacle did not expire".into());
    }
    let reopened = preview(&mut e)?;
    if reopened >= blocked - 1e-6 {
        return Err(format!("plan length {reopened:.2} m after expiry, {blocked:.2} m while blocked"));
    }
    let detail = format!(
        "replan after {waited} ticks (limit {}), route clear of {} live obstacle(s), preview {blocked:.2} m -> {reopened:.2} m after expiry",
        2 * REPLAN_PERIOD,
        live.len()
    );
    Ok((detail, serde_json::to_string(&e.coordinator().log().since(0)).unwrap()))
}

fn replan_loop() -> Verdict {
    match (replan_trace(), replan_trace()) {
        (Ok((detail, a)), Ok((_, b))) => {
            let same = a == b;
            Verdict::new(same, format!("{detail}; event logs {}", if same { "identical across runs" } else { "differ across runs" }))
        }
        (Err(e), _) | (_, Err(e)) => Verdict::new(false, e),
    }
}

fn end_to_end() -> Verdict {
    let scenario = Scenario::load(&bundled()).unwrap();
    let scale = scenario.doc.sim.time_scale;
    let started = Instant::now();
    let mut e = Engine::new(scenario).unwrap();
    let outcome = e.run(true).unwrap();
    let took = started.elapsed();
    let m = e.metrics();
    let pass = outcome == RunOutcome::Completed
        && (150.0..=350.0).contains(&m.combined_ground_distance_m)
        && (m.reports.fps - 0.85).abs() < 1e-12
        && m.reports.actors_reported == m.reports.actors_total
        && m.reports.actors_total == 2
        && m.replans.triggered >= 1;
    within(
        Duration::from_secs(60),
        took,
        Verdict::new(
            pass,
            format!(
                "{} at time scale {scale}, {:.1} s simulated; distance {:.1} m (band 150-350), detector {} fps, pedestrians reported {}/{}, replans {}",
                outcome.label(),
                m.sim_time_s,
                m.combined_ground_distance_m,
                m.reports.fps,
                m.reports.actors_reported,
                m.reports.actors_total,
                m.replans.triggered
            ),
        ),
    )
}

fn bus_qos() -> Verdict {
    let started = Instant::now();
    let mut bus = LocalBus::new(BrokerConfig::default()).with_faults(FaultInjector::new(0.3, 99, true));
    for c in ["p1", "p2", "s"] {
        bus.connect(c).unwrap();
    }
    bus.subscribe("s", "site/#", Qos::AtLeastOnce).unwrap();
    let mut sent: Vec<(&str, u64)> = Vec::new();
    for i in 0..1000u64 {
        let p = if i % 2 == 0 { "p1" } else { "p2" };
        let id = bus.publish(p, "site/orders", Qos::AtLeastOnce, Payload::Raw(serde_json::json!(i))).unwrap();
        sent.push((p, id));
    }
    let mut now = 0;
    while bus.pending_count() > 0 {
        now += 1000;
        bus.advance_to(now).unwrap();
    }
    let got = bus.drain("s");
    let st = bus.client_stats("s").unwrap();
    let broker = bus.broker_stats();
    let ordered = ["p1", "p2"].iter().all(|p| {
        let ids: Vec<u64> = got.iter().filter(|e| e.publisher == *p).map(|e| e.message_id).collect();
        let want: Vec<u64> = sent.iter().filter(|s| s.0 == *p).map(|s| s.1).collect();
        ids == want
    });
    let qos1 = got.len() == 1000 && broker.expired == 0 && st.unflagged_repeats == 0 && st.out_of_order == 0 && ordered;

    let mut reordered = 0;
    let mut qos0_received = 0;
    for seed in 0..20 {
        let mut bus = LocalBus::new(BrokerConfig::default()).with_faults(FaultInjector::new(0.3, seed, true));
        bus.connect("p").unwrap();
        bus.connect("s").unwrap();
        bus.subscribe("s", "q", Qos::AtMostOnce).unwrap();
        for i in 0..1000u64 {
            bus.publish("p", "q", Qos::AtMostOnce, Payload::Raw(serde_json::json!(i))).unwrap();
        }
        let ids: Vec<u64> = bus.drain("s").iter().map(|e| e.message_id).collect();
        qos0_received += ids.len();
        reordered += ids.windows(2).filter(|w| w[0] >= w[1]).count();
    }
    within(
        Duration::from_secs(30),
        started.elapsed(),
        Verdict::new(
            qos1 && reordered == 0,
            format!(
                "QoS1 at 30% drop: {}/1000 delivered, {} redeliveries, {} flagged duplicates, {} unflagged repeats, {} expired, order {}; \
                 QoS0: {qos0_received}/20000 delivered over 20 seeds, {reordered} reorderings",
                got.len(),
                broker.redeliveries,
                st.flagged_duplicates,
                st.unflagged_repeats,
                broker.expired,
                if ordered { "preserved" } else { "broken" }
            ),
        ),
    )
}

fn determinism() -> Verdict {
    let metrics = |s: Scenario| {
        let mut e = Engine::new(s).unwrap();
        e.run(false).unwrap();
        serde_json::to_string_pretty(&e.metrics()).unwrap()
    };
    let lossy = || {
        let mut s = Scenario::load(&bundled()).unwrap();
        s.doc.sim.bus_drop_rate = 0.2;
        s
    };
    type Make = Box<dyn Fn() -> Scenario>;
    let cases: [(&str, Make); 3] = [
        ("bundled", Box::new(|| Scenario::load(&bundled()).unwrap())),
        ("bundled with 20% bus drop", Box::new(lossy)),
        ("replan loop", Box::new(loop_scenario)),
    ];
    let mut differing = Vec::new();
    for (name, make) in &cases {
        if metrics(make()) != metrics(make()) {
            differing.push(*name);
        }
    }
    Verdict::new(differing.is_empty(), format!("{} scenarios run twice, differing reports {differing:?}", cases.len()))
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    results.push(("geodesy", guarded(geodesy)));
    results.push(("scale-model study", guarded(scale_study)));
    match catch_unwind(planner_scenes) {
        Ok((safety, optimality)) => {
            results.push(("planner safety", safety));
            results.push(("planner optimality", optimality));
        }
        Err(_) => {
            results.push(("planner safety", Verdict::new(false, "panicked")));
            results.push(("planner optimality", Verdict::new(false, "panicked")));
        }
    }
    results.push(("replan loop", guarded(replan_loop)));
    results.push(("end-to-end demonstrator", guarded(end_to_end)));
    results.push(("bus QoS", guarded(bus_qos)));
    results.push(("determinism", guarded(determinism)));

    println!();
    for (name, v) in &results {
        println!("[{}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed = results.iter().filter(|(_, v)| !v.pass).count();
    println!("\nacceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
