//! Supervisor API against a coordinator loop with no bus attached.

use std::path::Path;
use std::time::Duration;

use futures::StreamExt;
use sitefleet_client::{Client, ClientError};
use sitefleet_core::coordinator::events::{EventBody, EventRecord, WorldView};
use sitefleet_core::coordinator::{CommandError, InjectRequest, Reply};
use sitefleet_core::geo::EnuPoint;
use sitefleet_core::scenario::Scenario;
use sitefleet_core::tasking::OperationDoc;
use sitefleet_service::coordinator_service::{self, DEFAULT_TICK};

async fn start() -> Client {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/scenarios/openairlab_load_dump.json");
    let scenario = Scenario::load(&path).unwrap();
    let coordinator = sitefleet_service::coordinator_for(&scenario).unwrap();
    let task = coordinator_service::spawn(coordinator, None, DEFAULT_TICK);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(sitefleet_service::serve_api(listener, task.handle, std::future::pending()));
    Client::new(format!("http://{addr}"))
}

fn load_dump(load: &str) -> OperationDoc {
    serde_json::from_value(serde_json::json!({ "kind": "load_dump", "load_zone": load, "dump_zone": "dump", "cycles": 1 })).unwrap()
}

async fn all_events(c: &Client) -> Vec<EventRecord> {
    c.events_batch(1, Some(10_000), None).await.unwrap().events
}

#[tokio::test]
async fn fresh_snapshot_is_empty() {
    let c = start().await;
    assert_eq!(c.health().await.unwrap()["status"], "ok");
    let snap = c.snapshot().await.unwrap();
    assert!(snap.vehicles.is_empty());
    assert_eq!(snap.seq, 0);
}

#[tokio::test]
async fn validation_errors_name_the_field() {
    let c = start().await;
    match c.submit_operation(&load_dump("quarry")).await {
        Err(e @ ClientError::Command { status: 400, error: CommandError::Validation(_) }) => {
            assert_eq!(e.exit_code(), 2);
            let ClientError::Command { error: CommandError::Validation(v), .. } = e else { unreachable!() };
            assert_eq!(v.field, "load_zone");
        }
        other => panic!("{other:?}"),
    }
    match c.pause_vehicle("ghost").await {
        Err(ClientError::Command { status: 404, .. }) => {}
        other => panic!("{other:?}"),
    }
    match c.cancel_operation(sitefleet_core::tasking::OperationId(42)).await {
        Err(ClientError::Command { status: 404, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn commands_round_trip_and_fold_into_the_snapshot() {
    let c = start().await;
    let Reply::OperationSubmitted { tasks, .. } = c.submit_operation(&load_dump("load")).await.unwrap() else { panic!() };
    assert_eq!(tasks.len(), 3);
    let req = InjectRequest { position: EnuPoint::planar(0.0, 4.0), radius: None, class: None };
    let Reply::ObstacleInjected { obstacle } = c.inject_obstacle(&req).await.unwrap() else { panic!() };
    let Reply::Plan { path } = c.plan(EnuPoint::planar(-40.0, 4.0), EnuPoint::planar(40.0, 4.0)).await.unwrap() else { panic!() };
    assert!(path.waypoints.len() >= 2);
    let Reply::ObstacleCleared { .. } = c.clear_obstacle(obstacle.id).await.unwrap() else { panic!() };

    let events = all_events(&c).await;
    assert!(events.windows(2).all(|w| w[1].seq == w[0].seq + 1), "seq gapless");
    // Commands issued before the first tick still carry wall time.
    assert!(events.iter().all(|e| e.timestamp > 0), "{:?}", events[0]);
    assert!(events.iter().any(|e| matches!(e.body, EventBody::ObstacleAdded(_))));
    let mut fold = WorldView::default();
    for e in &events {
        fold.apply(e);
    }
    assert_eq!(fold, c.snapshot().await.unwrap());
}

#[tokio::test]
async fn stream_resumes_without_gaps_and_subscribers_agree() {
    let c = start().await;
    let s1 = c.events(Some(1)).await.unwrap();
    let s2 = c.events(Some(1)).await.unwrap();
    for i in 0..6 {
        let req = InjectRequest { position: EnuPoint::planar(-30.0 + 10.0 * i as f64, -2.0), radius: Some(1.0), class: None };
        c.inject_obstacle(&req).await.unwrap();
    }
    let total = all_events(&c).await.len();
    assert!(total >= 6);
    let take = |s| async move {
        tokio::time::timeout(Duration::from_secs(5), futures::StreamExt::take(s, total).map(Result::unwrap).collect::<Vec<EventRecord>>())
            .await
            .unwrap()
    };
    let (a, b) = (take(Box::pin(s1)).await, take(Box::pin(s2)).await);
    assert_eq!(a, b);

    // Drop after three events, reconnect from the last seen seq + 1.
    let mut first: Vec<EventRecord> = Box::pin(c.events(Some(1)).await.unwrap()).take(3).map(Result::unwrap).collect().await;
    let resume = first.last().unwrap().seq + 1;
    c.inject_obstacle(&InjectRequest { position: EnuPoint::planar(35.0, -20.0), radius: Some(1.0), class: None }).await.unwrap();
    let now_total = all_events(&c).await.len();
    let rest: Vec<EventRecord> = Box::pin(c.events(Some(resume)).await.unwrap()).take(now_total - 3).map(Result::unwrap).collect().await;
    first.extend(rest);
    assert_eq!(first, all_events(&c).await);
}

#[tokio::test]
async fn long_poll_waits_for_the_next_event() {
    let c = start().await;
    let next = c.events_batch(1, None, None).await.unwrap();
    assert!(next.events.is_empty());
    let waiter = {
        let c = c.clone();
        tokio::spawn(async move { c.events_batch(next.next_seq, None, Some(5000)).await.unwrap() })
    };
    tokio::time::sleep(Duration::from_millis(100)).await;
    c.inject_obstacle(&InjectRequest { position: EnuPoint::planar(0.0, 0.0), radius: None, class: None }).await.unwrap();
    let got = waiter.await.unwrap();
    assert!(!got.events.is_empty());
    assert_eq!(got.next_seq, got.events.last().unwrap().seq + 1);
}

#[tokio::test]
async fn malformed_body_is_a_validation_error() {
    let c = start().await;
    let resp = raw_post(&c, "/v1/operations", "{\"kind\": 3}").await;
    assert_eq!(resp.0, 400);
    assert!(resp.1.contains("\"field\":\"body\""), "{}", resp.1);
}

/// Minimal HTTP/1.1 POST so this test does not need its own HTTP dependency.
async fn raw_post(c: &Client, path: &str, body: &str) -> (u16, String) {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let host = c.base_url().trim_start_matches("http://").to_string();
    let mut s = tokio::net::TcpStream::connect(&host).await.unwrap();
    let req = format!(
        "POST {path} HTTP/1.1\r\nHost: {host}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    s.write_all(req.as_bytes()).await.unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).await.unwrap();
    let status = out.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, out)
}
