//! Broker, coordinator and simulated fleet as separate bus participants.

use std::path::Path;
use std::time::Duration;

use futures::StreamExt;
use sitefleet_client::Client;
use sitefleet_core::bus::BrokerConfig;
use sitefleet_core::coordinator::events::EventBody;
use sitefleet_core::coordinator::Reply;
use sitefleet_core::scenario::Scenario;
use sitefleet_core::tasking::OperationStatus;
use sitefleet_service::coordinator_service::{self, subscribe_fleet};
use sitefleet_service::{BrokerServer, BusClient, SimOptions, SimRole, COORDINATOR_CLIENT_ID};

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bundled_operation_completes_over_tcp() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/scenarios/openairlab_load_dump.json");
    let scenario = Scenario::load(&path).unwrap();
    let broker = BrokerServer::bind("127.0.0.1:0".parse().unwrap(), BrokerConfig::default()).await.unwrap();
    let bus_addr = broker.local_addr();

    let coordinator = sitefleet_service::coordinator_for(&scenario).unwrap();
    let mut bus = BusClient::connect(bus_addr, COORDINATOR_CLIENT_ID).await.unwrap();
    subscribe_fleet(&mut bus, &coordinator.config().manufacturer).await.unwrap();
    let task = coordinator_service::spawn(coordinator, Some(bus), Duration::from_millis(20));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let api = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(sitefleet_service::serve_api(listener, task.handle.clone(), std::future::pending()));
    let client = Client::new(api);

    let sim = SimRole::connect(&scenario, bus_addr, SimOptions { time_scale: 20.0, max_sim_time_s: Some(600.0) }).await.unwrap();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let sim_task = tokio::spawn(sim.run(async {
        let _ = stop_rx.await;
    }));

    let events = client.events(Some(1)).await.unwrap();
    let Reply::OperationSubmitted { operation, .. } = client.submit_operation(&scenario.doc.operation).await.unwrap() else { panic!() };
    let done = tokio::time::timeout(
        Duration::from_secs(90),
        Box::pin(events.filter_map(|e| async move {
            match e.unwrap().body {
                EventBody::OperationDone(op) => Some(op),
                _ => None,
            }
        }))
        .next(),
    )
    .await
    .expect("operation settles within 90 s")
    .unwrap();
    assert_eq!(done.id, operation);
    assert_eq!(done.status, OperationStatus::Done);

    let snap = client.snapshot().await.unwrap();
    assert_eq!(snap.vehicles.len(), 3);
    let _ = stop_tx.send(());
    let summary = sim_task.await.unwrap().unwrap();
    assert!(summary.orders_accepted > 0);
    assert_eq!(broker.stats().await.unwrap().expired, 0);
}
