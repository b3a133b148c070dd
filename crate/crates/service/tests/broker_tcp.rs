//! Broker semantics over real sockets.

use std::time::Duration;

use sitefleet_core::bus::{BrokerConfig, Payload, Qos};
use sitefleet_service::{BrokerServer, BusClient, BusClientError};
use tokio::io::{AsyncReadExt, AsyncWriteExt};

async fn broker() -> BrokerServer {
    BrokerServer::bind("127.0.0.1:0".parse().unwrap(), BrokerConfig::default()).await.unwrap()
}

fn raw(n: u64) -> Payload {
    Payload::Raw(serde_json::json!({ "n": n }))
}

async fn recv(c: &mut BusClient) -> sitefleet_core::bus::Envelope {
    tokio::time::timeout(Duration::from_secs(5), c.recv()).await.expect("delivery in time").expect("open connection")
}

#[tokio::test]
async fn qos1_in_order_across_wildcard() {
    let b = broker().await;
    let mut sub = BusClient::connect(b.local_addr(), "observer").await.unwrap();
    sub.subscribe("fleet/v1/sim/+/state", Qos::AtLeastOnce).await.unwrap();
    let mut publisher = BusClient::connect(b.local_addr(), "ugv1").await.unwrap();
    for n in 0..200 {
        publisher.publish("fleet/v1/sim/ugv1/state", Qos::AtLeastOnce, raw(n), n).unwrap();
    }
    publisher.publish("fleet/v1/sim/ugv1/order", Qos::AtLeastOnce, raw(999), 0).unwrap();
    for n in 0..200 {
        let env = recv(&mut sub).await;
        assert_eq!(env.payload, raw(n));
        assert_eq!(env.publisher, "ugv1");
    }
    assert!(tokio::time::timeout(Duration::from_millis(200), sub.recv()).await.is_err(), "non-matching topic delivered");
    let stats = b.stats().await.unwrap();
    assert_eq!(stats.deliveries, 200);
    assert_eq!(stats.expired, 0);
}

#[tokio::test]
async fn duplicate_client_id_is_rejected() {
    let b = broker().await;
    let _first = BusClient::connect(b.local_addr(), "exc1").await.unwrap();
    match BusClient::connect(b.local_addr(), "exc1").await {
        Err(BusClientError::Rejected(m)) => assert!(m.contains("already connected"), "{m}"),
        other => panic!("expected rejection, got {:?}", other.map(|_| ())),
    }
}

#[tokio::test]
async fn invalid_filter_is_reported() {
    let b = broker().await;
    let mut c = BusClient::connect(b.local_addr(), "observer").await.unwrap();
    assert!(matches!(c.subscribe("fleet/#/state", Qos::AtMostOnce).await, Err(BusClientError::Rejected(_))));
    c.subscribe("fleet/#", Qos::AtMostOnce).await.unwrap();
}

#[tokio::test]
async fn oversized_frame_closes_the_session() {
    let b = broker().await;
    let mut s = tokio::net::TcpStream::connect(b.local_addr()).await.unwrap();
    s.write_all(&u32::MAX.to_be_bytes()).await.unwrap();
    let mut buf = Vec::new();
    tokio::time::timeout(Duration::from_secs(5), s.read_to_end(&mut buf)).await.unwrap().unwrap();
    let text = String::from_utf8_lossy(&buf[4..]);
    assert!(text.contains("malformed_frame"), "{text}");
}

#[tokio::test]
async fn reconnect_keeps_message_ids_fresh() {
    let b = broker().await;
    let mut sub = BusClient::connect(b.local_addr(), "observer").await.unwrap();
    sub.subscribe("fleet/v1/sim/uav1/state", Qos::AtLeastOnce).await.unwrap();
    for round in 0..2 {
        let mut p = BusClient::connect(b.local_addr(), "uav1").await.unwrap();
        p.publish("fleet/v1/sim/uav1/state", Qos::AtLeastOnce, raw(round), 0).unwrap();
        assert_eq!(recv(&mut sub).await.payload, raw(round));
        p.disconnect().await;
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}
