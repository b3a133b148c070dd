//! In-process transport for the broker, driven by a virtual clock.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::broker::{Broker, BrokerConfig, BrokerStats, Outbound, SessionId};
use super::frame::Frame;
use super::{BusError, Envelope, Payload, Qos};

/// Drops broker-to-client deliveries and client acks at random.
///
/// With `guarantee_final_attempt`, the last attempt the broker's retry budget
/// allows for a delivery (and its ack) always gets through, so every QoS 1
/// message remains deliverable. Without it drops are independent and some
/// deliveries may expire.
#[derive(Debug, Clone)]
pub struct FaultInjector {
    pub drop_rate: f64,
    pub guarantee_final_attempt: bool,
    rng: ChaCha8Rng,
    attempts: HashMap<u64, u32>,
    forced: HashSet<u64>,
    pub dropped_frames: u64,
}

impl FaultInjector {
    pub fn new(drop_rate: f64, seed: u64, guarantee_final_attempt: bool) -> Self {
        Self {
            drop_rate,
            guarantee_final_attempt,
            rng: ChaCha8Rng::seed_from_u64(seed),
            attempts: HashMap::new(),
            forced: HashSet::new(),
            dropped_frames: 0,
        }
    }

    fn roll(&mut self) -> bool {
        let drop = self.rng.random::<f64>() < self.drop_rate;
        if drop {
            self.dropped_frames += 1;
        }
        drop
    }

    fn pass_delivery(&mut self, delivery_id: u64, qos: Qos, max_retries: u32) -> bool {
        let n = self.attempts.entry(delivery_id).or_insert(0);
        *n += 1;
        if self.guarantee_final_attempt && qos == Qos::AtLeastOnce && *n > max_retries {
            self.forced.insert(delivery_id);
            return true;
        }
        !self.roll()
    }

    fn pass_ack(&mut self, delivery_id: u64) -> bool {
        if self.forced.remove(&delivery_id) {
            self.attempts.remove(&delivery_id);
            return true;
        }
        !self.roll()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub received: u64,
    pub flagged_duplicates: u64,
    /// Repeats of an already received message that lacked the duplicate flag.
    pub unflagged_repeats: u64,
    /// Messages older than one already received on the same stream.
    pub out_of_order: u64,
}

#[derive(Debug, Default)]
struct LocalClient {
    session: Option<SessionId>,
    inbox: VecDeque<Envelope>,
    last_seen: HashMap<(String, String), u64>,
    next_message_id: u64,
    stats: ClientStats,
    last_error: Option<String>,
}

#[derive(Debug)]
pub struct LocalBus {
    broker: Broker,
    now_ms: u64,
    clients: BTreeMap<String, LocalClient>,
    sessions: HashMap<SessionId, String>,
    injector: Option<FaultInjector>,
    next_request: u64,
}

impl LocalBus {
    pub fn new(cfg: BrokerConfig) -> Self {
        Self { broker: Broker::new(cfg), now_ms: 0, clients: BTreeMap::new(), sessions: HashMap::new(), injector: None, next_request: 0 }
    }

    pub fn with_faults(mut self, injector: FaultInjector) -> Self {
        self.injector = Some(injector);
        self
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn broker_stats(&self) -> BrokerStats {
        self.broker.stats()
    }

    pub fn injector(&self) -> Option<&FaultInjector> {
        self.injector.as_ref()
    }

    pub fn pending_count(&self) -> usize {
        self.broker.pending_count()
    }

    pub fn client_stats(&self, client_id: &str) -> Option<ClientStats> {
        self.clients.get(client_id).map(|c| c.stats)
    }

    pub fn connect(&mut self, client_id: &str) -> Result<(), BusError> {
        let sid = self.broker.open_session();
        self.clients.entry(client_id.to_string()).or_default();
        self.sessions.insert(sid, client_id.to_string());
        let out = self.broker.handle(sid, Frame::Connect { client_id: client_id.to_string(), protocol: 1 }, self.now_ms)?;
        if let Some((_, Frame::Error { message, .. })) = out.first() {
            self.sessions.remove(&sid);
            self.broker.close_session(sid);
            return Err(BusError::Protocol(message.clone()));
        }
        self.clients.get_mut(client_id).expect("inserted above").session = Some(sid);
        Ok(())
    }

    pub fn disconnect(&mut self, client_id: &str) {
        if let Some(sid) = self.clients.get_mut(client_id).and_then(|c| c.session.take()) {
            self.broker.close_session(sid);
            self.sessions.remove(&sid);
        }
    }

    fn session(&self, client_id: &str) -> Result<SessionId, BusError> {
        self.clients.get(client_id).and_then(|c| c.session).ok_or(BusError::NotConnected)
    }

    pub fn subscribe(&mut self, client_id: &str, filter: &str, qos: Qos) -> Result<(), BusError> {
        let sid = self.session(client_id)?;
        self.next_request += 1;
        let out = self.broker.handle(sid, Frame::Subscribe { request_id: self.next_request, filter: filter.to_string(), qos }, self.now_ms)?;
        self.dispatch(out)?;
        self.take_error(client_id)
    }

    /// Publishes with the client's next message id, which is returned.
    pub fn publish(&mut self, client_id: &str, topic: &str, qos: Qos, payload: Payload) -> Result<u64, BusError> {
        let sid = self.session(client_id)?;
        let client = self.clients.get_mut(client_id).expect("session implies client");
        client.next_message_id += 1;
        let message_id = client.next_message_id;
        let envelope = Envelope { topic: topic.to_string(), publisher: client_id.to_string(), message_id, qos, timestamp: self.now_ms, payload };
        let out = self.broker.handle(sid, Frame::Publish { envelope }, self.now_ms)?;
        self.dispatch(out)?;
        self.take_error(client_id).map(|_| message_id)
    }

    fn take_error(&mut self, client_id: &str) -> Result<(), BusError> {
        match self.clients.get_mut(client_id).and_then(|c| c.last_error.take()) {
            Some(e) => Err(BusError::Protocol(e)),
            None => Ok(()),
        }
    }

    /// Moves the clock forward and runs broker redeliveries.
    pub fn advance_to(&mut self, now_ms: u64) -> Result<(), BusError> {
        self.now_ms = self.now_ms.max(now_ms);
        let out = self.broker.tick(self.now_ms);
        self.dispatch(out)
    }

    /// Received envelopes, in arrival order, with repeats removed.
    pub fn drain(&mut self, client_id: &str) -> Vec<Envelope> {
        self.clients.get_mut(client_id).map(|c| c.inbox.drain(..).collect()).unwrap_or_default()
    }

    fn dispatch(&mut self, out: Outbound) -> Result<(), BusError> {
        let max_retries = self.broker.config().max_retries;
        let mut queue: VecDeque<(SessionId, Frame)> = out.into();
        while let Some((sid, frame)) = queue.pop_front() {
            let Some(name) = self.sessions.get(&sid) else { continue };
            let client = self.clients.get_mut(name).expect("session maps to client");
            match frame {
                Frame::Deliver { delivery_id, duplicate, envelope } => {
                    let qos = envelope.qos;
                    if let Some(inj) = self.injector.as_mut() {
                        if !inj.pass_delivery(delivery_id, qos, max_retries) {
                            continue;
                        }
                    }
                    receive(client, duplicate, envelope);
                    if qos == Qos::AtLeastOnce {
                        if let Some(inj) = self.injector.as_mut() {
                            if !inj.pass_ack(delivery_id) {
                                continue;
                            }
                        }
                        queue.extend(self.broker.handle(sid, Frame::Ack { delivery_id }, self.now_ms)?);
                    }
                }
                Frame::Error { message, .. } => client.last_error = Some(message),
                _ => {}
            }
        }
        Ok(())
    }
}

fn receive(client: &mut LocalClient, duplicate: bool, envelope: Envelope) {
    let key = (envelope.publisher.clone(), envelope.topic.clone());
    match client.last_seen.get(&key) {
        Some(&last) if envelope.message_id == last => {
            if duplicate {
                client.stats.flagged_duplicates += 1;
            } else {
                client.stats.unflagged_repeats += 1;
            }
            return;
        }
        Some(&last) if envelope.message_id < last => {
            client.stats.out_of_order += 1;
            return;
        }
        _ => {}
    }
    if duplicate {
        client.stats.flagged_duplicates += 1;
    }
    client.last_seen.insert(key, envelope.message_id);
    client.stats.received += 1;
    client.inbox.push_back(envelope);
}
