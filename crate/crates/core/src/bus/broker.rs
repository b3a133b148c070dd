//! Sans-IO broker state machine.
//!
//! QoS 1 deliveries are serialized per (subscriber, publisher, topic) stream:
//! the next message of a stream is sent only after the previous one is
//! acknowledged or has exhausted its retries. That keeps per-publisher order
//! intact across redeliveries.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::frame::{ErrorCode, Frame, PROTOCOL_VERSION};
use super::topic::{validate_topic, TopicFilter};
use super::{BusError, Envelope, Qos};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrokerConfig {
    pub ack_timeout_ms: u64,
    pub max_retries: u32,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self { ack_timeout_ms: 1000, max_retries: 5 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerStats {
    pub published: u64,
    pub duplicate_publishes: u64,
    pub deliveries: u64,
    pub redeliveries: u64,
    pub acked: u64,
    /// QoS 1 deliveries abandoned after the retry budget.
    pub expired: u64,
}

pub type Outbound = Vec<(SessionId, Frame)>;

type StreamKey = (String, String);

#[derive(Debug)]
struct Inflight {
    delivery_id: u64,
    envelope: Envelope,
    attempts: u32,
    deadline: u64,
}

#[derive(Debug, Default)]
struct Stream {
    queue: VecDeque<Envelope>,
    inflight: Option<Inflight>,
}

#[derive(Debug, Default)]
struct Session {
    client_id: Option<String>,
    subscriptions: Vec<(TopicFilter, Qos)>,
    streams: BTreeMap<StreamKey, Stream>,
}

#[derive(Debug, Default)]
pub struct Broker {
    cfg: BrokerConfig,
    next_session: u64,
    next_delivery: u64,
    sessions: BTreeMap<SessionId, Session>,
    clients: HashMap<String, SessionId>,
    last_message: HashMap<StreamKey, u64>,
    inflight_index: HashMap<(SessionId, u64), StreamKey>,
    stats: BrokerStats,
}

impl Broker {
    pub fn new(cfg: BrokerConfig) -> Self {
        Self { cfg, ..Self::default() }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.cfg
    }

    pub fn stats(&self) -> BrokerStats {
        self.stats
    }

    pub fn open_session(&mut self) -> SessionId {
        self.next_session += 1;
        let id = SessionId(self.next_session);
        self.sessions.insert(id, Session::default());
        id
    }

    /// Drops the session with its subscriptions and pending deliveries.
    pub fn close_session(&mut self, id: SessionId) {
        if let Some(s) = self.sessions.remove(&id) {
            if let Some(c) = s.client_id {
                self.clients.remove(&c);
            }
            self.inflight_index.retain(|(sid, _), _| *sid != id);
        }
    }

    pub fn client_id(&self, id: SessionId) -> Option<&str> {
        self.sessions.get(&id)?.client_id.as_deref()
    }

    /// QoS 1 deliveries not yet acknowledged or expired, across all sessions.
    pub fn pending_count(&self) -> usize {
        self.sessions
            .values()
            .flat_map(|s| s.streams.values())
            .map(|st| st.queue.len() + usize::from(st.inflight.is_some()))
            .sum()
    }

    /// Earliest redelivery deadline, for drivers that sleep between ticks.
    pub fn next_deadline(&self) -> Option<u64> {
        self.sessions
            .values()
            .flat_map(|s| s.streams.values())
            .filter_map(|st| st.inflight.as_ref().map(|f| f.deadline))
            .min()
    }

    pub fn handle(&mut self, sid: SessionId, frame: Frame, now: u64) -> Result<Outbound, BusError> {
        let session = self.sessions.get_mut(&sid).ok_or(BusError::UnknownSession(sid.0))?;
        let mut out = Vec::new();
        match frame {
            Frame::Connect { client_id, protocol } => {
                if protocol != PROTOCOL_VERSION {
                    out.push((sid, Frame::error(ErrorCode::MalformedFrame, format!("unsupported protocol {protocol}"))));
                } else if client_id.is_empty() || client_id.contains(['/', '+', '#']) {
                    out.push((sid, Frame::error(ErrorCode::MalformedFrame, format!("invalid client id {client_id:?}"))));
                } else if session.client_id.is_some() {
                    out.push((sid, Frame::error(ErrorCode::MalformedFrame, "session already connected")));
                } else if self.clients.contains_key(&client_id) {
                    out.push((sid, Frame::error(ErrorCode::ClientIdInUse, format!("client id {client_id:?} is already connected"))));
                } else {
                    session.client_id = Some(client_id.clone());
                    self.clients.insert(client_id, sid);
                    out.push((sid, Frame::ConnAck { session: sid.0 }));
                }
            }
            _ if session.client_id.is_none() => {
                out.push((sid, Frame::error(ErrorCode::NotConnected, "connect first")));
            }
            Frame::Subscribe { request_id, filter, qos } => match TopicFilter::parse(&filter) {
                Ok(f) => {
                    session.subscriptions.retain(|(existing, _)| existing != &f);
                    session.subscriptions.push((f, qos));
                    out.push((sid, Frame::SubAck { request_id, filter }));
                }
                Err(e) => out.push((
                    sid,
                    Frame::Error { code: ErrorCode::InvalidFilter, message: e.to_string(), request_id: Some(request_id) },
                )),
            },
            Frame::Publish { mut envelope } => {
                if let Err(e) = validate_topic(&envelope.topic) {
                    out.push((sid, Frame::error(ErrorCode::InvalidTopic, e.to_string())));
                    return Ok(out);
                }
                if let Err(e) = envelope.payload.validate() {
                    out.push((sid, Frame::error(ErrorCode::InvalidPayload, e.to_string())));
                    return Ok(out);
                }
                envelope.publisher = session.client_id.clone().unwrap_or_default();
                let message_id = envelope.message_id;
                let qos = envelope.qos;
                let key = (envelope.publisher.clone(), envelope.topic.clone());
                let fresh = self.last_message.get(&key).is_none_or(|&last| message_id > last);
                if fresh {
                    self.last_message.insert(key, message_id);
                    self.stats.published += 1;
                    self.route(envelope, now, &mut out);
                } else {
                    self.stats.duplicate_publishes += 1;
                }
                if qos == Qos::AtLeastOnce {
                    out.push((sid, Frame::PubAck { message_id }));
                }
            }
            Frame::Ack { delivery_id } => self.ack(sid, delivery_id, now, &mut out),
            Frame::Disconnect => self.close_session(sid),
            Frame::ConnAck { .. } | Frame::SubAck { .. } | Frame::PubAck { .. } | Frame::Deliver { .. } | Frame::Error { .. } => {
                out.push((sid, Frame::error(ErrorCode::MalformedFrame, "frame type is broker-to-client only")));
            }
        }
        Ok(out)
    }

    fn route(&mut self, envelope: Envelope, now: u64, out: &mut Outbound) {
        let targets: Vec<(SessionId, Qos)> = self
            .sessions
            .iter()
            .filter_map(|(sid, s)| {
                s.subscriptions
                    .iter()
                    .filter(|(f, _)| f.matches(&envelope.topic))
                    .map(|(_, q)| *q)
                    .max()
                    .map(|q| (*sid, q.min(envelope.qos)))
            })
            .collect();
        let key: StreamKey = (envelope.publisher.clone(), envelope.topic.clone());
        for (sid, qos) in targets {
            let mut env = envelope.clone();
            env.qos = qos;
            let session = self.sessions.get_mut(&sid).expect("target session exists");
            session.streams.entry(key.clone()).or_default().queue.push_back(env);
            self.pump(sid, &key, now, out);
        }
    }

    fn pump(&mut self, sid: SessionId, key: &StreamKey, now: u64, out: &mut Outbound) {
        let Some(session) = self.sessions.get_mut(&sid) else { return };
        let Some(stream) = session.streams.get_mut(key) else { return };
        while stream.inflight.is_none() {
            let Some(envelope) = stream.queue.pop_front() else { break };
            self.next_delivery += 1;
            let delivery_id = self.next_delivery;
            self.stats.deliveries += 1;
            out.push((sid, Frame::Deliver { delivery_id, duplicate: false, envelope: envelope.clone() }));
            if envelope.qos == Qos::AtLeastOnce {
                stream.inflight = Some(Inflight { delivery_id, envelope, attempts: 1, deadline: now + self.cfg.ack_timeout_ms });
                self.inflight_index.insert((sid, delivery_id), key.clone());
            }
        }
        if stream.queue.is_empty() && stream.inflight.is_none() {
            session.streams.remove(key);
        }
    }

    fn ack(&mut self, sid: SessionId, delivery_id: u64, now: u64, out: &mut Outbound) {
        // Late acks for redelivered or expired deliveries are ignored.
        let Some(key) = self.inflight_index.remove(&(sid, delivery_id)) else { return };
        if let Some(stream) = self.sessions.get_mut(&sid).and_then(|s| s.streams.get_mut(&key)) {
            if stream.inflight.as_ref().is_some_and(|f| f.delivery_id == delivery_id) {
                stream.inflight = None;
                self.stats.acked += 1;
            }
        }
        self.pump(sid, &key, now, out);
    }

    /// Redelivers or expires QoS 1 deliveries whose ack deadline has passed.
    pub fn tick(&mut self, now: u64) -> Outbound {
        let mut out = Vec::new();
        let mut freed = Vec::new();
        for (sid, session) in &mut self.sessions {
            for (key, stream) in &mut session.streams {
                let Some(f) = stream.inflight.as_mut() else { continue };
                if f.deadline > now {
                    continue;
                }
                if f.attempts > self.cfg.max_retries {
                    self.inflight_index.remove(&(*sid, f.delivery_id));
                    stream.inflight = None;
                    self.stats.expired += 1;
                    freed.push((*sid, key.clone()));
                } else {
                    f.attempts += 1;
                    f.deadline = now + self.cfg.ack_timeout_ms;
                    self.stats.redeliveries += 1;
                    out.push((*sid, Frame::Deliver { delivery_id: f.delivery_id, duplicate: true, envelope: f.envelope.clone() }));
                }
            }
        }
        for (sid, key) in freed {
            self.pump(sid, &key, now, &mut out);
        }
        out
    }
}
