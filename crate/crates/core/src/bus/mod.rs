//! Topic-based publish/subscribe with QoS 0/1 delivery.
//!
//! The [`broker::Broker`] is a pure state machine: callers feed it frames and
//! the current time and forward the frames it returns. [`local::LocalBus`]
//! wires it to in-memory inboxes with optional fault injection; the service
//! crate wires the same broker to TCP sessions.

pub mod broker;
pub mod frame;
pub mod local;
pub mod schema;
pub mod topic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use broker::{Broker, BrokerConfig, BrokerStats, SessionId};
pub use frame::{ErrorCode, Frame};
pub use local::{FaultInjector, LocalBus};
pub use schema::{ConnectionMsg, ConnectionState, Envelope, ObjectsMsg, OrderMsg, Payload, StateMsg};
pub use topic::{fleet_filter, topic_for, validate_topic, TopicFilter, TopicKind, DEFAULT_MANUFACTURER};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("invalid topic {0:?}: {1}")]
    Topic(String, &'static str),
    #[error("invalid filter {0:?}: {1}")]
    Filter(String, &'static str),
    #[error("invalid message: {0}")]
    Schema(String),
    #[error("frame error: {0}")]
    Frame(String),
    #[error("unknown session {0}")]
    UnknownSession(u64),
    #[error("client id {0:?} is already connected")]
    ClientIdInUse(String),
    #[error("session not connected")]
    NotConnected,
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(try_from = "u8", into = "u8")]
pub enum Qos {
    #[default]
    AtMostOnce,
    AtLeastOnce,
}

impl TryFrom<u8> for Qos {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            0 => Ok(Qos::AtMostOnce),
            1 => Ok(Qos::AtLeastOnce),
            other => Err(format!("unsupported qos {other}")),
        }
    }
}

impl From<Qos> for u8 {
    fn from(q: Qos) -> u8 {
        match q {
            Qos::AtMostOnce => 0,
            Qos::AtLeastOnce => 1,
        }
    }
}
