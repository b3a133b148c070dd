//! Topic names, subscription filters with `+` / `#` wildcards, and the
//! vehicle topic layout.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::BusError;
use crate::fleet::VehicleId;

/// Validates a concrete (wildcard-free) topic.
pub fn validate_topic(topic: &str) -> Result<(), BusError> {
    if topic.is_empty() {
        return Err(BusError::Topic(topic.to_string(), "empty topic"));
    }
    if topic.split('/').any(str::is_empty) {
        return Err(BusError::Topic(topic.to_string(), "empty segment"));
    }
    if topic.contains(['+', '#']) {
        return Err(BusError::Topic(topic.to_string(), "wildcards are only valid in filters"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Segment {
    Exact(String),
    Single,
    Rest,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    raw: String,
    segments: Vec<Segment>,
}

impl TopicFilter {
    pub fn parse(filter: &str) -> Result<Self, BusError> {
        let bad = |why| BusError::Filter(filter.to_string(), why);
        if filter.is_empty() {
            return Err(bad("empty filter"));
        }
        let parts: Vec<&str> = filter.split('/').collect();
        let mut segments = Vec::with_capacity(parts.len());
        for (i, part) in parts.iter().enumerate() {
            let seg = match *part {
                "" => return Err(bad("empty segment")),
                "+" => Segment::Single,
                "#" if i + 1 == parts.len() => Segment::Rest,
                "#" => return Err(bad("'#' must be the last segment")),
                p if p.contains(['+', '#']) => return Err(bad("wildcards must fill a whole segment")),
                p => Segment::Exact(p.to_string()),
            };
            segments.push(seg);
        }
        Ok(Self { raw: filter.to_string(), segments })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    /// `#` also matches its parent level (`a/#` matches `a`).
    pub fn matches(&self, topic: &str) -> bool {
        let mut levels = topic.split('/');
        for seg in &self.segments {
            match seg {
                Segment::Rest => return true,
                Segment::Single => {
                    if levels.next().is_none() {
                        return false;
                    }
                }
                Segment::Exact(s) => {
                    if levels.next() != Some(s.as_str()) {
                        return false;
                    }
                }
            }
        }
        levels.next().is_none()
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopicKind {
    Order,
    State,
    Connection,
    /// Geolocated object reports from a surveying vehicle.
    Objects,
}

impl TopicKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TopicKind::Order => "order",
            TopicKind::State => "state",
            TopicKind::Connection => "connection",
            TopicKind::Objects => "objects",
        }
    }
}

pub const TOPIC_ROOT: &str = "fleet/v1";
pub const DEFAULT_MANUFACTURER: &str = "sim";

/// `fleet/v1/<manufacturer>/<vehicle_id>/<kind>`.
pub fn topic_for(manufacturer: &str, vehicle_id: &str, kind: TopicKind) -> Result<String, BusError> {
    let id = VehicleId::new(vehicle_id).map_err(|_| BusError::Topic(vehicle_id.to_string(), "invalid vehicle id"))?;
    let topic = format!("{TOPIC_ROOT}/{manufacturer}/{id}/{}", kind.as_str());
    validate_topic(&topic)?;
    Ok(topic)
}

/// Filter over one kind of topic for every vehicle of a manufacturer.
pub fn fleet_filter(manufacturer: &str, kind: TopicKind) -> String {
    format!("{TOPIC_ROOT}/{manufacturer}/+/{}", kind.as_str())
}

/// Vehicle id segment of a vehicle topic.
pub fn vehicle_of(topic: &str) -> Option<&str> {
    let mut parts = topic.split('/');
    let (_, _, _, id) = (parts.next()?, parts.next()?, parts.next()?, parts.next()?);
    Some(id)
}
