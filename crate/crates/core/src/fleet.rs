//! Vehicle identities and the small vocabularies shared by tasking, the bus
//! schemas and the simulator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid vehicle id {0:?}: must be non-empty without '/', '+' or '#'")]
pub struct InvalidVehicleId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VehicleId(String);

impl VehicleId {
    pub fn new(id: impl Into<String>) -> Result<Self, InvalidVehicleId> {
        let id = id.into();
        if id.is_empty() || id.contains(['/', '+', '#']) || id.chars().any(char::is_whitespace) {
            return Err(InvalidVehicleId(id));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for VehicleId {
    type Error = InvalidVehicleId;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<VehicleId> for String {
    fn from(value: VehicleId) -> Self {
        value.0
    }
}

impl FromStr for VehicleId {
    type Err = InvalidVehicleId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleKind {
    Excavator,
    Ugv,
    Uav,
}

impl VehicleKind {
    pub fn capabilities(self) -> Vec<Capability> {
        match self {
            VehicleKind::Excavator => vec![Capability::Excavate],
            VehicleKind::Ugv => vec![Capability::Haul],
            VehicleKind::Uav => vec![Capability::Survey],
        }
    }

    pub fn is_ground(self) -> bool {
        !matches!(self, VehicleKind::Uav)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Excavate,
    Haul,
    Survey,
}

/// Actions a vehicle performs at an order node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Load,
    Dump,
    Hover,
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionKind::Load => "load",
            ActionKind::Dump => "dump",
            ActionKind::Hover => "hover",
        })
    }
}
