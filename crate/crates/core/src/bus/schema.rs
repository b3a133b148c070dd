//! Message documents carried on the bus: a VDA5050-style order/state/connection
//! subset plus geolocated object reports.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{BusError, Qos};
use crate::fleet::{ActionKind, VehicleId, VehicleKind};
use crate::geo::GeoPoint;
use crate::geolocator::ObjectReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub topic: String,
    /// Client id of the publishing session; stamped by the broker.
    #[serde(default)]
    pub publisher: String,
    pub message_id: u64,
    pub qos: Qos,
    /// Milliseconds on the publisher's clock.
    pub timestamp: u64,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schema", content = "body", rename_all = "snake_case")]
pub enum Payload {
    Order(OrderMsg),
    State(StateMsg),
    Connection(ConnectionMsg),
    Objects(ObjectsMsg),
    Raw(serde_json::Value),
}

impl Payload {
    pub fn validate(&self) -> Result<(), BusError> {
        match self {
            Payload::Order(o) => o.validate(),
            Payload::State(s) => s.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderAction {
    pub action_id: String,
    pub kind: ActionKind,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderNode {
    pub node_id: String,
    pub sequence_id: u32,
    pub position: GeoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<OrderAction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderEdge {
    pub edge_id: String,
    pub start_node_id: String,
    pub end_node_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderMsg {
    pub order_id: String,
    pub update_id: u64,
    pub nodes: Vec<OrderNode>,
    #[serde(default)]
    pub edges: Vec<OrderEdge>,
}

impl OrderMsg {
    /// Chains `nodes` with one edge between each consecutive pair.
    pub fn chain(order_id: impl Into<String>, update_id: u64, nodes: Vec<OrderNode>) -> Self {
        let edges = nodes
            .windows(2)
            .map(|w| OrderEdge {
                edge_id: format!("{}-{}", w[0].node_id, w[1].node_id),
                start_node_id: w[0].node_id.clone(),
                end_node_id: w[1].node_id.clone(),
            })
            .collect();
        Self { order_id: order_id.into(), update_id, nodes, edges }
    }

    pub fn validate(&self) -> Result<(), BusError> {
        if self.order_id.is_empty() {
            return Err(BusError::Schema("order_id is empty".into()));
        }
        let mut ids = HashSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !ids.insert(node.node_id.as_str()) {
                return Err(BusError::Schema(format!("duplicate node_id {:?}", node.node_id)));
            }
            if i > 0 && node.sequence_id <= self.nodes[i - 1].sequence_id {
                return Err(BusError::Schema(format!("nodes[{i}].sequence_id is not increasing")));
            }
            node.position.validate().map_err(|e| BusError::Schema(format!("nodes[{i}].position: {e}")))?;
            if let Some(a) = &node.action {
                if !(a.duration_s.is_finite() && a.duration_s >= 0.0) {
                    return Err(BusError::Schema(format!("nodes[{i}].action.duration_s must be >= 0")));
                }
            }
        }
        for (i, e) in self.edges.iter().enumerate() {
            for end in [&e.start_node_id, &e.end_node_id] {
                if !ids.contains(end.as_str()) {
                    return Err(BusError::Schema(format!("edges[{i}] references unknown node {end:?}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionStatus {
    Waiting,
    Running,
    Finished,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionState {
    pub action_id: String,
    pub kind: ActionKind,
    pub status: ActionStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleFault {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMsg {
    pub vehicle_id: VehicleId,
    #[serde(default)]
    pub order_id: Option<String>,
    #[serde(default)]
    pub order_update_id: u64,
    pub position: GeoPoint,
    pub yaw: f64,
    #[serde(default)]
    pub last_node_id: Option<String>,
    /// True while the vehicle is moving along its order.
    #[serde(default)]
    pub driving: bool,
    #[serde(default)]
    pub action_states: Vec<ActionState>,
    pub battery: f64,
    #[serde(default)]
    pub errors: Vec<VehicleFault>,
    pub timestamp: u64,
}

impl StateMsg {
    pub fn validate(&self) -> Result<(), BusError> {
        if !(0.0..=1.0).contains(&self.battery) {
            return Err(BusError::Schema("battery must be within [0, 1]".into()));
        }
        if !self.yaw.is_finite() {
            return Err(BusError::Schema("yaw must be finite".into()));
        }
        self.position.validate().map_err(|e| BusError::Schema(format!("position: {e}")))
    }

    pub fn finished_actions(&self) -> impl Iterator<Item = &ActionState> {
        self.action_states.iter().filter(|a| a.status == ActionStatus::Finished)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectionState {
    Online,
    Offline,
    Broken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionMsg {
    pub vehicle_id: VehicleId,
    pub connection_state: ConnectionState,
    #[serde(default)]
    pub vehicle_kind: Option<VehicleKind>,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectsMsg {
    pub reporter: VehicleId,
    pub objects: Vec<ObjectReport>,
}
