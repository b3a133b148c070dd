use serde::{Deserialize, Serialize};

use crate::bus::BrokerStats;
use crate::fleet::{VehicleId, VehicleKind};
use crate::tasking::OperationStatus;

/// Bumped on any change to field names or meaning.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleMetrics {
    pub id: VehicleId,
    pub kind: VehicleKind,
    /// 3D path length travelled, meters.
    pub distance_m: f64,
    /// Final `[east, north, up]`, meters.
    pub final_position: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplanCounts {
    /// Route checks that found the active route blocked, plus successful retries after a halt.
    pub triggered: u64,
    /// Halt orders issued because no route existed.
    pub halts: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub p50: Option<u64>,
    pub p90: Option<u64>,
    pub p99: Option<u64>,
    pub max: Option<u64>,
}

impl LatencySummary {
    /// Nearest-rank percentiles over `samples`.
    pub fn from_samples(samples: &[u64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_unstable();
        let rank = |p: f64| -> Option<u64> {
            if s.is_empty() {
                return None;
            }
            let k = ((p / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
            Some(s[k.min(s.len()) - 1])
        };
        Self { count: s.len(), p50: rank(50.0), p90: rank(90.0), p99: rank(99.0), max: s.last().copied() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub detector: String,
    pub fps: f64,
    pub frames: u64,
    pub detections: u64,
    pub published: u64,
    pub received: u64,
    pub rejected: u64,
    pub actors_total: usize,
    pub actors_reported: usize,
    /// Coordinator ingest time minus frame capture time, milliseconds.
    pub latency_ms: LatencySummary,
}

/// Run summary written by `run`. Field order is fixed so equal runs
/// serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    /// `completed`, `failed`, `deadline_exceeded` or `invariant_breach`.
    pub outcome: String,
    pub detail: Option<String>,
    pub sim_time_s: f64,
    pub ticks: u64,
    pub operation_status: Option<OperationStatus>,
    pub tasks_done: usize,
    pub tasks_failed: usize,
    pub vehicles: Vec<VehicleMetrics>,
    /// Excavator plus UGV distance, meters.
    pub combined_ground_distance_m: f64,
    pub replans: ReplanCounts,
    pub orders_issued: u64,
    pub reports: ReportMetrics,
    /// Closest approach between a ground vehicle and a visible actor, meters.
    pub min_actor_separation_m: Option<f64>,
    pub bus: BrokerStats,
    pub last_event_seq: u64,
    pub invariant_breaches: Vec<String>,
}

/// Millimeter rounding keeps reports readable; it does not affect determinism.
pub(crate) fn mm(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}
