//! JSON and JSONL records written by the command-line tools.

use kpfc_core::bench::LatencyReport;
use kpfc_core::envelope::{Aabb, Clearance, KeepOutBox};
use kpfc_core::models::ArchKind;
use kpfc_core::training::TrainHistory;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsOutput {
    pub arch: ArchKind,
    /// `"test"` or `"all"`.
    pub split: String,
    pub rmse_x100: f64,
    pub fid: f64,
    pub n: usize,
    pub copy_last_rmse_x100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryOutput {
    pub arch: ArchKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<TrainHistory>,
    pub train: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchOutput {
    pub reports: Vec<LatencyReport>,
}

/// One forecast, emitted once a clip has a full observation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastRecord {
    pub clip_id: String,
    /// Index of the last observed frame.
    pub frame: u64,
    pub forecast: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeFrame {
    pub clip_id: String,
    pub frame: usize,
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub margin: f64,
}

impl EnvelopeFrame {
    pub fn new(clip_id: &str, b: &KeepOutBox) -> Self {
        Self {
            clip_id: clip_id.to_owned(),
            frame: b.frame_index,
            min: b.bounds.min,
            max: b.bounds.max,
            margin: b.margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl From<Aabb> for Bounds {
    fn from(b: Aabb) -> Self {
        Self {
            min: b.min,
            max: b.max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeUnion {
    pub clip_id: String,
    pub union: Bounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClearanceRecord {
    pub clip_id: String,
    pub point: [f64; 2],
    pub distance: f64,
    pub frame: usize,
    pub joint: usize,
}

impl ClearanceRecord {
    pub fn new(clip_id: &str, point: [f64; 2], c: &Clearance) -> Self {
        Self {
            clip_id: clip_id.to_owned(),
            point,
            distance: c.distance,
            frame: c.frame_index,
            joint: c.joint_index,
        }
    }
}

/// Any line of `envelope` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvelopeLine {
    Frame(EnvelopeFrame),
    Union(EnvelopeUnion),
    Clearance(ClearanceRecord),
}
