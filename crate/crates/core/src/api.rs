//! JSON bodies exchanged between the HTTP service and its clients.
//!
//! Paths inside requests are interpreted on the server's file system.

use serde::{Deserialize, Serialize};

use crate::metrics::{Averaging, ConfusionCounts, MetricRow};
use crate::pipeline::RunMode;

pub const ROUTE_HEALTH: &str = "/health";
pub const ROUTE_RUN: &str = "/v1/run";
pub const ROUTE_REPORT: &str = "/v1/report";
pub const ROUTE_METRICS: &str = "/v1/metrics";
pub const ROUTE_RENDER: &str = "/v1/scene/render";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OneshotProtocol {
    #[default]
    TextAuto,
    HumanLabel,
}

impl OneshotProtocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            OneshotProtocol::TextAuto => "text_auto",
            OneshotProtocol::HumanLabel => "human_label",
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub manifest: String,
    pub entry: String,
    /// Overrides the entry's prompt mode.
    #[serde(default)]
    pub mode: Option<RunMode>,
    pub backend: String,
    #[serde(default)]
    pub box_threshold: Option<f64>,
    #[serde(default)]
    pub text_threshold: Option<f64>,
    #[serde(default)]
    pub protocol: OneshotProtocol,
    #[serde(default = "one")]
    pub k_samples: usize,
    #[serde(default)]
    pub seed: u64,
    pub out: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    /// `run_record.json` files, or directories searched recursively for them.
    pub records: Vec<String>,
    #[serde(default)]
    pub format: ReportFormat,
    #[serde(default)]
    pub averaging: Option<Averaging>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub format: ReportFormat,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRequest {
    pub pred_path: String,
    pub gt_path: String,
    #[serde(default)]
    pub valid_path: Option<String>,
    /// Evaluate one class of a multiclass ground truth against it.
    #[serde(default)]
    pub class_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub counts: ConfusionCounts,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub scene: String,
    pub out_dir: String,
    /// Phrase selecting which objects count as ground truth; all when absent.
    #[serde(default)]
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderResponse {
    pub image: String,
    pub ground_truth: String,
    pub boxes: String,
    pub points: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Validation,
    Backend,
    Io,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}
