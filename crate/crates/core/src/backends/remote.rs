//! Bridge to an external inference server hosting the real checkpoints.
//!
//! The server speaks JSON over HTTP. Images travel as
//! `{width, height, bands, data}` where `data` is base64 of band-interleaved
//! 8-bit samples. Endpoints, all `POST`:
//!
//! | path                     | request                             | response                                   |
//! |--------------------------|-------------------------------------|--------------------------------------------|
//! | `/v1/load`               | checkpoints, device, sam model      | `{}`                                       |
//! | `/v1/detect`             | `{image, phrase}`                   | `{candidates: [{bbox, logit, phrase_score, phrase}]}` |
//! | `/v1/segment_box`        | `{image, bbox}`                     | `{scales: [[f64]; 3], confidences: [f64; 3]}` |
//! | `/v1/segment_points`     | `{image, foreground, background}`   | as above                                   |
//! | `/v1/segment_everything` | `{image}`                           | `{masks: [{data, score}]}` (data: base64 0/1 bytes) |
//! | `/v1/embed`              | `{image}`                           | `{cols, rows, stride, dim, data}`          |

use std::path::Path;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    Backend, BackendError, DetectionCandidate, FeatureMap, MultiScaleMasks, PointPrompt, Result, ScoredMask,
};
use crate::geodata::{BinaryMask, GeoRaster, PixelBox};

fn default_sam_model() -> String {
    "vit_h".into()
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealBackendConfig {
    pub endpoint: String,
    pub sam_checkpoint: String,
    pub grounding_checkpoint: String,
    pub device: String,
    #[serde(default = "default_sam_model")]
    pub sam_model: String,
    /// Server returns unbounded detection logits; squash them into [0, 1].
    #[serde(default)]
    pub raw_logits: bool,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl RealBackendConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read backend config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("backend config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("endpoint", &self.endpoint),
            ("sam_checkpoint", &self.sam_checkpoint),
            ("grounding_checkpoint", &self.grounding_checkpoint),
            ("device", &self.device),
        ] {
            if value.trim().is_empty() {
                return Err(BackendError::Config(format!("{field} must not be empty")));
            }
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(BackendError::Config(format!("endpoint '{}' is not an http(s) URL", self.endpoint)));
        }
        Ok(())
    }
}

pub struct HttpBackend {
    cfg: RealBackendConfig,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct WireCandidate {
    bbox: [f64; 4],
    logit: f64,
    phrase_score: f64,
    #[serde(default)]
    phrase: String,
}

#[derive(Deserialize)]
struct WireScales {
    scales: [Vec<f64>; 3],
    confidences: [f64; 3],
}

#[derive(Deserialize)]
struct WireMask {
    data: String,
    score: f64,
}

#[derive(Deserialize)]
struct WireFeatures {
    cols: usize,
    rows: usize,
    stride: usize,
    dim: usize,
    data: Vec<f64>,
}

fn squash(v: f64) -> f64 {
    (1.0 / (1.0 + (-v).exp())).clamp(0.0, 1.0)
}

fn encode_image(image: &GeoRaster) -> Value {
    let (n, bands) = (image.width() * image.height(), image.band_count());
    let mut interleaved = Vec::with_capacity(n * bands);
    for i in 0..n {
        for b in 0..bands {
            interleaved.push(image.band(b)[i]);
        }
    }
    json!({
        "width": image.width(),
        "height": image.height(),
        "bands": bands,
        "data": STANDARD.encode(interleaved),
    })
}

impl HttpBackend {
    /// Build the client and ask the server to load the configured checkpoints.
    pub fn connect(cfg: RealBackendConfig) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let backend = Self { cfg, client };
        let _: Value = backend.call(
            "/v1/load",
            json!({
                "sam_checkpoint": backend.cfg.sam_checkpoint,
                "sam_model": backend.cfg.sam_model,
                "grounding_checkpoint": backend.cfg.grounding_checkpoint,
                "device": backend.cfg.device,
            }),
        )?;
        Ok(backend)
    }

    pub fn config(&self) -> &RealBackendConfig {
        &self.cfg
    }

    fn call<T: DeserializeOwned>(&self, path: &str, body: Value) -> Result<T> {
        let url = format!("{}{path}", self.cfg.endpoint.trim_end_matches('/'));
        let resp = self
            .client
            .post(&url)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Unavailable(format!("{url}: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(if status.is_client_error() {
                BackendError::InvalidInput(format!("{url}: {status}: {text}"))
            } else {
                BackendError::Unavailable(format!("{url}: {status}: {text}"))
            });
        }
        resp.json::<T>()
            .map_err(|e| BackendError::Protocol(format!("{url}: {e}")))
    }

    fn scales(&self, image: &GeoRaster, wire: WireScales) -> Result<MultiScaleMasks> {
        MultiScaleMasks::new(image.width(), image.height(), wire.scales, wire.confidences)
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "real"
    }

    fn detect(&self, image: &GeoRaster, phrase: &str) -> Result<Vec<DetectionCandidate>> {
        if phrase.trim().is_empty() {
            return Err(BackendError::InvalidInput("empty phrase".into()));
        }
        #[derive(Deserialize)]
        struct Resp {
            candidates: Vec<WireCandidate>,
        }
        let resp: Resp = self.call("/v1/detect", json!({"image": encode_image(image), "phrase": phrase}))?;
        resp.candidates
            .into_iter()
            .map(|c| {
                let [x1, y1, x2, y2] = c.bbox;
                let bbox = PixelBox::new(x1, y1, x2, y2).map_err(|e| BackendError::Protocol(e.to_string()))?;
                let (logit, phrase_score) = if self.cfg.raw_logits {
                    (squash(c.logit), squash(c.phrase_score))
                } else {
                    (c.logit, c.phrase_score)
                };
                let cand = DetectionCandidate {
                    bbox,
                    logit,
                    phrase_score,
                    phrase: if c.phrase.is_empty() { phrase.to_string() } else { c.phrase },
                };
                cand.validate()?;
                Ok(cand)
            })
            .collect()
    }

    fn segment_box(&self, image: &GeoRaster, bbox: &PixelBox) -> Result<MultiScaleMasks> {
        let wire = self.call(
            "/v1/segment_box",
            json!({"image": encode_image(image), "bbox": bbox.coords()}),
        )?;
        self.scales(image, wire)
    }

    fn segment_points(&self, image: &GeoRaster, prompt: &PointPrompt) -> Result<MultiScaleMasks> {
        let xy = |pts: &[crate::geodata::PixelPoint]| pts.iter().map(|p| [p.x, p.y]).collect::<Vec<_>>();
        let wire = self.call(
            "/v1/segment_points",
            json!({
                "image": encode_image(image),
                "foreground": xy(&prompt.foreground),
                "background": xy(&prompt.background),
            }),
        )?;
        self.scales(image, wire)
    }

    fn segment_everything(&self, image: &GeoRaster) -> Result<Vec<ScoredMask>> {
        #[derive(Deserialize)]
        struct Resp {
            masks: Vec<WireMask>,
        }
        let resp: Resp = self.call("/v1/segment_everything", json!({"image": encode_image(image)}))?;
        resp.masks
            .into_iter()
            .map(|m| {
                let bytes = STANDARD
                    .decode(m.data.as_bytes())
                    .map_err(|e| BackendError::Protocol(format!("mask data: {e}")))?;
                let mask = BinaryMask::new(image.width(), image.height(), bytes.iter().map(|&b| b != 0).collect())
                    .map_err(|e| BackendError::Protocol(e.to_string()))?;
                Ok(ScoredMask { mask, score: m.score })
            })
            .collect()
    }

    fn embed(&self, image: &GeoRaster) -> Result<FeatureMap> {
        let w: WireFeatures = self.call("/v1/embed", json!({"image": encode_image(image)}))?;
        FeatureMap::new(w.cols, w.rows, w.stride, w.dim, w.data)
    }

    fn supports_background_points(&self) -> bool {
        true
    }
}
