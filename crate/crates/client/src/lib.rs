//! Blocking client for the geoprompt service.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use geoprompt_core::api::{
    ErrorBody, ErrorKind, Health, MetricsRequest, MetricsResponse, RenderRequest, RenderResponse, ReportRequest,
    ReportResponse, RunRequest, ROUTE_HEALTH, ROUTE_METRICS, ROUTE_RENDER, ROUTE_REPORT, ROUTE_RUN,
};
use geoprompt_core::pipeline::{PipelineError, RunRecord};

pub struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

fn transport(e: reqwest::Error) -> PipelineError {
    PipelineError::Io(format!("service request failed: {e}"))
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Result<Self, PipelineError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(3600))
            .build()
            .map_err(transport)?;
        Ok(Self {
            base: base.into().trim_end_matches('/').to_string(),
            http,
        })
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, route: &str, body: &Req) -> Result<Resp, PipelineError> {
        let resp = self
            .http
            .post(format!("{}{route}", self.base))
            .json(body)
            .send()
            .map_err(transport)?;
        decode(resp)
    }

    pub fn health(&self) -> Result<Health, PipelineError> {
        let resp = self.http.get(format!("{}{ROUTE_HEALTH}", self.base)).send().map_err(transport)?;
        decode(resp)
    }

    pub fn run(&self, req: &RunRequest) -> Result<RunRecord, PipelineError> {
        self.post(ROUTE_RUN, req)
    }

    pub fn report(&self, req: &ReportRequest) -> Result<ReportResponse, PipelineError> {
        self.post(ROUTE_REPORT, req)
    }

    pub fn metrics(&self, req: &MetricsRequest) -> Result<MetricsResponse, PipelineError> {
        self.post(ROUTE_METRICS, req)
    }

    pub fn render_scene(&self, req: &RenderRequest) -> Result<RenderResponse, PipelineError> {
        self.post(ROUTE_RENDER, req)
    }
}

fn decode<T: DeserializeOwned>(resp: reqwest::blocking::Response) -> Result<T, PipelineError> {
    let status = resp.status();
    let bytes = resp.bytes().map_err(transport)?;
    if status.is_success() {
        return serde_json::from_slice(&bytes)
            .map_err(|e| PipelineError::Internal(format!("unexpected response from service: {e}")));
    }
    match serde_json::from_slice::<ErrorBody>(&bytes) {
        Ok(body) => Err(PipelineError::from_kind(body.kind, body.message)),
        Err(_) => Err(PipelineError::from_kind(
            ErrorKind::Internal,
            format!("service returned {status}: {}", String::from_utf8_lossy(&bytes)),
        )),
    }
}
