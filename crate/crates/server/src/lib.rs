//! HTTP front end for the geoprompt pipeline.
//!
//! Every route takes and returns JSON. Work runs on the blocking pool since
//! rasters, backends and training are synchronous. Failures come back as an
//! [`ErrorBody`] with 422 for validation, 502 for backend and 500 otherwise.

use axum::body::Bytes;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::net::TcpListener;

use geoprompt_core::api::{
    ErrorBody, ErrorKind, Health, MetricsRequest, ReportRequest, RenderRequest, RunRequest, ROUTE_HEALTH,
    ROUTE_METRICS, ROUTE_RENDER, ROUTE_REPORT, ROUTE_RUN,
};
use geoprompt_core::pipeline::{cmd_metrics, cmd_report, cmd_run, render_scene, PipelineError};

pub struct ApiError(PipelineError);

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        ApiError(e)
    }
}

pub fn status_for(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::Validation => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::Backend => StatusCode::BAD_GATEWAY,
        ErrorKind::Io | ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let kind = self.0.kind();
        let body = ErrorBody {
            kind,
            message: self.0.message(),
        };
        (status_for(kind), Json(body)).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(PipelineError::Validation(format!("request body: {e}"))))
}

async fn blocking<Req, Resp>(
    body: Bytes,
    f: fn(&Req) -> Result<Resp, PipelineError>,
) -> Result<Json<Resp>, ApiError>
where
    Req: DeserializeOwned + Send + 'static,
    Resp: Serialize + Send + 'static,
{
    let req: Req = parse(&body)?;
    let out = tokio::task::spawn_blocking(move || f(&req))
        .await
        .map_err(|e| ApiError(PipelineError::Internal(format!("worker failed: {e}"))))??;
    Ok(Json(out))
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

pub fn router() -> Router {
    Router::new()
        .route(ROUTE_HEALTH, get(health))
        .route(ROUTE_RUN, post(|b: Bytes| blocking::<RunRequest, _>(b, cmd_run)))
        .route(ROUTE_REPORT, post(|b: Bytes| blocking::<ReportRequest, _>(b, cmd_report)))
        .route(ROUTE_METRICS, post(|b: Bytes| blocking::<MetricsRequest, _>(b, cmd_metrics)))
        .route(ROUTE_RENDER, post(|b: Bytes| blocking::<RenderRequest, _>(b, render_scene)))
}

/// Serve until the listener fails.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    async fn call(method: &str, uri: &str, body: &str) -> (StatusCode, serde_json::Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        let resp = router().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        (status, serde_json::from_slice(&bytes).unwrap())
    }

    #[tokio::test]
    async fn health_reports_ok() {
        let (status, v) = call("GET", ROUTE_HEALTH, "").await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["status"], "ok");
    }

    #[tokio::test]
    async fn malformed_body_is_validation() {
        let (status, v) = call("POST", ROUTE_RUN, "{not json").await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(v["kind"], "validation");
    }

    #[tokio::test]
    async fn missing_manifest_is_validation() {
        let body = serde_json::json!({
            "manifest": "/nonexistent/manifest.yaml",
            "entry": "00",
            "backend": "mock:/nonexistent/scene.json",
            "out": "/tmp/unused"
        });
        let (status, v) = call("POST", ROUTE_RUN, &body.to_string()).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert!(v["message"].as_str().unwrap().contains("manifest"));
    }

    #[tokio::test]
    async fn metrics_route_counts_pixels() {
        use geoprompt_core::geodata::{save_raster, Grid, LabelRaster};
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::plain(2, 2).unwrap();
        let pred = dir.path().join("pred.tif");
        let gt = dir.path().join("gt.tif");
        save_raster(&LabelRaster::new(grid.clone(), vec![1, 1, 0, 0]).unwrap(), &pred).unwrap();
        save_raster(&LabelRaster::new(grid, vec![1, 0, 1, 0]).unwrap(), &gt).unwrap();
        let body = serde_json::json!({"pred_path": pred, "gt_path": gt});
        let (status, v) = call("POST", ROUTE_METRICS, &body.to_string()).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["counts"], serde_json::json!({"tp": 1, "fp": 1, "fn": 1, "tn": 1}));
        assert_eq!(v["metrics"]["dice"], 0.5);
    }
}
