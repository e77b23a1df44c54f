//! The stateless model service every instance runs.
//!
//! Each request carries everything the computation needs, so any instance of
//! an image can answer it. The models are closed-form stubs standing in for
//! real hydrological codes.

use crate::ids::{ImageId, InstanceId, ModelId};
use crate::provider::InstanceState;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub model_id: ModelId,
    pub parameters: BTreeMap<String, f64>,
    pub request_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub request_id: String,
    pub model_id: ModelId,
    pub outputs: BTreeMap<String, f64>,
    pub served_by: InstanceId,
    pub compute_units: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("model {model} is not served by image {image}")]
    ModelNotServed { model: ModelId, image: ImageId },
    #[error("malformed request: {0}")]
    MalformedRequest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub state: InstanceState,
    pub session_count: u32,
    pub image_id: ImageId,
    pub version: u32,
}

/// Output of evaluating a stub: named outputs and the synthetic work done.
pub type StubOutput = (BTreeMap<String, f64>, u64);

fn param(params: &BTreeMap<String, f64>, name: &str) -> Result<f64, GatewayError> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| GatewayError::MalformedRequest(format!("missing parameter `{name}`")))
}

/// Evaluates the stub for `model`. Pure: depends only on its arguments.
///
/// * `topmodel-stub`: `y = a * b + 1`, 10 compute units.
/// * `fluxmodel-stub`: `flux = k * (c_in - c_out)`, `load = flux * area`, 6 units.
/// * any other model: `sum` and `count` of the parameters, one unit per parameter plus one.
pub fn evaluate_stub(model: &ModelId, params: &BTreeMap<String, f64>) -> Result<StubOutput, GatewayError> {
    let mut out = BTreeMap::new();
    let units = match model.as_str() {
        "topmodel-stub" => {
            let (a, b) = (param(params, "a")?, param(params, "b")?);
            out.insert("y".to_owned(), a * b + 1.0);
            10
        }
        "fluxmodel-stub" => {
            let k = param(params, "k")?;
            let flux = k * (param(params, "c_in")? - param(params, "c_out")?);
            let area = params.get("area").copied().unwrap_or(1.0);
            out.insert("flux".to_owned(), flux);
            out.insert("load".to_owned(), flux * area);
            6
        }
        _ => {
            out.insert("sum".to_owned(), params.values().sum());
            out.insert("count".to_owned(), params.len() as f64);
            params.len() as u64 + 1
        }
    };
    Ok((out, units))
}

/// Work observed since the last health sample was taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntervalStats {
    pub requests: u64,
    pub compute_units: u64,
}

#[derive(Debug, Clone)]
pub struct ModelService {
    instance_id: InstanceId,
    image_id: ImageId,
    version: u32,
    models: BTreeSet<ModelId>,
    pub(crate) state: InstanceState,
    session_count: u32,
    interval: IntervalStats,
}

impl ModelService {
    pub fn new(
        instance_id: InstanceId,
        image_id: ImageId,
        version: u32,
        models: impl IntoIterator<Item = ModelId>,
    ) -> Self {
        Self {
            instance_id,
            image_id,
            version,
            models: models.into_iter().collect(),
            state: InstanceState::Pending,
            session_count: 0,
            interval: IntervalStats::default(),
        }
    }

    pub fn serves(&self, model: &ModelId) -> bool {
        self.models.contains(model)
    }

    pub fn run_model(&mut self, req: &ModelRequest) -> Result<ModelResult, GatewayError> {
        if !self.serves(&req.model_id) {
            return Err(GatewayError::ModelNotServed {
                model: req.model_id.clone(),
                image: self.image_id.clone(),
            });
        }
        if req.request_id.is_empty() {
            return Err(GatewayError::MalformedRequest("empty request_id".into()));
        }
        if let Some((k, _)) = req.parameters.iter().find(|(_, v)| !v.is_finite()) {
            return Err(GatewayError::MalformedRequest(format!(
                "parameter `{k}` is not a finite number"
            )));
        }
        let (outputs, compute_units) = evaluate_stub(&req.model_id, &req.parameters)?;
        self.interval.requests += 1;
        self.interval.compute_units += compute_units;
        Ok(ModelResult {
            request_id: req.request_id.clone(),
            model_id: req.model_id.clone(),
            outputs,
            served_by: self.instance_id.clone(),
            compute_units,
        })
    }

    pub fn health(&self) -> HealthReport {
        HealthReport {
            state: self.state,
            session_count: self.session_count,
            image_id: self.image_id.clone(),
            version: self.version,
        }
    }

    pub fn session_count(&self) -> u32 {
        self.session_count
    }

    pub(crate) fn set_session_count(&mut self, n: u32) {
        self.session_count = n;
    }

    /// Returns and resets the stats of the interval that just closed.
    pub(crate) fn take_interval(&mut self) -> IntervalStats {
        std::mem::take(&mut self.interval)
    }

    /// Resource-style entry point: `POST /models/{model_id}/runs` with a JSON
    /// [`ModelRequest`] body, and `GET /health`.
    pub fn handle_http(&mut self, method: &str, path: &str, body: &str) -> HttpResponse {
        let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
        match (method, segments.as_slice()) {
            ("GET", ["health"]) => HttpResponse::json(200, &self.health()),
            ("POST", ["models", model, "runs"]) => {
                let req: ModelRequest = match serde_json::from_str(body) {
                    Ok(r) => r,
                    Err(e) => return HttpResponse::error(400, "malformed_request", &e.to_string()),
                };
                if req.model_id.as_str() != *model {
                    return HttpResponse::error(
                        400,
                        "malformed_request",
                        "model_id in body does not match the resource path",
                    );
                }
                match self.run_model(&req) {
                    Ok(res) => HttpResponse::json(201, &res),
                    Err(e @ GatewayError::ModelNotServed { .. }) => {
                        HttpResponse::error(404, "model_not_served", &e.to_string())
                    }
                    Err(e @ GatewayError::MalformedRequest(_)) => {
                        HttpResponse::error(400, "malformed_request", &e.to_string())
                    }
                }
            }
            (_, ["health"]) | (_, ["models", _, "runs"]) => HttpResponse::error(405, "method_not_allowed", method),
            _ => HttpResponse::error(404, "not_found", path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

impl HttpResponse {
    fn json<T: Serialize>(status: u16, value: &T) -> Self {
        Self {
            status,
            body: serde_json::to_string(value).expect("response types serialize"),
        }
    }

    fn error(status: u16, code: &str, detail: &str) -> Self {
        Self::json(status, &serde_json::json!({ "code": code, "detail": detail }))
    }
}
