//! HTTP clients for a remote planner and a remote image service.
//!
//! Planner: `POST {endpoint}/v1/complete` with the completion request as
//! JSON, answered by `{"text": ...}`.
//!
//! Images: `POST {endpoint}/v1/generate` with `{prompt, width, height, seed}`
//! and `POST {endpoint}/v1/inpaint` as `multipart/form-data` with a `request`
//! JSON part (`{prompt, seed}`) and `background`, `mask` and optional
//! `reference` PNG parts. Both answer with PNG bytes.
//!
//! Transport failures and 5xx responses are retried with exponential
//! backoff; 4xx responses are reported as rejections straight away.

use std::time::Duration;

use layercraft_core::backend::BackendError;
use layercraft_core::image::{mask_to_png, Image, ImageBackend, InpaintRequest};
use layercraft_core::layout::CanvasSpec;
use layercraft_core::planner::{CompletionRequest, CompletionResponse, PlannerBackend};
use serde_json::json;
use ureq::http::Response;
use ureq::Body;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff: Duration,
    pub timeout: Duration,
    pub max_body_bytes: u64,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            attempts: 3,
            backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(120),
            max_body_bytes: 64 * 1024 * 1024,
        }
    }
}

enum Failure {
    Retryable(String),
    Fatal(BackendError),
}

struct Client {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl Client {
    fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self { config, agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.endpoint)
    }

    fn with_retry<T>(
        &self,
        what: &str,
        mut call: impl FnMut() -> Result<T, Failure>,
    ) -> Result<T, BackendError> {
        let mut delay = self.config.backoff;
        let mut last = String::new();
        for attempt in 1..=self.config.attempts.max(1) {
            match call() {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => {
                    tracing::warn!(what, attempt, error = %msg, "remote call failed");
                    last = msg;
                }
            }
            if attempt < self.config.attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(BackendError::Transport(format!(
            "{what}: giving up after {} attempts: {last}",
            self.config.attempts.max(1)
        )))
    }

    fn read(&self, sent: Result<Response<Body>, ureq::Error>) -> Result<Vec<u8>, Failure> {
        let mut response = sent.map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = response.status();
        let body = response
            .body_mut()
            .with_config()
            .limit(self.config.max_body_bytes)
            .read_to_vec();
        let body = match body {
            Ok(b) => b,
            Err(ureq::Error::BodyExceedsLimit(limit)) => {
                return Err(Failure::Fatal(BackendError::Decoding(format!(
                    "response body exceeds {limit} bytes"
                ))))
            }
            Err(e) => return Err(Failure::Retryable(e.to_string())),
        };
        if status.is_server_error() {
            return Err(Failure::Retryable(format!("status {status}")));
        }
        if !status.is_success() {
            let text = String::from_utf8_lossy(&body).into_owned();
            return Err(Failure::Fatal(BackendError::RemoteRejection(format!(
                "status {status}: {text}"
            ))));
        }
        Ok(body)
    }
}

pub struct RemotePlanner {
    client: Client,
}

impl RemotePlanner {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            client: Client::new(config),
        }
    }
}

impl PlannerBackend for RemotePlanner {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let url = self.client.url("/v1/complete");
        let body = self.client.with_retry("complete", || {
            self.client
                .read(self.client.agent.post(&url).send_json(request))
        })?;
        let response: CompletionResponse =
            serde_json::from_slice(&body).map_err(|e| BackendError::Decoding(e.to_string()))?;
        Ok(response.text)
    }
}

pub struct RemoteImageBackend {
    client: Client,
}

impl RemoteImageBackend {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            client: Client::new(config),
        }
    }
}

fn decode(bytes: &[u8], canvas: CanvasSpec) -> Result<Image, BackendError> {
    let image = Image::from_png(bytes).map_err(|e| BackendError::Decoding(e.to_string()))?;
    if image.canvas() != canvas {
        return Err(BackendError::Decoding(format!(
            "expected a {canvas} image, received {}",
            image.canvas()
        )));
    }
    Ok(image)
}

/// One `multipart/form-data` part.
pub struct Part<'a> {
    pub name: &'a str,
    pub content_type: &'a str,
    pub data: &'a [u8],
}

/// Encodes parts with the given boundary.
pub fn encode_multipart(boundary: &str, parts: &[Part<'_>]) -> Vec<u8> {
    let mut out = Vec::new();
    for part in parts {
        out.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        out.extend_from_slice(
            format!(
                "Content-Disposition: form-data; name=\"{0}\"; filename=\"{0}\"\r\nContent-Type: {1}\r\n\r\n",
                part.name, part.content_type
            )
            .as_bytes(),
        );
        out.extend_from_slice(part.data);
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    out
}

impl ImageBackend for RemoteImageBackend {
    fn generate(&self, prompt: &str, canvas: CanvasSpec, seed: u64) -> Result<Image, BackendError> {
        let url = self.client.url("/v1/generate");
        let payload =
            json!({"prompt": prompt, "width": canvas.width, "height": canvas.height, "seed": seed});
        let body = self.client.with_retry("generate", || {
            self.client
                .read(self.client.agent.post(&url).send_json(&payload))
        })?;
        decode(&body, canvas)
    }

    fn inpaint(&self, request: &InpaintRequest) -> Result<Image, BackendError> {
        request.check()?;
        let url = self.client.url("/v1/inpaint");
        let meta = serde_json::to_vec(&json!({"prompt": request.prompt, "seed": request.seed}))
            .expect("json");
        let background = request.background.to_png();
        let mask = mask_to_png(&request.mask);
        let reference = request.reference.as_ref().map(Image::to_png);
        let mut parts = vec![
            Part {
                name: "request",
                content_type: "application/json",
                data: &meta,
            },
            Part {
                name: "background",
                content_type: "image/png",
                data: &background,
            },
            Part {
                name: "mask",
                content_type: "image/png",
                data: &mask,
            },
        ];
        if let Some(r) = &reference {
            parts.push(Part {
                name: "reference",
                content_type: "image/png",
                data: r,
            });
        }
        let boundary = format!("layercraft-{:032x}", rand::random::<u128>());
        let form = encode_multipart(&boundary, &parts);
        let content_type = format!("multipart/form-data; boundary={boundary}");
        let body = self.client.with_retry("inpaint", || {
            self.client.read(
                self.client
                    .agent
                    .post(&url)
                    .header("content-type", &content_type)
                    .send(&form[..]),
            )
        })?;
        decode(&body, request.background.canvas())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multipart_layout() {
        let body = encode_multipart(
            "XYZ",
            &[
                Part {
                    name: "request",
                    content_type: "application/json",
                    data: b"{}",
                },
                Part {
                    name: "mask",
                    content_type: "image/png",
                    data: b"\x89PNG",
                },
            ],
        );
        let expected = b"--XYZ\r\nContent-Disposition: form-data; name=\"request\"; filename=\"request\"\r\nContent-Type: application/json\r\n\r\n{}\r\n--XYZ\r\nContent-Disposition: form-data; name=\"mask\"; filename=\"mask\"\r\nContent-Type: image/png\r\n\r\n\x89PNG\r\n--XYZ--\r\n";
        assert_eq!(body, expected.to_vec());
    }

    #[test]
    fn endpoint_trailing_slash_is_trimmed() {
        assert_eq!(RemoteConfig::new("http://h:1/").endpoint, "http://h:1");
    }
}
