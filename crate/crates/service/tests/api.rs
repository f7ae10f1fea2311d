mod common;

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::sync::Arc;

use common::{replay, scenario, service};
use layercraft_core::image::{mock_generate, Image};
use layercraft_core::layout::CanvasSpec;
use layercraft_service::{router, MemoryStore, Service};
use serde_json::{json, Value};

struct Api {
    base: String,
    agent: ureq::Agent,
}

impl Api {
    fn start(svc: Service) -> Self {
        let app = router(Arc::new(svc));
        let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, app).await.unwrap();
            });
        });
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: format!("http://{}", rx.recv().unwrap()),
            agent,
        }
    }

    fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let mut r = self
            .agent
            .post(format!("{}{path}", self.base))
            .send_json(&body)
            .unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }

    fn post_bytes(&self, path: &str, body: &[u8]) -> (u16, Value) {
        let mut r = self
            .agent
            .post(format!("{}{path}", self.base))
            .send(body)
            .unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let mut r = self
            .agent
            .get(format!("{}{path}", self.base))
            .call()
            .unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }
}

fn two_object_api() -> Api {
    Api::start(service(Arc::new(MemoryStore::new()), replay("two_object")))
}

fn create_two_object(api: &Api) -> String {
    let sc = scenario("two_object");
    let (status, body) = api.post(
        "/v1/sessions",
        json!({"prompt": sc.prompt["text"], "settings": sc.settings}),
    );
    assert_eq!(status, 201, "{body}");
    body["id"].as_str().unwrap().to_string()
}

#[test]
fn create_run_and_fetch_stages() {
    let api = two_object_api();
    let id = create_two_object(&api);
    let (status, body) = api.post(&format!("/v1/sessions/{id}/run"), json!({}));
    assert_eq!(status, 200);
    assert_eq!(body["status"]["state"], "complete");
    assert_eq!(body["stages"].as_array().unwrap().len(), 3);

    let mut r = api
        .agent
        .get(format!("{}/v1/sessions/{id}/stages/2", api.base))
        .call()
        .unwrap();
    assert_eq!(r.headers()["content-type"], "image/png");
    let image = Image::from_png(&r.body_mut().read_to_vec().unwrap()).unwrap();
    assert_eq!(image.canvas(), CanvasSpec::new(256, 256));

    let (status, list) = api.get("/v1/sessions");
    assert_eq!(status, 200);
    assert_eq!(list["sessions"], json!([id]));
    let (status, _) = api.get(&format!("/v1/sessions/{id}/stages/9"));
    assert_eq!(status, 409);
}

#[test]
fn events_stream_as_ndjson() {
    let api = two_object_api();
    let id = create_two_object(&api);
    api.post(&format!("/v1/sessions/{id}/run"), json!({}));
    let mut r = api
        .agent
        .get(format!("{}/v1/sessions/{id}/events", api.base))
        .call()
        .unwrap();
    assert_eq!(r.headers()["content-type"], "application/x-ndjson");
    let text = r.body_mut().read_to_string().unwrap();
    let events: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for (k, e) in events.iter().enumerate() {
        assert_eq!(e["seq"], k as u64 + 1);
    }
    let mut r = api
        .agent
        .get(format!("{}/v1/sessions/{id}/events?since=4", api.base))
        .call()
        .unwrap();
    let tail = r.body_mut().read_to_string().unwrap();
    assert_eq!(tail.lines().count(), events.len() - 4);
}

#[test]
fn follow_delivers_live_events() {
    let api = two_object_api();
    let id = create_two_object(&api);
    let r = api
        .agent
        .get(format!("{}/v1/sessions/{id}/events?follow=true", api.base))
        .call()
        .unwrap();
    let mut lines = BufReader::new(r.into_body().into_reader()).lines();
    let first: Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
    assert_eq!(first["kind"], "created");

    let base = api.base.clone();
    let runner = std::thread::spawn(move || {
        ureq::post(format!("{base}/v1/sessions/{id}/run"))
            .send_empty()
            .unwrap();
    });
    let mut seq = 1;
    loop {
        let event: Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
        seq += 1;
        assert_eq!(event["seq"], seq);
        if event["kind"] == "status" && event["payload"]["to"] == "complete" {
            break;
        }
    }
    runner.join().unwrap();
}

#[test]
fn errors_map_to_statuses() {
    let api = two_object_api();
    let (status, body) = api.get("/v1/sessions/ffff");
    assert_eq!((status, body["code"].as_str()), (404, Some("NotFound")));

    let (status, body) = api.post("/v1/sessions", json!({"prompt": "x", "colour": "red"}));
    assert_eq!((status, body["code"].as_str()), (422, Some("InvalidInput")));

    let (status, body) = api.post("/v1/sessions", json!({"prompt": "   "}));
    assert_eq!(
        (status, body["code"].as_str()),
        (422, Some("InvalidPrompt"))
    );

    let id = create_two_object(&api);
    let edit = json!({"kind": "remove_region", "mask": {"rect": [0, 0, 10, 10]}});
    let (status, body) = api.post(&format!("/v1/sessions/{id}/edits"), edit);
    assert_eq!((status, body["code"].as_str()), (409, Some("Precondition")));

    let (status, _) = api.post(
        &format!("/v1/sessions/{id}/edits"),
        json!({"kind": "paint"}),
    );
    assert_eq!(status, 422);

    let (status, body) = api.post(&format!("/v1/sessions/{id}/finish"), json!({}));
    assert_eq!((status, body["code"].as_str()), (409, Some("Precondition")));
}

#[test]
fn edits_are_accepted_after_a_run() {
    let api = two_object_api();
    let id = create_two_object(&api);
    api.post(&format!("/v1/sessions/{id}/run"), json!({}));
    let edit = json!({"kind": "remove_region", "mask": {"rect": [60, 70, 180, 180]}});
    let (status, body) = api.post(&format!("/v1/sessions/{id}/edits"), edit);
    assert_eq!(status, 202, "{body}");
    assert_eq!(body["status"]["state"], "generating");
    let (_, body) = api.post(&format!("/v1/sessions/{id}/run"), json!({}));
    assert_eq!(body["status"]["state"], "complete");
    assert_eq!(body["stages"].as_array().unwrap().len(), 4);
}

#[test]
fn blobs_accept_png_only() {
    let api = two_object_api();
    let png = mock_generate("upload", CanvasSpec::new(8, 8), 0).to_png();
    let (status, body) = api.post_bytes("/v1/blobs", &png);
    assert_eq!(status, 201);
    assert!(body["ref"].as_str().unwrap().starts_with("sha256:"));
    let (status, _) = api.post_bytes("/v1/blobs", b"not an image");
    assert_eq!(status, 422);
}
