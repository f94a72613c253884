mod common;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use common::fixture;
use nariqa_core::config::StudyConfig;
use nariqa_core::corpus::read_manifest_from;
use nariqa_study::images::{content_hash, ImageStore};
use nariqa_study::server::{router, Descriptor, ServerOptions};
use nariqa_study::{Aggregation, Permutation, StudyState};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(n: usize, rule: StudyConfig, log: Option<&std::path::Path>, opts: ServerOptions) -> Router {
    let (scenes, m) = fixture(n);
    let header = m.header.clone();
    let study = match log {
        Some(p) => StudyState::open(m, rule, 7, p).unwrap(),
        None => StudyState::in_memory(m, rule, 7).unwrap(),
    };
    router(study, ImageStore::new(scenes, header), opts)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, body: String) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/api/v1/vote")
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    call(app, req).await
}

fn json_of(b: &[u8]) -> Value {
    serde_json::from_slice(b).unwrap()
}

#[tokio::test]
async fn rater_walks_the_study_over_http() {
    let app = app(3, StudyConfig { min_raters: 1, theta: 0.8 }, None, ServerOptions::default());
    let mut seen = Vec::new();
    loop {
        let (st, body) = get(&app, "/api/v1/next?rater=alice").await;
        assert_eq!(st, StatusCode::OK);
        let d: Descriptor = serde_json::from_slice(&body).unwrap();
        let progress = d.progress.unwrap();
        assert_eq!((progress.voted, progress.total), (seen.len(), 3));
        if d.done {
            break;
        }
        let id = d.triplet_id.clone().unwrap();
        assert!(d.aligned_url.is_none());
        // Images are served under the hash of their bytes.
        for url in [d.reference_url.unwrap(), d.left_url.unwrap(), d.right_url.unwrap()] {
            let (st, png) = get(&app, &url).await;
            assert_eq!(st, StatusCode::OK);
            assert_eq!(url, format!("/img/{}.png", content_hash(&png)));
            assert_eq!(&png[1..4], b"PNG");
        }
        let (st, body) = post(
            &app,
            json!({"triplet_id": id, "rater_id": "alice", "side": "left", "permutation": d.permutation}).to_string(),
        )
        .await;
        assert_eq!(st, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
        let ack = json_of(&body);
        let expected = u8::from(d.permutation == Some(Permutation::Swap));
        assert_eq!(ack["choice"], json!(expected));
        seen.push((id, expected));
    }
    let ids: Vec<&String> = seen.iter().map(|s| &s.0).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);

    let (_, body) = get(&app, "/api/v1/progress").await;
    let p = json_of(&body);
    assert_eq!((p["votes_logged"].as_u64(), p["labeled"].as_u64()), (Some(3), Some(3)));

    let (st, body) = get(&app, "/api/v1/export").await;
    assert_eq!(st, StatusCode::OK);
    let m = read_manifest_from(body.as_slice(), std::path::Path::new("export")).unwrap();
    assert_eq!(m.records.len(), 3);
    for (id, c) in &seen {
        assert_eq!(m.get(id).unwrap().label, Some(*c));
    }
    let (_, body) = get(&app, "/api/v1/export?part=tallies").await;
    let agg: Aggregation = serde_json::from_slice(&body).unwrap();
    assert_eq!(agg.labels().len(), 3);
}

#[tokio::test]
async fn descriptors_hide_distortion_metadata() {
    let app = app(2, StudyConfig::default(), None, ServerOptions { show_aligned: true, static_dir: None });
    let (_, body) = get(&app, "/api/v1/next?rater=bob").await;
    let text = String::from_utf8(body).unwrap();
    for word in ["level", "distortion", "type_id", "pos", "neg"] {
        assert!(!text.contains(word), "{word} leaked in {text}");
    }
    let d: Descriptor = serde_json::from_str(&text).unwrap();
    assert!(d.aligned_url.is_some());
    let id = d.triplet_id.unwrap();
    let (st, body) = get(&app, &format!("/api/v1/triplet/{id}?rater=bob")).await;
    assert_eq!(st, StatusCode::OK);
    let again: Descriptor = serde_json::from_slice(&body).unwrap();
    assert_eq!((again.left_url, again.permutation), (d.left_url, d.permutation));
}

#[tokio::test]
async fn malformed_requests_get_client_errors() {
    let app = app(2, StudyConfig::default(), None, ServerOptions::default());
    let (_, body) = get(&app, "/api/v1/next?rater=carol").await;
    let id = json_of(&body)["triplet_id"].as_str().unwrap().to_string();
    let cases = [
        (json!({"triplet_id": "missing", "rater_id": "carol", "choice": 0}).to_string(), StatusCode::NOT_FOUND),
        (json!({"triplet_id": id, "rater_id": "carol", "choice": 3}).to_string(), StatusCode::BAD_REQUEST),
        (json!({"triplet_id": id, "rater_id": "carol"}).to_string(), StatusCode::BAD_REQUEST),
        (json!({"triplet_id": id, "rater_id": "carol", "choice": 0, "side": "left"}).to_string(), StatusCode::BAD_REQUEST),
        (json!({"triplet_id": id, "rater_id": "c a", "choice": 0}).to_string(), StatusCode::BAD_REQUEST),
        ("{not json".to_string(), StatusCode::BAD_REQUEST),
        (json!({"triplet_id": id, "rater_id": "carol", "choice": "zero"}).to_string(), StatusCode::UNPROCESSABLE_ENTITY),
    ];
    for (body, want) in cases {
        let (st, resp) = post(&app, body.clone()).await;
        assert_eq!(st, want, "{body}");
        assert!(json_of(&resp)["error"].is_string());
        assert!(st.is_client_error());
    }
    assert_eq!(get(&app, "/api/v1/next").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/v1/triplet/missing").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, &format!("/img/{}.png", "0".repeat(64))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/v1/export?part=zip").await.0, StatusCode::BAD_REQUEST);
    let (_, p) = get(&app, "/api/v1/progress").await;
    assert_eq!(json_of(&p)["votes_logged"], json!(0));
}

#[tokio::test]
async fn retried_post_with_same_key_counts_once() {
    let app = app(1, StudyConfig::default(), None, ServerOptions::default());
    let (_, body) = get(&app, "/api/v1/next?rater=dave").await;
    let id = json_of(&body)["triplet_id"].as_str().unwrap().to_string();
    let b = json!({"triplet_id": id, "rater_id": "dave", "choice": 1, "idempotency_key": "x-1"}).to_string();
    let (s1, a1) = post(&app, b.clone()).await;
    let (s2, a2) = post(&app, b).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(json_of(&a2)["duplicate"], json!(true));
    assert_eq!(json_of(&a1)["log_index"], json_of(&a2)["log_index"]);
    let (_, p) = get(&app, "/api/v1/progress").await;
    assert_eq!(json_of(&p)["votes_logged"], json!(1));
}

#[tokio::test]
async fn acknowledged_votes_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("votes.jsonl");
    let rule = StudyConfig { min_raters: 2, theta: 0.8 };
    let before = {
        let app = app(2, rule, Some(&log), ServerOptions::default());
        for rater in ["a", "b"] {
            loop {
                let (_, body) = get(&app, &format!("/api/v1/next?rater={rater}")).await;
                let d = json_of(&body);
                if d["done"] == json!(true) {
                    break;
                }
                let b = json!({"triplet_id": d["triplet_id"], "rater_id": rater, "choice": 0});
                assert_eq!(post(&app, b.to_string()).await.0, StatusCode::OK);
            }
        }
        get(&app, "/api/v1/export?part=tallies").await.1
    };
    let app = app(2, rule, Some(&log), ServerOptions::default());
    assert_eq!(get(&app, "/api/v1/export?part=tallies").await.1, before);
    let (_, body) = get(&app, "/api/v1/next?rater=a").await;
    assert_eq!(json_of(&body)["done"], json!(true));
}

#[tokio::test]
async fn serves_static_bundle_and_real_sockets() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>study</html>").unwrap();
    let app = app(1, StudyConfig::default(), None, ServerOptions {
        show_aligned: false,
        static_dir: Some(dir.path().to_path_buf()),
    });
    let (st, body) = get(&app, "/").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body, b"<html>study</html>");

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(async move { axum::serve(listener, app).await });
    let resp = tokio::task::spawn_blocking(move || {
        use std::io::{Read, Write};
        let mut s = std::net::TcpStream::connect(addr).unwrap();
        s.write_all(b"GET /api/v1/progress HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
        let mut out = String::new();
        s.read_to_string(&mut out).unwrap();
        out
    })
    .await
    .unwrap();
    server.abort();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"triplets\":1"));
}
