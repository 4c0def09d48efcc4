use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tlpim_core::checkpoint::Checkpoint;
use tlpim_core::dataset::{load_manifest, manifest_dir, SampleRecord};
use tlpim_core::net::{EmbeddingNet, NetConfig};
use tlpim_core::synth::{generate_dataset, SynthConfig};
use tlpim_core::visual::{render_pair_layers, LayerFlags};
use tlpim_review::{build_queue, router, Review, ReviewState, Status};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    records: Vec<SampleRecord>,
    base: std::path::PathBuf,
    checkpoint: Checkpoint,
    log: std::path::PathBuf,
}

/// Two identities (both eyes of one subject) with two sessions each.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_identities: 2,
        samples_per_identity: 2,
        image_size: 48,
        seed: 2,
        ..SynthConfig::default()
    };
    let manifest = generate_dataset(&cfg, &dir.path().join("data")).unwrap();
    let net = EmbeddingNet::new(NetConfig {
        input_size: 16,
        conv_blocks: vec![4, 4],
        reduce_channels: 6,
        embed_dim: 4,
        seed: 1,
    })
    .unwrap();
    Fixture {
        records: load_manifest(&manifest).unwrap(),
        base: manifest_dir(&manifest),
        checkpoint: Checkpoint {
            net,
            threshold: Some(0.9),
        },
        log: dir.path().join("verdicts.jsonl"),
        _dir: dir,
    }
}

fn review(f: &Fixture) -> Arc<Review> {
    let queue = build_queue(&f.records, &f.base, &f.checkpoint, None).unwrap();
    Arc::new(Review::open(queue, &f.log).unwrap())
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

#[test]
fn four_samples_in_two_sessions_give_four_cases() {
    let f = fixture();
    let queue = build_queue(&f.records, &f.base, &f.checkpoint, None).unwrap();
    assert_eq!(queue.len(), 4);
    assert!(queue.cases().windows(2).all(|w| w[0].similarity >= w[1].similarity));
    assert_eq!(queue.threshold, 0.9);
    let overridden = build_queue(&f.records, &f.base, &f.checkpoint, Some(0.1)).unwrap();
    assert_eq!(overridden.threshold, 0.1);
    assert!(build_queue(&[], &f.base, &f.checkpoint, None).is_err());
}

#[tokio::test]
async fn verdict_round_trip_through_the_api() {
    let f = fixture();
    let app = router(review(&f), None);

    let (status, body) = call(&app, "GET", "/api/pairs?status=pending", "").await;
    assert_eq!(status, StatusCode::OK);
    let pending = json(&body);
    assert_eq!(pending.as_array().unwrap().len(), 4);
    let id = pending[0]["pair_id"].as_str().unwrap().to_string();

    let (status, body) = call(&app, "GET", &format!("/api/pairs/{id}"), "").await;
    assert_eq!(status, StatusCode::OK);
    let detail = json(&body);
    assert_eq!(detail["status"], "pending");
    assert!(detail["probe"]["pmi_hours"].is_number());

    let uri = format!("/api/pairs/{id}/verdict");
    let (status, body) = call(&app, "POST", &uri, r#"{"verdict":"match","notes":"clear, \"crisp\" texture"}"#).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(json(&body)["verdict"], "match");

    let (status, _) = call(&app, "POST", &uri, r#"{"verdict":"probably"}"#).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, "POST", "/api/pairs/nope/verdict", r#"{"verdict":"match"}"#).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (_, body) = call(&app, "GET", "/api/pairs?status=reviewed", "").await;
    assert_eq!(json(&body).as_array().unwrap().len(), 1);
    let (_, body) = call(&app, "GET", "/api/pairs?status=pending", "").await;
    assert_eq!(json(&body).as_array().unwrap().len(), 3);

    let (status, body) = call(&app, "POST", &uri, r#"{"verdict":"inconclusive"}"#).await;
    assert_eq!(status, StatusCode::CREATED);
    let (_, body2) = call(&app, "GET", &format!("/api/pairs/{id}"), "").await;
    let detail = json(&body2);
    assert_eq!(detail["history"].as_array().unwrap().len(), 2);
    assert_eq!(detail["verdict"], json(&body));

    let (status, body) = call(&app, "GET", "/api/export", "").await;
    assert_eq!(status, StatusCode::OK);
    let csv = String::from_utf8(body).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "pair_id,verdict,similarity,algorithm_decision,agrees,notes,recorded_at");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with(&format!("{id},inconclusive,")));
    assert_eq!(std::fs::read_to_string(&f.log).unwrap().lines().count(), 2);
}

#[tokio::test]
async fn replaying_the_log_restores_state() {
    let f = fixture();
    let first = review(&f);
    let app = router(first.clone(), None);
    let ids: Vec<String> = first.queue().cases().iter().map(|c| c.pair_id.clone()).collect();
    for (id, v) in ids.iter().zip(["match", "nonmatch", "match"]) {
        let (status, _) = call(&app, "POST", &format!("/api/pairs/{id}/verdict"), &format!(r#"{{"verdict":"{v}"}}"#)).await;
        assert_eq!(status, StatusCode::CREATED);
    }
    call(&app, "POST", &format!("/api/pairs/{}/verdict", ids[0]), r#"{"verdict":"nonmatch","notes":"second look"}"#).await;
    let before: ReviewState = first.state();
    let export = first.export_csv();
    drop(app);
    drop(first);

    let second = review(&f);
    assert_eq!(second.state(), before);
    assert_eq!(second.export_csv(), export);
    assert_eq!(second.state().status(&ids[3]), Status::Pending);
    assert!(export.contains("second look"));
}

#[tokio::test]
async fn layers_match_the_offline_bundle() {
    let f = fixture();
    let review = review(&f);
    let app = router(review.clone(), None);
    let id = review.queue().cases()[1].pair_id.clone();
    let bundle = render_pair_layers(&review.queue().pair_evidence(&id).unwrap(), LayerFlags::ALL).unwrap();
    for (name, bytes) in bundle {
        let (sample, layer) = name.trim_end_matches(".png").split_once('_').unwrap();
        let (status, body) = call(&app, "GET", &format!("/api/pairs/{id}/layers/{sample}/{layer}"), "").await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body, bytes, "{name}");
    }
    let (status, _) = call(&app, "GET", &format!("/api/pairs/{id}/layers/c/cam"), "").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", &format!("/api/pairs/{id}/layers/a/eyelash"), "").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = call(&app, "GET", "/", "").await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("/api/pairs"));
}
