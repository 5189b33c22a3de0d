mod common;

use axum::http::StatusCode;
use axum::Router;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use latent_edit::gateway::{BackendBundle, ImageTensor, ToyConfig, ToyLinearBackend};
use latent_edit::latent::LatentGeometry;
use latent_edit::mapper::{save_checkpoint, MapperConfig, MapperModel};
use latent_edit::service::{router, AppState, ServiceOptions};
use latent_edit::store::{content_fingerprint, ArtifactKey, ArtifactKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::TempDir;

use common::http::*;

struct Fixture {
    _dir: TempDir,
    state: AppState,
    app: Router,
    png: Vec<u8>,
}

fn fixture_with(config: ToyConfig, max_upload: Option<usize>) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let backend = BackendBundle::toy(ToyLinearBackend::new(config).unwrap());
    let w = backend.sample_latent(&mut ChaCha8Rng::seed_from_u64(9));
    let png = backend.generate_from_wplus(&w).unwrap().to_png().unwrap();
    let mut options = ServiceOptions::new(dir.path());
    if let Some(m) = max_upload {
        options.max_upload_bytes = m;
    }
    let state = AppState::new(backend, options).unwrap();
    let app = router(state.clone());
    Fixture {
        _dir: dir,
        state,
        app,
        png,
    }
}

fn fixture() -> Fixture {
    fixture_with(ToyConfig::channels64(5), None)
}

async fn upload_ok(f: &Fixture) -> String {
    let (s, body) = upload(&f.app, &f.png).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    body["image_id"].as_str().unwrap().to_string()
}

async fn precompute_done(f: &Fixture) {
    let (s, body) = post_json(&f.app, "/directions/precompute", json!({})).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = wait_job(&f.app, body["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
}

fn assert_error(body: &Value, code: &str) {
    assert_eq!(body["code"], code, "{body}");
    assert!(
        !body["message"].as_str().unwrap_or_default().is_empty(),
        "{body}"
    );
}

fn decode_image(body: &Value) -> Vec<u8> {
    BASE64.decode(body["image"].as_str().unwrap()).unwrap()
}

/// PNG of the inverted upload rendered without any edit.
fn plain_render(f: &Fixture) -> Vec<u8> {
    let b = f.state.backend();
    let w = b
        .invert_image(&ImageTensor::from_png(&f.png).unwrap())
        .unwrap();
    b.generate_from_wplus(&w).unwrap().to_png().unwrap()
}

#[tokio::test]
async fn health_reports_toy_backend_and_stats_availability() {
    let f = fixture();
    let (s, h) = get(&f.app, "/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h["backend"]["kind"], "toy");
    assert_eq!(h["backend"]["fingerprint"], f.state.backend().fingerprint());
    assert_eq!(h["stats"]["available"], false);
    assert_eq!(h["has_inverter"], true);
    precompute_done(&f).await;
    let (_, h) = get(&f.app, "/health").await;
    assert_eq!(h["stats"]["available"], true);
}

#[tokio::test]
async fn upload_rejects_corrupt_and_oversize_bodies() {
    let f = fixture_with(ToyConfig::channels64(5), Some(1024));
    let (s, body) = upload(&f.app, b"not a png at all").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&body, "malformed_image");

    let (s, body) = upload(&f.app, &vec![7u8; 4096]).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_error(&body, "too_large");

    // Past the transport limit as well.
    let (s, _) = upload(&f.app, &vec![7u8; 200 * 1024]).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);

    let id = upload_ok(&f).await;
    assert_eq!(id, content_fingerprint(&f.png));
}

#[tokio::test]
async fn upload_without_inverter_is_503() {
    let mut config = ToyConfig::channels64(5);
    config.with_inverter = false;
    let f = fixture_with(config, None);
    let (s, body) = upload(&f.app, &f.png).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_error(&body, "inverter_unavailable");
}

fn with(base: &Value, extra: Value) -> Value {
    let mut out = base.clone();
    for (k, v) in extra.as_object().unwrap() {
        out[k] = v.clone();
    }
    out
}

#[tokio::test]
async fn global_manipulation_contract() {
    let f = fixture();
    let id = upload_ok(&f).await;
    let base = json!({ "image_id": id, "target": "a face with grey hair", "neutral": "a face", "alpha": 3.0 });

    let (s, body) = post_json(
        &f.app,
        "/manipulate/global",
        with(&base, json!({ "k": 20 })),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&body, "stats_missing");
    assert!(body["message"].as_str().unwrap().contains("precompute"));

    precompute_done(&f).await;

    let (s, body) = post_json(
        &f.app,
        "/manipulate/global",
        with(&base, json!({ "k": 20 })),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(body["active_channels"], 20);
    assert!(body["beta_used"].as_f64().unwrap() > 0.0);
    assert_eq!(body["saturated"], false);

    for extra in [json!({}), json!({ "k": 5, "beta": 0.1 })] {
        let (s, body) = post_json(&f.app, "/manipulate/global", with(&base, extra)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        assert_error(&body, "bad_request");
    }

    let (s, body) = post_json(
        &f.app,
        "/manipulate/global",
        with(
            &base,
            json!({ "k": 5, "target": "a face", "neutral": "a face" }),
        ),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error(&body, "degenerate_prompt");

    let (s, body) = post_json(
        &f.app,
        "/manipulate/global",
        with(&base, json!({ "k": 5, "image_id": "nope" })),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&body, "not_found");

    // A threshold above every relevance selects nothing and leaves the image alone.
    let plain = plain_render(&f);
    let (s, body) = post_json(
        &f.app,
        "/manipulate/global",
        with(&base, json!({ "beta": 2.0 })),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["active_channels"], 0);
    assert_eq!(body["beta_used"], 2.0);
    assert_eq!(decode_image(&body), plain);

    let (_, body) = post_json(
        &f.app,
        "/manipulate/global",
        with(&base, json!({ "k": 20, "alpha": 0.0 })),
    )
    .await;
    assert_eq!(decode_image(&body), plain);
}

#[tokio::test]
async fn precompute_coalesces_and_lists_stats() {
    let f = fixture();
    let req = json!({ "pair_count": 100, "perturb_alpha": 5.0, "seed": 4 });
    let (s1, a) = post_json(&f.app, "/directions/precompute", req.clone()).await;
    let (s2, b) = post_json(&f.app, "/directions/precompute", req.clone()).await;
    assert_eq!((s1, s2), (StatusCode::ACCEPTED, StatusCode::ACCEPTED));
    assert_eq!(a["job_id"], b["job_id"]);
    let job = wait_job(&f.app, a["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done");
    assert_eq!(job["kind"], "precompute");
    assert_eq!(job["progress"], 1.0);

    let (s, list) = get(&f.app, "/artifacts?kind=stats").await;
    assert_eq!(s, StatusCode::OK);
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), 1);
    let fp = list[0]["key"]["fingerprint"].as_str().unwrap();
    let (s, bytes) = send(
        &f.app,
        axum::http::Request::get(format!("/artifacts/stats/{fp}"))
            .body(axum::body::Body::empty())
            .unwrap(),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert!(!bytes.is_empty());

    let (s, body) = get(&f.app, "/artifacts?kind=bogus").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&body, "bad_request");
    let (s, _) = get(&f.app, "/artifacts/stats/0000").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn optimize_job_runs_to_completion() {
    let f = fixture();
    let id = upload_ok(&f).await;
    let (s, body) = post_json(
        &f.app,
        "/manipulate/optimize",
        json!({ "image_id": id, "prompt": "a face with a beard", "lambda_l2": 0.008, "lambda_id": 0.005, "steps": 20 }),
    )
    .await;
    assert_eq!(s, StatusCode::ACCEPTED, "{body}");
    let job_id = body["job_id"].as_str().unwrap().to_string();
    let job = wait_job(&f.app, &job_id).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["kind"], "optimize");

    let (s, result) = get(&f.app, &format!("/jobs/{job_id}/result")).await;
    assert_eq!(s, StatusCode::OK);
    let png = decode_image(&result);
    assert!(ImageTensor::from_png(&png).is_ok());
    let trace = result["trace"].as_str().unwrap();
    let (s, csv) = send(
        &f.app,
        axum::http::Request::get(format!("/artifacts/trace/{trace}"))
            .body(axum::body::Body::empty())
            .unwrap(),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("step,total,clip,l2,id"), "{csv}");
    assert_eq!(csv.lines().count(), 1 + 20 + 1);
    assert!(result["final_terms"]["total"].is_number());

    let (s, body) = get(&f.app, "/jobs/job-999999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&body, "not_found");
    let (s, _) = get(&f.app, "/jobs/job-999999/result").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn identity_term_without_identity_backend_is_409() {
    let mut config = ToyConfig::channels64(5);
    config.identity_dim = None;
    let f = fixture_with(config, None);
    let id = upload_ok(&f).await;
    let (s, body) = post_json(
        &f.app,
        "/manipulate/optimize",
        json!({ "image_id": id, "prompt": "a face", "lambda_id": 0.1, "steps": 5 }),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&body, "identity_unavailable");
}

fn register(f: &Fixture, name: &str, geometry: &LatentGeometry) {
    let model = MapperModel::new(
        geometry,
        MapperConfig {
            hidden_dim: 8,
            ..MapperConfig::default()
        },
    )
    .unwrap();
    let bytes = save_checkpoint(&model).unwrap();
    let key = ArtifactKey::new(ArtifactKind::Mapper, content_fingerprint(&bytes), name);
    f.state.store().put(&key, &bytes).unwrap();
}

#[tokio::test]
async fn mapper_registry_and_apply() {
    let f = fixture();
    let id = upload_ok(&f).await;

    let (s, body) = post_json(&f.app, "/mappers/missing/apply", json!({ "image_id": id })).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&body, "not_found");

    let (_, list) = get(&f.app, "/mappers").await;
    assert_eq!(list.as_array().unwrap().len(), 0);
    register(&f, "identity", f.state.backend().geometry());
    let (_, list) = get(&f.app, "/mappers").await;
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0]["name"], "identity");

    let (s, body) = post_json(&f.app, "/mappers/identity/apply", json!({ "image_id": id })).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(decode_image(&body), plain_render(&f));

    register(
        &f,
        "foreign",
        &LatentGeometry::uniform(6, 4, [2, 4]).unwrap(),
    );
    let (s, body) = post_json(&f.app, "/mappers/foreign/apply", json!({ "image_id": id })).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&body, "geometry_mismatch");
}

#[tokio::test]
async fn mapper_training_job_registers_checkpoint() {
    let f = fixture();
    let (s, body) = post_json(
        &f.app,
        "/mappers",
        json!({ "name": "grey", "prompt": "a face with grey hair", "steps": 5, "latent_count": 4, "hidden_dim": 8 }),
    )
    .await;
    assert_eq!(s, StatusCode::ACCEPTED, "{body}");
    let job = wait_job(&f.app, body["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["kind"], "train-mapper");
    let (_, list) = get(&f.app, "/mappers").await;
    assert_eq!(list[0]["name"], "grey");
    assert_eq!(list[0]["fingerprint"], job["result"]["fingerprint"]);
}

#[tokio::test]
async fn malformed_json_gets_an_error_status() {
    let f = fixture();
    let (s, _) = post_json(&f.app, "/manipulate/global", json!({ "image_id": 3 })).await;
    assert!(s.is_client_error(), "{s}");
}
