#![allow(dead_code)]

use latent_edit::directions::{sample_style_codes, style_channel_std, StatsParams};
use latent_edit::gateway::{BackendBundle, JointEmbedding, ToyConfig, ToyLinearBackend};
use latent_edit::latent::WPlusCode;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 64-channel linear toy backend in its near-linear regime: a large
/// embedding anchor makes unit normalization locally linear and a small
/// generator scale keeps every ±5σ perturbation away from the pixel clamp.
pub fn oracle_config() -> ToyConfig {
    let mut c = ToyConfig::channels64(11);
    c.generator_scale = 0.002;
    c.embed_anchor = 1e5;
    c.pixel_mean = c.pixel_offset;
    c
}

pub fn oracle_backend() -> (ToyLinearBackend, BackendBundle) {
    let toy = ToyLinearBackend::new(oracle_config()).unwrap();
    (toy.clone(), BackendBundle::toy(toy))
}

pub fn oracle_stats_params() -> StatsParams {
    StatsParams {
        sample_count: 1000,
        pair_count: 100,
        perturb_alpha: 5.0,
        seed: 3,
    }
}

/// normalize(B · A e_c) for every channel, by explicit loops.
pub fn analytic_rows(toy: &ToyLinearBackend) -> Vec<Vec<f64>> {
    let a = toy.generator_matrix();
    let b = toy.embedder_matrix();
    let (channels, pixels) = (toy.channels(), toy.pixel_len());
    let dim = toy.config().embed_dim;
    (0..channels)
        .map(|c| {
            let mut v = vec![0.0; dim];
            for (e, out) in v.iter_mut().enumerate() {
                for p in 0..pixels {
                    *out += b[e * pixels + p] * a[p * channels + c];
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn project(rows: &[Vec<f64>], t: &JointEmbedding) -> Vec<f64> {
    rows.iter()
        .map(|r| r.iter().zip(t.values()).map(|(x, y)| x * y).sum())
        .collect()
}

/// Smallest and largest pre-clamp pixel over the perturbations the
/// precompute performs.
pub fn perturbed_pixel_range(
    toy: &ToyLinearBackend,
    backend: &BackendBundle,
    p: &StatsParams,
) -> (f64, f64) {
    let codes = sample_style_codes(backend, p.sample_count.max(p.pair_count), p.seed).unwrap();
    let std = style_channel_std(&codes[..p.sample_count]);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &codes[..p.pair_count] {
        for (c, sigma) in std.iter().enumerate() {
            for sign in [-1.0, 1.0] {
                let mut v = s.values().to_vec();
                v[c] += sign * p.perturb_alpha * sigma;
                for x in toy.pre_clamp_pixels(&v) {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
            }
        }
    }
    (lo, hi)
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> JointEmbedding {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    JointEmbedding::normalize(v).unwrap()
}

pub fn small_backend(seed: u64) -> BackendBundle {
    BackendBundle::toy(ToyLinearBackend::new(ToyConfig::small(seed)).unwrap())
}

pub fn random_code(backend: &BackendBundle, seed: u64) -> WPlusCode {
    backend.sample_latent(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Affine generator probed from outside: pixels = K w + c, valid while no
/// pixel clamps.
pub struct ProbedAffine {
    pub k: DMatrix<f64>,
    pub c: DVector<f64>,
}

pub fn probe_affine(backend: &BackendBundle) -> ProbedAffine {
    let geom = backend.geometry();
    let n = geom.wplus_len();
    let zero = WPlusCode::zeros_for(geom);
    let c = DVector::from_vec(
        backend
            .generate_from_wplus(&zero)
            .unwrap()
            .pixels()
            .to_vec(),
    );
    let mut k = DMatrix::zeros(c.len(), n);
    for i in 0..n {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        let w = WPlusCode::from_values(geom.num_layers, geom.latent_dim, v).unwrap();
        let x = DVector::from_vec(backend.generate_from_wplus(&w).unwrap().pixels().to_vec());
        k.set_column(i, &(x - &c));
    }
    ProbedAffine { k, c }
}

pub mod http {
    use axum::body::Body;
    use axum::http::{Request, StatusCode};
    use axum::Router;
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    pub const BOUNDARY: &str = "latent-edit-test-boundary";

    pub fn multipart_png(png: &[u8]) -> Vec<u8> {
        let mut body = format!(
            "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"in.png\"\r\nContent-Type: image/png\r\n\r\n"
        )
        .into_bytes();
        body.extend_from_slice(png);
        body.extend_from_slice(format!("\r\n--{BOUNDARY}--\r\n").as_bytes());
        body
    }

    pub async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
        let resp = app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp
            .into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec();
        (status, bytes)
    }

    pub async fn get(app: &Router, uri: &str) -> (StatusCode, serde_json::Value) {
        let (s, b) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
        (
            s,
            serde_json::from_slice(&b).unwrap_or(serde_json::Value::Null),
        )
    }

    pub async fn post_json(
        app: &Router,
        uri: &str,
        body: serde_json::Value,
    ) -> (StatusCode, serde_json::Value) {
        let req = Request::post(uri)
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&body).unwrap()))
            .unwrap();
        let (s, b) = send(app, req).await;
        (
            s,
            serde_json::from_slice(&b).unwrap_or(serde_json::Value::Null),
        )
    }

    pub async fn upload(app: &Router, png: &[u8]) -> (StatusCode, serde_json::Value) {
        let req = Request::post("/images")
            .header(
                "content-type",
                format!("multipart/form-data; boundary={BOUNDARY}"),
            )
            .body(Body::from(multipart_png(png)))
            .unwrap();
        let (s, b) = send(app, req).await;
        (
            s,
            serde_json::from_slice(&b).unwrap_or(serde_json::Value::Null),
        )
    }

    /// Polls a job until it reaches a terminal state.
    pub async fn wait_job(app: &Router, id: &str) -> serde_json::Value {
        for _ in 0..6000 {
            let (s, job) = get(app, &format!("/jobs/{id}")).await;
            assert_eq!(s, StatusCode::OK);
            if job["state"] == "done" || job["state"] == "failed" {
                return job;
            }
            tokio::time::sleep(std::time::Duration::from_millis(10)).await;
        }
        panic!("job {id} did not finish");
    }
}
