use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use gatefill_core::editing::{DirectionVector, Directions, Scope};
use gatefill_core::imageio::{decode_png, encode_mask_png, encode_png};
use gatefill_core::model::Model;
use gatefill_core::{BinaryMask, ModelConfig, Profile, Stage};
use gatefill_service::{router, ErrorBody, ErrorCode, Engine, Service, SessionView};
use gatefill_tensor::Tensor;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

const R: usize = 32;

fn engine() -> Engine {
    let cfg = ModelConfig::profile(Profile::Tiny);
    let mut model = Model::<f32>::new(&cfg, true, 0).unwrap();
    model.stage = Stage::Stage2;
    let mut dirs = Directions::default();
    dirs.insert(DirectionVector::new("hat", (0..cfg.w_dim).map(|i| (i as f64).sin()).collect(), Scope::AllStyles).unwrap());
    Engine::new(model, dirs)
}

fn image_png(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = gatefill_core::imageio::quantize(&Tensor::<f32>::uniform(&[3, R, R], -1.0, 1.0, &mut rng));
    B64.encode(encode_png(&img).unwrap())
}

fn hole_mask() -> BinaryMask {
    let bits = (0..R * R).map(|i| u8::from(!((8..20).contains(&(i / R)) && (6..22).contains(&(i % R))))).collect();
    BinaryMask::from_bits(R, R, bits).unwrap()
}

fn mask_png(m: &BinaryMask) -> String {
    B64.encode(encode_mask_png(m).unwrap())
}

fn pixels(view: &SessionView) -> Tensor<f32> {
    decode_png(&B64.decode(&view.composite).unwrap()).unwrap()
}

/// Max abs difference over (valid, hole) pixels.
fn split_diff(a: &Tensor<f32>, b: &Tensor<f32>, m: &BinaryMask) -> (f32, f32) {
    let (mut valid, mut hole) = (0f32, 0f32);
    for c in 0..3 {
        for y in 0..R {
            for x in 0..R {
                let i = (c * R + y) * R + x;
                let d = (a.data()[i] - b.data()[i]).abs();
                if m.is_valid(y, x) {
                    valid = valid.max(d);
                } else {
                    hole = hole.max(d);
                }
            }
        }
    }
    (valid, hole)
}

#[test]
fn full_mask_returns_input_and_encoding_is_deterministic() {
    let svc = Service::new(Some(engine()), 8);
    let img = image_png(1);
    let a = svc.create_session(&img, &mask_png(&BinaryMask::full(R, R)), Some(3)).unwrap();
    let b = svc.create_session(&img, &mask_png(&BinaryMask::full(R, R)), Some(4)).unwrap();
    assert_ne!(a.id, b.id);
    assert_eq!(a.w_enc_sha256, b.w_enc_sha256);
    let input = decode_png::<f32>(&B64.decode(&img).unwrap()).unwrap();
    assert_eq!(pixels(&a), input);
}

#[test]
fn resample_is_seeded_and_only_touches_the_hole() {
    let svc = Service::new(Some(engine()), 8);
    let m = hole_mask();
    let img = image_png(2);
    let input = decode_png::<f32>(&B64.decode(&img).unwrap()).unwrap();
    let s = svc.create_session(&img, &mask_png(&m), Some(0)).unwrap();
    let a = svc.resample(&s.id, Some(7)).unwrap();
    let again = svc.resample(&s.id, Some(7)).unwrap();
    assert_eq!(a.composite, again.composite);
    let b = svc.resample(&s.id, Some(8)).unwrap();
    let (valid, hole) = split_diff(&pixels(&a), &pixels(&b), &m);
    assert_eq!(valid, 0.0);
    assert!(hole > 0.0);
    assert_eq!(split_diff(&pixels(&a), &input, &m).0, 0.0);
}

#[test]
fn edits_accumulate_and_cancel() {
    let svc = Service::new(Some(engine()), 8);
    let m = hole_mask();
    let s = svc.create_session(&image_png(3), &mask_png(&m), Some(5)).unwrap();
    let zero = svc.edit(&s.id, "hat", 0.0).unwrap();
    assert_eq!(zero.composite, s.composite);
    let moved = svc.edit(&s.id, "hat", 3.0).unwrap();
    assert_ne!(moved.composite, s.composite);
    assert_eq!(split_diff(&pixels(&moved), &pixels(&s), &m).0, 0.0);
    let back = svc.edit(&s.id, "hat", -3.0).unwrap();
    let (valid, hole) = split_diff(&pixels(&back), &pixels(&s), &m);
    assert!(valid == 0.0 && hole <= 1e-6, "{hole}");
    assert_eq!(back.edits.len(), 3);
    let err = svc.edit(&s.id, "beard", 1.0).unwrap_err();
    assert_eq!(err.code, ErrorCode::UnknownDirection);
    assert_eq!(svc.get_session(&s.id).unwrap().edits.len(), 3);
}

#[test]
fn validation_and_lookup_errors() {
    let svc = Service::new(Some(engine()), 8);
    let gray = {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, R as u32, R as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.write_header().unwrap().write_image_data(&vec![128u8; R * R]).unwrap();
        B64.encode(out)
    };
    let err = svc.create_session(&image_png(0), &gray, None).unwrap_err();
    assert_eq!(err.code, ErrorCode::BadMask);
    let err = svc.create_session("not base64!", &mask_png(&hole_mask()), None).unwrap_err();
    assert_eq!(err.code, ErrorCode::BadImage);
    let err = svc.create_session(&image_png(0), &mask_png(&BinaryMask::full(16, 16)), None).unwrap_err();
    assert_eq!(err.code, ErrorCode::BadMask);
    assert_eq!(svc.resample("nope", None).unwrap_err().code, ErrorCode::UnknownSession);

    let empty = Service::new(None, 8);
    assert_eq!(empty.create_session(&image_png(0), &mask_png(&hole_mask()), None).unwrap_err().code, ErrorCode::NoCheckpoint);
    assert!(!empty.health().checkpoint_loaded);
}

#[test]
fn sessions_are_evicted_least_recently_used_first() {
    let svc = Service::new(Some(engine()), 2);
    let m = mask_png(&hole_mask());
    let a = svc.create_session(&image_png(0), &m, Some(0)).unwrap();
    let b = svc.create_session(&image_png(1), &m, Some(0)).unwrap();
    svc.get_session(&a.id).unwrap();
    svc.create_session(&image_png(2), &m, Some(0)).unwrap();
    assert!(svc.get_session(&a.id).is_ok());
    assert_eq!(svc.get_session(&b.id).unwrap_err().code, ErrorCode::UnknownSession);
}

#[test]
fn journal_restores_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.safetensors");
    let e = engine();
    let mut ck = gatefill_core::checkpoint::Checkpoint::new(e.model.clone());
    ck.directions = Some("directions.json".into());
    ck.save(&path).unwrap();
    e.directions.save(&dir.path().join("directions.json")).unwrap();
    let cfg = gatefill_service::ServiceConfig {
        checkpoint: Some(path),
        persist: Some(dir.path().join("sessions.jsonl")),
        ..Default::default()
    };
    let svc = Service::from_config(&cfg).unwrap();
    let s = svc.create_session(&image_png(4), &mask_png(&hole_mask()), Some(9)).unwrap();
    let edited = svc.edit(&s.id, "hat", 1.5).unwrap();
    drop(svc);
    let restored = Service::from_config(&cfg).unwrap();
    let again = restored.get_session(&s.id).unwrap();
    assert_eq!(again.composite, edited.composite);
    assert_eq!(again.edits, edited.edits);
}

async fn call(app: axum::Router, method: &str, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

#[tokio::test]
async fn http_round_trip() {
    let app = router(Arc::new(Service::new(Some(engine()), 8)));
    let (st, body) = call(app.clone(), "GET", "/healthz", None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("\"checkpoint_loaded\":true"));

    let create = serde_json::json!({"image": image_png(0), "mask": mask_png(&hole_mask()), "seed": 1});
    let (st, body) = call(app.clone(), "POST", "/sessions", Some(create)).await;
    assert_eq!(st, StatusCode::OK);
    let view: SessionView = serde_json::from_slice(&body).unwrap();

    let (st, _) = call(app.clone(), "POST", &format!("/sessions/{}/resample", view.id), None).await;
    assert_eq!(st, StatusCode::OK);
    let (st, body) = call(app.clone(), "POST", &format!("/sessions/{}/edit", view.id), Some(serde_json::json!({"direction": "hat", "strength": 2.0}))).await;
    assert_eq!(st, StatusCode::OK);
    let edited: SessionView = serde_json::from_slice(&body).unwrap();
    assert_eq!(edited.edits.len(), 1);

    let (st, body) = call(app.clone(), "GET", "/directions", None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("\"hat\""));

    let (st, body) = call(app.clone(), "GET", "/sessions/missing", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let err: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(err.error.code, ErrorCode::UnknownSession);
}
