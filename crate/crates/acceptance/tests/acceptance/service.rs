//! Service determinism, driven through the HTTP router without a socket.

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use ndarray::Array2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tower::ServiceExt;

use segguide_core::backprop::GuideOptConfig;
use segguide_core::dataset::{label_to_image, IGNORE_LABEL};
use segguide_core::guiding::GuideMode;
use segguide_core::query::{enumerate_errors, render_text, QueryGenConfig};
use segguide_server::rle::{decode, RleLabelMap};
use segguide_server::session::{png_bytes, Models, Session, SessionRecord};
use segguide_server::{router, AppState, ServiceConfig};

use crate::experiment::World;
use crate::{Check, Outcome};

const SESSIONS: usize = 6;
const TURNS: usize = 10;

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> Result<Value, String> {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app
        .clone()
        .oneshot(req.body(body).map_err(|e| e.to_string())?)
        .await
        .map_err(|e| e.to_string())?;
    let status = resp.status();
    let bytes = resp.into_body().collect().await.map_err(|e| e.to_string())?.to_bytes();
    let v: Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    if status != StatusCode::OK {
        return Err(format!("{method} {uri} -> {status}: {v}"));
    }
    Ok(v)
}

fn prediction(v: &Value) -> Result<Array2<u8>, String> {
    let rle: RleLabelMap = serde_json::from_value(v["prediction"].clone()).map_err(|e| e.to_string())?;
    decode(&rle).map_err(|e| e.to_string())
}

fn models(w: &World) -> Result<Models, String> {
    let guide = w.find.clone().ok_or("no trained find guide")?;
    Models::new(
        w.exp.backbone.clone(),
        Some((guide, w.exp.table.clone())),
        "s4",
        GuideMode::default(),
        GuideOptConfig::default(),
    )
    .map_err(|e| e.to_string())
}

/// A random dialogue: generated text queries, free text, ground-truth
/// pixel answers, suggested pixels and resets.
async fn dialogue(app: &axum::Router, w: &World, index: usize, rng: &mut StdRng) -> Result<String, String> {
    let item = &w.exp.dataset.test[index];
    let body = json!({
        "image": B64.encode(png_bytes(item.image.clone().into())),
        "labels": B64.encode(png_bytes(label_to_image(&item.labels).into())),
    });
    let mut reply = call(app, "POST", "/session", Some(body)).await?;
    let id = reply["session_id"].as_str().ok_or("no session id")?.to_string();
    let qcfg = QueryGenConfig::default();
    for _ in 0..TURNS {
        let kind = rng.random_range(0..10);
        reply = match kind {
            0..=3 => {
                let pred = prediction(&reply)?;
                let candidates =
                    enumerate_errors(&pred, &item.labels, w.exp.class_names(), &qcfg).map_err(|e| e.to_string())?;
                let text = match candidates.get(rng.random_range(0..candidates.len().max(1))) {
                    Some(q) => render_text(q, &qcfg, rng).map_err(|e| e.to_string())?,
                    None => String::new(),
                };
                call(app, "POST", &format!("/session/{id}/hint/text"), Some(json!({ "text": text }))).await?
            }
            4 => {
                let text = ["find the mud", "", "remove the cloud in the middle", "there is a ball"][rng.random_range(0..4)];
                call(app, "POST", &format!("/session/{id}/hint/text"), Some(json!({ "text": text }))).await?
            }
            5..=8 => {
                let (x, y) = if kind <= 6 {
                    let s = call(app, "GET", &format!("/session/{id}/suggest-pixel"), None).await?;
                    (s["x"].as_u64().unwrap_or(0) as usize, s["y"].as_u64().unwrap_or(0) as usize)
                } else {
                    (rng.random_range(0..item.labels.ncols()), rng.random_range(0..item.labels.nrows()))
                };
                let class_id = match item.labels[[y, x]] {
                    IGNORE_LABEL => 0,
                    c => c,
                };
                let body = json!({ "x": x, "y": y, "class_id": class_id });
                call(app, "POST", &format!("/session/{id}/hint/pixel"), Some(body)).await?
            }
            _ => {
                call(app, "POST", &format!("/session/{id}/reset"), None).await?;
                call(app, "GET", &format!("/session/{id}"), None).await?
            }
        };
    }
    Ok(id)
}

async fn run(w: &World) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ServiceConfig {
        persist_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    };
    let state = Arc::new(AppState::new(models(w)?, cfg.clone()).map_err(|e| e.to_string())?);
    let app = router(state.clone());
    let mut rng = StdRng::seed_from_u64(11);
    let mut finals = Vec::new();
    let mut turns = 0;
    let mut replay_mismatch = 0;
    for i in 0..SESSIONS {
        let id = dialogue(&app, w, i, &mut rng).await?;
        let last = prediction(&call(&app, "GET", &format!("/session/{id}"), None).await?)?;
        let history = call(&app, "GET", &format!("/session/{id}/history"), None).await?;
        let record: SessionRecord = serde_json::from_str(&history.to_string()).map_err(|e| e.to_string())?;
        turns += record.turns.len();
        let replayed = Session::replay(&state.models, &record).map_err(|e| e.to_string())?;
        replay_mismatch += (*replayed.prediction() != last) as usize;
        finals.push((id, last));
    }
    drop(app);
    drop(state);

    // a fresh service rebuilds every session from its persisted history
    let restarted = router(Arc::new(AppState::new(models(w)?, cfg).map_err(|e| e.to_string())?));
    let mut restart_mismatch = 0;
    for (id, last) in &finals {
        let v = call(&restarted, "GET", &format!("/session/{id}"), None).await?;
        restart_mismatch += (prediction(&v)? != *last) as usize;
    }
    Ok(Outcome::new(
        replay_mismatch == 0 && restart_mismatch == 0,
        format!(
            "{SESSIONS} sessions, {turns} recorded turns: {replay_mismatch} replay and \
             {restart_mismatch} restart mismatches of the final label map"
        ),
    ))
}

pub fn a11(w: &mut World) -> Check {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .build()
        .map_err(|e| e.to_string())?;
    rt.block_on(run(w))
}
