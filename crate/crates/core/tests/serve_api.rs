use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use lamm_core::manip::{fit_latent_gaussian, fit_region_gaussians};
use lamm_core::model::{Backbone, LammConfig, LammModel};
use lamm_core::serve::{router, AppState, Priors, SessionView, TemplateView};
use lamm_core::synth::{generate_dataset, small_spec, Dataset};
use serde_json::{json, Value};
use tower::ServiceExt;

fn setup() -> (LammModel, Dataset) {
    let (data, _) = generate_dataset(&small_spec(40, 5)).unwrap();
    let mut cfg = LammConfig::for_template(&data.template, Backbone::Mlpmixer, 16, 8);
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    (LammModel::new(cfg, data.template.clone(), 3).unwrap(), data)
}

fn app_with(model: LammModel, priors: Option<Priors>, undo: usize) -> axum::Router {
    router(Arc::new(AppState::with_undo_limit(model, priors, undo)))
}

fn app() -> (axum::Router, Dataset) {
    let (m, d) = setup();
    (app_with(m, None, 64), d)
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn post(app: &axum::Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", uri, Some(body.to_string())).await
}

fn view(v: Value) -> SessionView {
    serde_json::from_value(v).unwrap()
}

fn mesh_payload(data: &Dataset, i: usize) -> Value {
    let m = data.template.uncenter(data.eval.neutral.sample(i));
    json!({ "num_vertices": m.num_vertices(), "vertices": m.flat() })
}

#[tokio::test]
async fn template_describes_regions_and_controls() {
    let (app, data) = app();
    let (s, body) = call(&app, "GET", "/template", None).await;
    assert_eq!(s, StatusCode::OK);
    let t: TemplateView = serde_json::from_value(body).unwrap();
    assert_eq!(t.num_vertices, data.template.num_vertices());
    assert_eq!(t.region_of.len(), t.num_vertices);
    assert_eq!(t.faces.len(), data.template.faces().len());
    assert_eq!(t.controls, data.template.control_sets());
    assert_eq!(t.vertices.len(), 3 * t.num_vertices);
}

#[tokio::test]
async fn empty_edit_keeps_geometry_and_bumps_revision() {
    let (app, _) = app();
    let (_, v) = post(&app, "/session", json!({})).await;
    let a = view(v);
    let (s, v) = post(&app, &format!("/session/{}/edit", a.session), json!({ "displacements": {} })).await;
    assert_eq!(s, StatusCode::OK);
    let b = view(v);
    assert_eq!(b.vertices, a.vertices);
    assert_eq!(b.revision, a.revision + 1);
}

#[tokio::test]
async fn edit_then_negation_restores_decode() {
    let (app, data) = app();
    let c = data.template.controls(0)[0];
    let (_, v) = post(&app, "/session", json!({ "mesh": mesh_payload(&data, 0) })).await;
    let a = view(v);
    let uri = format!("/session/{}/edit", a.session);
    let (_, v) = post(&app, &uri, json!({ "displacements": { c.to_string(): [0.02, -0.01, 0.03] } })).await;
    let moved = view(v);
    assert_ne!(moved.vertices, a.vertices);
    let (_, v) = post(&app, &uri, json!({ "displacements": { c.to_string(): [-0.02, 0.01, -0.03] } })).await;
    let back = view(v);
    assert_eq!(back.vertices, a.vertices);
    assert!(back.revision > moved.revision && moved.revision > a.revision);
}

#[tokio::test]
async fn undo_restores_previous_revision_geometry() {
    let (app, data) = app();
    let c = data.template.controls(1)[0];
    let (_, v) = post(&app, "/session", json!({})).await;
    let a = view(v);
    let (_, v) = post(&app, &format!("/session/{}/edit", a.session), json!({ "displacements": { c.to_string(): [0.05, 0.0, 0.0] } })).await;
    let edited = view(v);
    let (s, v) = post(&app, &format!("/session/{}/undo", a.session), json!({})).await;
    assert_eq!(s, StatusCode::OK);
    let undone = view(v);
    assert_eq!(undone.vertices, a.vertices);
    assert!(undone.revision > edited.revision);
    let (s, _) = post(&app, &format!("/session/{}/undo", a.session), json!({})).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn undo_stack_is_bounded() {
    let (m, data) = setup();
    let app = app_with(m, None, 3);
    let c = data.template.controls(0)[0];
    let (_, v) = post(&app, "/session", json!({})).await;
    let id = view(v).session;
    for k in 0..5 {
        let d = 0.01 * (k + 1) as f32;
        post(&app, &format!("/session/{id}/edit"), json!({ "displacements": { c.to_string(): [d, 0.0, 0.0] } })).await;
    }
    for _ in 0..3 {
        assert_eq!(post(&app, &format!("/session/{id}/undo"), json!({})).await.0, StatusCode::OK);
    }
    assert_eq!(post(&app, &format!("/session/{id}/undo"), json!({})).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn error_statuses() {
    let (app, data) = app();
    let (_, v) = post(&app, "/session", json!({})).await;
    let id = view(v).session;
    let non_control = data.template.non_controls()[0];
    let edit = format!("/session/{id}/edit");
    let (s, _) = post(&app, &edit, json!({ "displacements": { non_control.to_string(): [0.1, 0.0, 0.0] } })).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = post(&app, &edit, json!({ "displacements": { "99999999": [0.1, 0.0, 0.0] } })).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = post(&app, &edit, json!({ "displacements": { "nose": [0.1, 0.0, 0.0] } })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", &edit, Some("{not json".into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&app, &edit, json!({ "displacement": {} })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&app, "/session/424242/edit", json!({ "displacements": {} })).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post(&app, &format!("/session/{id}/encode"), json!({ "num_vertices": 3, "vertices": vec![0.0; 9] })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post(&app, "/sample", json!({ "kind": "identity" })).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn sessions_do_not_see_each_other() {
    let (app, data) = app();
    let (_, v) = post(&app, "/session", json!({})).await;
    let a = view(v);
    let (_, v) = post(&app, "/session", json!({})).await;
    let b = view(v);
    assert_ne!(a.session, b.session);
    let c = data.template.controls(0)[0];
    post(&app, &format!("/session/{}/edit", a.session), json!({ "displacements": { c.to_string(): [0.1, 0.1, 0.1] } })).await;
    let (_, v) = post(&app, &format!("/session/{}/edit", b.session), json!({ "displacements": {} })).await;
    assert_eq!(view(v).vertices, b.vertices);
}

#[tokio::test]
async fn encode_replaces_latent() {
    let (app, data) = app();
    let (_, v) = post(&app, "/session", json!({})).await;
    let a = view(v);
    let (s, v) = post(&app, &format!("/session/{}/encode", a.session), mesh_payload(&data, 1)).await;
    assert_eq!(s, StatusCode::OK);
    let (_, fresh) = post(&app, "/session", json!({ "mesh": mesh_payload(&data, 1) })).await;
    assert_eq!(view(v).vertices, view(fresh).vertices);
}

#[tokio::test]
async fn swap_with_itself_is_reconstruction_and_sampling_is_seeded() {
    let (m, data) = setup();
    let priors = Priors {
        latent: fit_latent_gaussian(&m, &data.train.neutral).unwrap(),
        regions: fit_region_gaussians(&data.template, &data.train.neutral, &data.train.expressive).unwrap(),
    };
    let app = app_with(m, Some(priors), 64);
    let mesh = mesh_payload(&data, 2);
    let (s, v) = post(&app, "/swap", json!({ "recipient": mesh, "donor": mesh, "region": 1 })).await;
    assert_eq!(s, StatusCode::OK);
    let (_, fresh) = post(&app, "/session", json!({ "mesh": mesh })).await;
    let fresh = view(fresh);
    assert_eq!(view(v).vertices, fresh.vertices);

    let (s, v) = post(&app, "/swap", json!({ "session": fresh.session, "donor": mesh_payload(&data, 3), "region": 0 })).await;
    assert_eq!(s, StatusCode::OK);
    assert!(view(v).revision > fresh.revision);

    let (_, a) = post(&app, "/sample", json!({ "kind": "identity", "seed": 7 })).await;
    let (_, b) = post(&app, "/sample", json!({ "kind": "identity", "seed": 7 })).await;
    assert_eq!(view(a).vertices, view(b).vertices);
    let (s, v) = post(&app, "/sample", json!({ "kind": "region", "session": fresh.session, "region": 0, "seed": 1 })).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(view(v).session, fresh.session);
    let (s, _) = post(&app, "/sample", json!({ "kind": "region", "session": fresh.session, "region": 99 })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}
