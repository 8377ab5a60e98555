use std::sync::OnceLock;

use armature::fitting::{synthesize_observation, FitConfig, FitParams, FitResult, SynthOptions};
use armature::model::{BodyModel, ModelMeta};
use armature::rig::make_desk_rig;
use armature_service::*;
use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

fn model() -> &'static BodyModel {
    static MODEL: OnceLock<BodyModel> = OnceLock::new();
    MODEL.get_or_init(|| BodyModel::from_rig(make_desk_rig(0, 17, 12).unwrap()))
}

fn app() -> Router {
    router(model().clone(), ServiceConfig::default()).unwrap()
}

async fn call(app: Router, method: &str, uri: &str, body: impl Into<Body>) -> (StatusCode, Vec<(String, String)>, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .header(header::ORIGIN, "http://viewer.local")
        .body(body.into())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp
        .headers()
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_str().unwrap_or("").to_string()))
        .collect();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

async fn mesh(req: &ParamRequest) -> MeshPayload {
    let (status, _, body) = call(app(), "POST", "/mesh", serde_json::to_vec(req).unwrap()).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    MeshPayload::decode(&body).unwrap()
}

async fn meta() -> ModelMeta {
    let (status, _, body) = call(app(), "GET", "/model/meta", Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

fn max_diff(a: &[[f32; 3]], b: &[[f32; 3]]) -> f32 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

#[tokio::test]
async fn meta_describes_the_rig() {
    let m = meta().await;
    let rig = &model().rig;
    assert_eq!(m.n_k, rig.schema.len());
    assert_eq!(m.attributes.len(), m.n_k);
    assert_eq!((m.j, m.v), (rig.joint_count(), rig.vertex_count()));
    assert_eq!(m.components.skeletal, 16);
    assert_eq!(m.joint_names.len(), m.j);
    for a in &m.attributes {
        let kind = serde_json::to_value(a.kind).unwrap();
        assert!(kind == "scale" || kind == "bone_length", "{kind}");
        assert!(a.range[0] < a.range[1]);
    }
}

#[tokio::test]
async fn zero_request_returns_the_template() {
    let p = mesh(&ParamRequest::default()).await;
    assert_eq!(p.rig_id, model().rig.id);
    for (a, b) in p.vertices.iter().zip(&model().rig.template.vertices) {
        for k in 0..3 {
            assert!((a[k] as f64 - b[k]).abs() < 1e-6);
        }
    }
    assert_eq!(p.faces, model().rig.template.faces);
    let echo: ParamRequest = serde_json::from_str(&p.echo).unwrap();
    assert_eq!(echo, ParamRequest::default());
}

#[tokio::test]
async fn identical_requests_give_identical_bytes() {
    let req = ParamRequest {
        beta_s: vec![0.5, -0.2],
        theta: (0..3 * model().rig.joint_count()).map(|i| 0.1 * ((i as f64) * 0.7).sin()).collect(),
        root_translation: [0.1, 0.0, -0.3],
        ..Default::default()
    };
    let body = serde_json::to_vec(&req).unwrap();
    let (_, _, a) = call(app(), "POST", "/mesh", body.clone()).await;
    let (_, _, b) = call(app(), "POST", "/mesh", body).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn meta_counts_match_every_payload() {
    let m = meta().await;
    for req in [
        ParamRequest::default(),
        ParamRequest {
            beta_k: vec![1.0; 16],
            ..Default::default()
        },
    ] {
        let p = mesh(&req).await;
        assert_eq!((p.vertices.len(), p.faces.len(), p.joints.len()), (m.v, m.f, m.j));
    }
}

#[tokio::test]
async fn decoupling_is_observable_over_the_wire() {
    let base = mesh(&ParamRequest::default()).await;
    let shaped = mesh(&ParamRequest {
        beta_s: vec![1.0],
        ..Default::default()
    })
    .await;
    assert_eq!(max_diff(&shaped.joints, &base.joints), 0.0);
    assert!(max_diff(&shaped.vertices, &base.vertices) > 1e-4);

    let wide = mesh(&ParamRequest {
        attributes: [("shoulder_width".to_string(), 0.05)].into(),
        ..Default::default()
    })
    .await;
    assert!(max_diff(&wide.joints, &base.joints) > 1e-3);
    // only the shoulder subtrees move
    let tree = &model().rig.tree;
    let mut moved: Vec<usize> = tree.subtree(tree.index_of("l_shoulder").unwrap());
    moved.extend(tree.subtree(tree.index_of("r_shoulder").unwrap()));
    for (j, (a, b)) in wide.joints.iter().zip(&base.joints).enumerate() {
        if !moved.contains(&j) {
            assert_eq!(a, b, "joint {j} moved");
        }
    }
}

#[tokio::test]
async fn correctives_flag_is_honored() {
    let mut m = model().clone();
    m.correctives = Some(armature::correctives::CorrectiveNet::new(&m.rig, &Default::default()));
    for jc in &mut m.correctives.as_mut().unwrap().joints {
        jc.p.data
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = 1e-3 * ((i as f64) * 0.3).sin());
    }
    let app = router(m, ServiceConfig::default()).unwrap();
    let theta: Vec<f64> = (0..3 * model().rig.joint_count()).map(|i| 0.3 * ((i as f64) * 1.3).cos()).collect();
    let on = ParamRequest {
        theta: theta.clone(),
        ..Default::default()
    };
    let off = ParamRequest {
        theta,
        flags: Flags { apply_correctives: false },
        ..Default::default()
    };
    let (_, _, a) = call(app.clone(), "POST", "/mesh", serde_json::to_vec(&on).unwrap()).await;
    let (_, _, b) = call(app, "POST", "/mesh", serde_json::to_vec(&off).unwrap()).await;
    let (a, b) = (MeshPayload::decode(&a).unwrap(), MeshPayload::decode(&b).unwrap());
    assert_eq!(a.joints, b.joints);
    assert!(max_diff(&a.vertices, &b.vertices) > 0.0);
}

#[tokio::test]
async fn malformed_requests_are_400_with_field() {
    let cases = [
        (r#"{"beta_s": "nope"}"#, Some("beta_s")),
        (r#"{"bogus": 1}"#, None),
        (r#"{"flags": {"apply_correctives": 3}}"#, Some("flags.apply_correctives")),
        ("not json", None),
    ];
    for (body, field) in cases {
        let (status, _, bytes) = call(app(), "POST", "/mesh", body).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        let err: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert!(!err["error"].as_str().unwrap().is_empty());
        if let Some(f) = field {
            assert_eq!(err["field"], f, "{body}");
        }
    }
    let (status, _, bytes) = call(app(), "POST", "/mesh", r#"{"attributes": {"wingspan": 1.0}}"#).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&bytes).contains("shoulder_width"));
}

#[tokio::test]
async fn dimension_violations_are_422() {
    for body in [
        r#"{"beta_s": [0,0,0,0,0,0,0,0,0,0,0]}"#,
        r#"{"theta": [0.1, 0.2]}"#,
        r#"{"beta_k": [1e-3, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]}"#,
    ] {
        let (status, _, bytes) = call(app(), "POST", "/mesh", body).await;
        assert_eq!(
            status,
            StatusCode::UNPROCESSABLE_ENTITY,
            "{body}: {}",
            String::from_utf8_lossy(&bytes)
        );
    }
}

#[tokio::test]
async fn cors_headers_are_present() {
    let (_, headers, _) = call(app(), "GET", "/model/meta", Body::empty()).await;
    assert!(headers.iter().any(|(k, v)| k == "access-control-allow-origin" && v == "*"));
    let cfg = ServiceConfig {
        allow_origin: Some("http://viewer.local".into()),
        ..Default::default()
    };
    let app = router(model().clone(), cfg).unwrap();
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/mesh")
        .header(header::ORIGIN, "http://viewer.local")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://viewer.local");
}

fn observation(seed: u64) -> (FitParams, armature::fitting::Observation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = FitParams::sample(model(), &mut rng, 0.4);
    let obs = synthesize_observation(
        model(),
        &truth,
        &SynthOptions {
            vertices: true,
            ..Default::default()
        },
    )
    .unwrap();
    (truth, obs)
}

#[tokio::test]
async fn fit_streams_one_record_per_stage_then_the_result() {
    let (_, obs) = observation(3);
    let (status, headers, body) = call(app(), "POST", "/fit", serde_json::to_vec(&obs).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert!(headers.iter().any(|(k, v)| k == "content-type" && v == NDJSON));
    let events: Vec<FitEvent> = body
        .split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).unwrap())
        .collect();
    let stages = FitConfig::default().stages;
    assert_eq!(events.len(), stages.len() + 1);
    for (ev, st) in events.iter().zip(&stages) {
        match ev {
            FitEvent::Stage(t) => assert_eq!(t.name, st.name),
            other => panic!("expected a stage record, got {other:?}"),
        }
    }
    match events.last().unwrap() {
        FitEvent::Result(r) => {
            assert!(r.metrics.joint_mm.unwrap() < 1.0, "{:?}", r.metrics);
            assert!(r.metrics.vertex_mm.unwrap() < 1.0, "{:?}", r.metrics);
        }
        other => panic!("expected the result record, got {other:?}"),
    }
}

#[tokio::test]
async fn fit_without_streaming_returns_the_result() {
    let (_, obs) = observation(4);
    let (status, _, body) = call(app(), "POST", "/fit?stream=false", serde_json::to_vec(&obs).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let r: FitResult = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.stages.len(), FitConfig::default().stages.len());
    assert!(r.metrics.vertex_mm.unwrap() < 1.0);
}

#[tokio::test]
async fn fit_error_statuses() {
    let (status, _, _) = call(app(), "POST", "/fit", "{}").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _, _) = call(app(), "POST", "/fit", r#"{"keypoints3d": 5}"#).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let body = r#"{"keypoints3d": [{"name": "no_such_point", "position": [0, 0, 0]}]}"#;
    let (status, _, _) = call(app(), "POST", "/fit", body).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // a finite but absurd keypoint overflows the objective
    let (_, mut obs) = observation(5);
    obs.target_vertices = None;
    obs.keypoints3d[3].position = [1e300, 0.0, 0.0];
    let (status, _, body) = call(app(), "POST", "/fit", serde_json::to_vec(&obs).unwrap()).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR, "{}", String::from_utf8_lossy(&body));
    let err: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert!(err["error"].as_str().unwrap().contains("diverged"), "{err}");
}

#[tokio::test]
async fn serves_over_tcp() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, app()));
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    s.write_all(b"GET /model/meta HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut buf = Vec::new();
    s.read_to_end(&mut buf).await.unwrap();
    let text = String::from_utf8_lossy(&buf);
    assert!(text.starts_with("HTTP/1.1 200"), "{text}");
    assert!(text.contains("\"rig_id\""));
}
