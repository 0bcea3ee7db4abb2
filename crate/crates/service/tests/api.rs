use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{header, Method, Request, StatusCode};
use serde_json::Value;
use tower::ServiceExt;

use sf_lens_core::ingest::{
    generate_synthetic_bundle, write_bundle, BundleManifest, InferenceBundle, Run, SyntheticSpec, SCHEMA_VERSION,
};
use sf_lens_core::model::{InferenceRecord, LogitVector};
use sf_lens_core::shift::Image;
use sf_lens_service::{app, AppState, Dataset};

struct Reply {
    status: StatusCode,
    content_type: String,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

async fn send(state: &Arc<AppState>, method: Method, uri: &str, accept: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(a) = accept {
        req = req.header(header::ACCEPT, a);
    }
    let resp = app(Arc::clone(state))
        .oneshot(req.body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = resp.status();
    let content_type = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply {
        status,
        content_type,
        body,
    }
}

async fn get(state: &Arc<AppState>, uri: &str) -> Reply {
    send(state, Method::GET, uri, None).await
}

fn record(id: &str, correct: bool, conf: f32) -> InferenceRecord {
    let logits = if correct { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
    InferenceRecord {
        id: id.into(),
        label: 0,
        logits: LogitVector::new(logits).unwrap(),
        mcd: None,
        dg_logits: None,
        latent: vec![conf],
        ext_conf: BTreeMap::from([("conf".to_string(), conf)]),
        meta: BTreeMap::new(),
        image_ref: None,
    }
}

/// Residuals [0, 0, 1, 1] under confidences [0.9, 0.8, 0.2, 0.1], written to
/// disk with a PNG for record `a`.
fn write_worked_example(root: &Path) {
    let records = vec![
        record("a", true, 0.9),
        record("b", true, 0.8),
        record("c", false, 0.2),
        record("d", false, 0.1),
    ];
    let manifest = BundleManifest {
        schema_version: SCHEMA_VERSION,
        name: "worked".into(),
        n: 4,
        k: 2,
        t: 0,
        d: 1,
        channels: vec!["conf".into()],
        meta_schema: Vec::new(),
        image_dir: Some("images".into()),
        runs: 1,
        dg: false,
    };
    let bundle = InferenceBundle::new(manifest, vec![Run::new(records, 0).unwrap()]).unwrap();
    write_bundle(&bundle, root).unwrap();
    std::fs::create_dir_all(root.join("images")).unwrap();
    Image::filled(8, 8, 1, 0.5)
        .save_png(&root.join("images/a.png"))
        .unwrap();
}

fn worked_state() -> (tempfile::TempDir, Arc<AppState>) {
    let dir = tempfile::tempdir().unwrap();
    write_worked_example(dir.path());
    let state = AppState::load(dir.path()).unwrap();
    (dir, Arc::new(state))
}

fn synthetic(n: usize, corrupted: usize) -> InferenceBundle {
    generate_synthetic_bundle(&SyntheticSpec {
        n,
        k: 3,
        d: 8,
        t: 4,
        class_separation: 4.0,
        shift_offset: 2.0,
        corrupted,
        ..Default::default()
    })
    .unwrap()
}

fn synthetic_state(n: usize, corrupted: usize) -> Arc<AppState> {
    Arc::new(AppState::new(vec![Dataset::new(synthetic(n, corrupted)).unwrap()]).unwrap())
}

#[tokio::test]
async fn rc_curve_of_worked_example() {
    let (_dir, state) = worked_state();
    let r = get(&state, "/api/rc-curve?study=iid&channel=ext:conf&points=4").await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    let risk: Vec<f64> = serde_json::from_value(v["risk"].clone()).unwrap();
    let expected = [0.0, 0.0, 0.3333, 0.5];
    assert_eq!(risk.len(), 4);
    for (got, want) in risk.iter().zip(expected) {
        assert!((got - want).abs() < 1e-4, "{risk:?}");
    }
    assert!((v["aurc"].as_f64().unwrap() - 20.8333).abs() < 1e-4);
    assert_eq!(v["eaurc"].as_f64().unwrap(), 0.0);

    let full = get(&state, "/api/rc-curve?study=iid&channel=ext:conf").await.json();
    assert_eq!(full["coverage"].as_array().unwrap().len(), 4);
    let zero = get(&state, "/api/rc-curve?study=iid&channel=ext:conf&points=0").await;
    assert_eq!(zero.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn images_and_records() {
    let (_dir, state) = worked_state();
    let r = get(&state, "/api/images/a").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type, "image/png");
    assert!(r.body.starts_with(b"\x89PNG"));
    assert_eq!(get(&state, "/api/images/unknown").await.status, StatusCode::NOT_FOUND);
    // Known record without an image file.
    assert_eq!(get(&state, "/api/images/b").await.status, StatusCode::NOT_FOUND);

    let rec = get(&state, "/api/records/c?channel=ext:conf").await.json();
    assert_eq!(rec["label"], 0);
    assert_eq!(rec["prediction"], 1);
    assert!((rec["confidence"].as_f64().unwrap() - 0.2).abs() < 1e-6);
    assert_eq!(get(&state, "/api/records/zz").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn datasets_and_studies() {
    let state = synthetic_state(200, 2);
    let list = get(&state, "/api/datasets").await.json();
    assert_eq!(list.as_array().unwrap().len(), 1);
    let channels = list[0]["channels"].as_array().unwrap();
    assert!(channels.iter().any(|c| c == "msr"));
    assert!(channels.iter().any(|c| c == "mcd-ee"));

    let studies = get(&state, "/api/studies").await.json();
    let iid = studies
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["name"] == "iid")
        .expect("iid study");
    assert_eq!(iid["kind"], "iid");
    assert!(iid["size"].as_u64().unwrap() > 0);
    let unknown = get(&state, "/api/studies?dataset=nope").await;
    assert_eq!(unknown.status, StatusCode::NOT_FOUND);
    assert_eq!(unknown.json()["error"], "UnknownEntity");
}

#[tokio::test]
async fn metrics_in_both_formats() {
    let state = synthetic_state(200, 0);
    let json = get(&state, "/api/metrics?study=iid&channel=msr").await;
    assert_eq!(json.status, StatusCode::OK);
    let rows = json.json();
    let rows = rows["rows"].as_array().unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r["study"] == "iid" && r["channel"] == "msr"));

    let csv = send(&state, Method::GET, "/api/metrics?study=target", Some("text/csv")).await;
    assert_eq!(csv.content_type, "text/csv");
    let text = String::from_utf8(csv.body).unwrap();
    assert!(text.lines().next().unwrap().contains("aurc"));
    assert!(text.lines().skip(1).all(|l| l.starts_with("target,")));

    // Same state, same bytes.
    let again = get(&state, "/api/metrics?study=iid&channel=msr").await;
    assert_eq!(again.body, json.body);
    assert_eq!(get(&state, "/api/metrics?study=nope").await.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&state, "/api/metrics?channel=bogus").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn failures_and_sweeps() {
    let state = synthetic_state(200, 3);
    let r = get(&state, "/api/failures?channel=msr&top=5&scope=shift_kind%3Dnone").await;
    assert_eq!(r.status, StatusCode::OK);
    let rows = r.json();
    let rows = rows.as_array().unwrap();
    assert!(rows.len() <= 5 && !rows.is_empty());
    let conf: Vec<f64> = rows.iter().map(|f| f["confidence"].as_f64().unwrap()).collect();
    assert!(conf.windows(2).all(|w| w[0] >= w[1]));
    assert!(rows.iter().all(|f| f["label"] != f["prediction"]));
    assert_eq!(get(&state, "/api/failures?top=x").await.status, StatusCode::UNPROCESSABLE_ENTITY);

    let bundle = synthetic(200, 3);
    let origin = bundle.runs()[0]
        .records()
        .iter()
        .find_map(|r| r.meta.get("origin").filter(|o| !o.is_empty()).cloned())
        .expect("corrupted variants");
    let sweep = get(&state, &format!("/api/sweep?id={origin}&kind=gaussian_noise&channel=pe")).await;
    assert_eq!(sweep.status, StatusCode::OK, "{}", String::from_utf8_lossy(&sweep.body));
    let levels: Vec<u64> = sweep
        .json()
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["level"].as_u64().unwrap())
        .collect();
    assert_eq!(levels, [0, 1, 2, 3, 4, 5]);
    let missing = get(&state, "/api/sweep?id=nope&kind=gaussian_noise").await;
    assert_eq!(missing.status, StatusCode::NOT_FOUND);
    let bad_kind = get(&state, &format!("/api/sweep?id={origin}&kind=fog")).await;
    assert_eq!(bad_kind.status, StatusCode::UNPROCESSABLE_ENTITY);
}

async fn wait_ready(state: &Arc<AppState>, key: &str) {
    for _ in 0..600 {
        let job = get(state, &format!("/api/jobs/{key}")).await.json();
        match job["status"].as_str().unwrap() {
            "ready" => return,
            "failed" => panic!("{job}"),
            _ => tokio::time::sleep(Duration::from_millis(100)).await,
        }
    }
    panic!("embedding job did not finish");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn embedding_job_lifecycle() {
    let state = synthetic_state(600, 0);
    let query = "scope=all&seed=3&perplexity=20";
    assert_eq!(get(&state, &format!("/api/embedding?{query}")).await.status, StatusCode::NOT_FOUND);

    let submitted = send(&state, Method::POST, &format!("/api/embed?{query}"), None).await;
    assert_eq!(submitted.status, StatusCode::ACCEPTED);
    let key = submitted.json()["key"].as_str().unwrap().to_string();
    let early = get(&state, &format!("/api/embedding?{query}")).await;
    assert_eq!(early.status, StatusCode::CONFLICT);
    assert_eq!(early.json()["error"], "EmbeddingNotReady");
    assert_eq!(get(&state, &format!("/api/clusters?{query}&concept=label%3D0")).await.status, StatusCode::CONFLICT);

    wait_ready(&state, &key).await;
    let resubmit = send(&state, Method::POST, &format!("/api/embed?{query}"), None).await;
    assert_eq!(resubmit.status, StatusCode::OK);
    assert_eq!(resubmit.json()["status"], "ready");

    let frame = get(&state, &format!("/api/embedding?{query}&scheme=class")).await.json();
    assert_eq!(frame["key"], key.as_str());
    let ids = frame["ids"].as_array().unwrap();
    assert_eq!(ids.len(), 600);
    assert_eq!(frame["coords"].as_array().unwrap().len(), 600);
    assert_eq!(frame["colors"]["class"].as_array().unwrap().len(), 600);

    let csf = get(&state, &format!("/api/embedding?{query}&scheme=csf-confusion&channel=msr&tau=0.6")).await.json();
    let labels = csf["colors"]["csf-confusion"].as_array().unwrap();
    assert_eq!(labels.len(), 600);
    assert!(labels.iter().all(|l| ["TP", "FP", "TN", "FN"].contains(&l.as_str().unwrap())));
    let nan = get(&state, &format!("/api/embedding?{query}&scheme=csf-confusion&tau=NaN")).await;
    assert_eq!(nan.status, StatusCode::UNPROCESSABLE_ENTITY);
    let inf = get(&state, &format!("/api/embedding?{query}&scheme=csf-confusion&tau=inf")).await;
    assert_eq!(inf.status, StatusCode::UNPROCESSABLE_ENTITY);
    let defaulted = get(&state, &format!("/api/embedding?{query}&scheme=csf-confusion")).await.json();
    assert!(defaulted["tau"].as_f64().unwrap().is_finite());
    assert_eq!(get(&state, &format!("/api/embedding?{query}&scheme=plaid")).await.status, StatusCode::UNPROCESSABLE_ENTITY);

    let clusters = get(&state, &format!("/api/clusters?{query}&concept=label%3D0")).await;
    assert_eq!(clusters.status, StatusCode::OK);
    let c = clusters.json();
    let reps = c["representative_ids"].as_array().unwrap();
    assert!(!reps.is_empty() && reps.len() <= 9);
    let bundle = synthetic(600, 0);
    for id in reps {
        assert_eq!(bundle.runs()[0].get(id.as_str().unwrap()).unwrap().label, 0);
    }
    assert_eq!(get(&state, "/api/jobs/ffff").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn several_bundles_need_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    write_worked_example(&dir.path().join("worked"));
    write_bundle(&synthetic(60, 0), dir.path().join("synth")).unwrap();
    let state = Arc::new(AppState::load(dir.path()).unwrap());
    let names: Vec<String> = get(&state, "/api/datasets")
        .await
        .json()
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["name"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(names.len(), 2);
    assert!(names.contains(&"worked".to_string()));
    assert_eq!(get(&state, "/api/studies").await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(get(&state, "/api/studies?dataset=worked").await.status, StatusCode::OK);
    // Images are looked up across bundles when no dataset is given.
    assert_eq!(get(&state, "/api/images/a").await.status, StatusCode::OK);
}
