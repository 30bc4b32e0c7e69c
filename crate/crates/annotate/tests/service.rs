use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use zscir_annotate::model::*;
use zscir_annotate::service::assign_supercategories;
use zscir_annotate::{router, AnnotationService, Resources, ServiceConfig};
use zscir_core::backbone::{BackboneConfig, MockBackbone};
use zscir_core::datasets::{parse_dataset, Dataset, DatasetFormat};
use zscir_core::fixtures::image_corpus;
use zscir_core::phi::{PhiArchitecture, PhiNetwork};
use zscir_core::retrieval::EmbeddingIndex;

struct Fixture {
    app: Router,
    service: Arc<AnnotationService>,
    _dir: tempfile::TempDir,
}

fn resources(n: usize, with_phi: bool, image_dir: Option<&Path>) -> Resources {
    let backbone = MockBackbone::new(BackboneConfig::default()).unwrap();
    let corpus = image_corpus(n, 11).unwrap();
    let index = EmbeddingIndex::build(&corpus, &backbone).unwrap();
    let mut image_files = HashMap::new();
    if let Some(dir) = image_dir {
        for (id, img) in &corpus {
            let path = dir.join(format!("{id}.png"));
            img.save_png(&path).unwrap();
            image_files.insert(id.clone(), path);
        }
    }
    let dim = index.dim();
    let phi = with_phi.then(|| Arc::new(PhiNetwork::init(PhiArchitecture::new(dim, dim, 0.5).unwrap(), 3).unwrap()));
    Resources {
        backbone: Arc::new(backbone),
        index: Arc::new(index),
        phi,
        image_files,
    }
}

fn fixture_in(dir: tempfile::TempDir, n: usize, with_phi: bool) -> Fixture {
    let res = resources(n, with_phi, Some(dir.path()));
    let service = Arc::new(AnnotationService::open(res, ServiceConfig::default(), &dir.path().join("data")).unwrap());
    Fixture {
        app: router(service.clone()),
        service,
        _dir: dir,
    }
}

fn fixture(n: usize, with_phi: bool) -> Fixture {
    fixture_in(tempfile::tempdir().unwrap(), n, with_phi)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => builder.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, "GET", uri, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = call(app, "POST", uri, Some(body)).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn new_session(app: &Router) -> String {
    let (s, v) = get_json(app, "/session").await;
    assert_eq!(s, StatusCode::OK);
    v["session_id"].as_str().unwrap().to_string()
}

/// Runs one session up to ground-truth selection; returns (reference, target, triplet).
async fn to_gt_selection(app: &Router, sid: &str, caption: &str) -> (String, String, String) {
    let (s, r) = get_json(app, &format!("/reference?session_id={sid}")).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    let reference = r["reference_id"].as_str().unwrap().to_string();
    let (s, g) = get_json(app, &format!("/candidates/{reference}?session_id={sid}")).await;
    assert_eq!(s, StatusCode::OK, "{g}");
    let target = g["candidates"][0]["id"].as_str().unwrap().to_string();
    let (s, t) = post_json(
        app,
        "/triplet",
        json!({"session_id": sid, "target_id": target, "shared_concept": "a dog", "relative_caption": caption}),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{t}");
    (reference, target, t["triplet_id"].as_str().unwrap().to_string())
}

async fn complete(app: &Router, sid: &str, caption: &str) -> Value {
    let (reference, target, tid) = to_gt_selection(app, sid, caption).await;
    let (s, g) = get_json(app, &format!("/gt-candidates/{tid}")).await;
    assert_eq!(s, StatusCode::OK, "{g}");
    let extra: Vec<String> = g["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["id"].as_str().unwrap().to_string())
        .filter(|id| *id != target && *id != reference)
        .take(2)
        .collect();
    let mut gts = extra.clone();
    gts.push(target.clone());
    let (s, q) = post_json(
        app,
        "/ground-truths",
        json!({"session_id": sid, "triplet_id": tid, "gt_ids": gts, "semantic_aspects": ["Cardinality", "Addition"]}),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{q}");
    assert_eq!(q["gt_img_ids"][0], json!(target));
    q
}

#[tokio::test]
async fn phase_machine_runs_to_completion_and_back() {
    let f = fixture(60, true);
    let sid = new_session(&f.app).await;
    let (_, v) = get_json(&f.app, &format!("/session?session_id={sid}")).await;
    assert_eq!(v["phase"], "pair_selection");
    assert_eq!(v["caption_prefix"], CAPTION_PREFIX);

    let (reference, _, tid) = to_gt_selection(&f.app, &sid, "has two of them").await;
    let (_, v) = get_json(&f.app, &format!("/session?session_id={sid}")).await;
    assert_eq!(v["phase"], "gt_selection");
    assert_eq!(v["current_triplet_id"], json!(tid));
    assert_eq!(v["current_reference_id"], json!(reference));

    // a new reference cannot be requested mid-selection
    let (s, _) = get_json(&f.app, &format!("/reference?session_id={sid}")).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, g) = get_json(&f.app, &format!("/gt-candidates/{tid}")).await;
    assert_eq!(s, StatusCode::OK);
    let target = g["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["prechecked"] == json!(true))
        .unwrap()["id"]
        .clone();
    let (s, _) = post_json(&f.app, "/ground-truths", json!({"session_id": sid, "triplet_id": tid, "gt_ids": [target]})).await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, v) = get_json(&f.app, &format!("/session?session_id={sid}")).await;
    assert_eq!(v["phase"], "pair_selection");
    assert_eq!(v["current_reference_id"], Value::Null);
    let completed: usize = v["quota"]["completed"].as_object().unwrap().values().map(|n| n.as_u64().unwrap() as usize).sum();
    assert_eq!(completed, 1);

    // the completed triplet is closed
    let (s, _) = post_json(&f.app, "/ground-truths", json!({"session_id": sid, "triplet_id": tid, "gt_ids": [target]})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    // the used reference is never served again
    for _ in 0..10 {
        let (_, r) = get_json(&f.app, &format!("/reference?session_id={sid}&skip=true")).await;
        assert_ne!(r["reference_id"], json!(reference));
    }
}

#[tokio::test]
async fn triplet_before_candidates_is_a_conflict() {
    let f = fixture(30, true);
    let sid = new_session(&f.app).await;
    let (_, r) = get_json(&f.app, &format!("/reference?session_id={sid}")).await;
    let reference = r["reference_id"].as_str().unwrap();
    let (s, _) = post_json(
        &f.app,
        "/triplet",
        json!({"session_id": sid, "target_id": reference, "shared_concept": "x", "relative_caption": "y"}),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn invalid_triplets_are_rejected() {
    let f = fixture(40, true);
    let sid = new_session(&f.app).await;
    let (_, r) = get_json(&f.app, &format!("/reference?session_id={sid}")).await;
    let reference = r["reference_id"].as_str().unwrap().to_string();
    let (_, g) = get_json(&f.app, &format!("/candidates/{reference}?session_id={sid}")).await;
    let served: HashSet<String> = g["candidates"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap().to_string()).collect();
    let target = g["candidates"][0]["id"].as_str().unwrap();

    let outside = f.service.health().index_size;
    assert!(served.len() < outside);
    let stranger = (0..outside).map(zscir_core::fixtures::image_id).find(|id| !served.contains(id)).unwrap();
    for (body, why) in [
        (json!({"session_id": sid, "target_id": stranger, "shared_concept": "a", "relative_caption": "b"}), "target outside gallery"),
        (json!({"session_id": sid, "target_id": target, "shared_concept": "  ", "relative_caption": "b"}), "blank concept"),
        (json!({"session_id": sid, "target_id": target, "shared_concept": "a", "relative_caption": ""}), "blank caption"),
        (json!({"session_id": sid, "target_id": target}), "missing fields"),
    ] {
        let (s, e) = post_json(&f.app, "/triplet", body).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{why}: {e}");
        assert!(e["error"].is_string());
    }
    let (s, e) = post_json(
        &f.app,
        "/triplet",
        json!({"session_id": sid, "target_id": stranger, "shared_concept": "a", "relative_caption": "b"}),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["offending_ids"], json!([stranger]));
}

#[tokio::test]
async fn invalid_ground_truths_name_the_offending_ids() {
    let f = fixture(60, true);
    let sid = new_session(&f.app).await;
    let (reference, target, tid) = to_gt_selection(&f.app, &sid, "is red").await;

    // selection before the gallery was served
    let (s, _) = post_json(&f.app, "/ground-truths", json!({"session_id": sid, "triplet_id": tid, "gt_ids": [target]})).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (_, g) = get_json(&f.app, &format!("/gt-candidates/{tid}")).await;
    let other = g["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["id"].as_str().unwrap().to_string())
        .find(|id| *id != target)
        .unwrap();

    let (s, e) = post_json(&f.app, "/ground-truths", json!({"session_id": sid, "triplet_id": tid, "gt_ids": [target, "nope"]})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["offending_ids"], json!(["nope"]));

    let (s, e) = post_json(&f.app, "/ground-truths", json!({"session_id": sid, "triplet_id": tid, "gt_ids": [target, reference]})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["offending_ids"], json!([reference]));

    let (s, e) = post_json(&f.app, "/ground-truths", json!({"session_id": sid, "triplet_id": tid, "gt_ids": [other]})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["offending_ids"], json!([target]));

    let (s, _) = post_json(
        &f.app,
        "/ground-truths",
        json!({"session_id": sid, "triplet_id": tid, "gt_ids": [target], "semantic_aspects": ["colour"]}),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = post_json(&f.app, "/ground-truths", json!({"session_id": "other", "triplet_id": tid, "gt_ids": [target]})).await;
    assert_eq!(s, StatusCode::CONFLICT);

    // target listed last still ends up first
    let (s, q) = post_json(&f.app, "/ground-truths", json!({"session_id": sid, "triplet_id": tid, "gt_ids": [other, target]})).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(q["gt_img_ids"], json!([target, other]));
}

#[tokio::test]
async fn galleries_respect_size_and_similarity_limits() {
    let f = fixture(200, true);
    let sid = new_session(&f.app).await;
    let (_, r) = get_json(&f.app, &format!("/reference?session_id={sid}")).await;
    let first = r["reference_id"].as_str().unwrap().to_string();
    let (_, g) = get_json(&f.app, &format!("/candidates/{first}?session_id={sid}")).await;
    let c = g["candidates"].as_array().unwrap();
    assert!(!c.is_empty() && c.len() <= 50);
    assert!(c.iter().all(|x| x["score"].as_f64().unwrap() <= 0.92));
    assert!(c.iter().all(|x| x["id"] != json!(first)));
    // serving the gallery again while captioning returns the same one
    let (_, again) = get_json(&f.app, &format!("/candidates/{first}?session_id={sid}")).await;
    assert_eq!(g, again);

    let (reference, target, tid) = to_gt_selection(&f.app, &sid, "is smaller").await;
    assert_eq!(reference, first);

    let (_, g) = get_json(&f.app, &format!("/gt-candidates/{tid}")).await;
    let c = g["candidates"].as_array().unwrap();
    assert!(c.len() <= 150);
    let ids: Vec<&str> = c.iter().map(|x| x["id"].as_str().unwrap()).collect();
    assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
    assert!(!ids.contains(&reference.as_str()));
    let checked: Vec<&Value> = c.iter().filter(|x| x["prechecked"] == json!(true)).collect();
    assert_eq!(checked.len(), 1);
    assert_eq!(checked[0]["id"], json!(target));
    assert!(g["query_text"].as_str().unwrap().contains("is smaller"));
}

#[tokio::test]
async fn gt_gallery_needs_the_inversion_network() {
    let f = fixture(30, false);
    let (_, h) = get_json(&f.app, "/health").await;
    assert_eq!(h["status"], "degraded");
    assert_eq!(h["phi_loaded"], false);
    let sid = new_session(&f.app).await;
    let (_, _, tid) = to_gt_selection(&f.app, &sid, "is blue").await;
    let (s, _) = get_json(&f.app, &format!("/gt-candidates/{tid}")).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);

    let g = fixture(30, true);
    let (_, h) = get_json(&g.app, "/health").await;
    assert_eq!(h["status"], "ready");
    assert_eq!(h["index_size"], 30);
}

#[tokio::test]
async fn first_references_cover_distinct_supercategories() {
    let f = fixture(200, true);
    let res = resources(200, false, None);
    let cats = assign_supercategories(&res.index, res.backbone.as_ref()).unwrap();
    let non_empty: HashSet<Supercategory> = cats.values().copied().collect();
    let mut seen = HashSet::new();
    for _ in 0..12 {
        let sid = new_session(&f.app).await;
        let (_, r) = get_json(&f.app, &format!("/reference?session_id={sid}")).await;
        let cat: Supercategory = serde_json::from_value(r["supercategory"].clone()).unwrap();
        assert_eq!(cats[r["reference_id"].as_str().unwrap()], cat);
        seen.insert(cat);
    }
    assert_eq!(seen.len(), non_empty.len().min(12));
}

#[tokio::test]
async fn skip_draws_a_new_reference_without_counting_it() {
    let f = fixture(40, true);
    let sid = new_session(&f.app).await;
    let (_, a) = get_json(&f.app, &format!("/reference?session_id={sid}")).await;
    let (_, again) = get_json(&f.app, &format!("/reference?session_id={sid}")).await;
    assert_eq!(a, again);
    let (_, b) = get_json(&f.app, &format!("/reference?session_id={sid}&skip=true")).await;
    assert_ne!(a["reference_id"], b["reference_id"]);
    let v = f.service.session(&sid).unwrap();
    assert_eq!(v.quota.pending.values().sum::<usize>(), 1);
    assert_eq!(v.quota.completed.values().sum::<usize>(), 0);
}

#[tokio::test]
async fn export_round_trips_and_is_stable() {
    let f = fixture(80, true);
    let (s, _) = get_json(&f.app, "/export").await;
    assert_eq!(s, StatusCode::CONFLICT);
    for i in 0..5 {
        let sid = new_session(&f.app).await;
        complete(&f.app, &sid, &format!("has {i} more of them")).await;
    }
    let (s, a) = call(&f.app, "GET", "/export?ratio=0.4&seed=9", None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, b) = call(&f.app, "GET", "/export?ratio=0.4&seed=9", None).await;
    assert_eq!(a, b);
    let dataset = parse_dataset(&a, DatasetFormat::Circo, Path::new("export.json")).unwrap();
    assert_eq!(dataset.to_canonical_json().unwrap(), a);
    let Dataset::Circo(queries) = dataset else { panic!() };
    assert_eq!(queries.len(), 5);
    assert_eq!(queries.iter().filter(|q| q.split == zscir_core::datasets::Split::Val).count(), 2);
    let (s, _) = call(&f.app, "GET", "/export?ratio=1.5", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn completed_queries_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let before = {
        let service = Arc::new(AnnotationService::open(resources(60, true, None), ServiceConfig::default(), &data).unwrap());
        let app = router(service.clone());
        let sid = new_session(&app).await;
        complete(&app, &sid, "is upside down").await;
        let sid = new_session(&app).await;
        complete(&app, &sid, "is tiny").await;
        service.export(None, None).unwrap()
    };
    assert!(data.join("dataset.json").exists());
    let reopened = AnnotationService::open(resources(60, true, None), ServiceConfig::default(), &data).unwrap();
    assert_eq!(reopened.health().completed_queries, 2);
    assert_eq!(reopened.export(None, None).unwrap(), before);
}

#[tokio::test]
async fn captions_round_trip_unicode_verbatim() {
    let f = fixture(60, true);
    let sid = new_session(&f.app).await;
    let caption = "est plus grand, 日本の 🐕 ß and “quoted”";
    let q = complete(&f.app, &sid, caption).await;
    assert_eq!(q["relative_caption"], json!(caption));
    let (_, bytes) = call(&f.app, "GET", "/export?ratio=0", None).await;
    let Dataset::Circo(queries) = parse_dataset(&bytes, DatasetFormat::Circo, Path::new("e.json")).unwrap() else {
        panic!()
    };
    assert_eq!(queries[0].relative_caption, caption);
}

#[tokio::test]
async fn images_are_served_only_for_indexed_ids() {
    let f = fixture(20, true);
    let (s, body) = call(&f.app, "GET", "/images/img0003", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&body[1..4], b"PNG");
    let (s, _) = call(&f.app, "GET", "/images/img9999", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&f.app, "GET", "/images/..%2Fdata%2Fevents.jsonl", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unknown_sessions_and_triplets_are_not_found() {
    let f = fixture(20, true);
    let (s, _) = get_json(&f.app, "/session?session_id=missing").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get_json(&f.app, "/reference?session_id=missing").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get_json(&f.app, "/gt-candidates/77").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get_json(&f.app, "/reference").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

fn api_validator(def: &str) -> jsonschema::Validator {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/schemas/annotation-api.schema.json");
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    doc["$ref"] = json!(format!("#/$defs/{def}"));
    jsonschema::validator_for(&doc).unwrap()
}

fn assert_conforms(def: &str, value: &Value) {
    let errors: Vec<String> = api_validator(def).iter_errors(value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{def}: {errors:?} in {value}");
}

#[tokio::test]
async fn bodies_and_events_match_the_documented_schemas() {
    let f = fixture(40, true);
    let (_, h) = get_json(&f.app, "/health").await;
    assert_conforms("health", &h);
    let (_, v) = get_json(&f.app, "/session").await;
    assert_conforms("session_view", &v);
    let sid = v["session_id"].as_str().unwrap().to_string();
    let (_, r) = get_json(&f.app, &format!("/reference?session_id={sid}")).await;
    assert_conforms("reference_view", &r);
    let (_, r) = get_json(&f.app, &format!("/reference?session_id={sid}&skip=true")).await;
    let reference = r["reference_id"].as_str().unwrap().to_string();
    let (_, g) = get_json(&f.app, &format!("/candidates/{reference}?session_id={sid}")).await;
    assert_conforms("candidate_gallery", &g);
    let request = json!({"session_id": sid, "target_id": g["candidates"][0]["id"], "shared_concept": "a bicycle", "relative_caption": "is on a beach"});
    assert_conforms("triplet_request", &request);
    let (_, t) = post_json(&f.app, "/triplet", request).await;
    assert_conforms("triplet_created", &t);
    let tid = t["triplet_id"].as_str().unwrap().to_string();
    let (_, v) = get_json(&f.app, &format!("/session?session_id={sid}")).await;
    assert_conforms("session_view", &v);
    let (_, gallery) = get_json(&f.app, &format!("/gt-candidates/{tid}")).await;
    assert_conforms("gt_gallery", &gallery);
    let (s, e) = post_json(&f.app, "/ground-truths", json!({"session_id": sid, "triplet_id": tid, "gt_ids": ["nope"]})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_conforms("error_body", &e);
    let request = json!({"session_id": sid, "triplet_id": tid, "gt_ids": [g["candidates"][0]["id"]], "semantic_aspects": ["Viewpoint"]});
    assert_conforms("ground_truth_request", &request);
    let (_, q) = post_json(&f.app, "/ground-truths", request).await;
    assert_conforms("stored_query", &q);
    complete(&f.app, &sid, "has more people").await;
    f.service.flush().unwrap();

    let log = std::fs::read_to_string(f._dir.path().join("data/events.jsonl")).unwrap();
    let kinds: HashSet<String> = log
        .lines()
        .map(|line| {
            let event: Value = serde_json::from_str(line).unwrap();
            assert_conforms("event", &event);
            event["event"].as_str().unwrap().to_string()
        })
        .collect();
    assert_eq!(kinds.len(), 3, "{kinds:?}");

    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/schemas/circo.schema.json");
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let (_, export) = call(&f.app, "GET", "/export?ratio=0.5", None).await;
    let export: Value = serde_json::from_slice(&export).unwrap();
    assert_eq!(export.as_array().unwrap().len(), 2);
    assert!(jsonschema::is_valid(&schema, &export), "{export}");
}
