use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use intent_augment::classify::{FidelityReport, SEED_INTENT_META};
use intent_augment::corpus::{Origin, Utterance};
use intent_augment::review::{self, JudgmentLog, ReviewTask};
use intent_augment::synthetic::{SyntheticCorpus, SyntheticSpec};
use intent_augment_review::{router, ReviewState};
use serde_json::{json, Value};
use tower::ServiceExt;

fn generated() -> Vec<Utterance> {
    ["book a table", "play some jazz", "what is the weather"]
        .iter()
        .map(|t| Utterance::new(*t, "play_music", Origin::Generated).with_meta(SEED_INTENT_META, "play_music"))
        .collect()
}

fn relabel_tasks(gen: &[Utterance]) -> Vec<ReviewTask> {
    let confusion = FidelityReport::from_pairs([
        ("play_music", "play_music"),
        ("play_music", "book_table"),
        ("play_music", "book_table"),
        ("play_music", "weather"),
        ("play_music", "oos"),
    ]);
    review::build_relabel_tasks(gen, &confusion)
}

fn app(tasks: Vec<ReviewTask>, gen: Vec<Utterance>, log_path: &std::path::Path) -> (Router, Arc<ReviewState>) {
    let log = JudgmentLog::open(log_path).unwrap();
    let state = ReviewState::new(tasks, gen, log, None).unwrap();
    (router(state.clone()), state)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, String) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), 1 << 24).await.unwrap();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

fn parse(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

#[tokio::test]
async fn relabel_judgment_round_trips_to_export() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generated();
    let (app, _) = app(relabel_tasks(&gen), gen.clone(), &dir.path().join("log.jsonl"));

    let (status, body) = call(&app, "GET", "/api/tasks/next?annotator=ann1", None).await;
    assert_eq!(status, StatusCode::OK);
    let next = parse(&body);
    assert_eq!(next["remaining"], 3);
    let task = &next["task"];
    assert_eq!(task["kind"], "relabel");
    assert_eq!(task["task_id"], "relabel-00001");
    assert_eq!(
        task["candidates"],
        json!(["play_music", "book_table", "weather", "oos", "other"])
    );

    let (status, _) = call(
        &app,
        "POST",
        "/api/judgments",
        Some(json!({"task_id": "relabel-00001", "annotator_id": "ann1", "answer": "book_table"})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);

    let (status, body) = call(&app, "GET", "/api/export", None).await;
    assert_eq!(status, StatusCode::OK);
    let export = parse(&body);
    assert_eq!(export["count"], 1);
    assert_eq!(export["utterances"][0]["text"], "book a table");
    assert_eq!(export["utterances"][0]["intent"], "book_table");
    assert_eq!(export["utterances"][0]["seed_intent"], "play_music");
    assert_eq!(export["utterances"][0]["origin"], "relabelled");

    // "other" drops the utterance from the export.
    call(
        &app,
        "POST",
        "/api/judgments",
        Some(json!({"task_id": "relabel-00002", "annotator_id": "ann1", "answer": "other"})),
    )
    .await;
    let (_, body) = call(&app, "GET", "/api/export", None).await;
    assert_eq!(parse(&body)["count"], 1);

    let (_, body) = call(&app, "GET", "/api/stats", None).await;
    let stats = parse(&body);
    assert_eq!(stats["judged_tasks"], 2);
    assert_eq!(stats["remaining"], 1);
    assert_eq!(stats["relabel_changed"], 1);
    assert_eq!(stats["relabel_dropped"], 1);
}

#[tokio::test]
async fn invalid_duplicate_and_unknown_judgments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generated();
    let (app, _) = app(relabel_tasks(&gen), gen, &dir.path().join("log.jsonl"));
    let post = |body: Value| {
        let app = app.clone();
        async move { call(&app, "POST", "/api/judgments", Some(body)).await.0 }
    };
    assert_eq!(
        post(json!({"task_id": "relabel-00001", "annotator_id": "a", "answer": "not_a_candidate"})).await,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        post(json!({"task_id": "relabel-00001", "annotator_id": "a", "answer": 2})).await,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        post(json!({"task_id": "nope", "annotator_id": "a", "answer": "oos"})).await,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        post(json!({"task_id": "relabel-00001", "annotator_id": "a", "answer": "oos"})).await,
        StatusCode::CREATED
    );
    assert_eq!(
        post(json!({"task_id": "relabel-00001", "annotator_id": "a", "answer": "weather"})).await,
        StatusCode::CONFLICT
    );
    let (status, _) = call(&app, "GET", "/api/tasks/next", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn concurrent_annotators_get_distinct_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generated();
    let (app, _) = app(relabel_tasks(&gen), gen, &dir.path().join("log.jsonl"));
    let id = |body: String| parse(&body)["task"]["task_id"].as_str().map(str::to_string);
    let a = id(call(&app, "GET", "/api/tasks/next?annotator=a", None).await.1);
    let b = id(call(&app, "GET", "/api/tasks/next?annotator=b", None).await.1);
    let a_again = id(call(&app, "GET", "/api/tasks/next?annotator=a", None).await.1);
    assert_ne!(a, b);
    assert_eq!(a, a_again);
}

fn spot_fixture(tasks_per_intent: usize) -> (Vec<ReviewTask>, Vec<Utterance>) {
    let corpus = SyntheticCorpus::generate(&SyntheticSpec::default()).unwrap();
    let gen: Vec<Utterance> = corpus
        .dataset
        .intents()
        .iter()
        .map(|i| Utterance::new(format!("generated sentence for {i}"), i.clone(), Origin::Generated))
        .collect();
    let tasks = review::build_spot_fake_tasks(&corpus.dataset, &gen, 0.5, tasks_per_intent, 11).unwrap();
    (tasks, gen)
}

#[tokio::test]
async fn hidden_truth_never_reaches_clients() {
    let dir = tempfile::tempdir().unwrap();
    let (tasks, gen) = spot_fixture(3);
    let n = tasks.len();
    let (app, _) = app(tasks, gen, &dir.path().join("log.jsonl"));
    let mut bodies = Vec::new();
    for _ in 0..n {
        let (_, body) = call(&app, "GET", "/api/tasks/next?annotator=x", None).await;
        let task = parse(&body)["task"].clone();
        assert_eq!(task["sentences"].as_array().unwrap().len(), 5);
        let (_, post) = call(
            &app,
            "POST",
            "/api/judgments",
            Some(json!({"task_id": task["task_id"], "annotator_id": "x", "answer": "none"})),
        )
        .await;
        bodies.push(body);
        bodies.push(post);
    }
    bodies.push(call(&app, "GET", "/api/stats", None).await.1);
    bodies.push(call(&app, "GET", "/api/export", None).await.1);
    for body in &bodies {
        assert!(!body.contains("hidden_truth"), "{body}");
        assert!(!body.contains("source_index"), "{body}");
        assert!(!body.contains("\"origin\":\"generated\""), "{body}");
    }
    assert_eq!(parse(bodies.last().unwrap())["count"], 0);
}

#[tokio::test]
async fn always_none_annotator_error_rate_equals_replaced_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let (tasks, gen) = spot_fixture(20);
    let replaced = tasks.iter().filter(|t| t.hidden_truth.is_some()).count() as f64 / tasks.len() as f64;
    let log_path = dir.path().join("log.jsonl");
    let (app, _) = app(tasks.clone(), gen.clone(), &log_path);
    for t in &tasks {
        let (status, _) = call(
            &app,
            "POST",
            "/api/judgments",
            Some(json!({"task_id": t.task_id, "annotator_id": "lazy", "answer": "none"})),
        )
        .await;
        assert_eq!(status, StatusCode::CREATED);
    }
    let (_, body) = call(&app, "GET", "/api/stats", None).await;
    let stats = parse(&body);
    assert_eq!(stats["human_error_rate"].as_f64().unwrap(), replaced);

    // Replaying the log in a fresh server gives identical statistics.
    let (replayed, _) = self::app(tasks, gen, &log_path);
    let (_, again) = call(&replayed, "GET", "/api/stats", None).await;
    assert_eq!(again, body);
}

#[tokio::test]
async fn fallback_index_is_served() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(Vec::new(), Vec::new(), &dir.path().join("log.jsonl"));
    let (status, body) = call(&app, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body.contains("/api/tasks/next"));
    let (status, _) = call(&app, "GET", "/../secret", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, body) = call(&app, "GET", "/api/tasks/next?annotator=a", None).await;
    assert_eq!(parse(&body)["task"], Value::Null);
}

#[tokio::test]
async fn static_dir_assets() {
    let dir = tempfile::tempdir().unwrap();
    let assets = dir.path().join("dist");
    std::fs::create_dir_all(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<p>ui</p>").unwrap();
    std::fs::write(assets.join("app.js"), "console.log(1)").unwrap();
    let log = JudgmentLog::open(&dir.path().join("log.jsonl")).unwrap();
    let state = ReviewState::new(Vec::new(), Vec::new(), log, Some(assets)).unwrap();
    let app = router(state);
    assert_eq!(call(&app, "GET", "/", None).await.1, "<p>ui</p>");
    let resp = app
        .clone()
        .oneshot(Request::builder().uri("/app.js").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.headers()["content-type"], "text/javascript; charset=utf-8");
}
