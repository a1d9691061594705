use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use talkedit_core::backend::{Backend, BarReader, ImageTensor, ToyWorld, NUM_ATTRIBUTES};
use talkedit_core::dialog::{DialogModels, FeedbackTemplates, RequestEncoder};
use talkedit_core::field::{FieldConfig, ScoreGradient, StepRule};
use talkedit_core::language::{DialogContext, Direction, EditingEncoding, RequestType};
use talkedit_core::predictor::DegreeClassifier;
use talkedit_service::{
    image_hash, replay, router, ErrorBody, HistoryResponse, MessageResponse, Service,
    SessionResponse, SessionStore,
};
use tower::ServiceExt;

/// Understands "make the {attribute} more/less", "yes", "no" and "bye".
struct Keywords;

impl RequestEncoder for Keywords {
    fn encode(&self, text: &str, context: DialogContext) -> EditingEncoding {
        let words = ["bangs", "glasses", "beard", "smile", "age"];
        if text == "bye" {
            return EditingEncoding::bare(RequestType::End);
        }
        if text == "yes" {
            return match context {
                DialogContext::AfterSuggestion => EditingEncoding::bare(RequestType::DirectionOnly),
                _ => EditingEncoding::bare(RequestType::Confirm),
            };
        }
        match words.iter().position(|w| text.contains(w)) {
            Some(a) => EditingEncoding {
                request_type: RequestType::DirectionOnly,
                attribute: Some(a),
                direction: if text.contains("less") || text.contains("shorter") {
                    Direction::Decrease
                } else {
                    Direction::Increase
                },
                degree: None,
            },
            None => EditingEncoding::other(),
        }
    }
}

fn models() -> Arc<DialogModels> {
    let world = Arc::new(ToyWorld::with_seed(7).unwrap());
    let editors = (0..NUM_ATTRIBUTES)
        .map(|a| {
            Some(Arc::new(ScoreGradient {
                world: world.clone(),
                attribute: a,
                step_length: 0.05,
            }) as Arc<dyn StepRule>)
        })
        .collect();
    Arc::new(DialogModels {
        predictor: Arc::new(BarReader::new(&world)),
        backend: world,
        encoder: Arc::new(Keywords),
        editors,
        field_config: FieldConfig::default(),
        feedback: FeedbackTemplates::builtin(),
    })
}

fn service(dir: &std::path::Path) -> Arc<Service> {
    Arc::new(Service::open(Some(models()), SessionStore::open(dir).unwrap()).unwrap())
}

async fn call(
    svc: &Arc<Service>,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = router(svc.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    (
        status,
        res.into_body().collect().await.unwrap().to_bytes().to_vec(),
    )
}

async fn create(svc: &Arc<Service>, seed: u64) -> SessionResponse {
    let (status, body) = call(svc, "POST", "/v1/sessions", Some(json!({ "seed": seed }))).await;
    assert_eq!(status, StatusCode::CREATED);
    serde_json::from_slice(&body).unwrap()
}

async fn say(svc: &Arc<Service>, id: &str, text: &str) -> MessageResponse {
    let (status, body) = call(
        svc,
        "POST",
        &format!("/v1/sessions/{id}/messages"),
        Some(json!({ "text": text })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

async fn history(svc: &Arc<Service>, id: &str) -> HistoryResponse {
    let (status, body) = call(svc, "GET", &format!("/v1/sessions/{id}/history"), None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

fn error(body: &[u8]) -> ErrorBody {
    serde_json::from_slice(body).unwrap()
}

const SCRIPT: [&str; 6] = [
    "make the bangs longer",
    "yes",
    "more smile please",
    "hmm",
    "less beard",
    "yes",
];

#[tokio::test]
async fn create_returns_degrees_of_served_image() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path());
    let a = create(&svc, 7).await;
    let b = create(&svc, 7).await;
    assert_ne!(a.session_id, b.session_id);
    assert_eq!(a.degrees, b.degrees);
    assert_eq!(a.attributes.len(), 5);

    let (status, png) = call(&svc, "GET", &a.image, None).await;
    assert_eq!(status, StatusCode::OK);
    let image = ImageTensor::from_png(&png).unwrap();
    let world = ToyWorld::with_seed(7).unwrap();
    let degrees = BarReader::new(&world).predict_degrees(&image).unwrap();
    assert_eq!(degrees.degrees(), a.degrees.as_slice());

    let unseeded = call(&svc, "POST", "/v1/sessions", None).await;
    assert_eq!(unseeded.0, StatusCode::CREATED);
}

#[tokio::test]
async fn edit_round_returns_new_image_and_degree_check() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path());
    let s = create(&svc, 3).await;
    let r = say(&svc, &s.session_id, "make the bangs longer").await;
    assert_eq!(
        r.feedback.category,
        talkedit_core::dialog::FeedbackCategory::DegreeCheck
    );
    assert_ne!(r.image_hash, s.image_hash);
    assert_eq!(r.degrees[0], s.degrees[0] + 1);
    let (status, png) = call(&svc, "GET", &r.image, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(image_hash(&ImageTensor::from_png(&png).unwrap()).len(), 64);
}

#[tokio::test]
async fn errors_carry_code_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path());
    let s = create(&svc, 1).await;

    let (status, body) = call(
        &svc,
        "POST",
        "/v1/sessions/nope/messages",
        Some(json!({"text": "hi"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error(&body).code, "not_found");

    let uri = format!("/v1/sessions/{}/messages", s.session_id);
    let (status, body) = call(&svc, "POST", &uri, Some(json!({"text": "   "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error(&body).code, "invalid_request");
    assert!(history(&svc, &s.session_id).await.rounds.is_empty());

    let (status, _) = call(&svc, "POST", &uri, Some(json!({"words": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = call(&svc, "GET", "/v1/images/abc.png", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error(&body).code, "not_found");

    let handle = svc.session(&s.session_id).unwrap();
    let guard = handle.lock().await;
    let (status, body) = call(&svc, "POST", &uri, Some(json!({"text": "yes"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error(&body).code, "busy");
    drop(guard);

    let r = say(&svc, &s.session_id, "bye").await;
    assert_eq!(r.fsm, talkedit_core::dialog::FsmState::End);
    let (status, body) = call(&svc, "POST", &uri, Some(json!({"text": "yes"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error(&body).code, "session_ended");

    let (status, body) = call(&svc, "GET", "/v2/sessions", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error(&body).code, "not_found");
}

#[tokio::test]
async fn missing_models_is_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(Service::open(None, SessionStore::open(dir.path()).unwrap()).unwrap());
    let (status, body) = call(&svc, "POST", "/v1/sessions", Some(json!({}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(error(&body).code, "service_unavailable");
}

#[tokio::test]
async fn replay_from_seed_reproduces_degrees() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path());
    let run = |svc: Arc<Service>| async move {
        let s = create(&svc, 11).await;
        let mut seq = vec![s.degrees.clone()];
        let mut feedback = Vec::new();
        for t in SCRIPT {
            let r = say(&svc, &s.session_id, t).await;
            seq.push(r.degrees);
            feedback.push(r.feedback.text);
        }
        (seq, feedback)
    };
    let a = run(svc.clone()).await;
    let b = run(svc).await;
    assert_eq!(a, b);
    assert!(a.0.windows(2).any(|w| w[0] != w[1]));
}

#[tokio::test]
async fn history_survives_restart_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path());
    let s = create(&svc, 5).await;
    assert!(history(&svc, &s.session_id).await.rounds.is_empty());
    let mut last = None;
    for t in SCRIPT {
        last = Some(say(&svc, &s.session_id, t).await);
    }
    let before = history(&svc, &s.session_id).await;
    assert_eq!(before.rounds.len(), SCRIPT.len());
    drop(svc);

    let reopened = service(dir.path());
    let after = history(&reopened, &s.session_id).await;
    assert_eq!(before, after);
    let (status, _) = call(&reopened, "GET", &last.unwrap().image, None).await;
    assert_eq!(status, StatusCode::OK);

    // the stored snapshot and a fresh re-run of the texts agree
    let record = SessionStore::open(dir.path())
        .unwrap()
        .load(&s.session_id)
        .unwrap();
    assert_eq!(replay(&models(), &record).unwrap(), record.state);
    let r = say(&reopened, &s.session_id, "more age").await;
    assert_eq!(r.round, SCRIPT.len() as u64 + 1);
}

#[tokio::test]
async fn torn_final_line_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path());
    let s = create(&svc, 2).await;
    say(&svc, &s.session_id, "make the bangs longer").await;
    drop(svc);
    let path = dir.path().join(format!("{}.jsonl", s.session_id));
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"event\":\"round\",\"at\":");
    std::fs::write(&path, text).unwrap();
    let reopened = service(dir.path());
    assert_eq!(history(&reopened, &s.session_id).await.rounds.len(), 1);
}

#[tokio::test]
async fn sessions_are_independent() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path());
    let a = create(&svc, 9).await;
    let b = create(&svc, 9).await;
    let (ra, rb) = tokio::join!(
        say(&svc, &a.session_id, "more beard"),
        say(&svc, &b.session_id, "less smile")
    );
    assert_eq!(ra.round, 1);
    assert_eq!(rb.round, 1);
    assert_eq!(history(&svc, &a.session_id).await.rounds.len(), 1);
    assert_eq!(svc.session_ids().len(), 2);
    let world = ToyWorld::with_seed(7).unwrap();
    assert_eq!(world.latent_dim(), 16);
}
