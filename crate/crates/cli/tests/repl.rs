use std::io::Cursor;
use std::sync::Arc;

use talkedit::repl_loop;
use talkedit_core::backend::{BarReader, ImageTensor, ToyWorld, NUM_ATTRIBUTES};
use talkedit_core::dialog::{
    DialogModels, FeedbackCategory, FeedbackTemplates, FsmState, RequestEncoder, RoundRecord,
};
use talkedit_core::field::{FieldConfig, ScoreGradient, StepRule};
use talkedit_core::language::{DialogContext, Direction, EditingEncoding, RequestType};
use talkedit_service::{Service, SessionStore};

/// Understands "{attribute} more/less", "yes", "no" and "bye".
struct Keywords;

impl RequestEncoder for Keywords {
    fn encode(&self, text: &str, context: DialogContext) -> EditingEncoding {
        let words = ["bangs", "glasses", "beard", "smile", "age"];
        match text {
            "bye" => return EditingEncoding::bare(RequestType::End),
            "yes" if context == DialogContext::AfterSuggestion => {
                return EditingEncoding::bare(RequestType::DirectionOnly)
            }
            "yes" => return EditingEncoding::bare(RequestType::Confirm),
            "no" => return EditingEncoding::bare(RequestType::Reject),
            _ => {}
        }
        match words.iter().position(|w| text.contains(w)) {
            Some(a) => EditingEncoding {
                request_type: RequestType::DirectionOnly,
                attribute: Some(a),
                direction: if text.contains("less") {
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

fn run(seed: u64, script: &str) -> (talkedit::ReplSession, String) {
    let mut out = Vec::new();
    let s = repl_loop(&models(), seed, Cursor::new(script.to_string()), &mut out).unwrap();
    (s, String::from_utf8(out).unwrap())
}

#[test]
fn yes_after_degree_check_closes_the_edit() {
    let (s, out) = run(3, "bangs more\nyes\n");
    assert_eq!(s.transcript.len(), 2);
    assert_eq!(
        s.transcript[0].feedback.category,
        FeedbackCategory::DegreeCheck
    );
    assert_eq!(s.transcript[1].context, DialogContext::AfterDegreeCheck);
    assert_eq!(s.transcript[1].encoding.request_type, RequestType::Confirm);
    assert!(s.transcript[1].edit.is_none());
    assert_eq!(s.state.pending_check, None);
    assert_eq!(s.state.fsm, FsmState::NoEdit);
    assert!(out.contains("degrees: bangs="));
}

#[test]
fn quit_ends_session_and_eof_is_graceful() {
    let (s, out) = run(1, "beard more\n:quit\nsmile more\n");
    assert_eq!(s.state.fsm, FsmState::End);
    assert_eq!(s.transcript.len(), 1);
    assert!(out.trim_end().ends_with("bye"));

    let (s, _) = run(1, "beard more");
    assert_eq!(s.transcript.len(), 1);
    assert_ne!(s.state.fsm, FsmState::End);

    let (s, _) = run(1, "");
    assert!(s.transcript.is_empty());
    assert_eq!(s.state.fsm, FsmState::Start);

    let (s, _) = run(1, ":quit\n");
    assert_eq!(s.state.fsm, FsmState::End);
}

#[test]
fn farewell_stops_reading() {
    let (s, _) = run(2, "bye\nbangs more\n");
    assert_eq!(s.state.fsm, FsmState::End);
    assert_eq!(s.transcript.len(), 1);
}

#[test]
fn save_and_image_commands_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.jsonl");
    let p = dir.path().join("now.png");
    let script = format!(
        "bangs more\nhmm\n:save {}\n:image {}\n:bogus\n",
        t.display(),
        p.display()
    );
    let (s, out) = run(5, &script);
    let lines: Vec<RoundRecord> = std::fs::read_to_string(&t)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, s.transcript);
    let img = ImageTensor::from_png(&std::fs::read(&p).unwrap()).unwrap();
    assert_eq!(img.shape(), (32, 32));
    assert!(out.contains("commands:"));
}

#[test]
fn repl_and_service_agree_on_degrees() {
    let script = [
        "bangs more",
        "yes",
        "smile more",
        "hmm",
        "beard less",
        "yes",
        "no",
        "age more",
    ];
    let (s, _) = run(11, &script.join("\n"));
    let repl: Vec<Vec<u8>> = s
        .transcript
        .iter()
        .map(|r| r.degrees.degrees().to_vec())
        .collect();

    let dir = tempfile::tempdir().unwrap();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let service: Vec<Vec<u8>> = rt.block_on(async {
        let svc = Service::open(Some(models()), SessionStore::open(dir.path()).unwrap()).unwrap();
        let created = svc.create_session(Some(11)).await.unwrap();
        let mut out = Vec::new();
        for t in script {
            out.push(
                svc.post_message(&created.session_id, t)
                    .await
                    .unwrap()
                    .degrees,
            );
        }
        out
    });
    assert_eq!(repl, service);
    assert!(repl.windows(2).any(|w| w[0] != w[1]));
}
