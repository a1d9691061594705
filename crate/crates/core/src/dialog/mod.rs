//! The dialog controller: a small state machine that routes each utterance
//! through the context's encoder heads, runs the requested edit and answers
//! with feedback.

mod feedback;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, LatentCode, MAX_DEGREE};
use crate::field::{traverse_with, FieldConfig, Outcome, StepRule, TrajectoryRecord};
use crate::language::{DialogContext, Direction, EditingEncoding, EncoderModel, RequestType};
use crate::predictor::{DegreeClassifier, FineGrainedLabel};
use crate::{Error, Result};

pub use feedback::{
    feedback_policy, render_feedback, suggestion_probability, unedited_attributes,
    FeedbackCategory, FeedbackMessage, FeedbackPool, FeedbackTemplates, PolicyDecision,
    SUGGESTION_BASE, SUGGESTION_SLOPE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsmState {
    Start,
    Edit,
    NoEdit,
    End,
}

impl FsmState {
    pub fn name(self) -> &'static str {
        match self {
            FsmState::Start => "start",
            FsmState::Edit => "edit",
            FsmState::NoEdit => "no_edit",
            FsmState::End => "end",
        }
    }

    /// Nothing leaves `end` and nothing returns to `start`.
    pub fn can_transition(self, to: FsmState) -> bool {
        self != FsmState::End && to != FsmState::Start
    }
}

/// One completed edit in the session history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub attribute: usize,
    pub from_degree: u8,
    pub to_degree: u8,
    pub round: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogState {
    pub fsm: FsmState,
    pub current_latent: LatentCode,
    pub current_degrees: FineGrainedLabel,
    pub history: Vec<EditRecord>,
    pub last_feedback_category: Option<FeedbackCategory>,
    pub last_suggested_attribute: Option<usize>,
    /// Attribute whose new degree awaits the user's verdict.
    pub pending_check: Option<usize>,
    /// Rounds completed so far.
    pub round: u64,
    /// Seeds the per-round feedback randomness.
    pub seed: u64,
}

impl DialogState {
    pub fn new(models: &DialogModels, latent: LatentCode, seed: u64) -> Result<Self> {
        latent.check_len(models.backend.latent_dim())?;
        let current_degrees = models
            .predictor
            .predict_degrees(&models.backend.generate(&latent)?)?;
        Ok(Self {
            fsm: FsmState::Start,
            current_latent: latent,
            current_degrees,
            history: Vec::new(),
            last_feedback_category: None,
            last_suggested_attribute: None,
            pending_check: None,
            round: 0,
            seed,
        })
    }

    /// Starts from a prior sample drawn with `seed`.
    pub fn from_seed(models: &DialogModels, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = models.backend.sample_latent(&mut rng);
        Self::new(models, z, seed)
    }

    /// Encoder context implied by the last feedback.
    pub fn context(&self) -> DialogContext {
        match self.last_feedback_category {
            Some(FeedbackCategory::DegreeCheck) => DialogContext::AfterDegreeCheck,
            Some(FeedbackCategory::Suggestion) => DialogContext::AfterSuggestion,
            Some(FeedbackCategory::AskNext) | None => DialogContext::OpenRequest,
        }
    }
}

/// Maps an utterance to an editing encoding in a dialog context.
pub trait RequestEncoder: Send + Sync {
    fn encode(&self, text: &str, context: DialogContext) -> EditingEncoding;
}

impl RequestEncoder for EncoderModel {
    fn encode(&self, text: &str, context: DialogContext) -> EditingEncoding {
        EncoderModel::encode(self, text, context)
    }
}

/// Everything a round needs; shared read-only between sessions.
#[derive(Clone)]
pub struct DialogModels {
    pub backend: Arc<dyn Backend>,
    /// Decides when a traversal has arrived and reports degrees.
    pub predictor: Arc<dyn DegreeClassifier>,
    pub encoder: Arc<dyn RequestEncoder>,
    /// Step rule per attribute; `None` for attributes that cannot be edited.
    pub editors: Vec<Option<Arc<dyn StepRule>>>,
    pub field_config: FieldConfig,
    pub feedback: FeedbackTemplates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub attribute: usize,
    pub from_degree: u8,
    pub target_degree: u8,
    pub final_degree: u8,
    pub outcome: Outcome,
    pub steps: usize,
}

/// Transcript line for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub user_text: String,
    pub context: DialogContext,
    pub encoding: EditingEncoding,
    pub edit: Option<EditSummary>,
    pub feedback: FeedbackMessage,
    pub fsm_before: FsmState,
    pub fsm_after: FsmState,
    pub degrees: FineGrainedLabel,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub state: DialogState,
    pub feedback: FeedbackMessage,
    pub trajectory: Option<TrajectoryRecord>,
    pub record: RoundRecord,
}

/// What a round answers with when it makes no edit.
enum Reply {
    Policy,
    Clarify,
    DegreeClarify(usize),
    Limit(usize),
    Apology(usize),
    Farewell,
}

enum Plan {
    Edit { attribute: usize, target: u8 },
    Reply(Reply),
}

fn step_degree(current: u8, direction: Direction) -> u8 {
    match direction {
        Direction::Increase => (current + 1).min(MAX_DEGREE),
        Direction::Decrease => current.saturating_sub(1),
        Direction::None => current,
    }
}

fn plan(state: &DialogState, enc: &EditingEncoding, context: DialogContext) -> Plan {
    let degree_of = |a: usize| state.current_degrees.get(a);
    match enc.request_type {
        RequestType::End => Plan::Reply(Reply::Farewell),
        RequestType::Other => Plan::Reply(Reply::Clarify),
        RequestType::Confirm => Plan::Reply(Reply::Policy),
        RequestType::Reject => match (context, state.pending_check) {
            (DialogContext::AfterDegreeCheck, Some(a)) => match enc.direction {
                Direction::None => Plan::Reply(Reply::DegreeClarify(a)),
                d => Plan::Edit {
                    attribute: a,
                    target: step_degree(degree_of(a), d),
                },
            },
            _ => Plan::Reply(Reply::Policy),
        },
        RequestType::TargetDegree => match (enc.attribute, enc.degree) {
            (Some(a), Some(d)) => Plan::Edit {
                attribute: a,
                target: d.clamp(0, MAX_DEGREE as i8) as u8,
            },
            _ => Plan::Reply(Reply::Clarify),
        },
        RequestType::RelativeChange => match (enc.attribute, enc.degree) {
            (Some(a), Some(m)) => Plan::Edit {
                attribute: a,
                target: (degree_of(a) as i16 + m as i16).clamp(0, MAX_DEGREE as i16) as u8,
            },
            _ => Plan::Reply(Reply::Clarify),
        },
        RequestType::DirectionOnly => {
            let suggested = match context {
                DialogContext::AfterSuggestion => state.last_suggested_attribute,
                _ => None,
            };
            let Some(a) = enc.attribute.or(suggested) else {
                return Plan::Reply(Reply::Clarify);
            };
            let direction = match enc.direction {
                Direction::None if degree_of(a) == MAX_DEGREE => Direction::Decrease,
                Direction::None => Direction::Increase,
                d => d,
            };
            Plan::Edit {
                attribute: a,
                target: step_degree(degree_of(a), direction),
            }
        }
    }
}

/// Runs one dialog round on a copy of `state`.
pub fn dialog_round(
    state: &DialogState,
    user_text: &str,
    models: &DialogModels,
) -> Result<RoundOutcome> {
    if state.fsm == FsmState::End {
        return Err(Error::SessionEnded);
    }
    if user_text.trim().is_empty() {
        return Err(Error::InvalidArgument("empty message".into()));
    }
    let mut s = state.clone();
    s.round += 1;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(s.round);
    let context = state.context();
    let encoding = models.encoder.encode(user_text, context);

    let mut trajectory = None;
    let mut edit = None;
    let mut fsm_after = FsmState::NoEdit;
    let reply = match plan(&s, &encoding, context) {
        Plan::Reply(r) => r,
        Plan::Edit { attribute, target } => {
            let from = s.current_degrees.get(attribute);
            match models.editors.get(attribute).and_then(Option::as_ref) {
                _ if target == from => Reply::Limit(attribute),
                None => Reply::Apology(attribute),
                Some(rule) => {
                    let traj = traverse_with(
                        rule.as_ref(),
                        models.predictor.as_ref(),
                        models.backend.as_ref(),
                        attribute,
                        &s.current_latent,
                        target,
                        &models.field_config,
                    )?;
                    let mut summary = EditSummary {
                        attribute,
                        from_degree: from,
                        target_degree: target,
                        final_degree: traj.final_class,
                        outcome: traj.outcome,
                        steps: traj.num_steps(),
                    };
                    let reply = if traj.reached() {
                        let degrees = models
                            .predictor
                            .predict_degrees(&models.backend.generate(&traj.end_latent)?)?;
                        summary.final_degree = degrees.get(attribute);
                        s.current_latent = traj.end_latent.clone();
                        s.current_degrees = degrees;
                        s.history.push(EditRecord {
                            attribute,
                            from_degree: from,
                            to_degree: summary.final_degree,
                            round: s.round,
                        });
                        s.pending_check = Some(attribute);
                        fsm_after = FsmState::Edit;
                        Reply::Policy
                    } else {
                        Reply::Apology(attribute)
                    };
                    edit = Some(summary);
                    trajectory = Some(traj);
                    reply
                }
            }
        }
    };

    if fsm_after != FsmState::Edit && !matches!(reply, Reply::Clarify | Reply::DegreeClarify(_)) {
        s.pending_check = None;
    }
    let fb = &models.feedback;
    let mut suggested = None;
    let mut keep_suggestion = false;
    let feedback = match reply {
        Reply::Policy => {
            let decision = feedback_policy(&s, &mut rng);
            let pool = match decision.category {
                FeedbackCategory::DegreeCheck => FeedbackPool::DegreeCheck,
                FeedbackCategory::Suggestion => FeedbackPool::Suggestion,
                FeedbackCategory::AskNext => FeedbackPool::AskNext,
            };
            if decision.category == FeedbackCategory::Suggestion {
                suggested = decision.attribute;
            }
            fb.render(pool, decision.category, decision.attribute, &mut rng)?
        }
        Reply::Clarify => {
            // a rephrased answer to a suggestion should still find it
            keep_suggestion = true;
            let category = s
                .last_feedback_category
                .unwrap_or(FeedbackCategory::AskNext);
            fb.render(FeedbackPool::Clarify, category, None, &mut rng)?
        }
        Reply::DegreeClarify(a) => fb.render(
            FeedbackPool::DegreeClarify,
            FeedbackCategory::DegreeCheck,
            Some(a),
            &mut rng,
        )?,
        Reply::Limit(a) => fb.render(
            FeedbackPool::Limit,
            FeedbackCategory::AskNext,
            Some(a),
            &mut rng,
        )?,
        Reply::Apology(a) => fb.render(
            FeedbackPool::Apology,
            FeedbackCategory::AskNext,
            Some(a),
            &mut rng,
        )?,
        Reply::Farewell => {
            fsm_after = FsmState::End;
            fb.render(
                FeedbackPool::Farewell,
                FeedbackCategory::AskNext,
                None,
                &mut rng,
            )?
        }
    };
    if !keep_suggestion {
        s.last_suggested_attribute = suggested;
    }
    s.last_feedback_category = Some(feedback.category);

    if !state.fsm.can_transition(fsm_after) {
        return Err(Error::IllegalTransition {
            from: state.fsm.name().into(),
            to: fsm_after.name().into(),
        });
    }
    s.fsm = fsm_after;
    let record = RoundRecord {
        round: s.round,
        user_text: user_text.to_string(),
        context,
        encoding,
        edit,
        feedback: feedback.clone(),
        fsm_before: state.fsm,
        fsm_after,
        degrees: s.current_degrees.clone(),
    };
    Ok(RoundOutcome {
        state: s,
        feedback,
        trajectory,
        record,
    })
}

/// One JSON object per round.
pub fn transcript_to_jsonl(records: &[RoundRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BarReader, ToyWorld, NUM_ATTRIBUTES};
    use crate::field::ScoreGradient;

    /// Recognizes a handful of fixed phrases.
    struct Scripted;

    impl RequestEncoder for Scripted {
        fn encode(&self, text: &str, context: DialogContext) -> EditingEncoding {
            let mut e = EditingEncoding::bare(RequestType::DirectionOnly);
            match text {
                "bangs longer" => {
                    e.attribute = Some(0);
                    e.direction = Direction::Increase;
                }
                "smile 4" => {
                    e = EditingEncoding::bare(RequestType::TargetDegree);
                    e.attribute = Some(3);
                    e.degree = Some(4);
                }
                "much more beard" => {
                    e = EditingEncoding::bare(RequestType::RelativeChange);
                    e.attribute = Some(2);
                    e.direction = Direction::Increase;
                    e.degree = Some(2);
                }
                "yes" if context == DialogContext::AfterSuggestion => {}
                "yes" => e = EditingEncoding::bare(RequestType::Confirm),
                "no" => e = EditingEncoding::bare(RequestType::Reject),
                "no, less" => {
                    e = EditingEncoding::bare(RequestType::Reject);
                    e.direction = Direction::Decrease;
                }
                "bye" => e = EditingEncoding::bare(RequestType::End),
                _ => e = EditingEncoding::other(),
            }
            e
        }
    }

    fn models() -> DialogModels {
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
        DialogModels {
            predictor: Arc::new(BarReader::new(&world)),
            backend: world,
            encoder: Arc::new(Scripted),
            editors,
            field_config: FieldConfig::default(),
            feedback: FeedbackTemplates::builtin(),
        }
    }

    fn fresh(models: &DialogModels) -> DialogState {
        DialogState::new(models, LatentCode::zeros(16), 3).unwrap()
    }

    #[test]
    fn transition_table() {
        use FsmState::*;
        let legal = [
            (Start, Edit),
            (Start, NoEdit),
            (Start, End),
            (Edit, Edit),
            (Edit, NoEdit),
            (Edit, End),
            (NoEdit, Edit),
            (NoEdit, NoEdit),
            (NoEdit, End),
        ];
        for from in [Start, Edit, NoEdit, End] {
            for to in [Start, Edit, NoEdit, End] {
                assert_eq!(
                    from.can_transition(to),
                    legal.contains(&(from, to)),
                    "{from:?}->{to:?}"
                );
            }
        }
    }

    #[test]
    fn target_degree_edit_then_degree_check() {
        let m = models();
        let s = fresh(&m);
        let out = dialog_round(&s, "smile 4", &m).unwrap();
        assert_eq!(out.state.fsm, FsmState::Edit);
        assert_eq!(out.state.current_degrees.get(3), 4);
        assert_eq!(out.feedback.category, FeedbackCategory::DegreeCheck);
        assert_eq!(out.state.pending_check, Some(3));
        assert_eq!(out.state.history.len(), 1);
        let image = m.backend.generate(&out.state.current_latent).unwrap();
        assert_eq!(
            m.predictor.predict_degrees(&image).unwrap(),
            out.state.current_degrees
        );
    }

    #[test]
    fn confirm_closes_and_reject_refines() {
        let m = models();
        let s = dialog_round(&fresh(&m), "bangs longer", &m).unwrap().state;
        let before = s.current_degrees.get(0);
        let refined = dialog_round(&s, "no, less", &m).unwrap();
        assert_eq!(refined.state.current_degrees.get(0), before - 1);
        assert_eq!(refined.feedback.category, FeedbackCategory::DegreeCheck);

        let unsure = dialog_round(&s, "no", &m).unwrap();
        assert_eq!(unsure.state.fsm, FsmState::NoEdit);
        assert_eq!(unsure.state.pending_check, Some(0));
        assert_eq!(unsure.feedback.category, FeedbackCategory::DegreeCheck);

        let closed = dialog_round(&s, "yes", &m).unwrap();
        assert_eq!(closed.state.pending_check, None);
        assert_ne!(closed.feedback.category, FeedbackCategory::DegreeCheck);
        assert!(closed.trajectory.is_none());
    }

    #[test]
    fn relative_change_clamps() {
        let m = models();
        let mut s = fresh(&m);
        for _ in 0..3 {
            s = dialog_round(&s, "much more beard", &m).unwrap().state;
        }
        assert_eq!(s.current_degrees.get(2), MAX_DEGREE);
        let out = dialog_round(&s, "much more beard", &m).unwrap();
        assert_eq!(out.state.fsm, FsmState::NoEdit);
        assert!(out.feedback.template_id.starts_with("limit"));
    }

    #[test]
    fn yes_after_suggestion_edits_the_suggested_attribute() {
        let m = models();
        let mut s = fresh(&m);
        s.last_feedback_category = Some(FeedbackCategory::Suggestion);
        s.last_suggested_attribute = Some(4);
        let out = dialog_round(&s, "yes", &m).unwrap();
        assert_eq!(out.state.history.last().unwrap().attribute, 4);
        assert_eq!(
            out.state.current_degrees.get(4),
            s.current_degrees.get(4) + 1
        );
    }

    #[test]
    fn other_clarifies_and_end_is_terminal() {
        let m = models();
        let s = fresh(&m);
        let out = dialog_round(&s, "what is this", &m).unwrap();
        assert_eq!(out.state.fsm, FsmState::NoEdit);
        assert!(out.feedback.template_id.starts_with("clarify"));
        assert_eq!(out.state.current_latent, s.current_latent);

        let end = dialog_round(&out.state, "bye", &m).unwrap();
        assert_eq!(end.state.fsm, FsmState::End);
        assert!(end.feedback.template_id.starts_with("farewell"));
        assert!(matches!(
            dialog_round(&end.state, "bye", &m),
            Err(Error::SessionEnded)
        ));
        assert!(matches!(
            dialog_round(&s, "  ", &m),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn saturated_traversal_leaves_state_alone() {
        let mut m = models();
        m.field_config.max_steps_per_class = 1;
        let s = fresh(&m);
        let out = dialog_round(&s, "smile 4", &m).unwrap();
        assert_eq!(out.state.fsm, FsmState::NoEdit);
        assert_eq!(out.state.current_latent, s.current_latent);
        assert!(out.state.history.is_empty());
        assert!(out.feedback.template_id.starts_with("apology"));
        assert_eq!(out.trajectory.unwrap().outcome, Outcome::Saturated);
    }

    #[test]
    fn rounds_are_deterministic() {
        let m = models();
        let run = || {
            let mut s = fresh(&m);
            let mut texts = Vec::new();
            for t in ["bangs longer", "yes", "smile 4", "yes", "what"] {
                let out = dialog_round(&s, t, &m).unwrap();
                texts.push(out.feedback.text);
                s = out.state;
            }
            (s, texts)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn transcript_lines_parse() {
        let m = models();
        let out = dialog_round(&fresh(&m), "bangs longer", &m).unwrap();
        let text = transcript_to_jsonl(&[out.record.clone(), out.record]).unwrap();
        for line in text.lines() {
            let back: RoundRecord = serde_json::from_str(line).unwrap();
            assert_eq!(back.edit.unwrap().attribute, 0);
        }
    }

    #[test]
    fn policy_probabilities_and_novelty() {
        let m = models();
        let mut s = fresh(&m);
        assert!((suggestion_probability(&s) - 0.8).abs() < 1e-15);
        s.pending_check = Some(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(
                feedback_policy(&s, &mut rng).category,
                FeedbackCategory::DegreeCheck
            );
        }
        s.pending_check = None;
        for a in [0, 2] {
            s.history.push(EditRecord {
                attribute: a,
                from_degree: 2,
                to_degree: 3,
                round: 1,
            });
        }
        assert!((suggestion_probability(&s) - (0.2 + 0.6 * 3.0 / 5.0)).abs() < 1e-15);
        let mut suggestions = 0;
        for _ in 0..2000 {
            let d = feedback_policy(&s, &mut rng);
            if d.category == FeedbackCategory::Suggestion {
                suggestions += 1;
                assert!(![0, 2].contains(&d.attribute.unwrap()));
            }
        }
        assert!((suggestions as f64 / 2000.0 - 0.56).abs() < 0.05);
        for a in [1, 3, 4] {
            s.history.push(EditRecord {
                attribute: a,
                from_degree: 2,
                to_degree: 3,
                round: 2,
            });
        }
        assert!((suggestion_probability(&s) - 0.2).abs() < 1e-15);
    }
}
