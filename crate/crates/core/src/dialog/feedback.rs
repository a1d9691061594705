use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DialogState;
use crate::backend::{Attribute, NUM_ATTRIBUTES};
use crate::{Error, Result};

const BUILTIN: &str = include_str!("../../assets/feedback.json");

/// Suggestion probability is `BASE + SLOPE * unedited / k`.
pub const SUGGESTION_BASE: f64 = 0.2;
pub const SUGGESTION_SLOPE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackCategory {
    DegreeCheck,
    Suggestion,
    AskNext,
}

/// Which sentence pool a message is drawn from. Clarifications, apologies and
/// farewells are phrased differently but still carry one of the three
/// categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackPool {
    DegreeCheck,
    Suggestion,
    AskNext,
    DegreeClarify,
    Clarify,
    Apology,
    Limit,
    Farewell,
}

impl FeedbackPool {
    pub fn name(self) -> &'static str {
        match self {
            FeedbackPool::DegreeCheck => "degree_check",
            FeedbackPool::Suggestion => "suggestion",
            FeedbackPool::AskNext => "ask_next",
            FeedbackPool::DegreeClarify => "degree_clarify",
            FeedbackPool::Clarify => "clarify",
            FeedbackPool::Apology => "apology",
            FeedbackPool::Limit => "limit",
            FeedbackPool::Farewell => "farewell",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackMessage {
    pub text: String,
    pub category: FeedbackCategory,
    /// `{pool}-{index}`, plus `.{attribute}` for per-attribute pools.
    pub template_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackTemplates {
    pub version: u32,
    pub synonyms: BTreeMap<String, Vec<String>>,
    /// Attribute name to the words used for it in feedback.
    pub aspects: BTreeMap<String, Vec<String>>,
    pub degree_check: BTreeMap<String, Vec<String>>,
    pub suggestion: Vec<String>,
    pub ask_next: Vec<String>,
    pub degree_clarify: Vec<String>,
    pub clarify: Vec<String>,
    pub apology: Vec<String>,
    pub limit: Vec<String>,
    pub farewell: Vec<String>,
}

impl FeedbackTemplates {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("builtin feedback templates are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for a in Attribute::ALL {
            for (what, map) in [
                ("aspects", &self.aspects),
                ("degree_check", &self.degree_check),
            ] {
                if map.get(a.name()).is_none_or(Vec::is_empty) {
                    return Err(Error::EmptyPool(format!("{what}.{}", a.name())));
                }
            }
        }
        for pool in [
            FeedbackPool::Suggestion,
            FeedbackPool::AskNext,
            FeedbackPool::DegreeClarify,
            FeedbackPool::Clarify,
            FeedbackPool::Apology,
            FeedbackPool::Limit,
            FeedbackPool::Farewell,
        ] {
            if self.shared_pool(pool).is_empty() {
                return Err(Error::EmptyPool(pool.name().into()));
            }
        }
        if self.synonyms.values().any(Vec::is_empty) {
            return Err(Error::EmptyPool("synonyms".into()));
        }
        Ok(())
    }

    fn shared_pool(&self, pool: FeedbackPool) -> &[String] {
        match pool {
            FeedbackPool::Suggestion => &self.suggestion,
            FeedbackPool::AskNext => &self.ask_next,
            FeedbackPool::DegreeClarify => &self.degree_clarify,
            FeedbackPool::Clarify => &self.clarify,
            FeedbackPool::Apology => &self.apology,
            FeedbackPool::Limit => &self.limit,
            FeedbackPool::Farewell => &self.farewell,
            FeedbackPool::DegreeCheck => &[],
        }
    }

    /// Draws a sentence from `pool` and fills `{aspect}` and synonym slots.
    pub fn render<R: Rng>(
        &self,
        pool: FeedbackPool,
        category: FeedbackCategory,
        attribute: Option<usize>,
        rng: &mut R,
    ) -> Result<FeedbackMessage> {
        let attr_name = attribute
            .map(|a| Attribute::from_index(a).map(Attribute::name))
            .transpose()?;
        let (sentences, suffix) = match pool {
            FeedbackPool::DegreeCheck => {
                let name = attr_name.ok_or_else(|| {
                    Error::InvalidArgument("degree check needs an attribute".into())
                })?;
                (
                    self.degree_check
                        .get(name)
                        .map(Vec::as_slice)
                        .unwrap_or(&[]),
                    format!(".{name}"),
                )
            }
            other => (self.shared_pool(other), String::new()),
        };
        let index = rng.random_range(0..sentences.len().max(1));
        let sentence = sentences
            .get(index)
            .ok_or_else(|| Error::EmptyPool(pool.name().into()))?;
        let mut text = String::new();
        let mut rest = sentence.as_str();
        while let Some(start) = rest.find('{') {
            text.push_str(&rest[..start]);
            let len = rest[start..]
                .find('}')
                .ok_or_else(|| Error::InvalidArgument(format!("unclosed slot in {sentence:?}")))?;
            let slot = &rest[start + 1..start + len];
            let fillers = if slot == "aspect" {
                let name = attr_name.ok_or_else(|| {
                    Error::InvalidArgument(format!("{sentence:?} needs an attribute"))
                })?;
                self.aspects.get(name)
            } else {
                self.synonyms.get(slot)
            };
            let filler = fillers
                .and_then(|f| f.choose(rng))
                .ok_or_else(|| Error::EmptyPool(slot.to_string()))?;
            text.push_str(filler);
            rest = &rest[start + len + 1..];
        }
        text.push_str(rest);
        Ok(FeedbackMessage {
            text,
            category,
            template_id: format!("{}-{index}{suffix}", pool.name()),
        })
    }
}

/// Attributes never edited in this session.
pub fn unedited_attributes(state: &DialogState) -> Vec<usize> {
    (0..NUM_ATTRIBUTES)
        .filter(|a| !state.history.iter().any(|h| h.attribute == *a))
        .collect()
}

/// `0.2 + 0.6 * unedited / k`.
pub fn suggestion_probability(state: &DialogState) -> f64 {
    SUGGESTION_BASE
        + SUGGESTION_SLOPE * unedited_attributes(state).len() as f64 / NUM_ATTRIBUTES as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDecision {
    pub category: FeedbackCategory,
    /// Set for suggestions.
    pub attribute: Option<usize>,
}

/// Degree check whenever an edit awaits confirmation; otherwise a suggestion
/// with [`suggestion_probability`], naming an attribute not yet edited when
/// one remains, else ask-next.
pub fn feedback_policy<R: Rng>(state: &DialogState, rng: &mut R) -> PolicyDecision {
    if let Some(a) = state.pending_check {
        return PolicyDecision {
            category: FeedbackCategory::DegreeCheck,
            attribute: Some(a),
        };
    }
    if rng.random_bool(suggestion_probability(state)) {
        let mut pool = unedited_attributes(state);
        if pool.is_empty() {
            pool = (0..NUM_ATTRIBUTES).collect();
        }
        let a = *pool.choose(rng).expect("nonempty");
        return PolicyDecision {
            category: FeedbackCategory::Suggestion,
            attribute: Some(a),
        };
    }
    PolicyDecision {
        category: FeedbackCategory::AskNext,
        attribute: None,
    }
}

/// Renders the policy's category for `state`; deterministic in `seed`.
pub fn render_feedback(
    templates: &FeedbackTemplates,
    category: FeedbackCategory,
    state: &DialogState,
    seed: u64,
) -> Result<FeedbackMessage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pool, attribute) = match category {
        FeedbackCategory::DegreeCheck => (FeedbackPool::DegreeCheck, state.pending_check),
        FeedbackCategory::Suggestion => (FeedbackPool::Suggestion, state.last_suggested_attribute),
        FeedbackCategory::AskNext => (FeedbackPool::AskNext, None),
    };
    templates.render(pool, category, attribute, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_renderings(pool: FeedbackPool, attribute: Option<usize>) -> Vec<String> {
        let t = FeedbackTemplates::builtin();
        (0..200)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                t.render(pool, FeedbackCategory::AskNext, attribute, &mut rng)
                    .unwrap()
                    .text
            })
            .collect()
    }

    #[test]
    fn published_sentences_are_reachable() {
        assert!(all_renderings(FeedbackPool::DegreeCheck, Some(0))
            .contains(&"Are the bangs now of the length you like?".into()));
        assert!(all_renderings(FeedbackPool::Suggestion, Some(4))
            .contains(&"Do you want to try manipulating the age?".into()));
        assert!(all_renderings(FeedbackPool::AskNext, None).contains(&"Ok, what's next?".into()));
    }

    #[test]
    fn rendering_leaves_no_slots() {
        for pool in [
            FeedbackPool::DegreeCheck,
            FeedbackPool::Suggestion,
            FeedbackPool::Apology,
            FeedbackPool::Limit,
        ] {
            for a in 0..NUM_ATTRIBUTES {
                for text in all_renderings(pool, Some(a)) {
                    assert!(!text.contains('{') && !text.is_empty(), "{text}");
                }
            }
        }
    }

    #[test]
    fn degree_check_without_attribute_fails() {
        let t = FeedbackTemplates::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(t
            .render(
                FeedbackPool::DegreeCheck,
                FeedbackCategory::DegreeCheck,
                None,
                &mut rng
            )
            .is_err());
    }

    #[test]
    fn empty_pool_is_rejected() {
        let mut t = FeedbackTemplates::builtin();
        t.ask_next.clear();
        assert!(matches!(t.validate(), Err(Error::EmptyPool(_))));
    }
}
