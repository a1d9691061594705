//! Request parsing: the editing encoding, a template-driven request corpus,
//! and a recurrent encoder with one head set per dialog context.

mod corpus;
mod encoder;
mod templates;

use serde::{Deserialize, Serialize};

use crate::backend::{MAX_DEGREE, NUM_ATTRIBUTES};
use crate::{Error, Result};

pub use corpus::{generate_corpus, CorpusEntry, RequestCorpus};
pub use encoder::{
    encode_request, train_encoder, train_encoder_unchecked, EncoderConfig, EncoderMeta,
    EncoderModel, HeadAccuracy, Vocabulary,
};
pub use templates::{AttributePhrases, RequestTemplate, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestType {
    TargetDegree,
    RelativeChange,
    DirectionOnly,
    Confirm,
    Reject,
    End,
    Other,
}

impl RequestType {
    pub const ALL: [RequestType; 7] = [
        RequestType::TargetDegree,
        RequestType::RelativeChange,
        RequestType::DirectionOnly,
        RequestType::Confirm,
        RequestType::Reject,
        RequestType::End,
        RequestType::Other,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|t| *t == self).expect("listed")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increase,
    Decrease,
    None,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::None, Direction::Increase, Direction::Decrease];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|d| *d == self).expect("listed")
    }

    pub fn sign(self) -> i8 {
        match self {
            Direction::Increase => 1,
            Direction::Decrease => -1,
            Direction::None => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogContext {
    OpenRequest,
    AfterDegreeCheck,
    AfterSuggestion,
}

impl DialogContext {
    pub const ALL: [DialogContext; 3] = [
        DialogContext::OpenRequest,
        DialogContext::AfterDegreeCheck,
        DialogContext::AfterSuggestion,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DialogContext::OpenRequest => "open_request",
            DialogContext::AfterDegreeCheck => "after_degree_check",
            DialogContext::AfterSuggestion => "after_suggestion",
        }
    }
}

/// Structured parse of one user request.
///
/// `degree` is the absolute target for [`RequestType::TargetDegree`] and the
/// signed magnitude for [`RequestType::RelativeChange`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditingEncoding {
    pub request_type: RequestType,
    pub attribute: Option<usize>,
    pub direction: Direction,
    pub degree: Option<i8>,
}

impl EditingEncoding {
    pub fn other() -> Self {
        Self::bare(RequestType::Other)
    }

    pub fn bare(request_type: RequestType) -> Self {
        Self {
            request_type,
            attribute: None,
            direction: Direction::None,
            degree: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("encoding {self:?}: {m}")));
        if let Some(a) = self.attribute {
            if a >= NUM_ATTRIBUTES {
                return Err(Error::AttributeOutOfRange(a));
            }
        }
        match self.request_type {
            RequestType::TargetDegree => match self.degree {
                Some(d) if (0..=MAX_DEGREE as i8).contains(&d) => {}
                _ => return bad("target_degree needs a degree in 0..=5"),
            },
            RequestType::RelativeChange => match self.degree {
                Some(d) if d != 0 && d.signum() == self.direction.sign() => {}
                _ => {
                    return bad("relative_change needs a nonzero magnitude matching the direction")
                }
            },
            RequestType::DirectionOnly => {
                if self.degree.is_some() {
                    return bad("direction_only carries no degree");
                }
            }
            RequestType::Confirm | RequestType::Reject | RequestType::End => {
                if self.attribute.is_some() {
                    return bad("confirm, reject and end carry no attribute");
                }
            }
            RequestType::Other => {}
        }
        Ok(())
    }
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_strips_punctuation() {
        assert_eq!(
            tokenize("Let's make the BANGS longer!"),
            ["lets", "make", "the", "bangs", "longer"]
        );
        assert!(tokenize("  ?! ").is_empty());
    }

    #[test]
    fn encoding_invariants() {
        let mut e = EditingEncoding::bare(RequestType::TargetDegree);
        e.attribute = Some(0);
        assert!(e.validate().is_err());
        e.degree = Some(5);
        assert!(e.validate().is_ok());
        e.degree = Some(6);
        assert!(e.validate().is_err());

        let mut c = EditingEncoding::bare(RequestType::Confirm);
        assert!(c.validate().is_ok());
        c.attribute = Some(1);
        assert!(c.validate().is_err());

        let mut d = EditingEncoding::bare(RequestType::DirectionOnly);
        d.degree = Some(1);
        assert!(d.validate().is_err());

        let r = EditingEncoding {
            request_type: RequestType::RelativeChange,
            attribute: Some(0),
            direction: Direction::Decrease,
            degree: Some(2),
        };
        assert!(r.validate().is_err());
    }
}
