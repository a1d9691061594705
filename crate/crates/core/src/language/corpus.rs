use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::templates::MAGNITUDE_SLOT;
use super::{DialogContext, Direction, EditingEncoding, RequestTemplate, RequestType, TemplateSet};
use crate::backend::NUM_DEGREES;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub text: String,
    pub label: EditingEncoding,
    pub context: DialogContext,
    pub template_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestCorpus {
    pub seed: u64,
    pub entries: Vec<CorpusEntry>,
}

impl RequestCorpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One `{text, label, context, template_id}` object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, seed: u64) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect::<Result<_>>()?;
        Ok(Self { seed, entries })
    }
}

/// Draws `n` requests, cycling through the dialog contexts so each gets an
/// equal share. Within a context, templates and fillers are drawn uniformly.
pub fn generate_corpus(templates: &TemplateSet, seed: u64, n: usize) -> Result<RequestCorpus> {
    let per_context: Vec<Vec<&RequestTemplate>> = DialogContext::ALL
        .iter()
        .map(|c| templates.templates_for(*c))
        .collect();
    if let Some(i) = per_context.iter().position(Vec::is_empty) {
        return Err(Error::EmptyPool(format!(
            "context {}",
            DialogContext::ALL[i].name()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let context = DialogContext::ALL[i % DialogContext::ALL.len()];
        let template = *per_context[context.index()]
            .choose(&mut rng)
            .expect("nonempty");
        let (text, label) = realize(templates, template, context, &mut rng)?;
        entries.push(CorpusEntry {
            text,
            label,
            context,
            template_id: template.id.clone(),
        });
    }
    Ok(RequestCorpus { seed, entries })
}

fn pick<'a, R: Rng>(pool: &'a [String], what: &str, rng: &mut R) -> Result<&'a str> {
    pool.choose(rng)
        .map(String::as_str)
        .ok_or_else(|| Error::EmptyPool(what.to_string()))
}

/// Fills one template and derives its label.
fn realize<R: Rng>(
    set: &TemplateSet,
    template: &RequestTemplate,
    context: DialogContext,
    rng: &mut R,
) -> Result<(String, EditingEncoding)> {
    let attribute = if template.needs_attribute() {
        Some(
            *template
                .attribute_choices()?
                .choose(rng)
                .ok_or_else(|| Error::EmptyPool(template.id.clone()))?,
        )
    } else {
        None
    };
    let direction = if template.has_direction_slot() {
        if rng.random_bool(0.5) {
            Direction::Increase
        } else {
            Direction::Decrease
        }
    } else {
        template.direction.unwrap_or(Direction::None)
    };
    let target = rng.random_range(0..NUM_DEGREES);
    let lexicon: Vec<(&String, &i8)> = set.lexicon.iter().collect();
    let (mag_word, magnitude) = *lexicon
        .choose(rng)
        .ok_or_else(|| Error::EmptyPool("lexicon".into()))?;

    let mut text = String::new();
    let mut rest = template.pattern.as_str();
    while let Some(start) = rest.find('{') {
        text.push_str(&rest[..start]);
        let len = rest[start..].find('}').expect("validated pattern");
        let slot = &rest[start + 1..start + len];
        let phrases = attribute.map(|a| &set.attributes[a]);
        let filler = match (slot, phrases) {
            ("noun", Some(p)) => pick(&p.noun, slot, rng)?,
            ("adj", Some(p)) => match direction {
                Direction::Decrease => pick(&p.less, slot, rng)?,
                _ => pick(&p.more, slot, rng)?,
            },
            ("vp", Some(p)) => match direction {
                Direction::Decrease => pick(&p.vp_less, slot, rng)?,
                _ => pick(&p.vp_more, slot, rng)?,
            },
            ("deg", Some(p)) => pick(&p.degrees[target], slot, rng)?,
            (MAGNITUDE_SLOT, _) => mag_word.as_str(),
            _ => pick(
                set.pools
                    .get(slot)
                    .ok_or_else(|| Error::EmptyPool(slot.to_string()))?,
                slot,
                rng,
            )?,
        };
        text.push_str(filler);
        rest = &rest[start + len + 1..];
    }
    text.push_str(rest);
    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");

    let mut label = EditingEncoding::bare(template.label_type(context));
    match label.request_type {
        RequestType::TargetDegree => {
            label.attribute = attribute;
            label.degree = Some(target as i8);
        }
        RequestType::RelativeChange => {
            label.attribute = attribute;
            label.direction = direction;
            label.degree = Some(magnitude * direction.sign());
        }
        RequestType::DirectionOnly => {
            label.attribute = attribute;
            label.direction = direction;
        }
        RequestType::Reject => label.direction = direction,
        RequestType::Confirm | RequestType::End | RequestType::Other => {}
    }
    label.validate()?;
    Ok((text, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_requests_give_an_empty_corpus() {
        assert!(generate_corpus(&TemplateSet::builtin(), 1, 0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let set = TemplateSet::builtin();
        assert_eq!(
            generate_corpus(&set, 5, 300).unwrap(),
            generate_corpus(&set, 5, 300).unwrap()
        );
        assert_ne!(
            generate_corpus(&set, 5, 300).unwrap(),
            generate_corpus(&set, 6, 300).unwrap()
        );
    }

    #[test]
    fn jsonl_round_trip() {
        let c = generate_corpus(&TemplateSet::builtin(), 2, 50).unwrap();
        assert_eq!(
            RequestCorpus::from_jsonl(&c.to_jsonl().unwrap(), 2).unwrap(),
            c
        );
    }

    #[test]
    fn direction_slots_agree_with_labels() {
        let set = TemplateSet::builtin();
        for e in generate_corpus(&set, 3, 2000).unwrap().entries {
            if e.label.request_type == RequestType::RelativeChange {
                let mag = e.label.degree.unwrap();
                assert_eq!(mag.signum(), e.label.direction.sign(), "{}", e.text);
                let words = &e.text;
                assert!(
                    set.lexicon.keys().any(|w| words.contains(w.as_str())),
                    "{words}"
                );
            }
        }
    }
}
