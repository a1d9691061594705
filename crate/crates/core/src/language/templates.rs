use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DialogContext, Direction, RequestType};
use crate::backend::{Attribute, NUM_ATTRIBUTES, NUM_DEGREES};
use crate::{Error, Result};

const BUILTIN: &str = include_str!("../../assets/templates.json");

/// Slots filled from the chosen attribute rather than from a shared pool.
pub(crate) const ATTRIBUTE_SLOTS: [&str; 4] = ["noun", "adj", "vp", "deg"];
pub(crate) const MAGNITUDE_SLOT: &str = "mag";

/// Per-attribute phrase pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePhrases {
    pub name: String,
    pub noun: Vec<String>,
    /// Comparatives meaning a higher degree.
    pub more: Vec<String>,
    pub less: Vec<String>,
    pub vp_more: Vec<String>,
    pub vp_less: Vec<String>,
    /// `degrees[d]` holds phrases describing degree `d`.
    pub degrees: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTemplate {
    pub id: String,
    #[serde(rename = "type")]
    pub request_type: RequestType,
    /// Text with `{slot}` markers.
    pub pattern: String,
    /// Contexts the template is drawn in; all of them when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contexts: Option<Vec<DialogContext>>,
    /// Label type overrides for particular contexts.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub context_types: BTreeMap<DialogContext, RequestType>,
    /// Fixed direction for patterns without a directional slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    /// Attribute names the template may be filled with; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<String>>,
}

impl RequestTemplate {
    pub fn slots(&self) -> Vec<&str> {
        let mut out = Vec::new();
        let mut rest = self.pattern.as_str();
        while let Some(start) = rest.find('{') {
            let Some(len) = rest[start..].find('}') else {
                break;
            };
            out.push(&rest[start + 1..start + len]);
            rest = &rest[start + len + 1..];
        }
        out
    }

    pub fn needs_attribute(&self) -> bool {
        self.slots().iter().any(|s| ATTRIBUTE_SLOTS.contains(s))
    }

    pub fn has_direction_slot(&self) -> bool {
        self.slots().iter().any(|s| *s == "adj" || *s == "vp")
    }

    pub fn applies_to(&self, context: DialogContext) -> bool {
        self.contexts.as_ref().is_none_or(|c| c.contains(&context))
    }

    pub fn label_type(&self, context: DialogContext) -> RequestType {
        self.context_types
            .get(&context)
            .copied()
            .unwrap_or(self.request_type)
    }

    /// Attribute indices this template may be filled with.
    pub fn attribute_choices(&self) -> Result<Vec<usize>> {
        match &self.attributes {
            None => Ok((0..NUM_ATTRIBUTES).collect()),
            Some(names) => names
                .iter()
                .map(|n| Ok(Attribute::from_name(n)?.index()))
                .collect(),
        }
    }
}

/// The full template inventory: shared pools, the magnitude lexicon and the
/// per-attribute phrases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub version: u32,
    /// Magnitude adverb to unsigned degree change.
    pub lexicon: BTreeMap<String, i8>,
    pub pools: BTreeMap<String, Vec<String>>,
    /// One entry per attribute, in schema order.
    pub attributes: Vec<AttributePhrases>,
    pub templates: Vec<RequestTemplate>,
}

impl TemplateSet {
    /// The inventory shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("builtin templates are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn templates_for(&self, context: DialogContext) -> Vec<&RequestTemplate> {
        self.templates
            .iter()
            .filter(|t| t.applies_to(context))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let empty = |what: String| Err(Error::EmptyPool(what));
        if self.templates.is_empty() {
            return empty("no templates".into());
        }
        if self.attributes.len() != NUM_ATTRIBUTES {
            return Err(Error::InvalidArgument(format!(
                "expected {NUM_ATTRIBUTES} attribute phrase sets, got {}",
                self.attributes.len()
            )));
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if Attribute::from_name(&a.name)?.index() != i {
                return Err(Error::InvalidArgument(format!(
                    "attribute {} out of schema order",
                    a.name
                )));
            }
            for (slot, pool) in [
                ("noun", &a.noun),
                ("more", &a.more),
                ("less", &a.less),
                ("vp_more", &a.vp_more),
                ("vp_less", &a.vp_less),
            ] {
                if pool.is_empty() {
                    return empty(format!("{}.{slot}", a.name));
                }
            }
            if a.degrees.len() != NUM_DEGREES || a.degrees.iter().any(Vec::is_empty) {
                return empty(format!(
                    "{}.degrees needs {NUM_DEGREES} nonempty pools",
                    a.name
                ));
            }
        }
        if self.lexicon.is_empty() {
            return empty("lexicon".into());
        }
        if let Some((w, m)) = self.lexicon.iter().find(|(_, m)| !(1..=2).contains(*m)) {
            return Err(Error::InvalidArgument(format!(
                "lexicon entry {w:?} has magnitude {m}"
            )));
        }
        for t in &self.templates {
            for slot in t.slots() {
                let known = ATTRIBUTE_SLOTS.contains(&slot)
                    || slot == MAGNITUDE_SLOT
                    || self.pools.contains_key(slot);
                if !known {
                    return Err(Error::InvalidArgument(format!(
                        "template {} uses unknown slot {slot}",
                        t.id
                    )));
                }
                if self.pools.get(slot).is_some_and(Vec::is_empty) {
                    return empty(format!("pool {slot}"));
                }
            }
            let ty = t.request_type;
            let needs_attr = matches!(
                ty,
                RequestType::TargetDegree
                    | RequestType::RelativeChange
                    | RequestType::DirectionOnly
            );
            if needs_attr && !t.needs_attribute() && t.context_types.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "template {} names no attribute",
                    t.id
                )));
            }
            let slots = t.slots();
            if ty == RequestType::TargetDegree && !slots.contains(&"deg") {
                return Err(Error::InvalidArgument(format!(
                    "template {} lacks a degree slot",
                    t.id
                )));
            }
            if ty == RequestType::RelativeChange
                && !(slots.contains(&MAGNITUDE_SLOT) && t.has_direction_slot())
            {
                return Err(Error::InvalidArgument(format!(
                    "template {} lacks magnitude or direction",
                    t.id
                )));
            }
            t.attribute_choices()?;
        }
        for c in DialogContext::ALL {
            if self.templates_for(c).is_empty() {
                return empty(format!("context {}", c.name()));
            }
        }
        Ok(())
    }
}
