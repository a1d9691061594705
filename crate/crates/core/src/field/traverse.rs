use serde::{Deserialize, Serialize};

use super::{regularized_direction, FieldConfig, SemanticFieldModel};
use std::sync::Arc;

use crate::backend::{Backend, LatentCode, ToyWorld, MAX_DEGREE, NUM_ATTRIBUTES};
use crate::predictor::{label_from_logits, softmax_rows, DegreeClassifier};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Reached,
    Saturated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    /// Latent before the step.
    pub latent: LatentCode,
    /// Signed direction taken from `latent`; the next latent is `latent + a * field_vector`.
    pub field_vector: Vec<f64>,
    /// Predictor softmax at `latent`, one row per attribute.
    pub softmax: Vec<Vec<f64>>,
    /// Predicted degree of the edited attribute at `latent`.
    pub class: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub method: String,
    pub attribute: usize,
    pub alpha: f64,
    pub start_latent: LatentCode,
    pub end_latent: LatentCode,
    pub start_class: u8,
    pub target_class: u8,
    pub final_class: u8,
    pub outcome: Outcome,
    pub steps: Vec<TrajectoryStep>,
}

#[derive(Serialize)]
struct StepLine<'a> {
    method: &'a str,
    attribute: usize,
    index: usize,
    latent: &'a LatentCode,
    field_vector: &'a [f64],
    class: u8,
    softmax: &'a [Vec<f64>],
}

impl TrajectoryRecord {
    pub fn reached(&self) -> bool {
        self.outcome == Outcome::Reached
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Latents after each step, ending with `end_latent`.
    pub fn edited_latents(&self) -> Vec<&LatentCode> {
        self.steps
            .iter()
            .skip(1)
            .map(|s| &s.latent)
            .chain(std::iter::once(&self.end_latent))
            .take(self.steps.len())
            .collect()
    }

    /// Predicted degree before each step followed by the final degree.
    pub fn class_sequence(&self) -> Vec<u8> {
        self.steps
            .iter()
            .map(|s| s.class)
            .chain(std::iter::once(self.final_class))
            .collect()
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (index, s) in self.steps.iter().enumerate() {
            out.push_str(&serde_json::to_string(&StepLine {
                method: &self.method,
                attribute: self.attribute,
                index,
                latent: &s.latent,
                field_vector: &s.field_vector,
                class: s.class,
                softmax: &s.softmax,
            })?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// How a traversal picks its next step.
pub trait StepRule: Send + Sync {
    fn name(&self) -> &str;

    /// Direction to move from `z`, already signed for `increase`.
    fn step(&self, z: &LatentCode, current_class: u8, increase: bool) -> Result<Vec<f64>>;
}

impl StepRule for SemanticFieldModel {
    fn name(&self) -> &str {
        "semantic_field"
    }

    fn step(&self, z: &LatentCode, _class: u8, increase: bool) -> Result<Vec<f64>> {
        let mut v = self.field_vector(z)?;
        if !increase {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        Ok(v)
    }
}

/// Field steps pushed through the backend's mapping hook.
pub struct RegularizedField<'a> {
    pub model: &'a SemanticFieldModel,
    pub backend: &'a dyn Backend,
}

impl StepRule for RegularizedField<'_> {
    fn name(&self) -> &str {
        "semantic_field"
    }

    fn step(&self, z: &LatentCode, _class: u8, increase: bool) -> Result<Vec<f64>> {
        let mut v = regularized_direction(self.model, z, self.backend)?;
        if !increase {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        Ok(v)
    }
}

/// Unit ascent direction of the toy world's true score, scaled to
/// `step_length`. An oracle editor for tests that should not need a trained
/// field.
#[derive(Debug, Clone)]
pub struct ScoreGradient {
    pub world: Arc<ToyWorld>,
    pub attribute: usize,
    pub step_length: f64,
}

impl StepRule for ScoreGradient {
    fn name(&self) -> &str {
        "score_gradient"
    }

    fn step(&self, z: &LatentCode, _class: u8, increase: bool) -> Result<Vec<f64>> {
        let g = self.world.toy_score_gradient(z, self.attribute)?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(g);
        }
        let s = if increase {
            self.step_length
        } else {
            -self.step_length
        } / norm;
        Ok(g.iter().map(|v| v * s).collect())
    }
}

/// Constant direction scaled to `step_length`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedDirection {
    pub direction: Vec<f64>,
    pub step_length: f64,
}

impl StepRule for FixedDirection {
    fn name(&self) -> &str {
        "fixed_direction"
    }

    fn step(&self, _z: &LatentCode, _class: u8, increase: bool) -> Result<Vec<f64>> {
        let s = if increase {
            self.step_length
        } else {
            -self.step_length
        };
        Ok(self.direction.iter().map(|v| v * s).collect())
    }
}

/// One boundary normal per neighbouring degree pair; the normal in use
/// switches with the current degree.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBoundary {
    /// `normals[c]` separates degree `c` from `c + 1`.
    pub normals: Vec<Vec<f64>>,
    pub step_length: f64,
}

impl StepRule for MultiBoundary {
    fn name(&self) -> &str {
        "multi_boundary"
    }

    fn step(&self, _z: &LatentCode, class: u8, increase: bool) -> Result<Vec<f64>> {
        let (idx, s) = if increase {
            (class as usize, self.step_length)
        } else {
            (class as usize - 1, -self.step_length)
        };
        let n = self
            .normals
            .get(idx)
            .ok_or_else(|| Error::InvalidArgument(format!("no boundary for degree {class}")))?;
        Ok(n.iter().map(|v| v * s).collect())
    }
}

/// Walks the semantic field from `z` until the predictor reports `target`
/// for the model's attribute, or the step budget runs out.
pub fn traverse(
    model: &SemanticFieldModel,
    predictor: &dyn DegreeClassifier,
    backend: &dyn Backend,
    z: &LatentCode,
    target: u8,
    cfg: &FieldConfig,
) -> Result<TrajectoryRecord> {
    if cfg.regularized {
        let rule = RegularizedField { model, backend };
        return traverse_with(&rule, predictor, backend, model.attribute(), z, target, cfg);
    }
    traverse_with(model, predictor, backend, model.attribute(), z, target, cfg)
}

/// Generic traversal loop shared by the field and the baselines.
///
/// The direction is re-chosen before every step from the current degree, so
/// an overshoot walks back. The budget is `max_steps_per_class` times the
/// initial degree gap.
pub fn traverse_with(
    rule: &dyn StepRule,
    predictor: &dyn DegreeClassifier,
    backend: &dyn Backend,
    attribute: usize,
    z: &LatentCode,
    target: u8,
    cfg: &FieldConfig,
) -> Result<TrajectoryRecord> {
    if attribute >= NUM_ATTRIBUTES {
        return Err(Error::AttributeOutOfRange(attribute));
    }
    if target > MAX_DEGREE {
        return Err(Error::DegreeOutOfRange(target as i64));
    }
    z.check_len(backend.latent_dim())?;
    let observe = |z: &LatentCode| -> Result<(Vec<Vec<f64>>, u8)> {
        let logits = predictor.predict_logits(&backend.generate(z)?)?;
        let class = label_from_logits(&logits).get(attribute);
        let sm = softmax_rows(&logits)
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        Ok((sm, class))
    };

    let (mut softmax, start_class) = observe(z)?;
    let budget =
        cfg.max_steps_per_class * (target as i64 - start_class as i64).unsigned_abs() as usize;
    let mut current = z.clone();
    let mut class = start_class;
    let mut steps = Vec::new();
    while class != target && steps.len() < budget {
        let v = rule.step(&current, class, target > class)?;
        let next = LatentCode(
            current
                .0
                .iter()
                .zip(&v)
                .map(|(a, b)| a + cfg.alpha * b)
                .collect(),
        );
        if !next.is_finite() {
            return Err(Error::NonFinite(format!(
                "latent after step {}",
                steps.len()
            )));
        }
        steps.push(TrajectoryStep {
            latent: std::mem::replace(&mut current, next),
            field_vector: v,
            softmax,
            class,
        });
        (softmax, class) = observe(&current)?;
    }
    Ok(TrajectoryRecord {
        method: rule.name().to_string(),
        attribute,
        alpha: cfg.alpha,
        start_latent: z.clone(),
        end_latent: current,
        start_class,
        target_class: target,
        final_class: class,
        outcome: if class == target {
            Outcome::Reached
        } else {
            Outcome::Saturated
        },
        steps,
    })
}
