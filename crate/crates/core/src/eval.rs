//! Edit-quality metrics, the curvature analysis of field trajectories, and a
//! matched comparison of the field against the linear baselines.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, LatentCode, MAX_DEGREE};
use crate::field::{
    traverse, traverse_with, FieldConfig, FixedDirection, MultiBoundary, SemanticFieldModel,
    StepRule, TrajectoryRecord,
};
use crate::predictor::{log_softmax_rows, DegreeClassifier};
use crate::{Error, Result};

/// Printed with every report.
pub const REPORT_NOTE: &str =
    "toy-world scale: only the orderings between methods are meaningful, not the absolute values";

pub const FIELD_METHOD: &str = "semantic_field";
pub const FIXED_METHOD: &str = "fixed_direction";
pub const MULTI_METHOD: &str = "multi_boundary";

/// Mean embedding distance between each edited image and the start image.
/// Zero for an empty trajectory.
pub fn identity_preservation(trajectory: &TrajectoryRecord, backend: &dyn Backend) -> Result<f64> {
    let edited = trajectory.edited_latents();
    if edited.is_empty() {
        return Ok(0.0);
    }
    let e0 = backend.identity_embed(&backend.generate(&trajectory.start_latent)?)?;
    let mut total = 0.0;
    for z in &edited {
        let e = backend.identity_embed(&backend.generate(z)?)?;
        total += e
            .iter()
            .zip(&e0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / edited.len() as f64)
}

/// Mean cross-entropy of the non-edited attributes against the degrees the
/// evaluation predictor assigns to the start image.
pub fn attribute_preservation(
    trajectory: &TrajectoryRecord,
    eval_predictor: &dyn DegreeClassifier,
    backend: &dyn Backend,
    edited_attribute: usize,
) -> Result<f64> {
    let k = backend.schema().len();
    if edited_attribute >= k {
        return Err(Error::AttributeOutOfRange(edited_attribute));
    }
    let edited = trajectory.edited_latents();
    if edited.is_empty() {
        return Ok(0.0);
    }
    let y = eval_predictor.predict_degrees(&backend.generate(&trajectory.start_latent)?)?;
    let mut total = 0.0;
    for z in &edited {
        let lp = log_softmax_rows(&eval_predictor.predict_logits(&backend.generate(z)?)?);
        total -= (0..k)
            .filter(|j| *j != edited_attribute)
            .map(|j| lp[[j, y.get(j) as usize]])
            .sum::<f64>();
    }
    Ok(total / edited.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub method: String,
    pub attribute: usize,
    /// Classes moved so far when the step was taken; strictly increasing.
    pub class_change: Vec<u8>,
    /// Mean cosine between the step direction and the trajectory's first step.
    pub mean_cosine: Vec<f64>,
    /// Trajectories contributing to each entry.
    pub counts: Vec<usize>,
    pub n_trajectories: usize,
    pub non_increasing: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("zero step direction".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine of every step direction to the first one, grouped by how many
/// classes the trajectory had already moved.
///
/// Only steps taken between the start and target classes count, so a walk
/// back after an overshoot does not enter the curve. Each trajectory
/// contributes its own mean per group before averaging across trajectories.
pub fn curvature_analysis(trajectories: &[TrajectoryRecord]) -> Result<CurvatureReport> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::InvalidArgument("no trajectories".into()))?;
    let span = |t: &TrajectoryRecord| {
        (t.target_class as i16 - t.start_class as i16).unsigned_abs() as usize
    };
    let groups = trajectories.iter().map(span).max().unwrap_or(0);
    let mut sums = vec![0.0; groups];
    let mut counts = vec![0usize; groups];
    for t in trajectories {
        if t.attribute != first.attribute || t.method != first.method {
            return Err(Error::InvalidArgument(
                "curvature over mixed attributes or methods".into(),
            ));
        }
        if t.num_steps() < 2 || span(t) < 2 {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs at least two steps and two class changes, has {} and {}",
                t.num_steps(),
                span(t)
            )));
        }
        let sign = if t.target_class > t.start_class {
            1
        } else {
            -1
        };
        let v0 = &t.steps[0].field_vector;
        let mut per = vec![(0.0, 0usize); span(t)];
        for s in &t.steps {
            let moved = (s.class as i16 - t.start_class as i16) * sign;
            if moved < 0 || moved as usize >= span(t) {
                continue;
            }
            let e = &mut per[moved as usize];
            e.0 += cosine(&s.field_vector, v0)?;
            e.1 += 1;
        }
        for (g, (sum, n)) in per.into_iter().enumerate() {
            if n > 0 {
                sums[g] += sum / n as f64;
                counts[g] += 1;
            }
        }
    }
    let (mut class_change, mut mean_cosine, mut kept) = (Vec::new(), Vec::new(), Vec::new());
    for g in 0..groups {
        if counts[g] > 0 {
            class_change.push(g as u8);
            mean_cosine.push(sums[g] / counts[g] as f64);
            kept.push(counts[g]);
        }
    }
    let non_increasing = mean_cosine.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    Ok(CurvatureReport {
        method: first.method.clone(),
        attribute: first.attribute,
        class_change,
        mean_cosine,
        counts: kept,
        n_trajectories: trajectories.len(),
        non_increasing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    /// Start latents per attribute.
    pub n_starts: usize,
    /// Degrees every method must move each start by.
    pub class_change: u8,
    pub seed: u64,
    /// Prior draws allowed per requested start before giving up.
    pub draws_per_start: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            n_starts: 200,
            class_change: 3,
            seed: 7,
            draws_per_start: 100,
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 {
            return Err(Error::InvalidArgument("n_starts must be positive".into()));
        }
        if self.class_change == 0 || self.class_change >= MAX_DEGREE {
            return Err(Error::InvalidArgument(format!(
                "class_change must be in 1..{MAX_DEGREE}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub attribute: usize,
    pub identity_score: f64,
    pub attribute_score: f64,
    /// Starts every method completed.
    pub n_trajectories: usize,
    pub n_starts: usize,
    /// Starts this method saturated on.
    pub n_failed: usize,
    /// More than half of the starts failed.
    pub unreliable: bool,
    /// SHA-256 of the start latents.
    pub latent_set_hash: String,
    pub config: serde_json::Value,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub reports: Vec<MetricReport>,
    /// Per method, the trajectories that entered the reports.
    pub trajectories: Vec<(String, Vec<TrajectoryRecord>)>,
    /// Baseline step length, set to the field's mean step norm at the starts.
    pub step_length: f64,
}

/// SHA-256 over the little-endian bytes of every coordinate, in order.
pub fn latent_set_hash(latents: &[LatentCode]) -> String {
    let mut h = Sha256::new();
    for z in latents {
        for v in &z.0 {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Prior samples whose predicted degree leaves room for an increase of
/// `class_change`, skipping degree 0.
pub fn comparison_starts(
    backend: &dyn Backend,
    predictor: &dyn DegreeClassifier,
    attribute: usize,
    cfg: &CompareConfig,
) -> Result<Vec<LatentCode>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_starts);
    let top = MAX_DEGREE - cfg.class_change;
    for _ in 0..cfg.n_starts * cfg.draws_per_start {
        let z = backend.sample_latent(&mut rng);
        let c = predictor
            .predict_degrees(&backend.generate(&z)?)?
            .get(attribute);
        if (1..=top).contains(&c) {
            out.push(z);
            if out.len() == cfg.n_starts {
                return Ok(out);
            }
        }
    }
    Err(Error::Degenerate(format!(
        "only {} of {} starts with degree in 1..={top}",
        out.len(),
        cfg.n_starts
    )))
}

/// Runs the field and both baselines from the same starts to the same target
/// degree and scores the runs that all methods completed.
#[allow(clippy::too_many_arguments)]
pub fn compare_methods(
    backend: &dyn Backend,
    predictor: &dyn DegreeClassifier,
    eval_predictor: &dyn DegreeClassifier,
    field: &SemanticFieldModel,
    fixed_direction: &[f64],
    boundary_normals: &[Vec<f64>],
    field_cfg: &FieldConfig,
    cfg: &CompareConfig,
) -> Result<Comparison> {
    let attribute = field.attribute();
    let starts = comparison_starts(backend, predictor, attribute, cfg)?;
    let hash = latent_set_hash(&starts);
    let step_length = field
        .field_vectors(&starts)?
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum::<f64>()
        / starts.len() as f64;
    let fixed = FixedDirection {
        direction: fixed_direction.to_vec(),
        step_length,
    };
    let multi = MultiBoundary {
        normals: boundary_normals.to_vec(),
        step_length,
    };
    let baselines: [(&str, &dyn StepRule); 2] = [(FIXED_METHOD, &fixed), (MULTI_METHOD, &multi)];

    let mut runs: Vec<(String, Vec<TrajectoryRecord>)> = Vec::new();
    let mut field_runs = Vec::with_capacity(starts.len());
    for z in &starts {
        let c = predictor
            .predict_degrees(&backend.generate(z)?)?
            .get(attribute);
        field_runs.push(traverse(
            field,
            predictor,
            backend,
            z,
            c + cfg.class_change,
            field_cfg,
        )?);
    }
    runs.push((FIELD_METHOD.to_string(), field_runs));
    for (name, rule) in baselines {
        let mut out = Vec::with_capacity(starts.len());
        for (z, f) in starts.iter().zip(&runs[0].1) {
            let mut t = traverse_with(
                rule,
                predictor,
                backend,
                attribute,
                z,
                f.target_class,
                field_cfg,
            )?;
            t.method = name.to_string();
            out.push(t);
        }
        runs.push((name.to_string(), out));
    }

    let complete: Vec<usize> = (0..starts.len())
        .filter(|i| runs.iter().all(|(_, r)| r[*i].reached()))
        .collect();
    if complete.is_empty() {
        return Err(Error::Degenerate(
            "no start was completed by every method".into(),
        ));
    }
    let config =
        serde_json::json!({ "compare": cfg, "field": field_cfg, "step_length": step_length });
    let mut reports = Vec::new();
    let mut kept = Vec::new();
    for (name, r) in runs {
        let (mut id, mut at) = (0.0, 0.0);
        for &i in &complete {
            id += identity_preservation(&r[i], backend)?;
            at += attribute_preservation(&r[i], eval_predictor, backend, attribute)?;
        }
        let n_failed = r.iter().filter(|t| !t.reached()).count();
        reports.push(MetricReport {
            method: name.clone(),
            attribute,
            identity_score: id / complete.len() as f64,
            attribute_score: at / complete.len() as f64,
            n_trajectories: complete.len(),
            n_starts: starts.len(),
            n_failed,
            unreliable: 2 * n_failed > starts.len(),
            latent_set_hash: hash.clone(),
            config: config.clone(),
            note: REPORT_NOTE.to_string(),
        });
        let mut r = r;
        let mut i = 0;
        r.retain(|_| {
            i += 1;
            complete.binary_search(&(i - 1)).is_ok()
        });
        kept.push((name, r));
    }
    Ok(Comparison {
        reports,
        trajectories: kept,
        step_length,
    })
}

/// Plain-text table with identity and attribute columns, one row per report.
pub fn comparison_table(reports: &[MetricReport], attribute_names: &[String]) -> String {
    let mut out = format!("# {REPORT_NOTE}\n");
    let _ = writeln!(
        out,
        "{:<12} {:<16} {:>10} {:>10} {:>6} {:>7}",
        "attribute", "method", "identity", "attribute", "n", "failed"
    );
    for r in reports {
        let name = attribute_names
            .get(r.attribute)
            .cloned()
            .unwrap_or_else(|| r.attribute.to_string());
        let _ = writeln!(
            out,
            "{:<12} {:<16} {:>10.4} {:>10.4} {:>6} {:>7}{}",
            name,
            r.method,
            r.identity_score,
            r.attribute_score,
            r.n_trajectories,
            r.n_failed,
            if r.unreliable { "  (unreliable)" } else { "" }
        );
    }
    out
}

/// Plain-text rendering of a curvature curve.
pub fn curvature_table(report: &CurvatureReport) -> String {
    let mut out = format!(
        "# {} attribute {} over {} trajectories; non-increasing: {}\n",
        report.method, report.attribute, report.n_trajectories, report.non_increasing
    );
    let _ = writeln!(out, "{:>12} {:>12} {:>6}", "class_change", "cosine", "n");
    for ((c, m), n) in report
        .class_change
        .iter()
        .zip(&report.mean_cosine)
        .zip(&report.counts)
    {
        let _ = writeln!(out, "{c:>12} {m:>12.6} {n:>6}");
    }
    out
}
