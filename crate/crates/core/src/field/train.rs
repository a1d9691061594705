use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FieldConfig, SemanticFieldModel};
use crate::backend::{Backend, ImageTensor, LatentCode, MAX_DEGREE, NUM_ATTRIBUTES};
use crate::nn::{Adam, Mlp, Params};
use crate::predictor::{cross_entropy_target, DegreeClassifier, FineGrainedLabel, PredictorModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub pred: f64,
    pub id: f64,
    pub disc: f64,
    pub total: f64,
}

/// Batch-mean loss terms, unweighted except `total`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub pred: f64,
    pub id: f64,
    pub disc: f64,
    pub total: f64,
}

/// One training example: a latent, the label it should reach after one step,
/// and the identity embedding of its current image.
#[derive(Debug, Clone)]
pub struct FieldBatchItem {
    pub z: LatentCode,
    pub target: FineGrainedLabel,
    pub identity: Vec<f64>,
}

impl FieldBatchItem {
    /// Builds an item whose target raises `attribute` by one degree from `label`.
    pub fn new(
        backend: &dyn Backend,
        z: LatentCode,
        label: &FineGrainedLabel,
        attribute: usize,
    ) -> Result<Self> {
        let current = label.get(attribute);
        if current >= MAX_DEGREE {
            return Err(Error::InvalidArgument(
                "cannot raise a maximal degree".into(),
            ));
        }
        let identity = backend.identity_embed(&backend.generate(&z)?)?;
        Ok(Self {
            target: label.with(attribute, current + 1)?,
            z,
            identity,
        })
    }
}

/// Loss `l_pred CE + l_id |Emb(I') - Emb(I)|_1 - l_disc D(I')` averaged over
/// the batch, with its gradient with respect to every field parameter.
pub fn field_loss_and_grad(
    model: &SemanticFieldModel,
    backend: &dyn Backend,
    predictor: &PredictorModel,
    batch: &[FieldBatchItem],
    cfg: &FieldConfig,
) -> Result<(LossParts, Mlp)> {
    let d = model.latent_dim();
    let b = batch.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let disc = if cfg.lambda_disc > 0.0 {
        Some(backend.discriminator().ok_or_else(|| {
            Error::Unsupported("lambda_disc > 0 but backend has no discriminator".into())
        })?)
    } else {
        None
    };
    let mut flat = Vec::with_capacity(b * d);
    for item in batch {
        item.z.check_len(d)?;
        flat.extend_from_slice(&item.z.0);
    }
    let x = Array2::from_shape_vec((b, d), flat).expect("shape");
    let (f, trace) = model.network.forward_trace(&x);
    let scale = 1.0 / b as f64;
    let mut parts = LossParts::default();
    let mut grad_f = Array2::zeros((b, d));
    for (r, item) in batch.iter().enumerate() {
        let z2 = LatentCode(
            item.z
                .0
                .iter()
                .zip(f.row(r))
                .map(|(z, v)| z + cfg.alpha * v)
                .collect(),
        );
        let img = backend.generate(&z2)?;
        let (h, w) = backend.image_shape();
        let mut g_img = ImageTensor::zeros(h, w);

        if cfg.lambda_pred > 0.0 {
            let (ce, _, g) = predictor.cross_entropy_with_input_grad(&img, &item.target)?;
            parts.pred += ce * scale;
            add_scaled(&mut g_img, &g, cfg.lambda_pred * scale);
        } else {
            parts.pred +=
                cross_entropy_target(&predictor.predict_logits(&img)?, &item.target)? * scale;
        }

        let emb = backend.identity_embed(&img)?;
        let diff: Vec<f64> = emb.iter().zip(&item.identity).map(|(a, b)| a - b).collect();
        parts.id += diff.iter().map(|v| v.abs()).sum::<f64>() * scale;
        if cfg.lambda_id > 0.0 {
            let sign: Vec<f64> = diff
                .iter()
                .map(|v| v.signum() * f64::from(*v != 0.0))
                .collect();
            let g = backend.identity_embed_vjp(&sign)?;
            add_scaled(&mut g_img, &g, cfg.lambda_id * scale);
        }

        if let Some(dsc) = disc {
            parts.disc += -dsc.score(&img) * scale;
            add_scaled(&mut g_img, &dsc.score_grad(&img), -cfg.lambda_disc * scale);
        }

        let gz = backend.generate_vjp(&z2, &g_img)?;
        for (o, g) in grad_f.row_mut(r).iter_mut().zip(gz) {
            *o = cfg.alpha * g;
        }
    }
    parts.total =
        cfg.lambda_pred * parts.pred + cfg.lambda_id * parts.id + cfg.lambda_disc * parts.disc;
    let mut grad = model.network.zeros_like();
    model.network.backward(&trace, &grad_f, &mut grad);
    Ok((parts, grad))
}

fn add_scaled(dst: &mut ImageTensor, src: &ImageTensor, s: f64) {
    for (d, v) in dst.pixels.iter_mut().zip(&src.pixels) {
        *d += s * v;
    }
}

/// Trains the field for `attribute` with the predictor and backend frozen.
///
/// Batches are class-balanced over degrees `0..=4` of the attribute, using a
/// pool of prior samples bucketed by the predictor's argmax. Latents already
/// at the top degree are never drawn.
pub fn train_field(
    backend: &dyn Backend,
    predictor: &PredictorModel,
    attribute: usize,
    cfg: &FieldConfig,
    n_iters: usize,
    seed: u64,
) -> Result<SemanticFieldModel> {
    if attribute >= NUM_ATTRIBUTES {
        return Err(Error::AttributeOutOfRange(attribute));
    }
    cfg.validate()?;
    predictor.check_gate()?;
    let mut model = SemanticFieldModel::new(attribute, backend.latent_dim(), cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut buckets: Vec<Vec<(LatentCode, FineGrainedLabel)>> =
        vec![Vec::new(); MAX_DEGREE as usize];
    for _ in 0..cfg.pool_size {
        let z = backend.sample_latent(&mut rng);
        let label = predictor.predict_degrees(&backend.generate(&z)?)?;
        let c = label.get(attribute) as usize;
        if c < MAX_DEGREE as usize {
            buckets[c].push((z, label));
        }
    }
    let live: Vec<usize> = (0..buckets.len())
        .filter(|c| !buckets[*c].is_empty())
        .collect();
    if live.is_empty() {
        return Err(Error::Degenerate(
            "no pool latent below the maximal degree".into(),
        ));
    }
    log::info!(
        "field {attribute}: pool buckets {:?}",
        buckets.iter().map(Vec::len).collect::<Vec<_>>()
    );

    let mut adam = Adam::new(cfg.learning_rate);
    let mut curve = Vec::with_capacity(n_iters);
    for iter in 0..n_iters {
        let batch: Vec<FieldBatchItem> = (0..cfg.batch_size)
            .map(|_| {
                let bucket = &buckets[live[rng.random_range(0..live.len())]];
                let (z, label) = &bucket[rng.random_range(0..bucket.len())];
                FieldBatchItem::new(backend, z.clone(), label, attribute)
            })
            .collect::<Result<_>>()?;
        let (parts, grad) = field_loss_and_grad(&model, backend, predictor, &batch, cfg)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "field loss at iteration {iter}: pred {} id {} disc {}",
                parts.pred, parts.id, parts.disc
            )));
        }
        let grads: Vec<Vec<f64>> = grad
            .param_slices()
            .into_iter()
            .map(<[f64]>::to_vec)
            .collect();
        adam.step(
            model.params_mut(),
            grads.iter().map(Vec::as_slice).collect(),
        );
        if iter % 200 == 0 {
            log::info!(
                "field {attribute} iter {iter}: pred {:.4} id {:.4} total {:.4}",
                parts.pred,
                parts.id,
                parts.total
            );
        }
        curve.push(LossRecord {
            iter,
            pred: parts.pred,
            id: parts.id,
            disc: parts.disc,
            total: parts.total,
        });
    }
    model.meta.n_iters = n_iters;
    model.meta.loss_curve = curve;
    Ok(model)
}

/// Final mean predictor loss must fall below this fraction of the initial one.
pub const FIELD_GATE_RATIO: f64 = 0.5;

/// Mean predictor loss over the last tenth of training divided by the mean
/// over the first tenth.
pub fn pred_loss_ratio(curve: &[LossRecord]) -> Option<f64> {
    if curve.is_empty() {
        return None;
    }
    let w = (curve.len() / 10).max(1);
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.pred).sum::<f64>() / s.len() as f64;
    let first = mean(&curve[..w]);
    (first > 0.0).then(|| mean(&curve[curve.len() - w..]) / first)
}

/// Training-success gate for a field: the predictor loss has dropped below
/// [`FIELD_GATE_RATIO`] of its starting value.
pub fn check_field_gate(model: &SemanticFieldModel) -> Result<()> {
    match pred_loss_ratio(&model.meta.loss_curve) {
        Some(r) if r < FIELD_GATE_RATIO => Ok(()),
        Some(r) => Err(Error::TrainingGate(format!(
            "field predictor loss ratio {r:.3} not below {FIELD_GATE_RATIO}"
        ))),
        None => Err(Error::TrainingGate("field has no loss curve".into())),
    }
}

#[cfg(test)]
mod gate_tests {
    use super::*;

    fn curve(values: &[f64]) -> Vec<LossRecord> {
        values
            .iter()
            .enumerate()
            .map(|(iter, &pred)| LossRecord {
                iter,
                pred,
                id: 0.0,
                disc: 0.0,
                total: pred,
            })
            .collect()
    }

    #[test]
    fn ratio_uses_tenth_windows() {
        let mut v = vec![10.0; 10];
        v.extend(vec![5.0; 80]);
        v.extend(vec![1.0; 10]);
        assert!((pred_loss_ratio(&curve(&v)).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(pred_loss_ratio(&[]), None);
        assert_eq!(pred_loss_ratio(&curve(&[0.0, 0.0])), None);
        assert!((pred_loss_ratio(&curve(&[4.0])).unwrap() - 1.0).abs() < 1e-15);
    }
}
