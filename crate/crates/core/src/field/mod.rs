//! Semantic fields over the latent space.
//!
//! A [`SemanticFieldModel`] maps every latent code to a local editing
//! direction for one attribute. Training pushes `z + a F(z)` one degree up
//! under the attribute predictor while keeping the identity embedding still;
//! [`traverse`] then walks the field until the predictor reports the target
//! degree.

mod baseline;
mod train;
mod traverse;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, LatentCode, NUM_ATTRIBUTES};
use crate::checkpoint::Checkpoint;
use crate::nn::{Mlp, NamedTensor, Params};
use crate::{Error, Result};

pub use baseline::{fit_linear_svm, linear_baseline_direction, multiboundary_baseline, SvmConfig};
pub use train::{
    check_field_gate, field_loss_and_grad, pred_loss_ratio, train_field, FieldBatchItem, LossParts,
    LossRecord, FIELD_GATE_RATIO,
};
pub use traverse::{
    traverse, traverse_with, FixedDirection, MultiBoundary, Outcome, RegularizedField,
    ScoreGradient, StepRule, TrajectoryRecord, TrajectoryStep,
};

pub const CHECKPOINT_KIND: &str = "field";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Step size `a` in `z' = z + a F(z)`.
    pub alpha: f64,
    pub max_steps_per_class: usize,
    pub lambda_pred: f64,
    pub lambda_id: f64,
    pub lambda_disc: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub num_layers: usize,
    pub hidden_width: usize,
    pub negative_slope: f64,
    /// Scale on the initial output layer, so an untrained field starts near zero.
    pub output_gain: f64,
    /// Latents drawn once and bucketed by predicted degree for class-balanced batches.
    pub pool_size: usize,
    /// Traverse with `z + a (M(F(z)) - M(0))` instead of the plain step.
    pub regularized: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            max_steps_per_class: 100,
            lambda_pred: 1.0,
            lambda_id: 1.0,
            lambda_disc: 0.0,
            learning_rate: 1e-4,
            batch_size: 32,
            num_layers: 8,
            hidden_width: 512,
            negative_slope: 0.2,
            output_gain: 0.01,
            pool_size: 20_000,
            regularized: false,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be positive");
        }
        if self.max_steps_per_class < 1 {
            return bad("max_steps_per_class must be at least 1");
        }
        for w in [self.lambda_pred, self.lambda_id, self.lambda_disc] {
            if !(w >= 0.0) || !w.is_finite() {
                return bad("loss weights must be finite and non-negative");
            }
        }
        if self.batch_size == 0 || self.num_layers == 0 || self.hidden_width == 0 {
            return bad("batch size and network shape must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub schema_version: u32,
    pub attribute: usize,
    pub latent_dim: usize,
    pub seed: u64,
    pub n_iters: usize,
    pub config: FieldConfig,
    pub loss_curve: Vec<LossRecord>,
}

/// Per-attribute mapping network `F: R^d -> R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFieldModel {
    pub network: Mlp,
    pub meta: FieldMeta,
}

impl SemanticFieldModel {
    pub fn new(
        attribute: usize,
        latent_dim: usize,
        config: &FieldConfig,
        seed: u64,
    ) -> Result<Self> {
        if attribute >= NUM_ATTRIBUTES {
            return Err(Error::AttributeOutOfRange(attribute));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![latent_dim];
        widths.extend(std::iter::repeat_n(
            config.hidden_width,
            config.num_layers - 1,
        ));
        widths.push(latent_dim);
        let network = Mlp::new(&widths, config.negative_slope, config.output_gain, &mut rng);
        Ok(Self {
            network,
            meta: FieldMeta {
                schema_version: 1,
                attribute,
                latent_dim,
                seed,
                n_iters: 0,
                config: config.clone(),
                loss_curve: Vec::new(),
            },
        })
    }

    pub fn attribute(&self) -> usize {
        self.meta.attribute
    }

    pub fn latent_dim(&self) -> usize {
        self.meta.latent_dim
    }

    /// `f_z = F(z)`.
    pub fn field_vector(&self, z: &LatentCode) -> Result<Vec<f64>> {
        z.check_len(self.latent_dim())?;
        let x = Array2::from_shape_vec((1, z.len()), z.0.clone()).expect("shape");
        let out = self.network.forward(&x);
        let v = out.into_raw_vec_and_offset().0;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("field output".into()));
        }
        Ok(v)
    }

    /// Field vectors for many latents in one batched pass.
    pub fn field_vectors(&self, zs: &[LatentCode]) -> Result<Vec<Vec<f64>>> {
        let d = self.latent_dim();
        let mut flat = Vec::with_capacity(zs.len() * d);
        for z in zs {
            z.check_len(d)?;
            flat.extend_from_slice(&z.0);
        }
        let x = Array2::from_shape_vec((zs.len(), d), flat).expect("shape");
        let out = self.network.forward(&x);
        Ok(out.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_params(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.meta)?,
            self,
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected field, got {}",
                ck.kind
            )));
        }
        let meta: FieldMeta = serde_json::from_value(ck.metadata.clone())?;
        let mut m = Self::new(meta.attribute, meta.latent_dim, &meta.config, 0)?;
        ck.load_into(&mut m)?;
        m.meta = meta;
        Ok(m)
    }
}

impl Params for SemanticFieldModel {
    fn named_params(&self) -> Vec<NamedTensor<'_>> {
        self.network.named_params()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.network.params_mut()
    }
}

/// `z' = z + a F(z)`.
pub fn field_step(
    model: &SemanticFieldModel,
    z: &LatentCode,
    config: &FieldConfig,
) -> Result<LatentCode> {
    let f = model.field_vector(z)?;
    Ok(LatentCode(
        z.0.iter()
            .zip(&f)
            .map(|(a, b)| a + config.alpha * b)
            .collect(),
    ))
}

/// `M(F(z)) - M(0)` for the backend's mapping hook.
pub fn regularized_direction(
    model: &SemanticFieldModel,
    z: &LatentCode,
    backend: &dyn Backend,
) -> Result<Vec<f64>> {
    let hook = backend
        .mapping_hook()
        .ok_or_else(|| Error::Unsupported("backend exposes no mapping hook".into()))?;
    let f = model.field_vector(z)?;
    let mf = hook.map(&f);
    let m0 = hook.map(&vec![0.0; f.len()]);
    if mf.len() != f.len() || m0.len() != f.len() {
        return Err(Error::DimensionMismatch {
            expected: f.len(),
            actual: mf.len(),
        });
    }
    Ok(mf.iter().zip(&m0).map(|(a, b)| a - b).collect())
}

/// `z' = z + a (M(F(z)) - M(0))`.
pub fn regularized_step(
    model: &SemanticFieldModel,
    z: &LatentCode,
    config: &FieldConfig,
    backend: &dyn Backend,
) -> Result<LatentCode> {
    let v = regularized_direction(model, z, backend)?;
    Ok(LatentCode(
        z.0.iter()
            .zip(&v)
            .map(|(a, b)| a + config.alpha * b)
            .collect(),
    ))
}
