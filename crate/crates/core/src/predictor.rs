//! Fine-grained attribute predictors.
//!
//! [`PredictorModel`] is a small convolutional classifier with one six-way head
//! per attribute. The training predictor supervises field training; a second
//! model trained on a disjoint sample stream is kept for evaluation only.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::{
    Backend, BarReader, ImageTensor, LatentCode, ToyWorld, MAX_DEGREE, NUM_ATTRIBUTES, NUM_DEGREES,
};
use crate::checkpoint::Checkpoint;
use crate::math::{argmax, log_softmax, softmax};
use crate::nn::{Adam, Conv3x3, Linear, NamedTensor, Params};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "predictor";
const LOG_CLAMP: f64 = 1e-12;

/// One degree in `0..=5` per attribute.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FineGrainedLabel(Vec<u8>);

impl FineGrainedLabel {
    pub fn new(degrees: Vec<u8>) -> Result<Self> {
        if degrees.len() != NUM_ATTRIBUTES {
            return Err(Error::DimensionMismatch {
                expected: NUM_ATTRIBUTES,
                actual: degrees.len(),
            });
        }
        if let Some(d) = degrees.iter().find(|d| **d > MAX_DEGREE) {
            return Err(Error::DegreeOutOfRange(*d as i64));
        }
        Ok(Self(degrees))
    }

    pub fn degrees(&self) -> &[u8] {
        &self.0
    }

    pub fn get(&self, attribute: usize) -> u8 {
        self.0[attribute]
    }

    /// Copy with one attribute's degree replaced.
    pub fn with(&self, attribute: usize, degree: u8) -> Result<Self> {
        let mut d = self.0.clone();
        *d.get_mut(attribute)
            .ok_or(Error::AttributeOutOfRange(attribute))? = degree;
        Self::new(d)
    }
}

/// Anything that maps an image to `k x 6` degree logits.
pub trait DegreeClassifier: Send + Sync {
    fn predict_logits(&self, image: &ImageTensor) -> Result<Array2<f64>>;

    /// Per-head argmax; ties go to the lower degree.
    fn predict_degrees(&self, image: &ImageTensor) -> Result<FineGrainedLabel> {
        Ok(label_from_logits(&self.predict_logits(image)?))
    }
}

pub fn label_from_logits(logits: &Array2<f64>) -> FineGrainedLabel {
    FineGrainedLabel(
        logits
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("row-major")) as u8)
            .collect(),
    )
}

/// Row-wise softmax of a logits matrix.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let s = softmax(row.as_slice().expect("row-major"));
        row.iter_mut().zip(s).for_each(|(o, v)| *o = v);
    }
    out
}

/// `-sum_i log p_{i, y_i}` with the log clamped at `1e-12`.
pub fn cross_entropy_target(logits: &Array2<f64>, target: &FineGrainedLabel) -> Result<f64> {
    check_logits_shape(logits, target.0.len())?;
    Ok(logits
        .rows()
        .into_iter()
        .zip(&target.0)
        .map(|(row, &y)| {
            let p = softmax(row.as_slice().expect("row-major"))[y as usize];
            -p.max(LOG_CLAMP).ln()
        })
        .sum())
}

/// Gradient of [`cross_entropy_target`] with respect to the logits (clamp ignored).
pub fn cross_entropy_grad(logits: &Array2<f64>, target: &FineGrainedLabel) -> Result<Array2<f64>> {
    check_logits_shape(logits, target.0.len())?;
    let mut g = softmax_rows(logits);
    for (mut row, &y) in g.rows_mut().into_iter().zip(&target.0) {
        row[y as usize] -= 1.0;
    }
    Ok(g)
}

fn check_logits_shape(logits: &Array2<f64>, k: usize) -> Result<()> {
    if logits.nrows() != k || logits.ncols() != NUM_DEGREES {
        return Err(Error::ShapeMismatch {
            expected: (k, NUM_DEGREES),
            actual: logits.dim(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorRole {
    /// Supervises field training.
    Train,
    /// Held out for evaluation metrics.
    Eval,
}

impl PredictorRole {
    fn stream(self) -> u64 {
        match self {
            PredictorRole::Train => 1,
            PredictorRole::Eval => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Floor of the cosine learning-rate decay.
    pub min_learning_rate: f64,
    pub n_holdout: usize,
    pub accuracy_floor: f64,
    /// Size of the candidate pool for class balancing, as a multiple of `n`.
    pub balance_pool_factor: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            channels: 6,
            epochs: 8,
            batch_size: 64,
            learning_rate: 3e-3,
            min_learning_rate: 3e-5,
            n_holdout: 4000,
            accuracy_floor: 0.90,
            balance_pool_factor: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorMeta {
    pub schema_version: u32,
    pub role: PredictorRole,
    pub seed: u64,
    pub n_samples: usize,
    pub config: PredictorConfig,
    pub height: usize,
    pub width: usize,
    /// Held-out accuracy per attribute.
    pub accuracy: Vec<f64>,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Per-(attribute, degree) counts of the training set.
    pub class_counts: Vec<Vec<usize>>,
}

/// Conv(3x3) + ReLU, three times, then a mean over columns and a linear map
/// to `k * 6` logits.
///
/// The column mean keeps the row axis, so the heads can tell which band a
/// feature came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub convs: [Conv3x3; 3],
    pub head: Linear,
    pub meta: PredictorMeta,
}

struct Trace {
    /// Inputs to each conv, post-activation for the later ones.
    acts: [Vec<f64>; 4],
}

impl PredictorModel {
    pub fn new<R: Rng + ?Sized>(height: usize, width: usize, channels: usize, rng: &mut R) -> Self {
        let c = channels;
        let convs = [
            Conv3x3::he(1, c, rng),
            Conv3x3::he(c, c, rng),
            Conv3x3::he(c, c, rng),
        ];
        let fan_in = c * height;
        let head = Linear::gaussian(
            fan_in,
            NUM_ATTRIBUTES * NUM_DEGREES,
            0.1 / (fan_in as f64).sqrt(),
            rng,
        );
        Self {
            convs,
            head,
            meta: PredictorMeta {
                schema_version: 1,
                role: PredictorRole::Train,
                seed: 0,
                n_samples: 0,
                config: PredictorConfig {
                    channels,
                    ..Default::default()
                },
                height,
                width,
                accuracy: Vec::new(),
                epoch_loss: Vec::new(),
                class_counts: Vec::new(),
            },
        }
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    fn channels(&self) -> usize {
        self.convs[0].out_channels
    }

    fn shape(&self) -> (usize, usize) {
        (self.meta.height, self.meta.width)
    }

    fn features(&self, image: &[f64]) -> (Vec<f64>, Trace) {
        let (h, w) = self.shape();
        let mut acts: [Vec<f64>; 4] = Default::default();
        acts[0] = image.to_vec();
        for (l, conv) in self.convs.iter().enumerate() {
            let mut a = conv.forward(&acts[l], h, w);
            a.iter_mut().for_each(|v| *v = v.max(0.0));
            acts[l + 1] = a;
        }
        let c = self.channels();
        let mut pooled = vec![0.0; c * h];
        for (p, row) in pooled.iter_mut().zip(acts[3].chunks_exact(w)) {
            *p = row.iter().sum::<f64>() / w as f64;
        }
        debug_assert_eq!(pooled.len(), c * h);
        (pooled, Trace { acts })
    }

    /// Backprop from pooled-feature gradient to the image; accumulates
    /// parameter gradients when `grad` is given.
    fn features_backward(
        &self,
        trace: &Trace,
        grad_pooled: &[f64],
        mut grad: Option<&mut PredictorModel>,
    ) -> Vec<f64> {
        let (h, w) = self.shape();
        let mut g: Vec<f64> = Vec::with_capacity(trace.acts[3].len());
        for (gp, row) in grad_pooled.iter().zip(trace.acts[3].chunks_exact(w)) {
            g.extend(
                row.iter()
                    .map(|a| if *a > 0.0 { gp / w as f64 } else { 0.0 }),
            );
        }
        for l in (0..3).rev() {
            let gconv = grad.as_deref_mut().map(|m| &mut m.convs[l]);
            let mut gi = self.convs[l].backward(&trace.acts[l], &g, h, w, gconv);
            if l > 0 {
                for (v, a) in gi.iter_mut().zip(&trace.acts[l]) {
                    if *a <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            g = gi;
        }
        g
    }

    fn logits_from_pooled(&self, pooled: &[f64]) -> Array2<f64> {
        let x = Array2::from_shape_vec((1, pooled.len()), pooled.to_vec()).expect("shape");
        self.head
            .forward(&x)
            .into_shape_with_order((NUM_ATTRIBUTES, NUM_DEGREES))
            .expect("head width")
    }

    /// Gradient of `<grad_logits, logits(I)>` with respect to the image.
    pub fn logits_vjp(
        &self,
        image: &ImageTensor,
        grad_logits: &Array2<f64>,
    ) -> Result<ImageTensor> {
        image.check_shape(self.shape())?;
        check_logits_shape(grad_logits, NUM_ATTRIBUTES)?;
        let (_, trace) = self.features(&image.pixels);
        let g = grad_logits
            .to_shape((1, NUM_ATTRIBUTES * NUM_DEGREES))
            .expect("contiguous")
            .to_owned();
        let gp = self.head.backward_input(&g);
        let pixels = self.features_backward(&trace, gp.as_slice().expect("row-major"), None);
        Ok(ImageTensor {
            height: image.height,
            width: image.width,
            pixels,
        })
    }

    /// Logits and the image gradient of the cross-entropy against `target`.
    pub fn cross_entropy_with_input_grad(
        &self,
        image: &ImageTensor,
        target: &FineGrainedLabel,
    ) -> Result<(f64, Array2<f64>, ImageTensor)> {
        let logits = self.predict_logits(image)?;
        let loss = cross_entropy_target(&logits, target)?;
        let g = cross_entropy_grad(&logits, target)?;
        let gi = self.logits_vjp(image, &g)?;
        Ok((loss, logits, gi))
    }

    pub fn accuracy(&self) -> &[f64] {
        &self.meta.accuracy
    }

    pub fn passes_gate(&self) -> bool {
        !self.meta.accuracy.is_empty()
            && self
                .meta
                .accuracy
                .iter()
                .all(|a| *a >= self.meta.config.accuracy_floor)
    }

    pub fn check_gate(&self) -> Result<()> {
        if self.passes_gate() {
            Ok(())
        } else {
            Err(Error::TrainingGate(format!(
                "predictor held-out accuracy {:?} below floor {}",
                self.meta.accuracy, self.meta.config.accuracy_floor
            )))
        }
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
                "expected predictor, got {}",
                ck.kind
            )));
        }
        let meta: PredictorMeta = serde_json::from_value(ck.metadata.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(meta.height, meta.width, meta.config.channels, &mut rng);
        ck.load_into(&mut m)?;
        m.meta = meta;
        Ok(m)
    }
}

impl DegreeClassifier for PredictorModel {
    fn predict_logits(&self, image: &ImageTensor) -> Result<Array2<f64>> {
        image.check_shape(self.shape())?;
        let (pooled, _) = self.features(&image.pixels);
        Ok(self.logits_from_pooled(&pooled))
    }
}

impl Params for PredictorModel {
    fn named_params(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.extend(c.named(&format!("conv{i}")));
        }
        out.extend(self.head.named("head"));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in self.convs.iter_mut() {
            out.extend(c.slices_mut());
        }
        out.extend(self.head.slices_mut());
        out
    }
}

/// Confident one-hot logits from the bar reading; a stand-in for a perfectly
/// trained predictor.
impl DegreeClassifier for BarReader {
    fn predict_logits(&self, image: &ImageTensor) -> Result<Array2<f64>> {
        let degrees = self.measure_degrees(image)?;
        let mut l = Array2::from_elem((NUM_ATTRIBUTES, NUM_DEGREES), -30.0);
        for (i, d) in degrees.iter().enumerate() {
            l[[i, *d as usize]] = 0.0;
        }
        Ok(l)
    }
}

/// Draws `n` latents whose ground-truth degrees are close to uniform for every
/// attribute at once.
///
/// A pool of prior draws is reweighted by iterative proportional fitting so
/// that the expected count of every (attribute, degree) cell is `n / 6`, and
/// `n` members are then picked by systematic sampling.
pub fn balanced_latents<R: Rng>(
    world: &ToyWorld,
    n: usize,
    pool_factor: usize,
    rng: &mut R,
) -> Result<(Vec<LatentCode>, Vec<FineGrainedLabel>, Vec<Vec<usize>>)> {
    let d = world.latent_dim();
    let m = n.saturating_mul(pool_factor.max(2)).max(6000);
    let mut pool = Vec::with_capacity(m * d);
    let mut cells = Vec::with_capacity(m * NUM_ATTRIBUTES);
    for _ in 0..m {
        let start = pool.len();
        pool.extend((0..d).map(|_| -> f64 { StandardNormal.sample(rng) }));
        let z = &pool[start..];
        cells.extend((0..NUM_ATTRIBUTES).map(|i| world.degree_of(z, i)));
    }

    let target = n as f64 / NUM_DEGREES as f64;
    let mut factors = vec![[1.0f64; NUM_DEGREES]; NUM_ATTRIBUTES];
    let mut probs = vec![0.0; m];
    let inclusion = |factors: &[[f64; NUM_DEGREES]], probs: &mut [f64]| {
        for (p, c) in probs.iter_mut().zip(cells.chunks_exact(NUM_ATTRIBUTES)) {
            let w: f64 = c
                .iter()
                .enumerate()
                .map(|(i, &k)| factors[i][k as usize])
                .product();
            *p = w.min(1.0);
        }
    };
    let initial = n as f64 / m as f64;
    factors[0].iter_mut().for_each(|f| *f = initial);
    for _ in 0..200 {
        let mut worst: f64 = 0.0;
        for i in 0..NUM_ATTRIBUTES {
            inclusion(&factors, &mut probs);
            let mut mass = [0.0; NUM_DEGREES];
            for (p, c) in probs.iter().zip(cells.chunks_exact(NUM_ATTRIBUTES)) {
                mass[c[i] as usize] += p;
            }
            for (c, f) in factors[i].iter_mut().enumerate() {
                if mass[c] == 0.0 {
                    return Err(Error::Degenerate(format!(
                        "attribute {i} never reaches degree {c}"
                    )));
                }
                worst = worst.max((mass[c] / target - 1.0).abs());
                *f *= target / mass[c];
            }
        }
        if worst < 1e-3 {
            break;
        }
    }
    inclusion(&factors, &mut probs);

    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let mut acc = rng.random::<f64>();
    let mut picked = Vec::with_capacity(n + 8);
    for &j in &order {
        acc += probs[j];
        if acc >= 1.0 {
            acc -= 1.0;
            picked.push(j);
        }
    }
    picked.truncate(n);
    if picked.len() < n {
        let mut taken = vec![false; m];
        picked.iter().for_each(|j| taken[*j] = true);
        let mut rest: Vec<usize> = order.iter().copied().filter(|j| !taken[*j]).collect();
        rest.sort_by(|a, b| probs[*b].total_cmp(&probs[*a]));
        picked.extend(rest.into_iter().take(n - picked.len()));
    }

    let mut counts = vec![vec![0usize; NUM_DEGREES]; NUM_ATTRIBUTES];
    let mut zs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for j in picked {
        let c = &cells[j * NUM_ATTRIBUTES..(j + 1) * NUM_ATTRIBUTES];
        for (i, k) in c.iter().enumerate() {
            counts[i][*k as usize] += 1;
        }
        zs.push(LatentCode(pool[j * d..(j + 1) * d].to_vec()));
        labels.push(FineGrainedLabel(c.to_vec()));
    }
    Ok((zs, labels, counts))
}

fn cosine_lr(cfg: &PredictorConfig, step: usize, total: usize) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    cfg.min_learning_rate
        + 0.5
            * (cfg.learning_rate - cfg.min_learning_rate)
            * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Trains a predictor on ground-truth degrees of toy renders and returns it
/// without applying the accuracy gate.
pub fn train_predictor_unchecked(
    world: &ToyWorld,
    n_samples: usize,
    seed: u64,
    role: PredictorRole,
    cfg: &PredictorConfig,
) -> Result<PredictorModel> {
    if n_samples < 1 {
        return Err(Error::InvalidArgument("n_samples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role.stream());
    let (h, w) = world.image_shape();
    let mut model = PredictorModel::new(h, w, cfg.channels, &mut rng);

    let (zs, labels, counts) =
        balanced_latents(world, n_samples, cfg.balance_pool_factor, &mut rng)?;
    let images: Vec<ImageTensor> = zs
        .iter()
        .map(|z| world.generate(z))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(cfg.learning_rate);
    let batches_per_epoch = n_samples.div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = model.zeros_like();
            let scale = 1.0 / (batch.len() * NUM_ATTRIBUTES) as f64;
            let mut pooled_rows = Array2::zeros((batch.len(), model.channels() * h));
            let mut traces = Vec::with_capacity(batch.len());
            for (r, &i) in batch.iter().enumerate() {
                let (p, t) = model.features(&images[i].pixels);
                pooled_rows
                    .row_mut(r)
                    .assign(&ndarray::ArrayView1::from(&p));
                traces.push(t);
            }
            let logits = model.head.forward(&pooled_rows);
            let mut glogits = Array2::zeros(logits.dim());
            for (r, &i) in batch.iter().enumerate() {
                let l = logits
                    .row(r)
                    .to_shape((NUM_ATTRIBUTES, NUM_DEGREES))
                    .expect("contiguous")
                    .to_owned();
                sum += cross_entropy_target(&l, &labels[i])? * scale;
                let g = cross_entropy_grad(&l, &labels[i])? * scale;
                glogits.row_mut(r).assign(
                    &g.to_shape(NUM_ATTRIBUTES * NUM_DEGREES)
                        .expect("contiguous"),
                );
            }
            let gpooled = model.head.backward(&pooled_rows, &glogits, &mut grad.head);
            for (r, t) in traces.iter().enumerate() {
                model.features_backward(
                    t,
                    gpooled.row(r).as_slice().expect("row-major"),
                    Some(&mut grad),
                );
            }
            adam.lr = cosine_lr(cfg, step, total);
            let grads: Vec<Vec<f64>> = grad
                .param_slices()
                .into_iter()
                .map(|s| s.to_vec())
                .collect();
            adam.step(
                model.params_mut(),
                grads.iter().map(|g| g.as_slice()).collect(),
            );
            step += 1;
        }
        let mean = sum / batches_per_epoch as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("predictor loss at epoch {epoch}")));
        }
        log::info!("predictor {role:?} epoch {epoch} loss {mean:.4}");
        epoch_loss.push(mean);
    }

    let accuracy = holdout_accuracy(world, &model, cfg.n_holdout, &mut rng)?;
    model.meta = PredictorMeta {
        schema_version: 1,
        role,
        seed,
        n_samples,
        config: cfg.clone(),
        height: h,
        width: w,
        accuracy,
        epoch_loss,
        class_counts: counts,
    };
    Ok(model)
}

/// Accuracy on fresh, unbalanced draws from the latent prior.
pub fn holdout_accuracy<R: Rng>(
    world: &ToyWorld,
    model: &dyn DegreeClassifier,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut correct = vec![0usize; NUM_ATTRIBUTES];
    for _ in 0..n {
        let z = world.sample_latent(rng);
        let truth = world.true_degrees(&z)?;
        let pred = model.predict_degrees(&world.generate(&z)?)?;
        for (i, c) in correct.iter_mut().enumerate() {
            *c += usize::from(pred.get(i) == truth[i]);
        }
    }
    Ok(correct
        .into_iter()
        .map(|c| c as f64 / n.max(1) as f64)
        .collect())
}

pub fn train_predictor(
    world: &ToyWorld,
    n_samples: usize,
    seed: u64,
    cfg: &PredictorConfig,
) -> Result<PredictorModel> {
    check_n(n_samples)?;
    let m = train_predictor_unchecked(world, n_samples, seed, PredictorRole::Train, cfg)?;
    m.check_gate()?;
    Ok(m)
}

/// Same recipe on a separate sample stream; the result must never feed field training.
pub fn train_eval_predictor(
    world: &ToyWorld,
    n_samples: usize,
    seed: u64,
    cfg: &PredictorConfig,
) -> Result<PredictorModel> {
    check_n(n_samples)?;
    let m = train_predictor_unchecked(world, n_samples, seed, PredictorRole::Eval, cfg)?;
    m.check_gate()?;
    Ok(m)
}

fn check_n(n: usize) -> Result<()> {
    if n < 1000 {
        return Err(Error::InvalidArgument(format!(
            "n_samples must be at least 1000, got {n}"
        )));
    }
    Ok(())
}

/// Mean of per-head softmax over a batch; used to inspect calibration.
pub fn mean_probabilities(
    model: &dyn DegreeClassifier,
    images: &[ImageTensor],
) -> Result<Array2<f64>> {
    let mut acc = Array2::zeros((NUM_ATTRIBUTES, NUM_DEGREES));
    for img in images {
        acc += &softmax_rows(&model.predict_logits(img)?);
    }
    Ok(acc / images.len().max(1) as f64)
}

/// Per-head log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let s = log_softmax(row.as_slice().expect("row-major"));
        row.iter_mut().zip(s).for_each(|(o, v)| *o = v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_five_ln_six() {
        let l = Array2::zeros((5, 6));
        let y = FineGrainedLabel::new(vec![0, 1, 2, 3, 4]).unwrap();
        assert!((cross_entropy_target(&l, &y).unwrap() - 5.0 * 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_validation() {
        assert!(FineGrainedLabel::new(vec![0; 4]).is_err());
        assert!(FineGrainedLabel::new(vec![0, 0, 0, 0, 6]).is_err());
        let l = FineGrainedLabel::new(vec![0; 5]).unwrap();
        assert_eq!(l.with(2, 5).unwrap().get(2), 5);
        assert!(l.with(7, 1).is_err());
    }

    #[test]
    fn logits_vjp_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = PredictorModel::new(8, 8, 3, &mut rng);
        let mut img = ImageTensor::zeros(8, 8);
        img.pixels.iter_mut().for_each(|p| *p = rng.random::<f64>());
        let y = FineGrainedLabel::new(vec![1, 2, 3, 4, 5]).unwrap();
        let (_, _, g) = m.cross_entropy_with_input_grad(&img, &y).unwrap();
        let f =
            |img: &ImageTensor| cross_entropy_target(&m.predict_logits(img).unwrap(), &y).unwrap();
        for idx in [0, 9, 27, 63] {
            let eps = 1e-6;
            let mut a = img.clone();
            a.pixels[idx] += eps;
            let mut b = img.clone();
            b.pixels[idx] -= eps;
            let fd = (f(&a) - f(&b)) / (2.0 * eps);
            assert!(
                (fd - g.pixels[idx]).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "{fd} vs {}",
                g.pixels[idx]
            );
        }
    }
}
