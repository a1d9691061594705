use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    degree_of_score, AttributeSchema, Backend, Discriminator, IdentityMapping, ImageTensor,
    LatentCode, MappingHook, MAX_SCORE, NUM_ATTRIBUTES,
};
use crate::math::sigmoid;
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Rows `[row_start, row_end)` occupied by one attribute bar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandLayout {
    pub row_start: usize,
    pub row_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFieldKind {
    /// `S_i(z) = 2.5 (1 + tanh(<w_i, tanh(A_i z)>))`.
    TanhMlp,
    /// `S_i(z) = clamp(2.5 + <w_i, z>, 0, 5)`; used to check linear baselines.
    PlantedLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingHookKind {
    Identity,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorldConfig {
    pub version: u32,
    pub seed: u64,
    pub latent_dim: usize,
    pub height: usize,
    pub width: usize,
    pub bands: Vec<BandLayout>,
    /// Rows of each `A_i`.
    pub hidden_units: usize,
    /// Scale applied to `A_i` entries on top of `1/sqrt(d)`.
    pub score_gain: f64,
    /// Scale applied to `w_i` entries on top of `1/sqrt(m)`.
    pub readout_gain: f64,
    /// Norm of the planted linear directions.
    pub planted_norm: f64,
    /// Dimension of the latent subspace that drives the background texture.
    pub identity_rank: usize,
    pub embed_dim: usize,
    /// Bar-edge sigmoid temperature as a fraction of image width.
    pub ramp_temperature: f64,
    pub score_field: ScoreFieldKind,
    pub mapping_hook: MappingHookKind,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 7,
            latent_dim: 16,
            height: 32,
            width: 32,
            bands: (0..NUM_ATTRIBUTES)
                .map(|i| BandLayout {
                    row_start: 2 + 5 * i,
                    row_end: 5 + 5 * i,
                })
                .collect(),
            hidden_units: 8,
            score_gain: 1.0,
            readout_gain: 2.0,
            planted_norm: 1.25,
            identity_rank: 16,
            embed_dim: 64,
            ramp_temperature: 0.05,
            score_field: ScoreFieldKind::TanhMlp,
            mapping_hook: MappingHookKind::Identity,
        }
    }
}

impl ToyWorldConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "unsupported backend config version {}",
                self.version
            ));
        }
        if self.latent_dim == 0 || self.hidden_units == 0 || self.embed_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.identity_rank > self.latent_dim {
            return bad("identity_rank exceeds latent_dim".into());
        }
        if self.bands.len() != NUM_ATTRIBUTES {
            return bad(format!(
                "expected {NUM_ATTRIBUTES} bands, got {}",
                self.bands.len()
            ));
        }
        let mut covered = vec![false; self.height];
        for b in &self.bands {
            if b.row_start >= b.row_end || b.row_end > self.height {
                return bad(format!("band {b:?} outside image"));
            }
            for c in &mut covered[b.row_start..b.row_end] {
                if *c {
                    return bad("bands overlap".into());
                }
                *c = true;
            }
        }
        if covered.iter().all(|c| *c) {
            return bad("no background rows left for identity texture".into());
        }
        if !(self.ramp_temperature > 0.0) || self.width == 0 {
            return bad("ramp temperature and width must be positive".into());
        }
        Ok(())
    }
}

/// Fixed random tensors, drawn from the config seed in a fixed order.
#[derive(Debug, Clone)]
pub struct ToyWorldParams {
    /// `A_i`, each `m x d`.
    pub score_weights: Vec<Array2<f64>>,
    /// `w_i`, each length `m`.
    pub readout: Vec<Array1<f64>>,
    /// Planted linear directions, each length `d`.
    pub planted: Vec<Array1<f64>>,
    /// `r x d` with orthonormal rows.
    pub identity_basis: Array2<f64>,
    /// `n_bg x r`.
    pub nuisance_projection: Array2<f64>,
    /// `embed_dim x n_bg`.
    pub embedding: Array2<f64>,
}

impl ToyWorldParams {
    fn draw(cfg: &ToyWorldConfig, n_background: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.latent_dim;
        let m = cfg.hidden_units;
        let a_scale = cfg.score_gain / (d as f64).sqrt();
        let w_scale = cfg.readout_gain / (m as f64).sqrt();
        let score_weights = (0..NUM_ATTRIBUTES)
            .map(|_| gaussian_matrix(&mut rng, m, d, a_scale))
            .collect();
        let readout = (0..NUM_ATTRIBUTES)
            .map(|_| gaussian_matrix(&mut rng, 1, m, w_scale).row(0).to_owned())
            .collect();
        let identity_basis = orthonormal_rows(gaussian_matrix(&mut rng, cfg.identity_rank, d, 1.0));
        let nuisance_projection = gaussian_matrix(&mut rng, n_background, cfg.identity_rank, 1.0);
        let embedding = gaussian_matrix(
            &mut rng,
            cfg.embed_dim,
            n_background,
            1.0 / (n_background as f64).sqrt(),
        );
        let planted = (0..NUM_ATTRIBUTES)
            .map(|_| {
                let v = gaussian_matrix(&mut rng, 1, d, 1.0).row(0).to_owned();
                let n = v.dot(&v).sqrt();
                v * (cfg.planted_norm / n)
            })
            .collect();
        Self {
            score_weights,
            readout,
            planted,
            identity_basis,
            nuisance_projection,
            embedding,
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let x: f64 = StandardNormal.sample(rng);
        x * scale
    })
}

/// Gram-Schmidt on the rows.
fn orthonormal_rows(mut m: Array2<f64>) -> Array2<f64> {
    for i in 0..m.nrows() {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let n = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / n);
    }
    m
}

/// The analytic backend: one horizontal bar per attribute whose filled width
/// tracks `S_i(z) / 5`, over a background texture driven by a low-rank
/// projection of `z`.
#[derive(Clone)]
pub struct ToyWorld {
    config: ToyWorldConfig,
    params: ToyWorldParams,
    schema: AttributeSchema,
    background_rows: Vec<usize>,
    hook: Option<Arc<dyn MappingHook>>,
    discriminator: Option<Arc<dyn Discriminator>>,
}

impl std::fmt::Debug for ToyWorld {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyWorld")
            .field("config", &self.config)
            .field("has_hook", &self.hook.is_some())
            .field("has_discriminator", &self.discriminator.is_some())
            .finish()
    }
}

impl ToyWorld {
    pub fn new(config: ToyWorldConfig) -> Result<Self> {
        config.validate()?;
        let background_rows: Vec<usize> = (0..config.height)
            .filter(|r| {
                !config
                    .bands
                    .iter()
                    .any(|b| (b.row_start..b.row_end).contains(r))
            })
            .collect();
        let params = ToyWorldParams::draw(&config, background_rows.len() * config.width);
        let hook: Option<Arc<dyn MappingHook>> = match config.mapping_hook {
            MappingHookKind::Identity => Some(Arc::new(IdentityMapping)),
            MappingHookKind::Absent => None,
        };
        Ok(Self {
            config,
            params,
            schema: AttributeSchema::default(),
            background_rows,
            hook,
            discriminator: None,
        })
    }

    pub fn with_seed(seed: u64) -> Result<Self> {
        Self::new(ToyWorldConfig::with_seed(seed))
    }

    /// Replaces the mapping hook; `None` makes the regularized step unsupported.
    pub fn with_mapping_hook(mut self, hook: Option<Arc<dyn MappingHook>>) -> Self {
        self.hook = hook;
        self
    }

    pub fn with_discriminator(mut self, disc: Arc<dyn Discriminator>) -> Self {
        self.discriminator = Some(disc);
        self
    }

    pub fn config(&self) -> &ToyWorldConfig {
        &self.config
    }

    pub fn params(&self) -> &ToyWorldParams {
        &self.params
    }

    pub fn background_rows(&self) -> &[usize] {
        &self.background_rows
    }

    fn n_background(&self) -> usize {
        self.background_rows.len() * self.config.width
    }

    fn tau(&self) -> f64 {
        self.config.ramp_temperature * self.config.width as f64
    }

    fn check_attr(attribute: usize) -> Result<()> {
        if attribute >= NUM_ATTRIBUTES {
            return Err(Error::AttributeOutOfRange(attribute));
        }
        Ok(())
    }

    pub fn toy_score(&self, z: &LatentCode, attribute: usize) -> Result<f64> {
        Self::check_attr(attribute)?;
        z.check_len(self.config.latent_dim)?;
        Ok(self.score_unchecked(z.as_slice(), attribute))
    }

    pub fn toy_score_gradient(&self, z: &LatentCode, attribute: usize) -> Result<Vec<f64>> {
        Self::check_attr(attribute)?;
        z.check_len(self.config.latent_dim)?;
        Ok(self.score_grad_unchecked(z.as_slice(), attribute))
    }

    pub fn scores(&self, z: &LatentCode) -> Result<Vec<f64>> {
        z.check_len(self.config.latent_dim)?;
        Ok((0..NUM_ATTRIBUTES)
            .map(|i| self.score_unchecked(z.as_slice(), i))
            .collect())
    }

    /// Ground-truth degrees from the score functions.
    pub fn true_degrees(&self, z: &LatentCode) -> Result<Vec<u8>> {
        Ok(self.scores(z)?.into_iter().map(degree_of_score).collect())
    }

    /// Allocation-free degree of one attribute, for rejection sampling loops.
    pub fn degree_of(&self, z: &[f64], attribute: usize) -> u8 {
        degree_of_score(self.score_unchecked(z, attribute))
    }

    fn score_unchecked(&self, z: &[f64], i: usize) -> f64 {
        let z = ArrayView1::from(z);
        match self.config.score_field {
            ScoreFieldKind::TanhMlp => {
                let a = self.params.score_weights[i]
                    .as_slice()
                    .expect("standard layout");
                let d = z.len();
                let u: f64 = a
                    .chunks_exact(d)
                    .zip(self.params.readout[i].iter())
                    .map(|(row, w)| {
                        w * row
                            .iter()
                            .zip(z.iter())
                            .map(|(p, q)| p * q)
                            .sum::<f64>()
                            .tanh()
                    })
                    .sum();
                0.5 * MAX_SCORE * (1.0 + u.tanh())
            }
            ScoreFieldKind::PlantedLinear => {
                (0.5 * MAX_SCORE + self.params.planted[i].dot(&z)).clamp(0.0, MAX_SCORE)
            }
        }
    }

    fn score_grad_unchecked(&self, z: &[f64], i: usize) -> Vec<f64> {
        let zv = ArrayView1::from(z);
        match self.config.score_field {
            ScoreFieldKind::TanhMlp => {
                let a = &self.params.score_weights[i];
                let h = a.dot(&zv).mapv(f64::tanh);
                let t = h.dot(&self.params.readout[i]).tanh();
                let outer = 0.5 * MAX_SCORE * (1.0 - t * t);
                let inner: Array1<f64> = h
                    .iter()
                    .zip(self.params.readout[i].iter())
                    .map(|(h, w)| outer * w * (1.0 - h * h))
                    .collect();
                a.t().dot(&inner).to_vec()
            }
            ScoreFieldKind::PlantedLinear => {
                let s = 0.5 * MAX_SCORE + self.params.planted[i].dot(&zv);
                if s > 0.0 && s < MAX_SCORE {
                    self.params.planted[i].to_vec()
                } else {
                    vec![0.0; z.len()]
                }
            }
        }
    }

    fn ramp_arg(&self, score: f64, x: usize) -> f64 {
        let w = self.config.width as f64;
        (score / MAX_SCORE * w - (x as f64 + 0.5)) / self.tau()
    }

    /// Pre-sigmoid background texture `N U z`.
    fn texture_logits(&self, z: &[f64]) -> Array1<f64> {
        let u = self.params.identity_basis.dot(&ArrayView1::from(z));
        self.params.nuisance_projection.dot(&u)
    }

    fn background_pixels(&self, image: &ImageTensor) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_background());
        for &r in &self.background_rows {
            out.extend_from_slice(image.row(r));
        }
        out
    }
}

impl Backend for ToyWorld {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn image_shape(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    fn generate(&self, z: &LatentCode) -> Result<ImageTensor> {
        z.check_len(self.config.latent_dim)?;
        let mut img = ImageTensor::zeros(self.config.height, self.config.width);
        for (i, band) in self.config.bands.iter().enumerate() {
            let s = self.score_unchecked(z.as_slice(), i);
            let ramp: Vec<f64> = (0..self.config.width)
                .map(|x| sigmoid(self.ramp_arg(s, x)))
                .collect();
            for r in band.row_start..band.row_end {
                img.row_mut(r).copy_from_slice(&ramp);
            }
        }
        let tex = self.texture_logits(z.as_slice());
        let w = self.config.width;
        for (k, &r) in self.background_rows.iter().enumerate() {
            for (x, p) in img.row_mut(r).iter_mut().enumerate() {
                *p = sigmoid(tex[k * w + x]);
            }
        }
        Ok(img)
    }

    fn generate_vjp(&self, z: &LatentCode, grad: &ImageTensor) -> Result<Vec<f64>> {
        z.check_len(self.config.latent_dim)?;
        grad.check_shape(self.image_shape())?;
        let zs = z.as_slice();
        let d = self.config.latent_dim;
        let dscale = self.config.width as f64 / (MAX_SCORE * self.tau());
        let mut out = vec![0.0; d];
        for (i, band) in self.config.bands.iter().enumerate() {
            let s = self.score_unchecked(zs, i);
            let mut ds = 0.0;
            for x in 0..self.config.width {
                let sg = sigmoid(self.ramp_arg(s, x));
                let dpix = sg * (1.0 - sg) * dscale;
                for r in band.row_start..band.row_end {
                    ds += grad.get(r, x) * dpix;
                }
            }
            if ds != 0.0 {
                for (o, g) in out.iter_mut().zip(self.score_grad_unchecked(zs, i)) {
                    *o += ds * g;
                }
            }
        }
        let tex = self.texture_logits(zs);
        let g_bg: Array1<f64> = self
            .background_pixels(grad)
            .iter()
            .zip(tex.iter())
            .map(|(g, t)| {
                let s = sigmoid(*t);
                g * s * (1.0 - s)
            })
            .collect();
        let g_u = self.params.nuisance_projection.t().dot(&g_bg);
        let g_z = self.params.identity_basis.t().dot(&g_u);
        for (o, g) in out.iter_mut().zip(g_z.iter()) {
            *o += g;
        }
        Ok(out)
    }

    fn identity_embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        image.check_shape(self.image_shape())?;
        let bg = Array1::from(self.background_pixels(image));
        Ok(self.params.embedding.dot(&bg).to_vec())
    }

    fn identity_embed_vjp(&self, grad: &[f64]) -> Result<ImageTensor> {
        if grad.len() != self.config.embed_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.embed_dim,
                actual: grad.len(),
            });
        }
        let g_bg = self.params.embedding.t().dot(&ArrayView1::from(grad));
        let mut img = ImageTensor::zeros(self.config.height, self.config.width);
        let w = self.config.width;
        for (k, &r) in self.background_rows.iter().enumerate() {
            img.row_mut(r)
                .copy_from_slice(&g_bg.as_slice().unwrap()[k * w..(k + 1) * w]);
        }
        Ok(img)
    }

    fn discriminator(&self) -> Option<&dyn Discriminator> {
        self.discriminator.as_deref()
    }

    fn mapping_hook(&self) -> Option<&dyn MappingHook> {
        self.hook.as_deref()
    }

    fn sample_latent(&self, rng: &mut dyn RngCore) -> LatentCode {
        LatentCode(
            (0..self.config.latent_dim)
                .map(|_| StandardNormal.sample(&mut *rng))
                .collect(),
        )
    }
}

/// Reads scores back off a rendered toy image by inverting the bar-edge ramp.
///
/// Acts as a perfect attribute predictor for tests that should not depend on a
/// trained classifier.
#[derive(Debug, Clone)]
pub struct BarReader {
    bands: Vec<BandLayout>,
    width: usize,
    tau: f64,
    shape: (usize, usize),
}

impl BarReader {
    pub fn new(world: &ToyWorld) -> Self {
        Self {
            bands: world.config.bands.clone(),
            width: world.config.width,
            tau: world.tau(),
            shape: world.image_shape(),
        }
    }

    pub fn measure_scores(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        image.check_shape(self.shape)?;
        Ok(self
            .bands
            .iter()
            .map(|b| {
                let row = image.row((b.row_start + b.row_end) / 2);
                let (x, v) = row
                    .iter()
                    .copied()
                    .enumerate()
                    .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()))
                    .expect("nonempty row");
                let v = v.clamp(1e-15, 1.0 - 1e-15);
                let edge = x as f64 + 0.5 + self.tau * (v / (1.0 - v)).ln();
                edge / self.width as f64 * MAX_SCORE
            })
            .collect())
    }

    pub fn measure_degrees(&self, image: &ImageTensor) -> Result<Vec<u8>> {
        Ok(self
            .measure_scores(image)?
            .into_iter()
            .map(degree_of_score)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> ToyWorld {
        ToyWorld::with_seed(7).unwrap()
    }

    #[test]
    fn zero_latent_scores_midpoint() {
        let w = world();
        let z = LatentCode::zeros(16);
        for i in 0..NUM_ATTRIBUTES {
            assert!((w.toy_score(&z, i).unwrap() - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_at_zero_is_scaled_readout() {
        let w = world();
        let z = LatentCode::zeros(16);
        for i in 0..NUM_ATTRIBUTES {
            let g = w.toy_score_gradient(&z, i).unwrap();
            let p = &w.params().score_weights[i];
            let expect = p.t().dot(&w.params().readout[i]) * 2.5;
            for (a, b) in g.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identity_basis_is_orthonormal() {
        let w = world();
        let u = &w.params().identity_basis;
        let gram = u.dot(&u.t());
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation_rejects_overlap_and_version() {
        let mut c = ToyWorldConfig::default();
        c.bands[1].row_start = 3;
        assert!(c.validate().is_err());
        let c = ToyWorldConfig {
            version: 99,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let json = ToyWorldConfig::default().to_json().unwrap();
        assert_eq!(
            ToyWorldConfig::from_json(&json).unwrap(),
            ToyWorldConfig::default()
        );
    }

    #[test]
    fn seventeen_background_rows_by_default() {
        assert_eq!(world().background_rows().len(), 17);
    }
}
