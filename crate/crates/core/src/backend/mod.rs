//! Generator backends.
//!
//! A [`Backend`] turns latent codes into images and exposes the derivatives the
//! field trainer needs. [`ToyWorld`] is the analytic backend used everywhere in
//! this crate: attribute intensities are explicit score functions of `z`, so the
//! true editing direction at every point is known.

mod image;
mod toy;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use image::ImageTensor;
pub use toy::{BandLayout, BarReader, ScoreFieldKind, ToyWorld, ToyWorldConfig, ToyWorldParams};

pub const NUM_ATTRIBUTES: usize = 5;
pub const NUM_DEGREES: usize = 6;
pub const MAX_DEGREE: u8 = 5;
pub const MAX_SCORE: f64 = 5.0;

/// The five edited attributes, in schema order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Bangs,
    Eyeglasses,
    Beard,
    Smiling,
    Young,
}

impl Attribute {
    pub const ALL: [Attribute; NUM_ATTRIBUTES] = [
        Attribute::Bangs,
        Attribute::Eyeglasses,
        Attribute::Beard,
        Attribute::Smiling,
        Attribute::Young,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or(Error::AttributeOutOfRange(i))
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Bangs => "bangs",
            Attribute::Eyeglasses => "eyeglasses",
            Attribute::Beard => "beard",
            Attribute::Smiling => "smiling",
            Attribute::Young => "young",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }
}

impl std::fmt::Display for Attribute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub names: Vec<String>,
    pub degrees_per_attribute: usize,
}

impl Default for AttributeSchema {
    fn default() -> Self {
        Self {
            names: Attribute::ALL
                .iter()
                .map(|a| a.name().to_string())
                .collect(),
            degrees_per_attribute: NUM_DEGREES,
        }
    }
}

impl AttributeSchema {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_len(&self, d: usize) -> Result<()> {
        if self.0.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: self.0.len(),
            });
        }
        Ok(())
    }
}

impl From<Vec<f64>> for LatentCode {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Degree bin of a continuous score: six equal-width bins over `[0, 5]`.
pub fn degree_of_score(score: f64) -> u8 {
    let c = (score * NUM_DEGREES as f64 / MAX_SCORE).floor();
    c.clamp(0.0, MAX_DEGREE as f64) as u8
}

/// Realness critic over images. `L_disc = -score(I')`.
pub trait Discriminator: Send + Sync {
    fn score(&self, image: &ImageTensor) -> f64;
    fn score_grad(&self, image: &ImageTensor) -> ImageTensor;
}

/// Latent-space mapping `M` used by the regularized step `z + a(M(f) - M(0))`.
pub trait MappingHook: Send + Sync {
    fn map(&self, v: &[f64]) -> Vec<f64>;
}

pub struct IdentityMapping;

impl MappingHook for IdentityMapping {
    fn map(&self, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }
}

/// `M(v) = B v + c`.
pub struct AffineMapping {
    pub matrix: ndarray::Array2<f64>,
    pub offset: Vec<f64>,
}

impl MappingHook for AffineMapping {
    fn map(&self, v: &[f64]) -> Vec<f64> {
        let out = self.matrix.dot(&ndarray::ArrayView1::from(v));
        out.iter().zip(&self.offset).map(|(a, b)| a + b).collect()
    }
}

pub trait Backend: Send + Sync {
    fn latent_dim(&self) -> usize;

    /// `(height, width)`.
    fn image_shape(&self) -> (usize, usize);

    fn schema(&self) -> &AttributeSchema;

    fn generate(&self, z: &LatentCode) -> Result<ImageTensor>;

    /// Vector-Jacobian product of `generate` at `z` against the image cotangent `grad`.
    fn generate_vjp(&self, z: &LatentCode, grad: &ImageTensor) -> Result<Vec<f64>>;

    fn identity_embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;

    /// Image-space gradient of `<grad, identity_embed(I)>`.
    fn identity_embed_vjp(&self, grad: &[f64]) -> Result<ImageTensor>;

    fn discriminator(&self) -> Option<&dyn Discriminator> {
        None
    }

    fn mapping_hook(&self) -> Option<&dyn MappingHook> {
        None
    }

    fn sample_latent(&self, rng: &mut dyn RngCore) -> LatentCode;
}
