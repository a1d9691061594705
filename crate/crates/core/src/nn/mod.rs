//! Minimal dense building blocks with hand-written backward passes.
//!
//! Everything runs in `f64` on the CPU. Each trainable model implements
//! [`Params`] so the optimizer and the checkpoint writer can walk its
//! tensors in a fixed order.

mod adam;
mod conv;
mod linear;
mod lstm;
mod mlp;

pub use adam::Adam;
pub use conv::Conv3x3;
pub use linear::Linear;
pub use lstm::{Embedding, LstmLayer, LstmStack, LstmTrace};
pub use mlp::{Mlp, MlpTrace};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A named parameter tensor as seen by checkpoints.
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub trait Params {
    /// All tensors in a stable order, with names and shapes.
    fn named_params(&self) -> Vec<NamedTensor<'_>>;
    /// Mutable views in the same order as [`Params::named_params`].
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_slices(&self) -> Vec<&[f64]> {
        self.named_params().into_iter().map(|t| t.data).collect()
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|t| t.data.len()).sum()
    }

    fn zero_(&mut self) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Flattened copy of every parameter, in order.
    fn flat_params(&self) -> Vec<f64> {
        self.named_params()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }
}

pub(crate) fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x * std
        })
        .collect()
}

pub(crate) fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub(crate) fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}
