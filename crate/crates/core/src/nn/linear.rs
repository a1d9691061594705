use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{gaussian_vec, NamedTensor, Params};

/// Fully-connected layer, `y = x Wᵀ + b`, operating on row-major batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Gaussian weights with the given standard deviation, zero bias.
    pub fn gaussian<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        let w = gaussian_vec(rng, input * output, std);
        Self {
            weight: Array2::from_shape_vec((output, input), w).expect("shape"),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        grad_out: &Array2<f64>,
        grad: &mut Linear,
    ) -> Array2<f64> {
        grad.weight += &grad_out.t().dot(x);
        grad.bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight)
    }

    /// Same as [`Linear::backward`] without touching parameter gradients.
    pub fn backward_input(&self, grad_out: &Array2<f64>) -> Array2<f64> {
        grad_out.dot(&self.weight)
    }

    pub(crate) fn named(&self, prefix: &str) -> [NamedTensor<'_>; 2] {
        [
            NamedTensor {
                name: format!("{prefix}.weight"),
                shape: self.weight.shape().to_vec(),
                data: self.weight.as_slice().expect("standard layout"),
            },
            NamedTensor {
                name: format!("{prefix}.bias"),
                shape: vec![self.bias.len()],
                data: self.bias.as_slice().expect("standard layout"),
            },
        ]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

impl Params for Linear {
    fn named_params(&self) -> Vec<NamedTensor<'_>> {
        self.named("linear").into_iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.slices_mut().into_iter().collect()
    }
}
