use ndarray::Array2;
use rand::Rng;

use super::{leaky_relu, leaky_relu_grad, Linear, NamedTensor, Params};

/// Stack of fully-connected layers with leaky-rectified hidden activations
/// and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub negative_slope: f64,
}

/// Activations kept from a forward pass for the backward pass.
pub struct MlpTrace {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each hidden layer.
    preacts: Vec<Array2<f64>>,
}

impl Mlp {
    /// He-initialised network for the given layer widths
    /// (`widths[0]` is the input size, the last entry the output size).
    /// The output layer is scaled by `output_gain`.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        negative_slope: f64,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "need at least one layer");
        let gain = (2.0 / (1.0 + negative_slope * negative_slope)).sqrt();
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let std = gain / (widths[i] as f64).sqrt();
                let mut layer = Linear::gaussian(widths[i], widths[i + 1], std, rng);
                if i == n - 1 {
                    layer.weight *= output_gain;
                }
                layer
            })
            .collect();
        Self {
            layers,
            negative_slope,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            negative_slope: self.negative_slope,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                let s = self.negative_slope;
                h.mapv_inplace(|v| leaky_relu(v, s));
            }
        }
        h
    }

    pub fn forward_trace(&self, x: &Array2<f64>) -> (Array2<f64>, MlpTrace) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h);
            inputs.push(h);
            if i < last {
                let s = self.negative_slope;
                h = y.mapv(|v| leaky_relu(v, s));
                preacts.push(y);
            } else {
                h = y;
            }
        }
        (h, MlpTrace { inputs, preacts })
    }

    /// Accumulates parameter gradients into `grad` for upstream `grad_out`
    /// and returns `∂L/∂x`.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        grad_out: &Array2<f64>,
        grad: &mut Mlp,
    ) -> Array2<f64> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                let s = self.negative_slope;
                g.zip_mut_with(&trace.preacts[i], |gv, &p| *gv *= leaky_relu_grad(p, s));
            }
            g = self.layers[i].backward(&trace.inputs[i], &g, &mut grad.layers[i]);
        }
        g
    }
}

impl Params for Mlp {
    fn named_params(&self) -> Vec<NamedTensor<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.named(&format!("fc{i}")))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.slices_mut())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[4, 7, 7, 3], 0.2, 1.0, &mut rng);
        let x = Array2::from_shape_vec((2, 4), vec![0.3, -1.0, 0.7, 0.1, -0.4, 0.2, 0.9, -1.3])
            .unwrap();
        let c = Array2::from_shape_vec((2, 3), vec![1.0, -0.5, 0.25, 2.0, 0.1, -1.0]).unwrap();
        let loss = |n: &Mlp| (n.forward(&x) * &c).sum();
        let (_, trace) = net.forward_trace(&x);
        let mut grad = net.zeros_like();
        net.backward(&trace, &c, &mut grad);
        let analytic = grad.flat_params();
        let base = net.flat_params();
        let eps = 1e-6;
        for idx in (0..base.len()).step_by(5) {
            let mut plus = net.clone();
            let mut minus = net.clone();
            set_flat(&mut plus, idx, base[idx] + eps);
            set_flat(&mut minus, idx, base[idx] - eps);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            assert!(
                (fd - analytic[idx]).abs() < 1e-6,
                "param {idx}: fd {fd} vs {}",
                analytic[idx]
            );
        }
    }

    fn set_flat(net: &mut Mlp, mut idx: usize, value: f64) {
        for p in net.params_mut() {
            if idx < p.len() {
                p[idx] = value;
                return;
            }
            idx -= p.len();
        }
    }

    #[test]
    fn forward_and_traced_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 5, 2], 0.2, 1.0, &mut rng);
        let x = Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(net.forward(&x), net.forward_trace(&x).0);
    }
}
