use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;

use super::{gaussian_vec, NamedTensor};
use crate::math::sigmoid;

/// Learnable token embedding table, `vocab × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: Array2<f64>,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        let data = gaussian_vec(rng, vocab * dim, 0.1);
        Self {
            table: Array2::from_shape_vec((vocab, dim), data).expect("shape"),
        }
    }

    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self {
            table: Array2::zeros((vocab, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn lookup(&self, ids: &[usize]) -> Array2<f64> {
        self.table.select(Axis(0), ids)
    }

    pub fn accumulate(&self, ids: &[usize], grad_rows: &Array2<f64>, grad: &mut Embedding) {
        for (row, &id) in ids.iter().enumerate() {
            let mut dst = grad.table.row_mut(id);
            dst += &grad_rows.row(row);
        }
    }

    pub(crate) fn named(&self, prefix: &str) -> NamedTensor<'_> {
        NamedTensor {
            name: format!("{prefix}.table"),
            shape: self.table.shape().to_vec(),
            data: self.table.as_slice().expect("standard layout"),
        }
    }

    pub(crate) fn slice_mut(&mut self) -> &mut [f64] {
        self.table.as_slice_mut().expect("standard layout")
    }
}

/// One recurrent layer with input, forget, cell and output gates
/// (gate order `[i, f, g, o]` in the stacked weight matrices).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `4H × in`
    pub w_ih: Array2<f64>,
    /// `4H × H`
    pub w_hh: Array2<f64>,
    pub bias: Array1<f64>,
}

struct StepCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// Activated gates, `B × 4H`.
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
}

/// Per-layer, per-step activations of a stacked forward pass.
pub struct LstmTrace {
    steps: Vec<Vec<StepCache>>,
    masks: Vec<Array1<f64>>,
}

impl LstmLayer {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let std = 1.0 / (hidden as f64).sqrt();
        let mut bias = Array1::zeros(4 * hidden);
        bias.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        Self {
            w_ih: Array2::from_shape_vec(
                (4 * hidden, input),
                gaussian_vec(rng, 4 * hidden * input, std),
            )
            .expect("shape"),
            w_hh: Array2::from_shape_vec(
                (4 * hidden, hidden),
                gaussian_vec(rng, 4 * hidden * hidden, std),
            )
            .expect("shape"),
            bias,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Array2::zeros((4 * hidden, input)),
            w_hh: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.ncols()
    }

    fn step(
        &self,
        x: &Array2<f64>,
        h: &Array2<f64>,
        c: &Array2<f64>,
        mask: &Array1<f64>,
    ) -> (Array2<f64>, Array2<f64>, StepCache) {
        let hd = self.hidden();
        let mut gates = x.dot(&self.w_ih.t()) + h.dot(&self.w_hh.t());
        gates += &self.bias;
        {
            let (mut ifg, mut o) = gates.view_mut().split_at(Axis(1), 3 * hd);
            let (mut i_f, mut g) = ifg.view_mut().split_at(Axis(1), 2 * hd);
            i_f.mapv_inplace(sigmoid);
            g.mapv_inplace(f64::tanh);
            o.mapv_inplace(sigmoid);
        }
        let i = gates.slice(s![.., 0..hd]);
        let f = gates.slice(s![.., hd..2 * hd]);
        let g = gates.slice(s![.., 2 * hd..3 * hd]);
        let o = gates.slice(s![.., 3 * hd..]);
        let c_new = &f * c + &i * &g;
        let tanh_c = c_new.mapv(f64::tanh);
        let h_new = &o * &tanh_c;
        let m = mask.view().insert_axis(Axis(1));
        let keep = m.mapv(|v| 1.0 - v);
        let c_out = &c_new * &m + c * &keep;
        let h_out = &h_new * &m + h * &keep;
        let cache = StepCache {
            x: x.clone(),
            h_prev: h.clone(),
            c_prev: c.clone(),
            gates,
            tanh_c,
        };
        (h_out, c_out, cache)
    }
}

/// Stacked recurrent encoder returning the top layer's final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

impl LstmStack {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| LstmLayer::new(if l == 0 { input } else { hidden }, hidden, rng))
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LstmLayer::zeros(l.input_dim(), l.hidden()))
                .collect(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden()
    }

    /// `inputs[t]` is `B × in`; `masks[t][b]` is 1 while sequence `b` is
    /// still running at step `t`, 0 afterwards.
    pub fn forward(
        &self,
        inputs: &[Array2<f64>],
        masks: &[Array1<f64>],
    ) -> (Array2<f64>, LstmTrace) {
        assert_eq!(inputs.len(), masks.len());
        assert!(!inputs.is_empty(), "empty sequence batch");
        let batch = inputs[0].nrows();
        let mut seq: Vec<Array2<f64>> = inputs.to_vec();
        let mut steps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let hd = layer.hidden();
            let mut h = Array2::zeros((batch, hd));
            let mut c = Array2::zeros((batch, hd));
            let mut caches = Vec::with_capacity(seq.len());
            let mut outputs = Vec::with_capacity(seq.len());
            for (x, m) in seq.iter().zip(masks) {
                let (h2, c2, cache) = layer.step(x, &h, &c, m);
                h = h2;
                c = c2;
                outputs.push(h.clone());
                caches.push(cache);
            }
            steps.push(caches);
            seq = outputs;
        }
        let last = seq.pop().expect("non-empty");
        (
            last,
            LstmTrace {
                steps,
                masks: masks.to_vec(),
            },
        )
    }

    /// Backpropagates `grad_final` (gradient of the top layer's final hidden
    /// state) through time. Returns per-step gradients for the inputs.
    pub fn backward(
        &self,
        trace: &LstmTrace,
        grad_final: &Array2<f64>,
        grad: &mut LstmStack,
    ) -> Vec<Array2<f64>> {
        let t_len = trace.masks.len();
        let batch = grad_final.nrows();
        // Gradient arriving at each step's output from the layer above.
        let mut upstream: Vec<Array2<f64>> = (0..t_len)
            .map(|_| Array2::zeros((batch, self.hidden())))
            .collect();
        upstream[t_len - 1] = grad_final.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let hd = layer.hidden();
            let g = &mut grad.layers[l];
            let mut dh_next: Array2<f64> = Array2::zeros((batch, hd));
            let mut dc_next: Array2<f64> = Array2::zeros((batch, hd));
            let mut dx_seq = vec![Array2::zeros((batch, layer.input_dim())); t_len];
            for t in (0..t_len).rev() {
                let cache = &trace.steps[l][t];
                let m = trace.masks[t].view().insert_axis(Axis(1));
                let keep = m.mapv(|v| 1.0 - v);
                let dh = &upstream[t] + &dh_next;
                let dh_new = &dh * &m;
                let dh_carry = &dh * &keep;
                let dc_new_in = &dc_next * &m;
                let dc_carry = &dc_next * &keep;

                let i = cache.gates.slice(s![.., 0..hd]);
                let f = cache.gates.slice(s![.., hd..2 * hd]);
                let gg = cache.gates.slice(s![.., 2 * hd..3 * hd]);
                let o = cache.gates.slice(s![.., 3 * hd..]);

                let d_o = &dh_new * &cache.tanh_c;
                let mut dc = dc_new_in;
                Zip::from(&mut dc)
                    .and(&dh_new)
                    .and(&o)
                    .and(&cache.tanh_c)
                    .for_each(|dc, &dh, &o, &tc| *dc += dh * o * (1.0 - tc * tc));
                let mut dz = Array2::zeros((batch, 4 * hd));
                {
                    let mut dzi = dz.slice_mut(s![.., 0..hd]);
                    Zip::from(&mut dzi)
                        .and(&dc)
                        .and(&gg)
                        .and(&i)
                        .for_each(|d, &dc, &g, &i| *d = dc * g * i * (1.0 - i));
                }
                {
                    let mut dzf = dz.slice_mut(s![.., hd..2 * hd]);
                    Zip::from(&mut dzf)
                        .and(&dc)
                        .and(&cache.c_prev)
                        .and(&f)
                        .for_each(|d, &dc, &cp, &f| *d = dc * cp * f * (1.0 - f));
                }
                {
                    let mut dzg = dz.slice_mut(s![.., 2 * hd..3 * hd]);
                    Zip::from(&mut dzg)
                        .and(&dc)
                        .and(&i)
                        .and(&gg)
                        .for_each(|d, &dc, &i, &g| *d = dc * i * (1.0 - g * g));
                }
                {
                    let mut dzo = dz.slice_mut(s![.., 3 * hd..]);
                    Zip::from(&mut dzo)
                        .and(&d_o)
                        .and(&o)
                        .for_each(|d, &dout, &o| *d = dout * o * (1.0 - o));
                }
                g.w_ih += &dz.t().dot(&cache.x);
                g.w_hh += &dz.t().dot(&cache.h_prev);
                g.bias += &dz.sum_axis(Axis(0));
                dx_seq[t] = dz.dot(&layer.w_ih);
                dh_next = dz.dot(&layer.w_hh) + dh_carry;
                dc_next = &dc * &f + dc_carry;
            }
            upstream = dx_seq;
        }
        upstream
    }

    pub(crate) fn named(&self, prefix: &str) -> Vec<NamedTensor<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| {
                [
                    NamedTensor {
                        name: format!("{prefix}.l{l}.w_ih"),
                        shape: layer.w_ih.shape().to_vec(),
                        data: layer.w_ih.as_slice().expect("layout"),
                    },
                    NamedTensor {
                        name: format!("{prefix}.l{l}.w_hh"),
                        shape: layer.w_hh.shape().to_vec(),
                        data: layer.w_hh.as_slice().expect("layout"),
                    },
                    NamedTensor {
                        name: format!("{prefix}.l{l}.bias"),
                        shape: vec![layer.bias.len()],
                        data: layer.bias.as_slice().expect("layout"),
                    },
                ]
            })
            .collect()
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|layer| {
                [
                    layer.w_ih.as_slice_mut().expect("layout"),
                    layer.w_hh.as_slice_mut().expect("layout"),
                    layer.bias.as_slice_mut().expect("layout"),
                ]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat(stack: &LstmStack) -> Vec<f64> {
        stack
            .named("s")
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    fn set(stack: &mut LstmStack, mut idx: usize, value: f64) {
        for p in stack.slices_mut() {
            if idx < p.len() {
                p[idx] = value;
                return;
            }
            idx -= p.len();
        }
    }

    #[test]
    fn bptt_matches_finite_differences_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let stack = LstmStack::new(3, 4, 2, &mut rng);
        let inputs: Vec<Array2<f64>> = (0..4)
            .map(|_| Array2::from_shape_vec((2, 3), gaussian_vec(&mut rng, 6, 1.0)).unwrap())
            .collect();
        // second sequence has length 2
        let masks: Vec<Array1<f64>> = (0..4)
            .map(|t| Array1::from(vec![1.0, if t < 2 { 1.0 } else { 0.0 }]))
            .collect();
        let coef = Array2::from_shape_vec((2, 4), gaussian_vec(&mut rng, 8, 1.0)).unwrap();
        let loss = |s: &LstmStack, xs: &[Array2<f64>]| (s.forward(xs, &masks).0 * &coef).sum();

        let (_, trace) = stack.forward(&inputs, &masks);
        let mut grad = stack.zeros_like();
        let dx = stack.backward(&trace, &coef, &mut grad);
        let analytic = flat(&grad);
        let base = flat(&stack);
        let eps = 1e-6;
        for idx in (0..base.len()).step_by(3) {
            let mut p = stack.clone();
            set(&mut p, idx, base[idx] + eps);
            let mut m = stack.clone();
            set(&mut m, idx, base[idx] - eps);
            let fd = (loss(&p, &inputs) - loss(&m, &inputs)) / (2.0 * eps);
            assert!(
                (fd - analytic[idx]).abs() < 1e-7,
                "param {idx}: {fd} vs {}",
                analytic[idx]
            );
        }
        for t in 0..4 {
            for j in 0..3 {
                let mut xp = inputs.clone();
                xp[t][[1, j]] += eps;
                let mut xm = inputs.clone();
                xm[t][[1, j]] -= eps;
                let fd = (loss(&stack, &xp) - loss(&stack, &xm)) / (2.0 * eps);
                assert!((fd - dx[t][[1, j]]).abs() < 1e-7);
            }
        }
        // padded steps of the short sequence receive no gradient
        assert!(dx[3].row(1).iter().all(|v| *v == 0.0));
    }
}
