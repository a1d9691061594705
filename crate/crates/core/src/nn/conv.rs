use rand::Rng;

use super::{gaussian_vec, NamedTensor};

/// 3×3 convolution, stride 1, zero padding 1, on a single `C×H×W` image
/// stored row-major in a flat slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out × in × 3 × 3`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn he<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let std = (2.0 / (in_channels as f64 * 9.0)).sqrt();
        Self {
            in_channels,
            out_channels,
            weight: gaussian_vec(rng, out_channels * in_channels * 9, std),
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }

    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.in_channels * h * w);
        let mut out = vec![0.0; self.out_channels * h * w];
        for o in 0..self.out_channels {
            let plane = &mut out[o * h * w..(o + 1) * h * w];
            plane.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_channels {
                let src = &input[i * h * w..(i + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = self.w(o, i, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let (x0, x1) = col_range(kx, w);
                            let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst_row = &mut plane[y * w..(y + 1) * w];
                            let sx0 = x0 + kx - 1;
                            for (d, s) in dst_row[x0..x1]
                                .iter_mut()
                                .zip(&src_row[sx0..sx0 + (x1 - x0)])
                            {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns `∂L/∂input`; accumulates weight gradients into `grad` when given.
    pub fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        h: usize,
        w: usize,
        mut grad: Option<&mut Conv3x3>,
    ) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.in_channels * h * w];
        for o in 0..self.out_channels {
            let gplane = &grad_out[o * h * w..(o + 1) * h * w];
            if let Some(g) = grad.as_deref_mut() {
                g.bias[o] += gplane.iter().sum::<f64>();
            }
            for i in 0..self.in_channels {
                let src = &input[i * h * w..(i + 1) * h * w];
                let dst = &mut grad_in[i * h * w..(i + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = self.w(o, i, ky, kx);
                        let (x0, x1) = col_range(kx, w);
                        let sx0 = x0 + kx - 1;
                        let mut gw = 0.0;
                        for y in 0..h {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let g_row = &gplane[y * w + x0..y * w + x1];
                            let s_row = &src[iy * w + sx0..iy * w + sx0 + (x1 - x0)];
                            gw += g_row.iter().zip(s_row).map(|(a, b)| a * b).sum::<f64>();
                            let d_row = &mut dst[iy * w + sx0..iy * w + sx0 + (x1 - x0)];
                            for (d, g) in d_row.iter_mut().zip(g_row) {
                                *d += wv * g;
                            }
                        }
                        if let Some(g) = grad.as_deref_mut() {
                            g.weight[((o * self.in_channels + i) * 3 + ky) * 3 + kx] += gw;
                        }
                    }
                }
            }
        }
        grad_in
    }

    pub(crate) fn named(&self, prefix: &str) -> [NamedTensor<'_>; 2] {
        [
            NamedTensor {
                name: format!("{prefix}.weight"),
                shape: vec![self.out_channels, self.in_channels, 3, 3],
                data: &self.weight,
            },
            NamedTensor {
                name: format!("{prefix}.bias"),
                shape: vec![self.out_channels],
                data: &self.bias,
            },
        ]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Output columns `[x0, x1)` whose tap `kx` lands inside the image.
#[inline]
fn col_range(kx: usize, w: usize) -> (usize, usize) {
    match kx {
        0 => (1, w),
        1 => (0, w),
        _ => (0, w - 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_forward(c: &Conv3x3, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; c.out_channels * h * w];
        for o in 0..c.out_channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = c.bias[o];
                    for i in 0..c.in_channels {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = x as isize + kx as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += c.w(o, i, ky, kx)
                                        * input[(i * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv3x3::he(2, 3, &mut rng);
        conv.bias = vec![0.1, -0.2, 0.3];
        let input = gaussian_vec(&mut rng, 2 * 5 * 6, 1.0);
        let fast = conv.forward(&input, 5, 6);
        let slow = naive_forward(&conv, &input, 5, 6);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv3x3::he(2, 2, &mut rng);
        let (h, w) = (4, 5);
        let input = gaussian_vec(&mut rng, 2 * h * w, 1.0);
        let coef = gaussian_vec(&mut rng, 2 * h * w, 1.0);
        let loss = |c: &Conv3x3, x: &[f64]| -> f64 {
            c.forward(x, h, w)
                .iter()
                .zip(&coef)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut grad = Conv3x3::zeros(2, 2);
        let gin = conv.backward(&input, &coef, h, w, Some(&mut grad));
        let eps = 1e-6;
        for idx in 0..input.len() {
            let mut p = input.clone();
            p[idx] += eps;
            let mut m = input.clone();
            m[idx] -= eps;
            let fd = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * eps);
            assert!((fd - gin[idx]).abs() < 1e-7);
        }
        for idx in 0..conv.weight.len() {
            let mut p = conv.clone();
            p.weight[idx] += eps;
            let mut m = conv.clone();
            m.weight[idx] -= eps;
            let fd = (loss(&p, &input) - loss(&m, &input)) / (2.0 * eps);
            assert!((fd - grad.weight[idx]).abs() < 1e-6);
        }
        let total: f64 = coef[..h * w].iter().sum();
        assert!((grad.bias[0] - total).abs() < 1e-9);
    }
}
