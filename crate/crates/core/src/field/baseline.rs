//! Fixed-direction baselines from linear separators in latent space.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, LatentCode, MAX_DEGREE, NUM_ATTRIBUTES};
use crate::math::{dot, norm};
use crate::predictor::DegreeClassifier;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    /// Hinge-loss weight.
    pub c: f64,
    pub max_epochs: usize,
    /// Stop once the projected-gradient spread falls below this.
    pub tolerance: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_epochs: 1000,
            tolerance: 1e-4,
        }
    }
}

/// L2-regularized hinge-loss linear SVM, solved by dual coordinate descent.
/// The bias is learned as the weight of a constant feature. Returns `(w, b)`.
pub fn fit_linear_svm(
    x: &[Vec<f64>],
    y: &[f64],
    cfg: &SvmConfig,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::InvalidArgument(
            "svm needs matching, nonempty x and y".into(),
        ));
    }
    let pos = y.iter().filter(|v| **v > 0.0).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::Degenerate(
            "svm training set has a single class".into(),
        ));
    }
    let d = x[0].len();
    let mut w = vec![0.0; d + 1];
    let mut alpha = vec![0.0; x.len()];
    let qii: Vec<f64> = x.iter().map(|xi| dot(xi, xi) + 1.0).collect();
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = |w: &[f64], xi: &[f64]| dot(&w[..d], xi) + w[d];
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let g = y[i] * margin(&w, &x[i]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == cfg.c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, cfg.c);
                let delta = (alpha[i] - old) * y[i];
                for (wj, xj) in w[..d].iter_mut().zip(&x[i]) {
                    *wj += delta * xj;
                }
                w[d] += delta;
            }
        }
        if pg_max - pg_min < cfg.tolerance {
            break;
        }
    }
    let b = w.pop().expect("bias slot");
    Ok((w, b))
}

fn labelled_pool(
    backend: &dyn Backend,
    predictor: &dyn DegreeClassifier,
    attribute: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(LatentCode, u8)>> {
    if attribute >= NUM_ATTRIBUTES {
        return Err(Error::AttributeOutOfRange(attribute));
    }
    if n_samples < 1000 {
        return Err(Error::InvalidArgument(format!(
            "n_samples must be at least 1000, got {n_samples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| {
            let z = backend.sample_latent(&mut rng);
            let c = predictor
                .predict_degrees(&backend.generate(&z)?)?
                .get(attribute);
            Ok((z, c))
        })
        .collect()
}

fn unit(mut w: Vec<f64>) -> Result<Vec<f64>> {
    let n = norm(&w);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate("separator normal has zero norm".into()));
    }
    w.iter_mut().for_each(|v| *v /= n);
    Ok(w)
}

fn separate(
    pool: &[(LatentCode, u8)],
    low: impl Fn(u8) -> bool,
    high: impl Fn(u8) -> bool,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (z, c) in pool {
        if low(*c) {
            x.push(z.0.clone());
            y.push(-1.0);
        } else if high(*c) {
            x.push(z.0.clone());
            y.push(1.0);
        }
    }
    if x.is_empty() {
        return Err(Error::Degenerate("no samples on either side".into()));
    }
    let (w, _) = fit_linear_svm(&x, &y, &SvmConfig::default(), seed)?;
    unit(w)
}

/// Unit normal of a linear separator between degrees `{0,1,2}` and `{3,4,5}`,
/// oriented towards higher degrees.
pub fn linear_baseline_direction(
    backend: &dyn Backend,
    predictor: &dyn DegreeClassifier,
    attribute: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let pool = labelled_pool(backend, predictor, attribute, n_samples, seed)?;
    separate(&pool, |c| c <= 2, |c| c >= 3, seed)
}

/// Unit normals separating each neighbouring degree pair `c | c+1`.
pub fn multiboundary_baseline(
    backend: &dyn Backend,
    predictor: &dyn DegreeClassifier,
    attribute: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let pool = labelled_pool(backend, predictor, attribute, n_samples, seed)?;
    (0..MAX_DEGREE)
        .map(|c| {
            separate(&pool, |k| k == c, |k| k == c + 1, seed).map_err(|e| match e {
                Error::Degenerate(m) => Error::Degenerate(format!("boundary {c}|{}: {m}", c + 1)),
                other => other,
            })
        })
        .collect()
}
