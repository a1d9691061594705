//! Analytic gradients against central finite differences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talkedit_core::backend::{
    Backend, Discriminator, ImageTensor, LatentCode, ToyWorld, NUM_ATTRIBUTES,
};
use talkedit_core::field::{field_loss_and_grad, FieldBatchItem, FieldConfig, SemanticFieldModel};
use talkedit_core::nn::Params;
use talkedit_core::predictor::{DegreeClassifier, PredictorModel};

const REL_TOL: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Smooth stand-in critic: prefers mid-grey pixels.
struct Grey;

impl Discriminator for Grey {
    fn score(&self, image: &ImageTensor) -> f64 {
        -image.pixels.iter().map(|p| (p - 0.5).powi(2)).sum::<f64>() / image.pixels.len() as f64
    }
    fn score_grad(&self, image: &ImageTensor) -> ImageTensor {
        let n = image.pixels.len() as f64;
        let mut g = image.clone();
        g.pixels.iter_mut().for_each(|p| *p = -2.0 * (*p - 0.5) / n);
        g
    }
}

fn small_cfg() -> FieldConfig {
    FieldConfig {
        num_layers: 3,
        hidden_width: 24,
        output_gain: 1.0,
        alpha: 0.5,
        lambda_pred: 1.0,
        lambda_id: 0.7,
        lambda_disc: 0.3,
        ..FieldConfig::default()
    }
}

fn set_flat(model: &mut SemanticFieldModel, theta: &[f64]) {
    let mut off = 0;
    for p in model.network.params_mut() {
        let n = p.len();
        p.copy_from_slice(&theta[off..off + n]);
        off += n;
    }
}

fn flat(net: &impl Params) -> Vec<f64> {
    net.param_slices().concat()
}

#[test]
fn field_loss_gradient_matches_central_differences() {
    let world = ToyWorld::with_seed(7)
        .unwrap()
        .with_discriminator(Arc::new(Grey));
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let predictor = PredictorModel::new(32, 32, 3, &mut rng);
    let cfg = small_cfg();
    for attribute in 0..NUM_ATTRIBUTES {
        let mut model = SemanticFieldModel::new(attribute, 16, &cfg, 5 + attribute as u64).unwrap();
        let batch: Vec<FieldBatchItem> = (0..3)
            .filter_map(|_| {
                let z = world.sample_latent(&mut rng);
                let mut label = predictor
                    .predict_degrees(&world.generate(&z).unwrap())
                    .unwrap();
                if label.get(attribute) == 5 {
                    label = label.with(attribute, 2).unwrap();
                }
                FieldBatchItem::new(&world, z, &label, attribute).ok()
            })
            .collect();
        assert!(!batch.is_empty());
        let (parts, grad) = field_loss_and_grad(&model, &world, &predictor, &batch, &cfg).unwrap();
        assert!(parts.disc != 0.0);
        let g = flat(&grad);
        let theta = flat(&model.network);

        // one random-direction probe per attribute, five in total
        let v: Vec<f64> = (0..theta.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let h = 1e-5;
        let mut loss_at = |s: f64| {
            let t: Vec<f64> = theta.iter().zip(&v).map(|(a, b)| a + s * b).collect();
            set_flat(&mut model, &t);
            field_loss_and_grad(&model, &world, &predictor, &batch, &cfg)
                .unwrap()
                .0
                .total
        };
        let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let analytic: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!(
            rel_err(analytic, numeric) < REL_TOL,
            "attribute {attribute}: analytic {analytic} numeric {numeric}"
        );
    }
}

#[test]
fn toy_score_gradient_matches_central_differences() {
    let world = ToyWorld::with_seed(7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for probe in 0..5 {
        let z = world.sample_latent(&mut rng);
        let a = probe % NUM_ATTRIBUTES;
        let g = world.toy_score_gradient(&z, a).unwrap();
        let h = 1e-6;
        let numeric: Vec<f64> = (0..z.len())
            .map(|i| {
                let mut p = z.clone();
                let mut m = z.clone();
                p.0[i] += h;
                m.0[i] -= h;
                (world.toy_score(&p, a).unwrap() - world.toy_score(&m, a).unwrap()) / (2.0 * h)
            })
            .collect();
        let diff: f64 = g
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        assert!(diff / norm < REL_TOL, "probe {probe}: {diff} vs {norm}");
    }
}

#[test]
fn toy_score_gradient_rejects_bad_input() {
    let world = ToyWorld::with_seed(7).unwrap();
    assert!(world.toy_score_gradient(&LatentCode::zeros(3), 0).is_err());
    assert!(world
        .toy_score_gradient(&LatentCode::zeros(16), NUM_ATTRIBUTES)
        .is_err());
}
