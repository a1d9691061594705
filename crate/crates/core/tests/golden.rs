//! Frozen renders. `UPDATE_GOLDEN=1` rewrites them.

use std::path::PathBuf;

use talkedit_core::backend::{Backend, BarReader, ImageTensor, LatentCode, ToyWorld};
use talkedit_core::predictor::DegreeClassifier;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

#[test]
fn seed7_zero_latent_render_is_frozen() {
    let world = ToyWorld::with_seed(7).unwrap();
    let image = world.generate(&LatentCode::zeros(16)).unwrap();
    let png = image.to_png().unwrap();
    let path = golden("seed7_z0.png");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &png).unwrap();
    }
    let frozen = std::fs::read(&path).unwrap();
    let decoded = ImageTensor::from_png(&frozen).unwrap();
    assert_eq!(
        decoded,
        ImageTensor::from_png(&png).unwrap(),
        "pixels changed"
    );
    assert_eq!(png, frozen, "encoding changed");

    let worst = decoded
        .pixels
        .iter()
        .zip(&image.pixels)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 0.5 / 255.0 + 1e-12, "quantization error {worst}");

    // z = 0 sits on the 2|3 boundary of every attribute, so read the
    // unquantized render
    let reader = BarReader::new(&world);
    let zero = LatentCode::zeros(16);
    assert_eq!(
        reader.predict_degrees(&image).unwrap().degrees(),
        world.true_degrees(&zero).unwrap().as_slice()
    );
}

#[test]
fn backend_config_document_is_frozen() {
    let text = talkedit_core::backend::ToyWorldConfig::default()
        .to_json()
        .unwrap();
    let path = golden("toy_world_seed7.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &text).unwrap();
    }
    let frozen = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, frozen);
    let back = talkedit_core::backend::ToyWorldConfig::from_json(&frozen).unwrap();
    assert_eq!(back, talkedit_core::backend::ToyWorldConfig::default());
}
