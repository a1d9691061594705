//! On-disk layout: `{home}/{component}/{name}-{seed}/` holding `metadata.json`
//! and, for models, `model.ckpt`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use talkedit_core::backend::{Attribute, ToyWorld, ToyWorldConfig, NUM_ATTRIBUTES};
use talkedit_core::checkpoint::Checkpoint;
use talkedit_core::dialog::{DialogModels, FeedbackTemplates};
use talkedit_core::field::{FieldConfig, SemanticFieldModel, StepRule};
use talkedit_core::language::EncoderModel;
use talkedit_core::predictor::PredictorModel;

use crate::CliError;

pub const METADATA_FILE: &str = "metadata.json";
pub const MODEL_FILE: &str = "model.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Predictor,
    EvalPredictor,
    Field(Attribute),
    Encoder,
    Report(&'static str),
}

impl Component {
    pub fn dir_name(self) -> &'static str {
        match self {
            Component::Predictor => "predictor",
            Component::EvalPredictor => "eval-predictor",
            Component::Field(_) => "field",
            Component::Encoder => "encoder",
            Component::Report(_) => "reports",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Field(a) => a.name(),
            Component::Report(kind) => kind,
            other => other.dir_name(),
        }
    }

    pub fn dir(self, home: &Path, seed: u64) -> PathBuf {
        home.join(self.dir_name())
            .join(format!("{}-{seed}", self.name()))
    }
}

/// Written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub component: String,
    pub name: String,
    pub seed: u64,
    pub tool_version: String,
    /// The command-line configuration that produced the artifact.
    pub run_config: serde_json::Value,
    pub backend_config: ToyWorldConfig,
    /// Model metadata or report summary.
    pub details: serde_json::Value,
    pub gate_passed: Option<bool>,
    pub elapsed_seconds: f64,
}

impl Metadata {
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(METADATA_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        Ok(serde_json::from_str(&fs::read_to_string(
            dir.join(METADATA_FILE),
        )?)?)
    }
}

pub fn load_world(backend_config: Option<&Path>) -> Result<ToyWorld, CliError> {
    let cfg = match backend_config {
        Some(p) => ToyWorldConfig::from_json(&fs::read_to_string(p).map_err(|e| {
            CliError::Usage(format!("cannot read backend config {}: {e}", p.display()))
        })?)?,
        None => ToyWorldConfig::default(),
    };
    Ok(ToyWorld::new(cfg)?)
}

fn checkpoint(home: &Path, c: Component, seed: u64, kind: &str) -> Result<Checkpoint, CliError> {
    let path = c.dir(home, seed).join(MODEL_FILE);
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path));
    }
    Ok(Checkpoint::load(&path, kind)?)
}

pub fn load_predictor(home: &Path, seed: u64) -> Result<PredictorModel, CliError> {
    Ok(PredictorModel::from_checkpoint(&checkpoint(
        home,
        Component::Predictor,
        seed,
        "predictor",
    )?)?)
}

pub fn load_eval_predictor(home: &Path, seed: u64) -> Result<PredictorModel, CliError> {
    Ok(PredictorModel::from_checkpoint(&checkpoint(
        home,
        Component::EvalPredictor,
        seed,
        "predictor",
    )?)?)
}

pub fn load_field(
    home: &Path,
    attribute: Attribute,
    seed: u64,
) -> Result<SemanticFieldModel, CliError> {
    Ok(SemanticFieldModel::from_checkpoint(&checkpoint(
        home,
        Component::Field(attribute),
        seed,
        "field",
    )?)?)
}

pub fn load_encoder(home: &Path, seed: u64) -> Result<EncoderModel, CliError> {
    Ok(EncoderModel::from_checkpoint(&checkpoint(
        home,
        Component::Encoder,
        seed,
        "encoder",
    )?)?)
}

/// Everything the dialog needs. The evaluation predictor both stops edits and
/// reports degrees; attributes without a trained field cannot be edited.
pub fn load_dialog_models(
    home: &Path,
    seed: u64,
    world: ToyWorld,
    field_config: FieldConfig,
) -> Result<DialogModels, CliError> {
    let predictor = load_eval_predictor(home, seed)?;
    let encoder = load_encoder(home, seed)?;
    let mut editors: Vec<Option<Arc<dyn StepRule>>> = Vec::with_capacity(NUM_ATTRIBUTES);
    for a in Attribute::ALL {
        match load_field(home, a, seed) {
            Ok(f) => editors.push(Some(Arc::new(f))),
            Err(CliError::MissingCheckpoint(p)) => {
                log::warn!(
                    "no field at {}; {} edits are unavailable",
                    p.display(),
                    a.name()
                );
                editors.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(DialogModels {
        backend: Arc::new(world),
        predictor: Arc::new(predictor),
        encoder: Arc::new(encoder),
        editors,
        field_config,
        feedback: FeedbackTemplates::builtin(),
    })
}
