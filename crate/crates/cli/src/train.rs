//! `talkedit train ...`

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use talkedit_core::backend::ToyWorld;
use talkedit_core::checkpoint::Checkpoint;
use talkedit_core::field::{check_field_gate, pred_loss_ratio, train_field};
use talkedit_core::language::{
    generate_corpus, train_encoder_unchecked, EncoderConfig, TemplateSet,
};
use talkedit_core::predictor::{train_predictor_unchecked, PredictorConfig, PredictorRole};

use crate::artifacts::{self, Component, Metadata, MODEL_FILE};
use crate::{
    CliError, CommonArgs, EncoderArgs, EncoderPreset, FieldArgs, PredictorArgs, TrainComponent,
};

pub(crate) fn run(home: &Path, component: TrainComponent) -> Result<(), CliError> {
    match component {
        TrainComponent::Predictor(a) => predictor(home, &a, PredictorRole::Train),
        TrainComponent::EvalPredictor(a) => predictor(home, &a, PredictorRole::Eval),
        TrainComponent::Field(a) => field(home, &a),
        TrainComponent::Encoder(a) => encoder(home, &a),
    }
}

fn out_dir(home: &Path, common: &CommonArgs, c: Component) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| c.dir(home, common.seed))
}

/// Printed by `--dry-run` instead of training.
fn print_plan(
    c: Component,
    dir: &Path,
    run_config: &impl Serialize,
    model_config: Value,
    world: &ToyWorld,
) -> Result<(), CliError> {
    let plan = json!({
        "component": c.dir_name(),
        "name": c.name(),
        "out": dir,
        "run_config": run_config,
        "model_config": model_config,
        "backend_config": world.config(),
    });
    println!("{}", serde_json::to_string_pretty(&plan)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finish(
    c: Component,
    dir: &Path,
    seed: u64,
    run_config: &impl Serialize,
    world: &ToyWorld,
    ck: Checkpoint,
    details: Value,
    gate: Result<(), String>,
    started: Instant,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    ck.save(&dir.join(MODEL_FILE))?;
    Metadata {
        component: c.dir_name().to_string(),
        name: c.name().to_string(),
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        run_config: serde_json::to_value(run_config)?,
        backend_config: world.config().clone(),
        details,
        gate_passed: Some(gate.is_ok()),
        elapsed_seconds: started.elapsed().as_secs_f64(),
    }
    .write(dir)?;
    log::info!("wrote {}", dir.display());
    gate.map_err(CliError::Gate)
}

fn predictor(home: &Path, a: &PredictorArgs, role: PredictorRole) -> Result<(), CliError> {
    let c = match role {
        PredictorRole::Train => Component::Predictor,
        PredictorRole::Eval => Component::EvalPredictor,
    };
    let world = artifacts::load_world(a.common.backend_config.as_deref())?;
    let dir = out_dir(home, &a.common, c);
    let cfg = PredictorConfig {
        epochs: a.epochs,
        ..PredictorConfig::default()
    };
    if a.dry_run {
        return print_plan(c, &dir, a, serde_json::to_value(&cfg)?, &world);
    }
    if a.n_samples < 1000 {
        return Err(CliError::Usage(format!(
            "--n-samples must be at least 1000, got {}",
            a.n_samples
        )));
    }
    let started = Instant::now();
    let model = train_predictor_unchecked(&world, a.n_samples, a.common.seed, role, &cfg)?;
    log::info!("held-out accuracy {:?}", model.meta.accuracy);
    let gate = model.check_gate().map_err(gate_message);
    let details = json!({ "accuracy": model.meta.accuracy, "epoch_loss": model.meta.epoch_loss, "config": cfg });
    finish(
        c,
        &dir,
        a.common.seed,
        a,
        &world,
        model.to_checkpoint()?,
        details,
        gate,
        started,
    )
}

fn field(home: &Path, a: &FieldArgs) -> Result<(), CliError> {
    let c = Component::Field(a.attribute);
    let world = artifacts::load_world(a.common.backend_config.as_deref())?;
    let dir = out_dir(home, &a.common, c);
    let cfg = a.field_config();
    cfg.validate()?;
    if a.dry_run {
        return print_plan(c, &dir, a, serde_json::to_value(&cfg)?, &world);
    }
    let predictor = artifacts::load_predictor(home, a.common.seed)?;
    let started = Instant::now();
    let model = train_field(
        &world,
        &predictor,
        a.attribute.index(),
        &cfg,
        a.iters,
        a.common.seed,
    )?;
    let ratio = pred_loss_ratio(&model.meta.loss_curve);
    log::info!("predictor-loss ratio {ratio:?}");
    let gate = check_field_gate(&model).map_err(gate_message);
    let details = json!({ "pred_loss_ratio": ratio, "n_iters": a.iters, "config": cfg });
    finish(
        c,
        &dir,
        a.common.seed,
        a,
        &world,
        model.to_checkpoint()?,
        details,
        gate,
        started,
    )
}

fn encoder(home: &Path, a: &EncoderArgs) -> Result<(), CliError> {
    let c = Component::Encoder;
    let world = artifacts::load_world(a.common.backend_config.as_deref())?;
    let dir = out_dir(home, &a.common, c);
    let cfg = match a.preset {
        EncoderPreset::Default => EncoderConfig::default(),
        EncoderPreset::Compact => EncoderConfig::compact(),
    };
    cfg.validate()?;
    if a.dry_run {
        return print_plan(c, &dir, a, serde_json::to_value(&cfg)?, &world);
    }
    let started = Instant::now();
    let corpus = generate_corpus(&TemplateSet::builtin(), a.common.seed, a.corpus_size)?;
    let model = train_encoder_unchecked(&corpus, &cfg, a.common.seed)?;
    let acc = model.meta.accuracy;
    log::info!("held-out head accuracy {acc:?}");
    let gate = if acc.min_head() < cfg.accuracy_floor {
        Err(format!(
            "encoder head accuracy {acc:?} below {}",
            cfg.accuracy_floor
        ))
    } else {
        Ok(())
    };
    let details = json!({ "accuracy": acc, "per_context": model.meta.per_context, "config": cfg });
    finish(
        c,
        &dir,
        a.common.seed,
        a,
        &world,
        model.to_checkpoint()?,
        details,
        gate,
        started,
    )
}

fn gate_message(e: talkedit_core::Error) -> String {
    match e {
        talkedit_core::Error::TrainingGate(m) => m,
        e => e.to_string(),
    }
}
