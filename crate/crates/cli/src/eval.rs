//! `talkedit eval compare|curvature`

use std::path::Path;
use std::time::Instant;

use serde_json::json;
use talkedit_core::backend::Attribute;
use talkedit_core::eval::{
    compare_methods, comparison_table, curvature_analysis, curvature_table, CompareConfig,
    Comparison, FIELD_METHOD, FIXED_METHOD,
};
use talkedit_core::field::{linear_baseline_direction, multiboundary_baseline};

use crate::artifacts::{self, Component, Metadata};
use crate::{CliError, EvalArgs, EvalKind};

pub(crate) fn run(home: &Path, a: &EvalArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let cfg = CompareConfig {
        n_starts: a.n,
        class_change: a.class_change,
        seed: a.common.seed,
        ..CompareConfig::default()
    };
    cfg.validate()?;
    let field_cfg = a.traversal.field_config();
    field_cfg.validate()?;
    let started = Instant::now();
    let world = artifacts::load_world(a.common.backend_config.as_deref())?;
    let attributes: Vec<Attribute> = match a.attribute {
        Some(x) => vec![x],
        None => Attribute::ALL.to_vec(),
    };
    let predictor = artifacts::load_predictor(home, a.common.seed)?;
    let eval_predictor = artifacts::load_eval_predictor(home, a.common.seed)?;
    let fields = attributes
        .iter()
        .map(|&x| artifacts::load_field(home, x, a.common.seed))
        .collect::<Result<Vec<_>, _>>()?;

    let mut comparisons: Vec<Comparison> = Vec::new();
    for (x, field) in attributes.iter().zip(&fields) {
        log::info!("{}: fitting baselines", x.name());
        let m = x.index();
        let fixed =
            linear_baseline_direction(&world, &predictor, m, a.baseline_samples, a.common.seed)?;
        let normals =
            multiboundary_baseline(&world, &predictor, m, a.baseline_samples, a.common.seed)?;
        log::info!("{}: running {} starts", x.name(), a.n);
        comparisons.push(compare_methods(
            &world,
            &predictor,
            &eval_predictor,
            field,
            &fixed,
            &normals,
            &field_cfg,
            &cfg,
        )?);
    }

    let names: Vec<String> = Attribute::ALL
        .iter()
        .map(|x| x.name().to_string())
        .collect();
    let (report, table) = match a.kind {
        EvalKind::Compare => {
            let reports: Vec<_> = comparisons.iter().flat_map(|c| c.reports.clone()).collect();
            let table = comparison_table(&reports, &names);
            (json!({ "reports": reports }), table)
        }
        EvalKind::Curvature => {
            let mut curves = Vec::new();
            let mut table = String::new();
            for c in &comparisons {
                for (method, trajs) in &c.trajectories {
                    if method != FIELD_METHOD && method != FIXED_METHOD {
                        continue;
                    }
                    let r = curvature_analysis(trajs)?;
                    table.push_str(&curvature_table(&r));
                    curves.push(r);
                }
            }
            (json!({ "curves": curves }), table)
        }
    };

    let kind = match a.kind {
        EvalKind::Compare => "compare",
        EvalKind::Curvature => "curvature",
    };
    let c = Component::Report(kind);
    let dir = a
        .common
        .out
        .clone()
        .unwrap_or_else(|| c.dir(home, a.common.seed));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(dir.join("table.txt"), &table)?;
    Metadata {
        component: c.dir_name().to_string(),
        name: kind.to_string(),
        seed: a.common.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        run_config: serde_json::to_value(a)?,
        backend_config: world.config().clone(),
        details: json!({
            "step_lengths": comparisons.iter().map(|c| c.step_length).collect::<Vec<_>>(),
            "compare": cfg,
        }),
        gate_passed: None,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    }
    .write(&dir)?;
    print!("{table}");
    log::info!("wrote {}", dir.display());
    Ok(())
}
