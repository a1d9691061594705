use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use talkedit::artifacts::{Metadata, MODEL_FILE};

fn talkedit(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_talkedit"))
        .args(args)
        .env_remove("TALKEDIT_HOME")
        .env("RUST_LOG", "warn")
        .arg("--home")
        .arg(home)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const HELP_PAGES: [&[&str]; 9] = [
    &[],
    &["train"],
    &["train", "predictor"],
    &["train", "eval-predictor"],
    &["train", "field"],
    &["train", "encoder"],
    &["eval"],
    &["serve"],
    &["repl"],
];

/// Set `UPDATE_SNAPSHOTS=1` to rewrite the stored pages.
#[test]
fn help_pages_match_snapshots() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots");
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    for args in HELP_PAGES {
        let out = Command::new(env!("CARGO_BIN_EXE_talkedit"))
            .args(args)
            .arg("--help")
            .env_remove("TALKEDIT_HOME")
            .output()
            .unwrap();
        assert!(out.status.success());
        let name = if args.is_empty() {
            "talkedit".to_string()
        } else {
            args.join("_")
        };
        let path = dir.join(format!("{name}.help.txt"));
        let text = stdout(&out);
        if update {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &text).unwrap();
        } else {
            let want = std::fs::read_to_string(&path)
                .unwrap_or_else(|_| panic!("missing {}", path.display()));
            assert_eq!(text, want, "help for {args:?} changed");
        }
    }
}

#[test]
fn every_option_documents_its_default() {
    for args in HELP_PAGES.iter().skip(2) {
        let out = Command::new(env!("CARGO_BIN_EXE_talkedit"))
            .args(*args)
            .arg("--help")
            .env_remove("TALKEDIT_HOME")
            .output()
            .unwrap();
        let text = stdout(&out);
        let mut lines = text.lines().peekable();
        while let Some(l) = lines.next() {
            let t = l.trim_start();
            if !t.starts_with("--") || t.starts_with("--help") || t.starts_with("--dry-run") {
                continue;
            }
            let mut block = t.to_string();
            while let Some(n) = lines.peek() {
                let n = n.trim_start();
                if n.starts_with("--") || n.starts_with("-h") {
                    break;
                }
                block.push_str(n);
                lines.next();
            }
            let described = block.contains("[default:")
                || block.contains("defaults")
                || block.contains("absent");
            assert!(described, "{args:?}: {block}");
        }
    }
}

#[test]
fn unknown_attribute_is_a_usage_error() {
    let home = tempfile::tempdir().unwrap();
    let out = talkedit(home.path(), &["train", "field", "freckles"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("freckles"));
    let out = talkedit(home.path(), &["eval", "compare", "--attribute", "freckles"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_needs_checkpoints_and_positive_n() {
    let home = tempfile::tempdir().unwrap();
    for kind in ["compare", "curvature"] {
        let out = talkedit(home.path(), &["eval", kind, "--n", "5"]);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));
    }
    let out = talkedit(home.path(), &["eval", "compare", "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--n"));
}

#[test]
fn field_training_without_predictor_exits_2() {
    let home = tempfile::tempdir().unwrap();
    let out = talkedit(home.path(), &["train", "field", "bangs", "--iters", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dry_runs_report_published_defaults() {
    let home = tempfile::tempdir().unwrap();
    let out = talkedit(home.path(), &["train", "field", "bangs", "--dry-run"]);
    assert!(out.status.success());
    let plan: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(plan["model_config"]["learning_rate"], 1e-4);
    assert_eq!(plan["model_config"]["batch_size"], 32);
    assert_eq!(plan["model_config"]["lambda_pred"], 1.0);
    assert_eq!(plan["model_config"]["lambda_id"], 1.0);
    assert_eq!(plan["run_config"]["attribute"], "bangs");
    assert!(plan["out"].as_str().unwrap().ends_with("field/bangs-7"));

    let out = talkedit(home.path(), &["train", "encoder", "--dry-run"]);
    let plan: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(plan["model_config"]["embed_dim"], 300);
    assert_eq!(plan["model_config"]["hidden"], 1024);
    assert_eq!(plan["model_config"]["batch_size"], 2048);
    assert_eq!(plan["backend_config"]["seed"], 7);

    let out = talkedit(
        home.path(),
        &[
            "train",
            "field",
            "young",
            "--lambda-id",
            "0.5",
            "--seed",
            "3",
            "--dry-run",
        ],
    );
    let plan: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(plan["model_config"]["lambda_id"], 0.5);
    assert!(plan["out"].as_str().unwrap().ends_with("field/young-3"));
    assert!(
        std::fs::read_dir(home.path()).unwrap().next().is_none(),
        "dry run wrote files"
    );
}

#[test]
fn failed_gate_keeps_checkpoint_and_exits_nonzero() {
    let home = tempfile::tempdir().unwrap();
    let out = talkedit(
        home.path(),
        &[
            "train",
            "predictor",
            "--n-samples",
            "1000",
            "--epochs",
            "1",
            "--seed",
            "4",
        ],
    );
    let dir = home.path().join("predictor/predictor-4");
    assert!(dir.join(MODEL_FILE).exists());
    let meta = Metadata::read(&dir).unwrap();
    assert_eq!(meta.run_config["n_samples"], 1000);
    assert_eq!(meta.run_config["epochs"], 1);
    assert_eq!(meta.seed, 4);
    assert_eq!(meta.backend_config.seed, 7);
    match meta.gate_passed {
        Some(true) => assert!(out.status.success()),
        _ => {
            assert_eq!(out.status.code(), Some(1));
            assert!(String::from_utf8_lossy(&out.stderr).contains("gate"));
        }
    }
}

#[test]
fn compact_encoder_trains_reproducibly_and_records_config() {
    let args = [
        "train",
        "encoder",
        "--preset",
        "compact",
        "--corpus-size",
        "2000",
        "--seed",
        "2",
    ];
    let home = tempfile::tempdir().unwrap();
    let again = tempfile::tempdir().unwrap();
    let out = talkedit(home.path(), &args);
    talkedit(again.path(), &args);
    let dir = home.path().join("encoder/encoder-2");
    let bytes = std::fs::read(dir.join(MODEL_FILE)).unwrap();
    assert_eq!(
        bytes,
        std::fs::read(again.path().join("encoder/encoder-2").join(MODEL_FILE)).unwrap()
    );
    let meta = Metadata::read(&dir).unwrap();
    assert_eq!(meta.run_config["preset"], "compact");
    assert_eq!(meta.details["config"]["embed_dim"], 32);
    assert_eq!(out.status.success(), meta.gate_passed == Some(true));
    talkedit_core::language::EncoderModel::from_checkpoint(
        &talkedit_core::checkpoint::Checkpoint::load(&dir.join(MODEL_FILE), "encoder").unwrap(),
    )
    .unwrap();
}
