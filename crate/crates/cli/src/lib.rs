//! The `talkedit` command line: training, evaluation reports, the HTTP
//! service and a text REPL.

pub mod artifacts;
mod eval;
mod repl;
mod serve;
mod train;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use talkedit_core::backend::Attribute;
use talkedit_core::field::FieldConfig;

pub use repl::{repl_loop, run_repl, ReplSession};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("training gate failed: {0}")]
    Gate(String),
    #[error(transparent)]
    Core(#[from] talkedit_core::Error),
    #[error(transparent)]
    Service(#[from] talkedit_service::ServiceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for usage problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::MissingCheckpoint(_) => 2,
            CliError::Core(talkedit_core::Error::InvalidArgument(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "talkedit",
    version,
    about = "Train, evaluate and serve dialog-driven fine-grained latent editing"
)]
pub struct Cli {
    /// Artifact root
    #[arg(
        long,
        env = "TALKEDIT_HOME",
        default_value = "artifacts",
        global = true
    )]
    pub home: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one component and write its checkpoint
    Train {
        #[command(subcommand)]
        component: TrainComponent,
    },
    /// Produce an evaluation report
    Eval(EvalArgs),
    /// Run the HTTP service
    Serve(ServeArgs),
    /// Edit interactively on stdin/stdout
    Repl(ReplArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CommonArgs {
    /// Seed for this run; also names the artifacts it reads and writes
    #[arg(long, default_value_t = 7)]
    pub seed: u64,

    /// Toy world configuration as JSON (built-in defaults when absent)
    #[arg(long)]
    pub backend_config: Option<PathBuf>,

    /// Output directory (defaults to the artifact layout under --home)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TraversalArgs {
    /// Step size of one field step
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,

    /// Steps allowed per degree of change before an edit is abandoned
    #[arg(long, default_value_t = 100)]
    pub max_steps: usize,
}

impl TraversalArgs {
    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            alpha: self.alpha,
            max_steps_per_class: self.max_steps,
            ..FieldConfig::default()
        }
    }
}

fn parse_attribute(s: &str) -> Result<Attribute, String> {
    Attribute::from_name(s).map_err(|_| {
        let names: Vec<&str> = Attribute::ALL.iter().map(|a| a.name()).collect();
        format!(
            "unknown attribute {s:?}; expected one of {}",
            names.join(", ")
        )
    })
}

#[derive(Debug, Subcommand)]
pub enum TrainComponent {
    /// Degree predictor that supervises field training
    Predictor(PredictorArgs),
    /// Independent predictor used only for evaluation and dialog bookkeeping
    EvalPredictor(PredictorArgs),
    /// Semantic field for one attribute
    Field(FieldArgs),
    /// Request encoder
    Encoder(EncoderArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictorArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,

    /// Training images
    #[arg(long, default_value_t = 20_000)]
    pub n_samples: usize,

    /// Passes over the training images
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,

    /// Print the resolved configuration and exit without training
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FieldArgs {
    /// Attribute to edit: bangs, eyeglasses, beard, smiling or young
    #[arg(value_parser = parse_attribute)]
    #[serde(serialize_with = "serialize_attribute")]
    pub attribute: Attribute,

    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,

    #[command(flatten)]
    #[serde(flatten)]
    pub traversal: TraversalArgs,

    /// Weight of the predictor loss
    #[arg(long, default_value_t = 1.0)]
    pub lambda_pred: f64,

    /// Weight of the identity loss
    #[arg(long, default_value_t = 1.0)]
    pub lambda_id: f64,

    /// Weight of the discriminator loss
    #[arg(long, default_value_t = 0.0)]
    pub lambda_disc: f64,

    /// Optimizer iterations
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,

    /// Adam learning rate
    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f64,

    /// Latents per optimizer step
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,

    /// Print the resolved configuration and exit without training
    #[arg(long)]
    pub dry_run: bool,
}

fn serialize_attribute<S: serde::Serializer>(a: &Attribute, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(a.name())
}

impl FieldArgs {
    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            lambda_pred: self.lambda_pred,
            lambda_id: self.lambda_id,
            lambda_disc: self.lambda_disc,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            ..self.traversal.field_config()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderPreset {
    /// 300-d embeddings, two 1024-unit recurrent layers
    Default,
    /// Small trunk that trains in well under a minute
    Compact,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EncoderArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,

    /// Requests in the generated corpus
    #[arg(long, default_value_t = 10_000)]
    pub corpus_size: usize,

    /// Network size
    #[arg(long, value_enum, default_value_t = EncoderPreset::Default)]
    pub preset: EncoderPreset,

    /// Print the resolved configuration and exit without training
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    /// Identity and attribute preservation of the field against both baselines
    Compare,
    /// Direction drift along field trajectories
    Curvature,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// Report to produce
    #[arg(value_enum)]
    pub kind: EvalKind,

    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,

    #[command(flatten)]
    #[serde(flatten)]
    pub traversal: TraversalArgs,

    /// Start latents per attribute
    #[arg(long, default_value_t = 200)]
    pub n: usize,

    /// Degrees each edit must move
    #[arg(long, default_value_t = 3)]
    pub class_change: u8,

    /// Restrict to one attribute (defaults to all five)
    #[arg(long, value_parser = parse_attribute)]
    #[serde(serialize_with = "serialize_opt_attribute")]
    pub attribute: Option<Attribute>,

    /// Prior samples used to fit each baseline separator
    #[arg(long, default_value_t = 5000)]
    pub baseline_samples: usize,
}

fn serialize_opt_attribute<S: serde::Serializer>(
    a: &Option<Attribute>,
    s: S,
) -> Result<S::Ok, S::Error> {
    match a {
        Some(a) => s.serialize_some(a.name()),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,

    #[command(flatten)]
    #[serde(flatten)]
    pub traversal: TraversalArgs,

    /// TCP port (0 picks a free one)
    #[arg(long, default_value_t = 8080)]
    pub port: u16,

    /// Interface to bind
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,

    /// Session log directory (defaults to {home}/sessions)
    #[arg(long)]
    pub sessions: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReplArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,

    #[command(flatten)]
    #[serde(flatten)]
    pub traversal: TraversalArgs,

    /// Seed of the starting image (defaults to --seed)
    #[arg(long)]
    pub session_seed: Option<u64>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { component } => train::run(&cli.home, component),
        Command::Eval(args) => eval::run(&cli.home, &args),
        Command::Serve(args) => serve::run(&cli.home, &args),
        Command::Repl(args) => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            run_repl(&cli.home, &args, stdin.lock(), stdout.lock())
        }
    }
}
