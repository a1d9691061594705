//! Text-only dialog loop over stdin/stdout.
//!
//! Lines starting with `:` are commands: `:save <path>` writes the transcript
//! as JSON lines, `:image <path>` writes the current image as PNG, `:quit`
//! ends the session. Everything else is a user turn.

use std::io::{BufRead, Write};
use std::path::Path;

use talkedit_core::backend::Attribute;
use talkedit_core::dialog::{
    dialog_round, transcript_to_jsonl, DialogModels, DialogState, FsmState, RoundRecord,
};
use talkedit_core::Error;

use crate::artifacts;
use crate::{CliError, ReplArgs};

/// What a finished loop leaves behind.
#[derive(Debug, Clone)]
pub struct ReplSession {
    pub state: DialogState,
    pub transcript: Vec<RoundRecord>,
}

pub fn run_repl(
    home: &Path,
    a: &ReplArgs,
    input: impl BufRead,
    output: impl Write,
) -> Result<(), CliError> {
    let world = artifacts::load_world(a.common.backend_config.as_deref())?;
    let models =
        artifacts::load_dialog_models(home, a.common.seed, world, a.traversal.field_config())?;
    repl_loop(
        &models,
        a.session_seed.unwrap_or(a.common.seed),
        input,
        output,
    )?;
    Ok(())
}

fn degrees_line(state: &DialogState) -> String {
    let parts: Vec<String> = Attribute::ALL
        .iter()
        .zip(state.current_degrees.degrees())
        .map(|(a, d)| format!("{}={d}", a.name()))
        .collect();
    format!("degrees: {}", parts.join(" "))
}

/// Runs rounds until `:quit`, a farewell, or end of input.
pub fn repl_loop(
    models: &DialogModels,
    seed: u64,
    input: impl BufRead,
    mut out: impl Write,
) -> Result<ReplSession, CliError> {
    let mut state = DialogState::from_seed(models, seed)?;
    let mut transcript = Vec::new();
    writeln!(out, "session seed {seed}")?;
    writeln!(out, "{}", degrees_line(&state))?;
    for line in input.lines() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if let Some(cmd) = text.strip_prefix(':') {
            let (name, arg) = cmd.split_once(char::is_whitespace).unwrap_or((cmd, ""));
            let arg = arg.trim();
            match name {
                "quit" => {
                    if state.fsm.can_transition(FsmState::End) {
                        state.fsm = FsmState::End;
                    }
                    writeln!(out, "bye")?;
                    break;
                }
                "save" if !arg.is_empty() => {
                    std::fs::write(arg, transcript_to_jsonl(&transcript)?)?;
                    writeln!(out, "saved {} rounds to {arg}", transcript.len())?;
                }
                "image" if !arg.is_empty() => {
                    let png = models.backend.generate(&state.current_latent)?.to_png()?;
                    std::fs::write(arg, png)?;
                    writeln!(out, "wrote {arg}")?;
                }
                _ => writeln!(out, "commands: :save <path>, :image <path>, :quit")?,
            }
            continue;
        }
        match dialog_round(&state, text, models) {
            Ok(r) => {
                writeln!(out, "system: {}", r.feedback.text)?;
                writeln!(out, "{}", degrees_line(&r.state))?;
                state = r.state;
                transcript.push(r.record);
                if state.fsm == FsmState::End {
                    break;
                }
            }
            Err(Error::InvalidArgument(m)) => writeln!(out, "error: {m}")?,
            Err(e) => return Err(e.into()),
        }
    }
    out.flush()?;
    Ok(ReplSession { state, transcript })
}
