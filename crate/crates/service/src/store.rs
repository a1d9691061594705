//! Append-only JSON-lines event log, one file per session.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use talkedit_core::backend::LatentCode;
use talkedit_core::dialog::{DialogState, RoundRecord};

use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        seed: u64,
        created_at: String,
        image_hash: String,
        state: DialogState,
    },
    Round {
        at: String,
        record: RoundRecord,
        image_hash: String,
        state: DialogState,
    },
}

/// One transcript line as served by the history endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    #[serde(flatten)]
    pub record: RoundRecord,
    pub image_hash: String,
    pub at: String,
    /// Latent behind `image_hash`; kept in memory only.
    #[serde(skip)]
    pub latent: Option<LatentCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub seed: u64,
    pub created_at: String,
    pub updated_at: String,
    pub initial_state: DialogState,
    pub initial_image_hash: String,
    pub state: DialogState,
    pub transcript: Vec<HistoryEntry>,
}

impl SessionRecord {
    pub fn image_hash(&self) -> &str {
        self.transcript
            .last()
            .map_or(&self.initial_image_hash, |e| &e.image_hash)
    }

    /// Folds one event into the record.
    pub fn apply(&mut self, event: Event) -> Result<(), ServiceError> {
        match event {
            Event::Created { .. } => Err(ServiceError::Corrupt(format!(
                "second creation event in session {}",
                self.session_id
            ))),
            Event::Round {
                at,
                record,
                image_hash,
                state,
            } => {
                self.updated_at = at.clone();
                self.transcript.push(HistoryEntry {
                    record,
                    image_hash,
                    at,
                    latent: Some(state.current_latent.clone()),
                });
                self.state = state;
                Ok(())
            }
        }
    }

    fn from_created(event: Event) -> Result<Self, ServiceError> {
        match event {
            Event::Created {
                session_id,
                seed,
                created_at,
                image_hash,
                state,
            } => Ok(Self {
                session_id,
                seed,
                updated_at: created_at.clone(),
                created_at,
                initial_image_hash: image_hash,
                initial_state: state.clone(),
                state,
                transcript: Vec::new(),
            }),
            Event::Round { .. } => Err(ServiceError::Corrupt(
                "log does not start with creation".into(),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    /// Writes the creation event to a new log file.
    pub fn create(&self, event: &Event) -> Result<(), ServiceError> {
        let Event::Created { session_id, .. } = event else {
            return Err(ServiceError::Corrupt(
                "create needs a creation event".into(),
            ));
        };
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(self.path(session_id))?;
        write_line(&mut f, event)?;
        // make the new directory entry durable as well
        File::open(&self.dir)?.sync_all()?;
        Ok(())
    }

    pub fn append(&self, session_id: &str, event: &Event) -> Result<(), ServiceError> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(self.path(session_id))?;
        write_line(&mut f, event)
    }

    /// Replays one session log. A torn final line from an interrupted write
    /// is dropped; any other malformed line is an error.
    pub fn load(&self, session_id: &str) -> Result<SessionRecord, ServiceError> {
        let text = fs::read_to_string(self.path(session_id))?;
        let complete = text.ends_with('\n');
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let mut record: Option<SessionRecord> = None;
        for (i, line) in lines.iter().enumerate() {
            let event: Event = match serde_json::from_str(line) {
                Ok(e) => e,
                Err(_) if i + 1 == lines.len() && !complete => {
                    log::warn!("dropping torn final line in session {session_id}");
                    break;
                }
                Err(e) => {
                    return Err(ServiceError::Corrupt(format!(
                        "{session_id} line {}: {e}",
                        i + 1
                    )))
                }
            };
            match record.as_mut() {
                None => record = Some(SessionRecord::from_created(event)?),
                Some(r) => r.apply(event)?,
            }
        }
        record.ok_or_else(|| ServiceError::Corrupt(format!("{session_id} is empty")))
    }

    /// Every session in the directory, sorted by id.
    pub fn load_all(&self) -> Result<Vec<SessionRecord>, ServiceError> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".jsonl").map(str::to_string)
            })
            .collect();
        ids.sort();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            match self.load(&id) {
                Ok(r) => out.push(r),
                // a crash between file creation and the first write leaves nothing acknowledged
                Err(ServiceError::Corrupt(m)) if m.ends_with("is empty") => {
                    log::warn!("skipping empty session log {id}")
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}

fn write_line(f: &mut File, event: &Event) -> Result<(), ServiceError> {
    let mut line = serde_json::to_string(event)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    f.sync_data()?;
    Ok(())
}
